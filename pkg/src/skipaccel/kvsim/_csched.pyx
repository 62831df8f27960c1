# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled round packing and round costing (same semantics as ``_sched_py``)."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, int8_t, uint64_t

cnp.import_array()


def first_fit(const uint64_t[::1] port_mask, const uint64_t[::1] chan_mask,
              const int8_t[::1] src, const int8_t[::1] want_write,
              bint case1, int n_read, int n_write, int window):
    cdef Py_ssize_t n = port_mask.shape[0], e, r, start, nr = 0
    rnd_np = np.empty(n, dtype=np.int64)
    wrote_np = np.zeros(n, dtype=np.int8)
    cdef int64_t[::1] rnd = rnd_np
    cdef int8_t[::1] wrote = wrote_np
    cdef uint64_t[::1] rp = np.zeros(max(n, 1), dtype=np.uint64)
    cdef uint64_t[::1] rc = np.zeros(max(n, 1), dtype=np.uint64)
    cdef int64_t[::1] reads = np.zeros(max(n, 1), dtype=np.int64)
    cdef int64_t[::1] writes = np.zeros(max(n, 1), dtype=np.int64)
    cdef bint ok, need_w
    with nogil:
        for e in range(n):
            start = nr - window
            if start < 0:
                start = 0
            need_w = src[e] == 0 and want_write[e] != 0
            r = start
            while r < nr:
                if src[e] == 1:
                    ok = reads[r] < n_read
                elif case1:
                    ok = (rp[r] & port_mask[e]) == 0
                    if ok and need_w:
                        ok = writes[r] < n_write
                else:
                    ok = (rc[r] & chan_mask[e]) == 0
                if ok:
                    break
                r += 1
            if r == nr:
                nr += 1
            rnd[e] = r
            if src[e] == 1:
                reads[r] += 1
            else:
                rp[r] |= port_mask[e]
                rc[r] |= chan_mask[e]
                if need_w and writes[r] < n_write:
                    writes[r] += 1
                    wrote[e] = 1
    return rnd_np, wrote_np, nr


def round_costs(const int64_t[::1] rnd, const int8_t[::1] src, const int64_t[::1] g0,
                const int64_t[::1] base, int chunk_beats, int n_chunks, int n_ports,
                int64_t page_beats, double hit, double penalty, double buffer_cycles):
    """Total cycles over entries sorted by round; page state persists throughout.

    Buffer reads overlap HBM traffic; only a buffer-only round costs
    ``buffer_cycles``.
    """
    cdef Py_ssize_t n = rnd.shape[0], e = 0, f, j
    cdef int64_t[::1] open_page = np.full(n_ports, -1, dtype=np.int64)
    cdef double[::1] load = np.zeros(n_ports, dtype=np.float64)
    cdef int64_t g, addr, p, p1, port, misses = 0, m, reads, hbm_rounds = 0, buf_rounds = 0
    cdef double total = 0.0, worst
    cdef int q
    with nogil:
        while e < n:
            f = e
            while f < n and rnd[f] == rnd[e]:
                f += 1
            for q in range(n_ports):
                load[q] = 0.0
            reads = 0
            worst = 0.0
            for j in range(e, f):
                if src[j] == 1:
                    reads += 1
                    continue
                for q in range(n_chunks):
                    g = g0[j] + q
                    port = g % n_ports
                    addr = base[j] + (g // n_ports) * chunk_beats
                    p1 = (addr + chunk_beats - 1) // page_beats
                    m = 0
                    p = addr // page_beats
                    while p <= p1:
                        if open_page[port] != p:
                            m += 1
                            open_page[port] = p
                        p += 1
                    misses += m
                    load[port] += chunk_beats * hit + m * penalty
                    if load[port] > worst:
                        worst = load[port]
            if worst > 0.0:
                hbm_rounds += 1
            elif reads > 0:
                buf_rounds += 1
                worst = buffer_cycles
            total += worst
            e = f
    return total, misses, hbm_rounds, buf_rounds
