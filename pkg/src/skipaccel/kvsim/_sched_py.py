"""Pure-Python round packing and costing (fallback for ``_csched``)."""
from __future__ import annotations

import numpy as np


def first_fit(port_mask, chan_mask, src, want_write, case1, n_read, n_write, window):
    """Place each entry in the earliest legal round of the trailing window.

    src: 0 = HBM read, 1 = buffer read, 2 = HBM write. In Case-1 an HBM read
    that must also be written into the buffer only fits a round with a free
    write port; in Case-2 the write takes a free slot if one exists and is
    dropped otherwise.
    """
    n = len(port_mask)
    rnd = np.empty(n, dtype=np.int64)
    wrote = np.zeros(n, dtype=np.int8)
    rp: list[int] = []
    rc: list[int] = []
    reads: list[int] = []
    writes: list[int] = []
    for e in range(n):
        s = int(src[e])
        pm, cm = int(port_mask[e]), int(chan_mask[e])
        need_w = s == 0 and bool(want_write[e])
        r = max(0, len(rp) - window)
        while r < len(rp):
            if s == 1:
                ok = reads[r] < n_read
            elif case1:
                ok = not (rp[r] & pm) and (not need_w or writes[r] < n_write)
            else:
                ok = not (rc[r] & cm)
            if ok:
                break
            r += 1
        if r == len(rp):
            rp.append(0)
            rc.append(0)
            reads.append(0)
            writes.append(0)
        rnd[e] = r
        if s == 1:
            reads[r] += 1
        else:
            rp[r] |= pm
            rc[r] |= cm
            if need_w and writes[r] < n_write:
                writes[r] += 1
                wrote[e] = 1
    return rnd, wrote, len(rp)


def round_costs(rnd, src, g0, base, chunk_beats, n_chunks, n_ports, page_beats, hit, penalty,
                buffer_cycles):
    open_page = [-1] * n_ports
    total = 0.0
    misses = hbm_rounds = buf_rounds = 0
    n = len(rnd)
    e = 0
    while e < n:
        f = e
        while f < n and rnd[f] == rnd[e]:
            f += 1
        load: dict[int, float] = {}
        reads = 0
        for j in range(e, f):
            if src[j] == 1:
                reads += 1
                continue
            for q in range(n_chunks):
                g = int(g0[j]) + q
                port = g % n_ports
                addr = int(base[j]) + (g // n_ports) * chunk_beats
                m = 0
                for p in range(addr // page_beats, (addr + chunk_beats - 1) // page_beats + 1):
                    if open_page[port] != p:
                        m += 1
                        open_page[port] = p
                misses += m
                load[port] = load.get(port, 0.0) + chunk_beats * hit + m * penalty
        worst = max(load.values()) if load else 0.0
        if worst > 0.0:
            hbm_rounds += 1
        elif reads:
            buf_rounds += 1
            worst = buffer_cycles
        total += worst
        e = f
    return total, misses, hbm_rounds, buf_rounds
