# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled numeric kernels (same semantics as ``_kernels_py``)."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, uint16_t, int8_t, uint64_t

cnp.import_array()

cdef int64_t P_MASK = (<int64_t>1 << 48) - 1


cdef inline int64_t wrap48(int64_t p) noexcept nogil:
    p = p & P_MASK
    if p >> 47:
        p -= (<int64_t>1 << 48)
    return p


cdef inline void dual(int64_t u0, int64_t u1, int64_t v, int n,
                      int64_t *p0, int64_t *p1) noexcept nogil:
    cdef int k = 2 * n - 5
    cdef int64_t u1_low = u1 & ((<int64_t>1 << (n - 1)) - 1)
    cdef int64_t y = ((u1_low & 31) * (v & 31)) & 31
    cdef int64_t c = (u0 & 1) * v + (y << k) - (((u1 >> (n - 1)) * v) << (3 * n - 6))
    cdef int64_t p = wrap48(((u0 >> 1) - (u1_low << (k - 1))) * (v << 1) + c)
    p0[0] = p & ((<int64_t>1 << (2 * n)) - 1)
    p1[0] = ((-(p >> (2 * n))) << 5) + y


def dual_products(u0, u1, v, int width=11):
    cdef int64_t[::1] a = np.ascontiguousarray(u0, dtype=np.int64).ravel()
    cdef int64_t[::1] b = np.ascontiguousarray(u1, dtype=np.int64).ravel()
    cdef int64_t[::1] c = np.ascontiguousarray(v, dtype=np.int64).ravel()
    cdef Py_ssize_t i, n = a.shape[0]
    r0 = np.empty(n, dtype=np.int64)
    r1 = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] o0 = r0
    cdef int64_t[::1] o1 = r1
    with nogil:
        for i in range(n):
            dual(a[i], b[i], c[i], width, &o0[i], &o1[i])
    shape = np.shape(u0)
    return r0.reshape(shape), r1.reshape(shape)


cdef inline uint16_t round_to_half(int64_t s, int scale) noexcept nogil:
    """RNE of s * 2**scale into binary16 bits; overflow saturates."""
    cdef uint16_t sign = 0
    cdef uint64_t m
    cdef int top, sh, e
    cdef uint64_t q, rem, half
    if s == 0:
        return 0
    if s < 0:
        sign = 0x8000
        m = <uint64_t>(-s)
    else:
        m = <uint64_t>s
    top = 63
    while not (m >> top) & 1:
        top -= 1
    e = top + scale
    if e >= -14:
        sh = top - 10
    else:
        sh = -24 - scale
    if sh <= 0:
        q = m << (-sh)
    elif sh >= 64:
        # far below half of the smallest subnormal
        return sign
    else:
        q = m >> sh
        rem = m - (q << sh)
        half = (<uint64_t>1) << (sh - 1)
        if rem > half or (rem == half and (q & 1)):
            q += 1
    if e >= -14:
        if q == 2048:
            q = 1024
            e += 1
        if e > 15:
            return sign | 0x7BFF
        return sign | <uint16_t>((e + 15) << 10) | <uint16_t>(q - 1024)
    if q == 1024:
        return sign | 0x0400
    return sign | <uint16_t>q


cdef tuple _lead_shape(x):
    shape = np.shape(x)
    return shape[:len(shape) - 1], shape[len(shape) - 1]


def pe_dot_fp16(xbits, wa_bits, wb_bits, str impl):
    lead, depth = _lead_shape(xbits)
    cdef uint16_t[:, ::1] X = np.ascontiguousarray(xbits, dtype=np.uint16).reshape(-1, depth)
    cdef uint16_t[:, ::1] A = np.ascontiguousarray(wa_bits, dtype=np.uint16).reshape(-1, depth)
    cdef uint16_t[:, ::1] B = np.ascontiguousarray(wb_bits, dtype=np.uint16).reshape(-1, depth)
    cdef Py_ssize_t T = X.shape[0], K = X.shape[1], t, k
    cdef int drop = 0 if impl == "IMPL1" else 7
    ra = np.empty(T, dtype=np.uint16)
    rb = np.empty(T, dtype=np.uint16)
    cdef uint16_t[::1] oa = ra
    cdef uint16_t[::1] ob = rb
    cdef int64_t[::1] ma = np.empty(K, dtype=np.int64)
    cdef int64_t[::1] mb = np.empty(K, dtype=np.int64)
    cdef int64_t[::1] ea = np.empty(K, dtype=np.int64)
    cdef int64_t[::1] eb = np.empty(K, dtype=np.int64)
    cdef int64_t p0, p1, gx, ga, gb, tot
    cdef int ex, xa, xb, sx, shared_a, shared_b, sh
    with nogil:
        for t in range(T):
            shared_a = -1000
            shared_b = -1000
            for k in range(K):
                sx = X[t, k] >> 15
                ex = (X[t, k] >> 10) & 31
                gx = (1024 + (X[t, k] & 1023)) if ex > 0 else 0
                xa = (A[t, k] >> 10) & 31
                xb = (B[t, k] >> 10) & 31
                ga = (1024 + (A[t, k] & 1023)) if xa > 0 else 0
                gb = (1024 + (B[t, k] & 1023)) if xb > 0 else 0
                dual(ga, gb, gx, 11, &p0, &p1)
                p0 >>= drop
                p1 >>= drop
                # exponent fields are >= 1 for every live lane
                ea[k] = ex + xa - 30
                eb[k] = ex + xb - 30
                ma[k] = -p0 if (sx ^ (A[t, k] >> 15)) else p0
                mb[k] = -p1 if (sx ^ (B[t, k] >> 15)) else p1
                if p0 != 0 and ea[k] > shared_a:
                    shared_a = <int>ea[k]
                if p1 != 0 and eb[k] > shared_b:
                    shared_b = <int>eb[k]
            if shared_a == -1000:
                shared_a = 0
            if shared_b == -1000:
                shared_b = 0
            tot = 0
            for k in range(K):
                if ma[k] != 0:
                    sh = shared_a - <int>ea[k]
                    if sh > 63:
                        sh = 63
                    # sign-magnitude: shift the magnitude, then reapply sign
                    tot += -((-ma[k]) >> sh) if ma[k] < 0 else (ma[k] >> sh)
            oa[t] = round_to_half(tot, shared_a - (20 - drop))
            tot = 0
            for k in range(K):
                if mb[k] != 0:
                    sh = shared_b - <int>eb[k]
                    if sh > 63:
                        sh = 63
                    tot += -((-mb[k]) >> sh) if mb[k] < 0 else (mb[k] >> sh)
            ob[t] = round_to_half(tot, shared_b - (20 - drop))
    return ra.reshape(lead), rb.reshape(lead)


def pe_dot_int4(xbits, wa, wb, str impl):
    lead, depth = _lead_shape(xbits)
    cdef uint16_t[:, ::1] X = np.ascontiguousarray(xbits, dtype=np.uint16).reshape(-1, depth)
    cdef int8_t[:, ::1] A = np.ascontiguousarray(wa, dtype=np.int8).reshape(-1, depth)
    cdef int8_t[:, ::1] B = np.ascontiguousarray(wb, dtype=np.int8).reshape(-1, depth)
    cdef Py_ssize_t T = X.shape[0], K = X.shape[1], t, k, j
    cdef int pad = 7 if impl == "IMPL1" else 0
    ra = np.empty(T, dtype=np.uint16)
    rb = np.empty(T, dtype=np.uint16)
    cdef uint16_t[::1] oa = ra
    cdef uint16_t[::1] ob = rb
    cdef int64_t sig, prod, tot
    cdef int ex, shared, sh
    cdef int8_t[:, ::1] W
    cdef uint16_t[::1] O
    for j in range(2):
        W = A if j == 0 else B
        O = oa if j == 0 else ob
        with nogil:
            for t in range(T):
                shared = -1000
                for k in range(K):
                    ex = (X[t, k] >> 10) & 31
                    if ex > 0 and W[t, k] != 0 and ex - 15 > shared:
                        shared = ex - 15
                if shared == -1000:
                    shared = 0
                tot = 0
                for k in range(K):
                    ex = (X[t, k] >> 10) & 31
                    if ex == 0 or W[t, k] == 0:
                        continue
                    sig = 1024 + (X[t, k] & 1023)
                    if X[t, k] >> 15:
                        sig = -sig
                    prod = (sig * W[t, k]) << pad
                    sh = shared - (ex - 15)
                    if sh > 63:
                        sh = 63
                    tot += prod >> sh
                O[t] = round_to_half(tot, shared - (10 + pad))
    return ra.reshape(lead), rb.reshape(lead)
