# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot loops in ``kflow._pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()

TV = 0
W1 = 1


cdef inline void _matmul_into(const double[:, ::1] a, const double[:, ::1] b,
                              double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double aik
    for i in range(m):
        for j in range(m):
            out[i, j] = 0.0
        for k in range(m):
            aik = a[i, k]
            if aik != 0.0:
                for j in range(m):
                    out[i, j] += aik * b[k, j]


def chain_product(mats):
    cdef const double[:, :, ::1] M = np.ascontiguousarray(mats, dtype=np.float64)
    cdef Py_ssize_t k = M.shape[0]
    cdef Py_ssize_t m = M.shape[1]
    if k == 0:
        return np.eye(m)
    out = np.array(M[0], copy=True)
    tmp = np.empty((m, m))
    cdef double[:, ::1] o = out
    cdef double[:, ::1] t = tmp
    cdef Py_ssize_t i
    with nogil:
        for i in range(1, k):
            _matmul_into(o, M[i], t)
            o[:, :] = t
    return out


def poisson_products(counts, choices, jumps):
    cdef const long long[::1] c = np.ascontiguousarray(counts, dtype=np.int64)
    cdef const long long[::1] ch = np.ascontiguousarray(choices, dtype=np.int64)
    cdef const double[:, :, ::1] J = np.ascontiguousarray(jumps, dtype=np.float64)
    cdef Py_ssize_t S = c.shape[0]
    cdef Py_ssize_t m = J.shape[1]
    out_arr = np.zeros((S, m, m))
    cdef double[:, :, ::1] out = out_arr
    tmp_arr = np.empty((m, m))
    cdef double[:, ::1] tmp = tmp_arr
    cdef Py_ssize_t s, k, i, off = 0
    with nogil:
        for s in range(S):
            if c[s] == 0:
                for i in range(m):
                    out[s, i, i] = 1.0
            else:
                out[s, :, :] = J[ch[off]]
                for k in range(1, c[s]):
                    _matmul_into(out[s], J[ch[off + k]], tmp)
                    out[s, :, :] = tmp
            off += c[s]
    return out_arr


def tensor_moments(kernels, int n):
    cdef const double[:, :, ::1] K = np.ascontiguousarray(kernels, dtype=np.float64)
    cdef Py_ssize_t S = K.shape[0]
    cdef Py_ssize_t m = K.shape[1]
    cdef Py_ssize_t size = m ** n
    total_arr = np.zeros((size, size))
    sq_arr = np.zeros((size, size))
    cdef double[:, ::1] total = total_arr
    cdef double[:, ::1] sq = sq_arr
    # digits[r, i] = i-th most significant base-m digit of r
    dig_arr = np.empty((size, n), dtype=np.int64)
    cdef long long[:, ::1] dig = dig_arr
    cdef Py_ssize_t r, i, col, s
    cdef long long v
    for r in range(size):
        v = r
        for i in range(n - 1, -1, -1):
            dig[r, i] = v % m
            v //= m
    cdef double p
    with nogil:
        for s in range(S):
            for r in range(size):
                for col in range(size):
                    p = 1.0
                    for i in range(n):
                        p *= K[s, dig[r, i], dig[col, i]]
                        if p == 0.0:
                            break
                    total[r, col] += p
                    sq[r, col] += p * p
    return total_arr, sq_arr


cdef inline double _dist(const double[::1] a, const double[::1] b,
                         const double[::1] spacing, int kind) noexcept nogil:
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t k
    cdef double acc = 0.0, cum = 0.0
    if kind == 0:
        for k in range(m):
            acc += fabs(a[k] - b[k])
        return 0.5 * acc
    for k in range(m - 1):
        cum += a[k] - b[k]
        acc += fabs(cum) * spacing[k]
    return acc


def select_rows(mu, idx, coords, double tol, int kind):
    cdef const double[:, :, ::1] M = np.ascontiguousarray(mu, dtype=np.float64)
    cdef const long long[:, ::1] I = np.ascontiguousarray(idx, dtype=np.int64)
    cdef Py_ssize_t S = M.shape[0]
    cdef Py_ssize_t m = M.shape[2]
    cdef Py_ssize_t nx = I.shape[0]
    cdef Py_ssize_t J = I.shape[1]
    if kind == 1:
        sp_arr = np.ascontiguousarray(np.diff(np.asarray(coords, dtype=np.float64)))
    else:
        sp_arr = np.zeros(max(m - 1, 1))
    cdef double[::1] spacing = sp_arr
    out_arr = np.empty((S, nx, m))
    flags_arr = np.ones((S, nx), dtype=np.uint8)
    cdef double[:, :, ::1] out = out_arr
    cdef unsigned char[:, ::1] flags = flags_arr
    cdef Py_ssize_t s, x, j, k, chosen
    cdef bint ok
    with nogil:
        for s in range(S):
            for x in range(nx):
                chosen = J - 1
                for j in range(J - 1):
                    ok = True
                    for k in range(j + 1, J):
                        if _dist(M[s, I[x, j]], M[s, I[x, k]], spacing, kind) > tol:
                            ok = False
                            break
                    if ok:
                        chosen = j
                        flags[s, x] = 0
                        break
                out[s, x, :] = M[s, I[x, chosen]]
    return out_arr, flags_arr


def compose_site_maps(counts, coins, Py_ssize_t m):
    cdef const long long[::1] c = np.ascontiguousarray(counts, dtype=np.int64)
    cdef const long long[:, ::1] co = np.ascontiguousarray(coins, dtype=np.int64)
    cdef Py_ssize_t S = c.shape[0]
    pos_arr = np.empty((S, m), dtype=np.int64)
    cdef long long[:, ::1] pos = pos_arr
    cdef Py_ssize_t s, k, y, off = 0
    cdef long long p
    with nogil:
        for s in range(S):
            for y in range(m):
                p = y
                for k in range(c[s]):
                    p = (p + co[off + k, p] + m) % m
                pos[s, y] = p
            off += c[s]
    return pos_arr
