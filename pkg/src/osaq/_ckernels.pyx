# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: cyclic Jacobi rotations and column-compensated rounding.

Arithmetic is written term-for-term like the numpy fallback in
``_pykernels`` so both produce the same bits on the same platform.
"""

from libc.math cimport fabs, rint, sqrt


cdef double _max_offdiag(double[:, ::1] a) noexcept nogil:
    cdef Py_ssize_t n = a.shape[0], i, j
    cdef double m = 0.0, x
    for i in range(n):
        for j in range(n):
            if i != j:
                x = fabs(a[i, j])
                if x > m:
                    m = x
    return m


def jacobi_sweeps(double[:, ::1] a, double[:, ::1] v, double tol, int max_sweeps):
    """Diagonalize symmetric ``a`` in place, accumulating rotations into ``v``.

    Returns the number of sweeps performed, or -1 when ``max_sweeps`` ran out
    before the largest off-diagonal entry dropped to ``tol``.
    """
    cdef Py_ssize_t n = a.shape[0], p, q, r
    cdef double apq, theta, t, c, s, arp, arq, vrp, vrq
    cdef int sweep, used = -1
    with nogil:
        for sweep in range(max_sweeps + 1):
            if _max_offdiag(a) <= tol:
                used = sweep
                break
            if sweep == max_sweeps:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if apq == 0.0:
                        continue
                    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                    if theta >= 0.0:
                        t = 1.0 / (theta + sqrt(1.0 + theta * theta))
                    else:
                        t = -1.0 / (-theta + sqrt(1.0 + theta * theta))
                    c = 1.0 / sqrt(1.0 + t * t)
                    s = t * c
                    for r in range(n):
                        if r == p or r == q:
                            continue
                        arp = a[r, p]
                        arq = a[r, q]
                        a[r, p] = c * arp - s * arq
                        a[r, q] = s * arp + c * arq
                        a[p, r] = a[r, p]
                        a[q, r] = a[r, q]
                    a[p, p] = a[p, p] - t * apq
                    a[q, q] = a[q, q] + t * apq
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    for r in range(n):
                        vrp = v[r, p]
                        vrq = v[r, q]
                        v[r, p] = c * vrp - s * vrq
                        v[r, q] = s * vrp + c * vrq
    return used


cdef void _group_params(double[:, ::1] w, Py_ssize_t r, Py_ssize_t c0, Py_ssize_t c1,
                        int maxq, double* s, double* z, double* o) noexcept nogil:
    cdef Py_ssize_t j
    cdef double lo = w[r, c0], hi = w[r, c0], x
    for j in range(c0 + 1, c1):
        x = w[r, j]
        if x < lo:
            lo = x
        if x > hi:
            hi = x
    if hi == lo:
        s[0] = 1.0
        z[0] = 0.0
        x = rint(lo)
        if x < 0.0:
            x = 0.0
        elif x > maxq:
            x = maxq
        o[0] = lo - x
    else:
        s[0] = (hi - lo) / maxq
        z[0] = rint(-lo / s[0])
        o[0] = 0.0


def compensate_columns(double[:, ::1] w, double[:, ::1] u, int group_size, int maxq,
                       double[:, ::1] scales, double[:, ::1] zeros, double[:, ::1] offsets,
                       double[:, ::1] codes):
    """Quantize ``w`` column by column, pushing each column's rounding error
    into the remaining columns through the upper Cholesky factor ``u`` of the
    damped inverse Hessian. ``w`` is overwritten with the compensated weights.
    """
    cdef Py_ssize_t m = w.shape[0], n = w.shape[1], r, j, k, g
    cdef double s, z, o, x, q, err, d
    with nogil:
        for j in range(n):
            g = j // group_size
            if j % group_size == 0:
                for r in range(m):
                    _group_params(w, r, j, j + group_size, maxq, &s, &z, &o)
                    scales[r, g] = s
                    zeros[r, g] = z
                    offsets[r, g] = o
            d = u[j, j]
            for r in range(m):
                s = scales[r, g]
                z = zeros[r, g]
                o = offsets[r, g]
                x = w[r, j]
                q = rint((x - o) / s) + z
                if q < 0.0:
                    q = 0.0
                elif q > maxq:
                    q = maxq
                codes[r, j] = q
                err = (x - (s * (q - z) + o)) / d
                for k in range(j + 1, n):
                    w[r, k] = w[r, k] - err * u[j, k]
