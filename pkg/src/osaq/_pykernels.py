"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``."""

import numpy as np


def _max_offdiag(a):
    off = np.abs(a)
    np.fill_diagonal(off, 0.0)
    return off.max() if off.size else 0.0


def jacobi_sweeps(a, v, tol, max_sweeps):
    n = a.shape[0]
    for sweep in range(max_sweeps + 1):
        if _max_offdiag(a) <= tol:
            return sweep
        if sweep == max_sweeps:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + np.sqrt(1.0 + theta * theta))
                else:
                    t = -1.0 / (-theta + np.sqrt(1.0 + theta * theta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                app, aqq = a[p, p], a[q, q]
                arp = a[:, p].copy()
                arq = a[:, q].copy()
                a[:, p] = c * arp - s * arq
                a[:, q] = s * arp + c * arq
                a[p, :] = a[:, p]
                a[q, :] = a[:, q]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vrp = v[:, p].copy()
                vrq = v[:, q].copy()
                v[:, p] = c * vrp - s * vrq
                v[:, q] = s * vrp + c * vrq
    return -1


def group_params(block, maxq):
    """Per-row (scale, zero, offset) for a (rows, cols) block of weights."""
    lo = block.min(axis=1)
    hi = block.max(axis=1)
    flat = hi == lo
    span = np.where(flat, 1.0, hi - lo)
    s = np.where(flat, 1.0, span / maxq)
    z = np.where(flat, 0.0, np.rint(-lo / s))
    o = np.where(flat, lo - np.clip(np.rint(lo), 0.0, maxq), 0.0)
    return s, z, o


def compensate_columns(w, u, group_size, maxq, scales, zeros, offsets, codes):
    n = w.shape[1]
    for j in range(n):
        g = j // group_size
        if j % group_size == 0:
            s, z, o = group_params(w[:, j:j + group_size], maxq)
            scales[:, g] = s
            zeros[:, g] = z
            offsets[:, g] = o
        s, z, o = scales[:, g], zeros[:, g], offsets[:, g]
        x = w[:, j]
        q = np.clip(np.rint((x - o) / s) + z, 0.0, maxq)
        codes[:, j] = q
        err = (x - (s * (q - z) + o)) / u[j, j]
        if j + 1 < n:
            w[:, j + 1:] -= err[:, None] * u[j, j + 1:][None, :]
