"""Compiled inner loops with a fixed floating-point evaluation order.

Every kernel accumulates in ascending index order with a separate multiply
and add per term, so results are independent of array size and layout.
"""
import numpy as np
from numba import njit

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@njit(cache=True)
def matmul3(a, b):
    # a: (Z, m, k), b: (Z or 1, k, n); rows handled four at a time so each
    # loaded b[t, j] feeds four accumulators, order per element unchanged.
    nz, m, k = a.shape
    n = b.shape[2]
    out = np.empty((nz, m, n))
    acc = np.empty((4, n))
    for z in range(nz):
        zb = z if b.shape[0] > 1 else 0
        i = 0
        while i < m:
            rows = min(4, m - i)
            for r in range(rows):
                ai = a[z, i + r, 0]
                for j in range(n):
                    acc[r, j] = ai * b[zb, 0, j]
            if rows == 4:
                for t in range(1, k):
                    a0 = a[z, i, t]
                    a1 = a[z, i + 1, t]
                    a2 = a[z, i + 2, t]
                    a3 = a[z, i + 3, t]
                    for j in range(n):
                        bj = b[zb, t, j]
                        acc[0, j] = acc[0, j] + a0 * bj
                        acc[1, j] = acc[1, j] + a1 * bj
                        acc[2, j] = acc[2, j] + a2 * bj
                        acc[3, j] = acc[3, j] + a3 * bj
            else:
                for r in range(rows):
                    for t in range(1, k):
                        ai = a[z, i + r, t]
                        for j in range(n):
                            acc[r, j] = acc[r, j] + ai * b[zb, t, j]
            for r in range(rows):
                for j in range(n):
                    out[z, i + r, j] = acc[r, j]
            i += 4
    return out


@njit(cache=True)
def rowsum(x):
    # x: (R, n) -> (R,), left to right
    R, n = x.shape
    out = np.empty(R)
    for r in range(R):
        s = x[r, 0]
        for j in range(1, n):
            s = s + x[r, j]
        out[r] = s
    return out


@njit(cache=True)
def masked_softmax_rows(scores, keep):
    # scores, keep: (R, n); masked entries come out as exact zeros
    R, n = scores.shape
    out = np.zeros((R, n))
    for r in range(R):
        top = -np.inf
        for j in range(n):
            if keep[r, j] and scores[r, j] > top:
                top = scores[r, j]
        total = 0.0
        first = True
        for j in range(n):
            if keep[r, j]:
                e = np.exp(scores[r, j] - top)
                out[r, j] = e
                if first:
                    total = e
                    first = False
                else:
                    total = total + e
        for j in range(n):
            if keep[r, j]:
                out[r, j] = out[r, j] / total
    return out


@njit(cache=True)
def _rotl(x, r):
    return (x << np.uint64(r)) | (x >> np.uint64(64 - r))


@njit(cache=True)
def xoshiro_fill(state, n):
    """Advance xoshiro256** ``n`` times in place; return the outputs."""
    out = np.empty(n, dtype=np.uint64)
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    for i in range(n):
        out[i] = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3
    return out


@njit(cache=True)
def jacobi_sweeps(a, v, tol, max_sweeps):
    """One-sided Jacobi orthogonalisation of the columns of ``a`` in place.

    Rotations are mirrored into ``v``. Returns the number of sweeps used,
    or -1 when the sweep budget ran out before convergence.
    """
    m, n = a.shape
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    alpha += a[i, p] * a[i, p]
                    beta += a[i, q] * a[i, q]
                    gamma += a[i, p] * a[i, q]
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                sgn = 1.0 if zeta >= 0.0 else -1.0
                t = sgn / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    ap = a[i, p]
                    aq = a[i, q]
                    a[i, p] = c * ap - s * aq
                    a[i, q] = s * ap + c * aq
                for i in range(n):
                    vp = v[i, p]
                    vq = v[i, q]
                    v[i, p] = c * vp - s * vq
                    v[i, q] = s * vp + c * vq
        if not rotated:
            return sweep + 1
    return -1
