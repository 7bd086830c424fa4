"""Dense float64 primitives with bit-reproducible evaluation order.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Reductions
that matter for reproducibility (matrix products, row sums) run in
ascending index order; elementwise work is delegated to numpy ufuncs.
"""
import math

import numpy as np

from ..errors import DegenerateRowError, DimensionError, NumericError
from .kernels import jacobi_sweeps, masked_softmax_rows, matmul3, rowsum

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 60


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a, b):
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` either matches them or is a
    plain matrix shared across the batch.
    """
    a = _f64(a)
    b = _f64(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"batch dimensions differ: {a.shape} x {b.shape}")
    lead = a.shape[:-2]
    m, k = a.shape[-2:]
    n = b.shape[-1]
    if k == 0:
        return np.zeros(lead + (m, n))
    a3 = a.reshape((-1, m, k))
    b3 = b.reshape((-1, k, n))
    return matmul3(a3, b3).reshape(lead + (m, n))


def seqsum(x, axis=-1):
    """Sum along ``axis`` strictly left to right."""
    x = np.asarray(x, dtype=np.float64)
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        return np.zeros(x.shape[:axis] + x.shape[axis + 1:])
    moved = np.ascontiguousarray(np.moveaxis(x, axis, -1))
    return rowsum(moved.reshape(-1, x.shape[axis])).reshape(moved.shape[:-1])


def row_softmax_masked(scores, mask):
    """Softmax over the last axis where ``mask == 0`` entries are excluded.

    Masked entries get an additive -inf before exponentiation, so they come
    out as exact zeros and never influence the unmasked ones.
    """
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(mask)
    try:
        fits = np.broadcast_shapes(mask.shape, scores.shape) == scores.shape
    except ValueError:
        fits = False
    if not fits:
        raise DimensionError(f"mask shape {mask.shape} does not fit scores {scores.shape}")
    keep = mask != 0
    if not keep.any(axis=-1).all():
        raise DegenerateRowError("mask row without any unmasked entry")
    shape = scores.shape
    keep = np.ascontiguousarray(np.broadcast_to(keep, shape)).reshape(-1, shape[-1])
    out = masked_softmax_rows(np.ascontiguousarray(scores).reshape(-1, shape[-1]), keep)
    return out.reshape(shape)


def rms_norm(x, gamma, eps):
    """``gamma * x / sqrt(mean(x**2) + eps)`` along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if x.shape[-1] != gamma.shape[-1]:
        raise DimensionError(f"rms_norm: width {x.shape[-1]} vs gamma {gamma.shape[-1]}")
    ms = seqsum(x * x) / x.shape[-1]
    return gamma * x / np.sqrt(ms + eps)[..., None]


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh approximation of GELU."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def gelu_grad(x):
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    th = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner


def log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(seqsum(np.exp(z)))[..., None]


def argmax_lowest(row) -> int:
    """Index of the maximum; ties go to the lowest index."""
    return int(np.argmax(np.asarray(row)))


def truncated_svd(w, r):
    """Best rank-``r`` factors ``(U, V)`` with ``U @ V.T ~= w``.

    One-sided Jacobi; singular values are folded into ``U``.
    """
    w = _f64(w)
    if w.ndim != 2:
        raise DimensionError("truncated_svd expects a matrix")
    m, n = w.shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank {r} outside [1, {min(m, n)}]")
    transposed = n > m
    a = np.array(w.T if transposed else w, dtype=np.float64, order="C")
    cols = a.shape[1]
    v = np.eye(cols)
    if jacobi_sweeps(a, v, SVD_TOL, SVD_MAX_SWEEPS) < 0:
        raise NumericError(f"Jacobi SVD did not converge in {SVD_MAX_SWEEPS} sweeps")
    norms = np.sqrt(seqsum(a * a, axis=0))
    order = np.argsort(-norms, kind="stable")[:r]
    scaled_left = np.ascontiguousarray(a[:, order])  # columns are sigma_i * u_i
    right = np.ascontiguousarray(v[:, order])
    if transposed:
        # w.T ~= scaled_left @ right.T  =>  w ~= right @ scaled_left.T
        sig = norms[order]
        safe = np.where(sig > 0, sig, 1.0)
        u_unit = scaled_left / safe
        return np.ascontiguousarray(right * sig), np.ascontiguousarray(u_unit)
    return scaled_left, right


def singular_values(w):
    """All singular values of ``w`` in descending order (Jacobi)."""
    w = _f64(w)
    a = np.array(w.T if w.shape[1] > w.shape[0] else w, order="C")
    v = np.eye(a.shape[1])
    if jacobi_sweeps(a, v, SVD_TOL, SVD_MAX_SWEEPS) < 0:
        raise NumericError("Jacobi SVD did not converge")
    return np.sort(np.sqrt(seqsum(a * a, axis=0)))[::-1]
