"""Model substitutions a dishonest provider might use."""
import numpy as np

from ..numerics import matmul, truncated_svd
from .params import ModelParams


def perturb_low_rank(params: ModelParams, r: int) -> ModelParams:
    """Replace every attention/MLP weight matrix with its best rank-``r`` factorisation."""
    keys = params.linear_keys()
    limit = min(min(params[k].shape) for k in keys)
    if not 1 <= r <= limit:
        raise ValueError(f"rank {r} outside [1, {limit}]")
    updates = {}
    for k in keys:
        u, v = truncated_svd(params[k], r)
        updates[k] = matmul(u, np.ascontiguousarray(v.T))
    return params.replace(**updates)


def quantize_tensor(w, bits: int) -> np.ndarray:
    """Per-tensor symmetric rounding onto ``2**(bits-1) - 1`` levels per sign."""
    if not 2 <= bits <= 16:
        raise ValueError("bits must lie in [2, 16]")
    w = np.asarray(w, dtype=np.float64)
    peak = np.abs(w).max() if w.size else 0.0
    if peak == 0.0:
        return w.copy()
    scale = peak / (2 ** (bits - 1) - 1)
    return np.round(w / scale) * scale


def perturb_quantize(params: ModelParams, bits: int) -> ModelParams:
    """Fake-quantise the attention/MLP linear layers; embeddings and norms stay exact."""
    if not 2 <= bits <= 16:
        raise ValueError("bits must lie in [2, 16]")
    return params.replace(**{k: quantize_tensor(params[k], bits) for k in params.linear_keys()})
