"""Request and response records passed between user and provider processes.

The simulation has no encryption, so a request record also carries the
user's private bookkeeping (sentinel slots, sequence, noise ids). Provider
code reaches it only through :class:`priveri.privacy.SealedRequest`.
"""
import numpy as np

from .errors import FormatError
from .privacy import ProviderResponse
from .protocol1 import AugmentedRequest
from .protocol2 import NoisyRequest
from .records import read_record, write_record

REQUEST_MAGIC = "PVREQ1"
RESPONSE_MAGIC = "PVRESP1"


def save_request(request, path, model_hash: bytes = b""):
    noisy = isinstance(request, NoisyRequest)
    base = request.base if noisy else request
    tensors = {
        "tokens": np.asarray(base.tokens, dtype=np.int64),
        "mask2d": np.asarray(base.mask2d, dtype=np.float64),
        "position_ids": np.asarray(base.position_ids, dtype=np.int64),
        "sentinel_positions": np.asarray(base.sentinel_positions, dtype=np.int64),
        "sentinel_sequence": np.asarray(base.sentinel_sequence, dtype=np.int64),
    }
    meta = {"protocol": 2 if noisy else 1, "model_sha256": model_hash.hex()}
    if noisy:
        tensors["embeddings"] = request.embeddings
        tensors["noise_cache"] = np.asarray(request.noise_cache, dtype=np.int64)
        meta["noise_mode"] = request.mode
    return write_record(path, REQUEST_MAGIC, meta, tensors)


def load_request(path):
    """Returns ``(request, meta)``."""
    manifest, t = read_record(path, REQUEST_MAGIC)
    try:
        base = AugmentedRequest(
            tuple(int(x) for x in t["tokens"]),
            t["mask2d"],
            tuple(int(x) for x in t["position_ids"]),
            tuple(int(x) for x in t["sentinel_positions"]),
            tuple(int(x) for x in t["sentinel_sequence"]),
        )
        if manifest["protocol"] == 2:
            req = NoisyRequest(base, t["embeddings"], tuple(int(x) for x in t["noise_cache"]),
                               manifest["noise_mode"])
        else:
            req = base
    except KeyError as exc:
        raise FormatError(f"request record is missing {exc}") from exc
    return req, manifest


def save_response(response: ProviderResponse, path):
    tensors = {"outputs": response.outputs, "claimed_tokens": np.asarray(response.claimed_tokens, dtype=np.int64)}
    return write_record(path, RESPONSE_MAGIC, {"kind": response.kind, "label": response.label}, tensors)


def load_response(path) -> ProviderResponse:
    manifest, t = read_record(path, RESPONSE_MAGIC)
    try:
        return ProviderResponse(t["outputs"], manifest["kind"], manifest["label"],
                                tuple(int(x) for x in t["claimed_tokens"]))
    except KeyError as exc:
        raise FormatError(f"response record is missing {exc}") from exc
