from .forward import (
    ForwardOutput,
    GreedyRun,
    causal_mask,
    decoder,
    embed_tokens,
    forward,
    forward_causal,
    generate_greedy,
)
from .params import (
    LINEAR_KEYS,
    MODEL_MAGIC,
    ModelConfig,
    ModelParams,
    deserialize,
    init_params,
    load_model,
    save_model,
    serialize,
)
from .perturb import perturb_low_rank, perturb_quantize, quantize_tensor
from .train import AdamW, heldout_windows, lm_loss, log_loss, perturb_finetune_step, pretrain

__all__ = [
    "AdamW",
    "ForwardOutput",
    "GreedyRun",
    "LINEAR_KEYS",
    "MODEL_MAGIC",
    "ModelConfig",
    "ModelParams",
    "causal_mask",
    "decoder",
    "deserialize",
    "embed_tokens",
    "forward",
    "forward_causal",
    "generate_greedy",
    "heldout_windows",
    "init_params",
    "lm_loss",
    "load_model",
    "log_loss",
    "perturb_finetune_step",
    "perturb_low_rank",
    "perturb_quantize",
    "pretrain",
    "quantize_tensor",
    "save_model",
    "serialize",
]
