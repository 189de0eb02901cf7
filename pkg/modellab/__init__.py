"""modellab core."""

from . import (
    ablation,
    attention,
    blocks,
    checkpoint,
    config,
    costs,
    data,
    masking,
    mllm,
    probes,
    tensor,
    train,
    vision,
)
