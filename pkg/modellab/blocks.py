"""Pre-norm transformer block shared by the vision encoder and the LLM.

x -> x + attend(norm(x)) -> x + mlp(norm(x)), with a gated MLP
(silu(x W_gate) * (x W_up)) W_down.
"""
import dataclasses

import numpy as np

from modellab import tensor as T
from modellab.attention import AttnConfig, QkvParams, attend, init_qkv_params
from modellab.masking import AttentionMask, TokenLayout
from modellab.tensor import Tensor

NORM_EPS = 1e-6


@dataclasses.dataclass
class MlpParams:
    """Gated MLP weights."""

    gate: Tensor
    up: Tensor
    down: Tensor

    def named(self) -> dict[str, Tensor]:
        return {"down": self.down, "gate": self.gate, "up": self.up}


@dataclasses.dataclass
class BlockParams:
    """One transformer layer."""

    attn_norm: Tensor
    attn: QkvParams
    mlp_norm: Tensor
    mlp: MlpParams

    def named(self) -> dict[str, Tensor]:
        named = {"attn_norm": self.attn_norm, "mlp_norm": self.mlp_norm}
        named.update({f"attn.{k}": v for k, v in self.attn.named().items()})
        named.update({f"mlp.{k}": v for k, v in self.mlp.named().items()})
        return dict(sorted(named.items()))


def _weight(rng: np.random.Generator, shape: tuple[int, int], std: float,
            name: str) -> Tensor:
    return Tensor(rng.normal(0.0, std, shape), requires_grad=True, name=name)


def init_mlp(
    d_model: int,
    hidden: int,
    rng: np.random.Generator,
    std: float = 0.02,
) -> MlpParams:
    return MlpParams(
        gate=_weight(rng, (d_model, hidden), std, "gate"),
        up=_weight(rng, (d_model, hidden), std, "up"),
        down=_weight(rng, (hidden, d_model), std, "down"),
    )


def init_block(
    cfg: AttnConfig,
    mlp_hidden: int,
    rng: np.random.Generator,
    std: float = 0.02,
) -> BlockParams:
    """A freshly initialised layer (unit norm gains, normal weights)."""
    return BlockParams(
        attn_norm=Tensor(np.ones(cfg.d_model), requires_grad=True,
                         name="attn_norm"),
        attn=init_qkv_params(cfg, rng, std),
        mlp_norm=Tensor(np.ones(cfg.d_model), requires_grad=True,
                        name="mlp_norm"),
        mlp=init_mlp(cfg.d_model, mlp_hidden, rng, std),
    )


def gated_mlp(x: Tensor, params: MlpParams) -> Tensor:
    gate = T.silu(T.matmul(x, params.gate))
    return T.matmul(T.mul(gate, T.matmul(x, params.up)), params.down)


def run_block(
    x: Tensor,
    block: BlockParams,
    mask: AttentionMask,
    cfg: AttnConfig,
    layout: TokenLayout,
) -> tuple[Tensor, Tensor]:
    """Run one layer.

    :returns: the hidden states after the attention sublayer and after the
        MLP sublayer
    :rtype: tuple[Tensor, Tensor]
    """
    normed = T.rms_norm(x, block.attn_norm, NORM_EPS)
    after_attn = T.add(x, attend(normed, mask, block.attn, cfg, layout))
    normed = T.rms_norm(after_attn, block.mlp_norm, NORM_EPS)
    after_mlp = T.add(after_attn, gated_mlp(normed, block.mlp))
    return after_attn, after_mlp
