"""Modality-routed multi-head attention.

Rows of the sequence that hold visual tokens can be projected with their own
query/key/value weights; everything else (rotary positions, masked softmax,
the shared output projection) is ordinary multi-head self-attention. Scores
are scaled by 1/sqrt(head_dim).
"""
import dataclasses
import math

import numpy as np

from modellab import tensor as T
from modellab.masking import AttentionMask, TokenLayout
from modellab.tensor import Tensor

# names of the per-modality projections, in parameter order
PROJECTIONS: tuple[str, ...] = ("q", "k", "v")


@dataclasses.dataclass(frozen=True)
class AttnConfig:
    """Attention hyperparameters."""

    d_model: int
    heads: int
    rope_base: float = 10000.0
    separate_visual_qkv: bool = False
    rope: bool = True
    qkv_bias: bool = True

    def __post_init__(self) -> None:
        if self.d_model < 1 or self.heads < 1:
            raise ValueError(
                f"d_model and heads must be positive: "
                f"{self.d_model}, {self.heads}")
        if self.d_model % self.heads:
            raise ValueError(
                f"d_model {self.d_model} is not divisible by "
                f"heads {self.heads}")
        if self.rope and self.head_dim % 2:
            raise ValueError(
                f"Rotary positions need an even head_dim, got "
                f"{self.head_dim}")
        if self.rope_base <= 0:
            raise ValueError(f"rope_base must be positive: {self.rope_base}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


@dataclasses.dataclass
class QkvParams:
    """Projection weights of one attention sublayer.

    weights maps "q_text", "k_text", "v_text", "o" and optionally "q_vis",
    "k_vis", "v_vis" to [d, d] tensors; biases maps the q/k/v names to [d]
    tensors when the layer has QKV biases.
    """

    weights: dict[str, Tensor]
    biases: dict[str, Tensor] = dataclasses.field(default_factory=dict)

    def __post_init__(self) -> None:
        missing = {f"{p}_text" for p in PROJECTIONS} | {"o"}
        missing -= set(self.weights)
        if missing:
            raise ValueError(f"Missing projection weights: {sorted(missing)}")

        visual = [f"{p}_vis" in self.weights for p in PROJECTIONS]
        if any(visual) and not all(visual):
            raise ValueError(
                "Visual projections must be all present or all absent")

    @property
    def has_visual(self) -> bool:
        return "q_vis" in self.weights

    def add_visual_copy(self) -> None:
        """Create visual projections as exact copies of the text ones."""
        for proj in PROJECTIONS:
            text = self.weights[f"{proj}_text"]
            self.weights[f"{proj}_vis"] = Tensor(
                text.data, requires_grad=text.requires_grad,
                name=f"{proj}_vis")
            if f"{proj}_text" in self.biases:
                bias = self.biases[f"{proj}_text"]
                self.biases[f"{proj}_vis"] = Tensor(
                    bias.data, requires_grad=bias.requires_grad,
                    name=f"{proj}_vis_bias")

    def named(self) -> dict[str, Tensor]:
        """Every tensor keyed by a stable, checkpoint-friendly name."""
        named = {f"w_{key}": value for key, value in self.weights.items()}
        named.update({f"b_{key}": value for key, value in self.biases.items()})
        return dict(sorted(named.items()))


def init_qkv_params(
    cfg: AttnConfig,
    rng: np.random.Generator,
    std: float = 0.02,
) -> QkvParams:
    """Randomly initialised text projections, plus copied visual ones when
    cfg asks for separate visual QKV.
    """
    d = cfg.d_model
    weights = {
        name: Tensor(rng.normal(0.0, std, (d, d)), requires_grad=True,
                     name=name)
        for name in ("q_text", "k_text", "v_text", "o")
    }
    biases = {}
    if cfg.qkv_bias:
        biases = {
            f"{p}_text": Tensor(np.zeros(d), requires_grad=True,
                                name=f"{p}_text_bias")
            for p in PROJECTIONS
        }

    params = QkvParams(weights, biases)
    if cfg.separate_visual_qkv:
        params.add_visual_copy()
    return params


def _project(x: Tensor, params: QkvParams, key: str) -> Tensor:
    out = T.matmul(x, params.weights[key])
    if key in params.biases:
        out = T.add(out, params.biases[key])
    return out


def project_qkv(
    x: Tensor,
    layout: TokenLayout,
    params: QkvParams,
    cfg: AttnConfig,
) -> tuple[Tensor, Tensor, Tensor]:
    """Project every row to query, key and value vectors.

    Rows in the visual span use the visual weights when
    cfg.separate_visual_qkv is set; all other rows use the text weights.
    Rows are always projected per segment so both settings run the same
    arithmetic.

    :param Tensor x: shape [..., N, d]
    :param TokenLayout layout: where the visual rows are
    :param QkvParams params: the projection weights
    :param AttnConfig cfg: attention config
    :returns: Q, K, V each shaped like x
    :raises ValueError: if visual weights are required but missing
    """
    if cfg.separate_visual_qkv and not params.has_visual:
        raise ValueError(
            "separate_visual_qkv is set but the layer has no visual "
            "projection weights")
    if x.shape[-2] != layout.N:
        raise ValueError(
            f"Input has {x.shape[-2]} rows but the layout has {layout.N}")

    outputs = []
    for proj in PROJECTIONS:
        parts = []
        for start, stop, is_visual in layout.segments():
            rows = x if (start, stop) == (0, layout.N) else \
                T.slice_rows(x, start, stop)
            modality = "vis" if is_visual and cfg.separate_visual_qkv \
                else "text"
            parts.append(_project(rows, params, f"{proj}_{modality}"))
        outputs.append(parts[0] if len(parts) == 1 else T.concat_rows(parts))

    q, k, v = outputs
    return q, k, v


def rope_tables(
    positions: np.ndarray,
    head_dim: int,
    base: float,
) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape [N, head_dim/2].

    :raises ValueError: on an odd head_dim
    """
    if head_dim % 2:
        raise ValueError(
            f"Rotary positions need an even head_dim, got {head_dim}")
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.outer(np.asarray(positions, dtype=np.float64), inv_freq)
    return np.cos(angles), np.sin(angles)


def apply_rope(
    q: Tensor,
    k: Tensor,
    positions: np.ndarray,
    base: float = 10000.0,
) -> tuple[Tensor, Tensor]:
    """Rotate query and key channel pairs by their absolute positions.

    :param Tensor q: shape [..., N, head_dim]
    :param Tensor k: shape [..., N, head_dim]
    :param np.ndarray positions: N position ids
    :param float base: frequency base
    """
    positions = np.asarray(positions)
    if positions.shape != (q.shape[-2],):
        raise ValueError(
            f"Need {q.shape[-2]} positions, got shape {positions.shape}")
    cos, sin = rope_tables(positions, q.shape[-1], base)
    return T.rotate_pairs(q, cos, sin), T.rotate_pairs(k, cos, sin)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    batch, rows, width = x.shape
    split = T.reshape(x, (batch, rows, heads, width // heads))
    return T.transpose(split, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    batch, heads, rows, width = x.shape
    merged = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(merged, (batch, rows, heads * width))


def attend(
    x: Tensor,
    mask: AttentionMask,
    params: QkvParams,
    cfg: AttnConfig,
    layout: TokenLayout,
) -> Tensor:
    """Masked multi-head self-attention, output projection included.

    The residual is the caller's. Rows in mask.bypass_rows get an exactly
    zero attention output, so the caller's residual leaves them unchanged.

    :param Tensor x: shape [N, d] or [B, N, d]
    :param AttentionMask mask: the N x N structure
    :param QkvParams params: projection weights
    :param AttnConfig cfg: attention config
    :param TokenLayout layout: sequence segmentation
    :returns: attention output shaped like x
    :raises ValueError: on a mask/input size mismatch
    """
    if mask.N != x.shape[-2]:
        raise ValueError(
            f"Mask is {mask.N}x{mask.N} but the input has {x.shape[-2]} rows")

    squeeze = len(x.shape) == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)

    q, k, v = project_qkv(x, layout, params, cfg)
    q, k, v = (_split_heads(t, cfg.heads) for t in (q, k, v))

    if cfg.rope:
        q, k = apply_rope(q, k, np.arange(layout.N), cfg.rope_base)

    scores = T.scale(T.masked_scores(q, k, mask), 1.0 / math.sqrt(cfg.head_dim))
    probs = T.masked_softmax(scores, mask)
    context = _merge_heads(T.weighted_values(probs, v, mask))
    out = T.matmul(context, params.weights["o"])

    if mask.bypass_rows:
        out = T.mul(out, Tensor(mask.keep_rows()))

    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return out
