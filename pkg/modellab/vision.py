"""Toy patch vision encoder with multi-depth taps, and the MLP projector.

The encoder stands in for a frozen pretrained ViT: patch embedding, learned
position embedding, then pre-norm blocks with full bidirectional attention.
Hidden states after each tap layer are kept, concatenated per patch along
the feature axis and projected to the LLM width, so the number of visual
tokens never depends on how many depths are tapped.
"""
import dataclasses
import logging

import numpy as np

from modellab import tensor as T
from modellab.attention import AttnConfig
from modellab.blocks import BlockParams, init_block, run_block
from modellab.masking import MaskPolicy, TokenLayout, build_mask
from modellab.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class VisionConfig:
    """Encoder geometry and tap depths.

    taps are 1-based layer indices; a tap at layer l records the hidden
    states after block l has run.
    """

    image_size: int = 24
    patch_size: int = 4
    channels: int = 8
    d_model: int = 64
    layers: int = 6
    heads: int = 4
    mlp_hidden: int = 172
    taps: tuple[int, ...] = (2, 4, 5)

    def __post_init__(self) -> None:
        for field in ("image_size", "patch_size", "channels", "d_model",
                      "layers", "heads", "mlp_hidden"):
            if getattr(self, field) < 1:
                raise ValueError(
                    f"Vision {field} must be positive, got "
                    f"{getattr(self, field)}")
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by "
                f"patch_size {self.patch_size}")

        taps = tuple(self.taps)
        object.__setattr__(self, "taps", taps)
        if not taps:
            raise ValueError("At least one tap layer is required")
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ValueError(f"Tap layers must be strictly increasing: {taps}")
        if taps[0] < 1 or taps[-1] > self.layers:
            raise ValueError(
                f"Tap layers must lie in 1..{self.layers}: {taps}")

    @property
    def grid(self) -> int:
        """Patches per image side."""
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid ** 2

    @property
    def K(self) -> int:  # pylint: disable=invalid-name
        return len(self.taps)

    @property
    def patch_width(self) -> int:
        return self.patch_size ** 2 * self.channels

    def attn_config(self) -> AttnConfig:
        return AttnConfig(self.d_model, self.heads, rope=False)


@dataclasses.dataclass
class VisionEncoder:
    """Frozen encoder weights."""

    cfg: VisionConfig
    patch_weight: Tensor
    patch_bias: Tensor
    position: Tensor
    blocks: list[BlockParams]

    def named(self) -> dict[str, Tensor]:
        named = {
            "patch_weight": self.patch_weight,
            "patch_bias": self.patch_bias,
            "position": self.position,
        }
        for idx, block in enumerate(self.blocks):
            named.update(
                {f"blocks.{idx}.{k}": v for k, v in block.named().items()})
        return dict(sorted(named.items()))


@dataclasses.dataclass
class Projector:
    """Two-layer MLP from K * d_V to the LLM width."""

    w_in: Tensor
    b_in: Tensor
    w_out: Tensor
    b_out: Tensor

    @property
    def in_width(self) -> int:
        return self.w_in.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {"b_in": self.b_in, "b_out": self.b_out,
                "w_in": self.w_in, "w_out": self.w_out}


def init_encoder(
    cfg: VisionConfig,
    rng: np.random.Generator,
    std: float = 0.02,
) -> VisionEncoder:
    """Random encoder, frozen (no tensor requires a gradient)."""
    blocks = [init_block(cfg.attn_config(), cfg.mlp_hidden, rng, std)
              for _ in range(cfg.layers)]
    encoder = VisionEncoder(
        cfg=cfg,
        patch_weight=Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(cfg.patch_width),
                       (cfg.patch_width, cfg.d_model))),
        patch_bias=Tensor(np.zeros(cfg.d_model)),
        position=Tensor(rng.normal(0.0, std, (cfg.n_tokens, cfg.d_model))),
        blocks=blocks,
    )
    for value in encoder.named().values():
        value.requires_grad = False
    return encoder


def init_projector(
    in_width: int,
    d_model: int,
    rng: np.random.Generator,
    std: float = 0.02,
) -> Projector:
    return Projector(
        w_in=Tensor(rng.normal(0.0, std, (in_width, d_model)),
                    requires_grad=True, name="w_in"),
        b_in=Tensor(np.zeros(d_model), requires_grad=True, name="b_in"),
        w_out=Tensor(rng.normal(0.0, std, (d_model, d_model)),
                     requires_grad=True, name="w_out"),
        b_out=Tensor(np.zeros(d_model), requires_grad=True, name="b_out"),
    )


def patchify(images: np.ndarray, cfg: VisionConfig) -> np.ndarray:
    """Cut images into flattened patches, row-major over the patch grid.

    :param np.ndarray images: [S, S, C] or [B, S, S, C]
    :returns: [B, n, patch_size^2 * C]
    :raises ValueError: if the images do not match the config
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]

    expected = (cfg.image_size, cfg.image_size, cfg.channels)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ValueError(
            f"Images of shape {images.shape} do not match the vision config "
            f"{expected}")

    batch, grid, size = images.shape[0], cfg.grid, cfg.patch_size
    cells = images.reshape(batch, grid, size, grid, size, cfg.channels)
    cells = cells.transpose(0, 1, 3, 2, 4, 5)
    return cells.reshape(batch, grid * grid, cfg.patch_width)


def embed_patches(images: np.ndarray, encoder: VisionEncoder) -> Tensor:
    """Patch embedding, before the position embedding is added."""
    patches = Tensor(patchify(images, encoder.cfg), name="patches")
    return T.add(T.matmul(patches, encoder.patch_weight), encoder.patch_bias)


def encode_image(images: np.ndarray, encoder: VisionEncoder) -> list[Tensor]:
    """Run the encoder once and return the tapped hidden states.

    Exactly cfg.layers blocks run whatever the number of taps; each tap
    keeps the hidden states after its block (before the next block's norm).

    :param np.ndarray images: [S, S, C] or [B, S, S, C]
    :param VisionEncoder encoder: the frozen encoder
    :returns: K feature maps in tap order, each [B, n, d_V]
    :rtype: list[Tensor]
    """
    cfg = encoder.cfg
    x = T.add(embed_patches(images, encoder), encoder.position)

    layout = TokenLayout(0, cfg.n_tokens, 0)
    # every patch attends to every patch
    mask = build_mask(layout, MaskPolicy.VISUAL_BIDIRECTIONAL)
    attn_cfg = cfg.attn_config()
    taps = set(cfg.taps)

    features = []
    for depth, block in enumerate(encoder.blocks, start=1):
        _, x = run_block(x, block, mask, attn_cfg, layout)
        T.note("vision_block")
        if depth in taps:
            features.append(x)

    return features


def connect(features: list[Tensor], projector: Projector) -> Tensor:
    """Concatenate the K maps per patch and project them to the LLM width.

    :param list[Tensor] features: K maps, each [..., n, d_V]
    :param Projector projector: the MLP projector
    :returns: [..., n, d_L], one visual token per patch
    :raises ValueError: if the maps disagree on token count or width, or
        the projector expects another input width
    """
    if not features:
        raise ValueError("connect needs at least one feature map")

    shapes = {f.shape for f in features}
    if len(shapes) != 1:
        raise ValueError(
            f"Feature maps disagree on shape: {sorted(shapes)}")

    joined = features[0] if len(features) == 1 else \
        T.concat_last_dim(features)
    if joined.shape[-1] != projector.in_width:
        raise ValueError(
            f"Projector expects width {projector.in_width}, features give "
            f"{joined.shape[-1]}")

    hidden = T.silu(
        T.add(T.matmul(joined, projector.w_in), projector.b_in))
    return T.add(T.matmul(hidden, projector.w_out), projector.b_out)
