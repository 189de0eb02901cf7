"""Analytic parameter and FLOPs counters.

Counts are closed-form enumerations over model dimensions, so they work for
models far too large to build here (the dims of public checkpoints live in
dims.yaml) and, for models that can be built, they agree exactly with
walking the tensors or counting multiply-adds as they execute.

FLOPs follow a recorded set of conventions:

* a multiply-add is 2 FLOPs;
* query, key, value and output projections are priced at full width unless
  kv_width is "grouped";
* attention scores and the value weighting are priced over the allowed
  entries of the mask (the lower triangle for causal attention, plus the
  visual block above the diagonal under bidirectional visual attention);
  "full" prices every entry;
* the MLP is priced as mlp_matmuls matmuls of the inner width. 2 matches
  published cost tables that leave out the gate; 3 is what the gated MLP
  actually executes.

The no-visual-attention ablation is priced as causal attention: its visual
rows are computed and then discarded.
"""
import dataclasses
import logging
import pathlib
from typing import Any

from ruamel.yaml import YAML

from modellab.masking import (
    MaskPolicy,
    TokenLayout,
    expected_allowed_count,
)
from modellab.mllm import ModelConfig

logger = logging.getLogger(__name__)

DIMS_FILE = pathlib.Path(__file__).with_name("dims.yaml")
DIMS_VERSION = 1

GIGA = 1e9


@dataclasses.dataclass(frozen=True)
class LlmDims:
    """Language model dimensions."""

    hidden: int
    layers: int
    heads: int
    kv_heads: int
    intermediate: int
    vocab: int
    tied_embeddings: bool = False
    qkv_bias: bool = True

    def __post_init__(self) -> None:
        for field in ("hidden", "heads", "kv_heads", "intermediate", "vocab"):
            if getattr(self, field) < 1:
                raise ValueError(
                    f"{field} must be positive, got {getattr(self, field)}")
        if self.layers < 0:
            raise ValueError(f"layers must be >= 0, got {self.layers}")
        if self.hidden % self.heads:
            raise ValueError(
                f"hidden {self.hidden} is not divisible by heads {self.heads}")

    @property
    def kv_width(self) -> int:
        return self.hidden // self.heads * self.kv_heads


@dataclasses.dataclass(frozen=True)
class VisionDims:
    """Vision encoder dimensions."""

    image_size: int
    patch_size: int
    channels: int
    hidden: int
    layers: int
    heads: int
    intermediate: int
    patch_bias: bool = True
    class_token: bool = False
    qkv_bias: bool = True
    linear_bias: bool = False
    mlp_matrices: int = 3
    norm_params: int = 1
    extra_norms: int = 0

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by "
                f"patch_size {self.patch_size}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def tokens(self) -> int:
        return self.n_patches + int(self.class_token)


@dataclasses.dataclass(frozen=True)
class Conventions:
    """How FLOPs are counted."""

    mac_flops: int = 2
    causal_scores: str = "lower-triangle"
    kv_width: str = "full"
    mlp_matmuls: int = 2

    def __post_init__(self) -> None:
        if self.causal_scores not in {"lower-triangle", "full"}:
            raise ValueError(
                f"causal_scores must be lower-triangle or full, got "
                f"{self.causal_scores!r}")
        if self.kv_width not in {"full", "grouped"}:
            raise ValueError(
                f"kv_width must be full or grouped, got {self.kv_width!r}")
        if self.mac_flops < 1 or self.mlp_matmuls < 1:
            raise ValueError(
                f"mac_flops and mlp_matmuls must be positive: "
                f"{self.mac_flops}, {self.mlp_matmuls}")


@dataclasses.dataclass
class CostReport:
    """Parameter and FLOPs breakdown.

    Totals are always the sum of the named parts.
    """

    scenario: dict[str, Any]
    conventions: Conventions | None = None
    params: dict[str, int] = dataclasses.field(default_factory=dict)
    flops: dict[str, int] = dataclasses.field(default_factory=dict)
    per_layer: dict[str, int] = dataclasses.field(default_factory=dict)

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())

    @property
    def llm_flops(self) -> int:
        return sum(v for k, v in self.flops.items()
                   if k not in {"projector", "encoder"})

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"scenario": self.scenario}
        if self.conventions is not None:
            out["conventions"] = dataclasses.asdict(self.conventions)
        if self.params:
            out["params"] = dict(self.params)
            out["total_params"] = self.total_params
        if self.flops:
            attention = self.per_layer["attention_projections"] + \
                self.per_layer["attention_scores"]
            out["flops"] = dict(self.flops)
            out["attention_per_layer_gflops"] = attention / GIGA
            out["mlp_per_layer_gflops"] = self.per_layer["mlp"] / GIGA
            out["lm_head_gflops"] = self.flops["lm_head"] / GIGA
            out["llm_total_gflops"] = self.llm_flops / GIGA
            out["projector_gflops"] = self.flops.get("projector", 0) / GIGA
            out["encoder_gflops"] = self.flops.get("encoder", 0) / GIGA
            out["total_gflops"] = self.total_flops / GIGA
        return out


def _dims_doc(filepath: pathlib.Path) -> dict[str, Any]:
    doc = YAML(typ="safe").load(pathlib.Path(filepath))
    if not isinstance(doc, dict) or doc.get("version") != DIMS_VERSION:
        found = doc.get("version") if isinstance(doc, dict) else None
        raise ValueError(
            f"Unsupported dims file version: expected {DIMS_VERSION}, "
            f"found {found}")
    return doc


def presets(filepath: pathlib.Path = DIMS_FILE) -> list[str]:
    """Names of the llm presets in the dims file."""
    return sorted(_dims_doc(filepath)["llm"])


def load_dims(
    name: str,
    filepath: pathlib.Path = DIMS_FILE,
) -> tuple[LlmDims, VisionDims | None]:
    """Look up a named preset in the dims file.

    :param str name: an llm preset, e.g. "qwen2.5-3b" or "toy"
    :param pathlib.Path filepath: the dims file
    :returns: the llm dims and the encoder paired with it, if any
    :raises ValueError: on an unknown preset or file version
    """
    doc = _dims_doc(filepath)
    key = name.strip().lower()
    if key not in doc["llm"]:
        raise ValueError(
            f"Unknown dims preset {name!r}. Choose from {sorted(doc['llm'])}")

    llm = LlmDims(**doc["llm"][key])
    pair = doc.get("pairs", {}).get(key)
    vision = VisionDims(**doc["vision"][pair]) if pair else None
    return llm, vision


def dims_from_config(cfg: ModelConfig) -> tuple[LlmDims, VisionDims | None]:
    """Dimensions of a model this package can build."""
    llm = LlmDims(
        hidden=cfg.d_model,
        layers=cfg.layers,
        heads=cfg.heads,
        kv_heads=cfg.heads,
        intermediate=cfg.mlp_hidden,
        vocab=cfg.vocab_size,
        tied_embeddings=False,
        qkv_bias=cfg.qkv_bias,
    )
    vision = None
    if cfg.vision is not None:
        vision = VisionDims(
            image_size=cfg.vision.image_size,
            patch_size=cfg.vision.patch_size,
            channels=cfg.vision.channels,
            hidden=cfg.vision.d_model,
            layers=cfg.vision.layers,
            heads=cfg.vision.heads,
            intermediate=cfg.vision.mlp_hidden,
        )
    return llm, vision


def _qkv_params(width: int, kv_width: int, bias: bool) -> int:
    return width * width + 2 * width * kv_width + \
        ((width + 2 * kv_width) if bias else 0)


def _block_params(
    width: int,
    kv_width: int,
    intermediate: int,
    qkv_bias: bool,
    linear_bias: bool,
    mlp_matrices: int,
    norm_params: int,
) -> int:
    attention = _qkv_params(width, kv_width, qkv_bias) + width * width
    mlp = mlp_matrices * width * intermediate
    if linear_bias:
        attention += width
        mlp += (mlp_matrices - 1) * intermediate + width
    return attention + mlp + 2 * norm_params * width


def projector_params(k: int, d_vision: int, d_model: int) -> int:
    """Two-layer MLP projector, biases included."""
    return k * d_vision * d_model + d_model + d_model * d_model + d_model


def encoder_params(vision: VisionDims) -> int:
    width = vision.hidden
    patch = vision.patch_size ** 2 * vision.channels * width
    if vision.patch_bias:
        patch += width
    block = _block_params(
        width, width, vision.intermediate, vision.qkv_bias,
        vision.linear_bias, vision.mlp_matrices, vision.norm_params)
    return (
        patch
        + (width if vision.class_token else 0)
        + vision.tokens * width
        + vision.layers * block
        + vision.extra_norms * vision.norm_params * width
    )


def count_params(
    llm: LlmDims,
    separate_visual_qkv: bool = False,
    vision: VisionDims | None = None,
    k: int = 1,
) -> CostReport:
    """Parameter count per part of the model.

    :param LlmDims llm: language model dims
    :param bool separate_visual_qkv: add a visual copy of every layer's
        query/key/value projections (biases included)
    :param VisionDims vision: the encoder, None for a text-only model
    :param int k: number of tapped encoder depths (projector input K * d_V)
    :returns: the report; params parts are embed, layers, final_norm,
        lm_head, visual_qkv, projector and encoder
    :rtype: CostReport
    """
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")

    block = _block_params(
        llm.hidden, llm.kv_width, llm.intermediate, llm.qkv_bias, False, 3, 1)
    visual = _qkv_params(llm.hidden, llm.kv_width, llm.qkv_bias) \
        if separate_visual_qkv else 0

    params = {
        "embed": llm.vocab * llm.hidden,
        "layers": llm.layers * block,
        "final_norm": llm.hidden,
        "lm_head": 0 if llm.tied_embeddings else llm.vocab * llm.hidden,
        "visual_qkv": llm.layers * visual,
        "projector": 0,
        "encoder": 0,
    }
    if vision is not None:
        params["projector"] = projector_params(k, vision.hidden, llm.hidden)
        params["encoder"] = encoder_params(vision)

    scenario = {"separate_visual_qkv": separate_visual_qkv, "k": k}
    return CostReport(scenario=scenario, params=params)


def param_delta(
    llm: LlmDims,
    vision: VisionDims | None,
    k: int = 3,
) -> dict[str, Any]:
    """Baseline (shared QKV, one tap) against all mechanisms (k taps).

    :returns: both totals and the relative increase in percent
    """
    baseline = count_params(llm, False, vision, 1)
    ours = count_params(llm, True, vision, k)
    return {
        "baseline": baseline.total_params,
        "ours": ours.total_params,
        "visual_qkv": ours.params["visual_qkv"],
        "delta_pct": 100.0 * (ours.total_params - baseline.total_params)
        / baseline.total_params,
    }


def encoder_flops(vision: VisionDims, mac_flops: int = 2) -> int:
    """One encoder forward over one image, all layers, full attention."""
    width, tokens = vision.hidden, vision.tokens
    per_layer = (
        4 * tokens * width * width
        + 2 * tokens * tokens * width
        + vision.mlp_matrices * tokens * width * vision.intermediate
    )
    patch = vision.n_patches * vision.patch_size ** 2 * vision.channels * \
        width
    return mac_flops * (patch + vision.layers * per_layer)


def count_flops(
    llm: LlmDims,
    layout: TokenLayout,
    policy: MaskPolicy,
    conventions: Conventions | None = None,
    vision: VisionDims | None = None,
    k: int = 1,
    include_encoder: bool = False,
) -> CostReport:
    """Forward FLOPs of one sequence.

    The count does not depend on separate visual QKV: visual rows are
    projected by other weights of the same shape.

    :param LlmDims llm: language model dims
    :param TokenLayout layout: the sequence
    :param MaskPolicy policy: the masking regime
    :param Conventions conventions: counting conventions
    :param VisionDims vision: prices the projector (and optionally encoder)
    :param int k: tapped depths feeding the projector
    :param bool include_encoder: price one encoder pass per image
    :returns: the report; flops parts are attention_projections,
        attention_scores, mlp, lm_head, projector and encoder
    :rtype: CostReport
    """
    conventions = conventions or Conventions()
    mac = conventions.mac_flops
    width, tokens = llm.hidden, layout.N

    kv_width = width if conventions.kv_width == "full" else llm.kv_width
    if conventions.causal_scores == "full":
        allowed = tokens * tokens
    else:
        priced = MaskPolicy.CAUSAL \
            if policy is MaskPolicy.NO_VISUAL_ATTENTION else policy
        allowed = expected_allowed_count(layout, priced)

    per_layer = {
        "attention_projections":
            mac * tokens * (2 * width * width + 2 * width * kv_width),
        # scores and value weighting, summed over heads
        "attention_scores": mac * 2 * allowed * width,
        "mlp": mac * conventions.mlp_matmuls * tokens * width *
        llm.intermediate,
    }

    flops = {name: llm.layers * value for name, value in per_layer.items()}
    flops["lm_head"] = mac * tokens * width * llm.vocab
    flops["projector"] = 0
    flops["encoder"] = 0
    if vision is not None and layout.n:
        flops["projector"] = mac * layout.n * (
            k * vision.hidden * width + width * width)
        if include_encoder:
            flops["encoder"] = encoder_flops(vision, mac)

    scenario = {
        "m": layout.m,
        "n": layout.n,
        "o": layout.o,
        "N": tokens,
        "policy": policy.value,
        "allowed_entries": allowed,
    }
    return CostReport(scenario=scenario, conventions=conventions,
                      flops=flops, per_layer=per_layer)


def render_flops_table(reports: dict[str, CostReport]) -> str:
    """Human table, one GFLOPs column per report (e.g. per policy)."""
    names = list(reports)
    rows: list[tuple[str, list[float]]] = [
        ("Attention (per layer)",
         [(r.per_layer["attention_projections"]
           + r.per_layer["attention_scores"]) / GIGA
          for r in reports.values()]),
        ("MLP block (per layer)",
         [r.per_layer["mlp"] / GIGA for r in reports.values()]),
        ("LM head", [r.flops["lm_head"] / GIGA for r in reports.values()]),
        ("Entire LLM", [r.llm_flops / GIGA for r in reports.values()]),
        ("Projector",
         [r.flops["projector"] / GIGA for r in reports.values()]),
        ("Encoder", [r.flops["encoder"] / GIGA for r in reports.values()]),
    ]

    width = max(len(label) for label, _ in rows)
    lines = [f"{'Module (GFLOPs)':<{width}}  "
             + "  ".join(f"{n:>12}" for n in names)]
    for label, values in rows:
        lines.append(f"{label:<{width}}  "
                     + "  ".join(f"{v:>12.1f}" for v in values))
    return "\n".join(lines)


def render_params_table(delta: dict[str, Any]) -> str:
    """Human table of a param_delta result, in billions."""
    return "\n".join([
        f"{'Baseline':<10}{delta['baseline'] / GIGA:>8.2f} B",
        f"{'Ours':<10}{delta['ours'] / GIGA:>8.2f} B",
        f"{'Delta':<10}{delta['delta_pct']:>+8.1f} %",
    ])
