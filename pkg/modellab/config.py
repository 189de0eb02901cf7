"""Load run configs.

A run config is a YAML file with up to four sections:

    model:      architecture, plus a nested "vision" block
    stage:      "pretrain" and "finetune" blocks
    data:       synthetic dataset geometry
    seed:       an integer

Every section starts from defaults and user values overwrite them. Keys are
case and separator insensitive ("baseLr", "base-lr" and "BASE_LR" are all
"base_lr"), but naming the same key twice is an error.
"""
import dataclasses
import logging
import pathlib
from typing import Any, TypedDict

from ruamel.yaml import YAML
from ruamel.yaml.error import YAMLError

from modellab.data import DataSpec
from modellab.lib import utils
from modellab.masking import MaskPolicy
from modellab.mllm import ModelConfig
from modellab.train import StageSpec, default_stage
from modellab.vision import VisionConfig

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """The run config is invalid."""


class VisionSection(TypedDict):
    """Vision encoder properties."""

    image_size: int
    patch_size: int
    channels: int
    d_model: int
    layers: int
    heads: int
    mlp_hidden: int
    taps: list[int]


class ModelSection(TypedDict):
    """Language model properties."""

    vocab_size: int
    d_model: int
    layers: int
    heads: int
    mlp_hidden: int
    policy: str
    separate_visual_qkv: bool
    rope_base: float
    qkv_bias: bool
    vision: VisionSection | None


class StageSection(TypedDict):
    """One training stage."""

    base_lr: float
    epochs: int
    batch_size: int
    warmup_fraction: float
    schedule: str
    min_lr_factor: float
    lr_overrides: dict[str, float]


class DataSection(TypedDict):
    """Dataset geometry."""

    count: int
    grid: int
    palette: int
    eval_fraction: float


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """A fully resolved run config."""

    model: ModelConfig
    pretrain: StageSpec
    finetune: StageSpec
    data: DataSpec
    seed: int

    @property
    def stages(self) -> tuple[StageSpec, StageSpec]:
        return (self.pretrain, self.finetune)


# every word a config key can be made of
LANG: list[str] = [
    "base", "batch", "bias", "channels", "count", "d", "data", "epochs",
    "eval", "factor", "finetune", "fraction", "grid", "heads", "hidden",
    "image", "layers", "lr", "min", "mlp", "model", "overrides", "palette",
    "patch", "policy", "pretrain", "qkv", "rope", "schedule", "seed",
    "separate", "size", "stage", "taps", "visual", "vision", "vocab",
    "warmup",
]


def _default_vision() -> VisionSection:
    cfg = VisionConfig()
    return {
        "image_size": cfg.image_size,
        "patch_size": cfg.patch_size,
        "channels": cfg.channels,
        "d_model": cfg.d_model,
        "layers": cfg.layers,
        "heads": cfg.heads,
        "mlp_hidden": cfg.mlp_hidden,
        "taps": list(cfg.taps),
    }


def _default_model() -> ModelSection:
    """Model section with the desk-scale defaults.

    :returns: defaults every user value overwrites
    :rtype: ModelSection
    """
    cfg = ModelConfig()
    return {
        "vocab_size": cfg.vocab_size,
        "d_model": cfg.d_model,
        "layers": cfg.layers,
        "heads": cfg.heads,
        "mlp_hidden": cfg.mlp_hidden,
        "policy": cfg.policy.value,
        "separate_visual_qkv": cfg.separate_visual_qkv,
        "rope_base": cfg.rope_base,
        "qkv_bias": cfg.qkv_bias,
        "vision": _default_vision(),
    }


def _default_stage(name: str) -> StageSection:
    spec = default_stage(name)
    return {
        "base_lr": spec.base_lr,
        "epochs": spec.epochs,
        "batch_size": spec.batch_size,
        "warmup_fraction": spec.warmup_fraction,
        "schedule": spec.schedule,
        "min_lr_factor": spec.min_lr_factor,
        "lr_overrides": dict(spec.lr_overrides),
    }


def _default_data() -> DataSection:
    spec = DataSpec()
    return {
        "count": spec.count,
        "grid": spec.grid,
        "palette": spec.palette,
        "eval_fraction": spec.eval_fraction,
    }


def resolve_key(key: str, valid: set[str], section: str) -> str:
    """Map a user spelling of a key onto its canonical name.

    :param str key: the key as written
    :param set[str] valid: canonical keys of the section
    :param str section: section name, for the error message
    :returns: the canonical key
    :rtype: str
    :raises ConfigError: if the key is not a key of the section
    """
    words = utils.key_validator(str(key), LANG)
    canonical = "_".join(words)
    if canonical not in valid:
        raise ConfigError(f"'{key}' is an invalid key for {section}")
    return canonical


def _merge(
    defaults: dict[str, Any],
    incoming: Any,
    section: str,
) -> dict[str, Any]:
    """Overwrite defaults with the user's values, key by key.

    :raises ConfigError: on a non-mapping section, unknown or repeated keys
    """
    if incoming is None:
        return defaults
    if not isinstance(incoming, dict):
        raise ConfigError(f"Section {section} must be a mapping")

    # prevent users defining the same key twice in different spellings
    key_tracker: set[str] = set()
    for key, value in incoming.items():
        canonical = resolve_key(key, set(defaults), section)
        if canonical in key_tracker:
            raise ConfigError(
                f"Each key can only be used once. Offending key: {key}")
        key_tracker.add(canonical)
        defaults[canonical] = value

    return defaults


def _model_config(section: ModelSection) -> ModelConfig:
    vision = section["vision"]
    vision_cfg = None
    if vision is not None:
        vision = _merge(_default_vision(), vision, "model.vision")
        vision_cfg = VisionConfig(**{**vision, "taps": tuple(vision["taps"])})

    return ModelConfig(
        vocab_size=section["vocab_size"],
        d_model=section["d_model"],
        layers=section["layers"],
        heads=section["heads"],
        mlp_hidden=section["mlp_hidden"],
        policy=MaskPolicy.parse(str(section["policy"])),
        separate_visual_qkv=bool(section["separate_visual_qkv"]),
        rope_base=float(section["rope_base"]),
        qkv_bias=bool(section["qkv_bias"]),
        vision=vision_cfg,
    )


def _stage_spec(name: str, section: StageSection) -> StageSpec:
    overrides = section["lr_overrides"] or {}
    if not isinstance(overrides, dict):
        raise ConfigError(f"stage.{name}.lr_overrides must be a mapping")
    return StageSpec(
        name=name,
        base_lr=float(section["base_lr"]),
        epochs=int(section["epochs"]),
        batch_size=int(section["batch_size"]),
        warmup_fraction=float(section["warmup_fraction"]),
        schedule=str(section["schedule"]),
        min_lr_factor=float(section["min_lr_factor"]),
        lr_overrides={str(k): float(v) for k, v in overrides.items()},
    )


def from_dict(doc: Any) -> RunConfig:
    """Resolve a parsed run config document.

    :param Any doc: the parsed YAML, None for an empty file
    :returns: the resolved config
    :rtype: RunConfig
    :raises ConfigError: on any invalid key or value
    """
    doc = {} if doc is None else doc
    if not isinstance(doc, dict):
        raise ConfigError("A run config must be a mapping of sections")

    top = _merge(
        {"model": None, "stage": None, "data": None, "seed": 0}, doc,
        "the run config")
    stage = _merge({"pretrain": None, "finetune": None}, top["stage"],
                   "stage")

    try:
        model = _model_config(_merge(_default_model(), top["model"], "model"))
        pretrain = _stage_spec("pretrain", _merge(
            _default_stage("pretrain"), stage["pretrain"], "stage.pretrain"))
        finetune = _stage_spec("finetune", _merge(
            _default_stage("finetune"), stage["finetune"], "stage.finetune"))
        data = DataSpec(**_merge(_default_data(), top["data"], "data"))
        seed = top["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"seed must be a non-negative integer: {seed!r}")
    except ConfigError:
        raise
    except (TypeError, ValueError) as error:
        raise ConfigError(f"Invalid run config: {error}") from error

    return RunConfig(model, pretrain, finetune, data, seed)


def load(filepath: pathlib.Path | None) -> RunConfig:
    """Load a run config file; None gives the defaults.

    :raises ConfigError: if the file cannot be read or is invalid
    """
    if filepath is None:
        return from_dict({})

    filepath = pathlib.Path(filepath)
    if not filepath.exists():
        raise ConfigError(f"Config file not found: {filepath}")

    try:
        doc = YAML(typ="safe").load(filepath)
    except YAMLError as error:
        raise ConfigError(f"Cannot parse {filepath}: {error}") from error

    logger.debug("Loaded run config %s", filepath)
    return from_dict(doc)
