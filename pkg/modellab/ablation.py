"""The ablation matrix: named variants trained side by side.

Each variant names the variant it builds on and the config changes it
makes, so "llavit" is "sep-qkv+bidir" with local/global taps, which is
"sep-qkv" with bidirectional visual attention, and so on down to
"baseline". The catalogue is resolved in dependency order.
"""
import concurrent.futures
import dataclasses
import logging
from typing import Any, Callable, Sequence

import numpy as np

from modellab import data, train
from modellab.lib import deps, utils
from modellab.masking import MaskPolicy
from modellab.mllm import ModelConfig

logger = logging.getLogger(__name__)

ConfigChange = Callable[[ModelConfig, ModelConfig], ModelConfig]


@dataclasses.dataclass(frozen=True)
class Variant:
    """A named change on top of another variant."""

    name: str
    base: str | None
    describe: str
    change: ConfigChange


def _single_tap(cfg: ModelConfig, reference: ModelConfig) -> ModelConfig:
    """The penultimate-layer connector."""
    del reference
    if cfg.vision is None:
        return cfg
    vision = dataclasses.replace(cfg.vision, taps=(cfg.vision.layers - 1,))
    return dataclasses.replace(
        cfg, vision=vision, separate_visual_qkv=False,
        policy=MaskPolicy.CAUSAL)


def _local_global(cfg: ModelConfig, reference: ModelConfig) -> ModelConfig:
    """Restore the multi-depth taps of the reference config."""
    if cfg.vision is None or reference.vision is None:
        return cfg
    vision = dataclasses.replace(cfg.vision, taps=reference.vision.taps)
    return dataclasses.replace(cfg, vision=vision)


def _separate_qkv(cfg: ModelConfig, _: ModelConfig) -> ModelConfig:
    return dataclasses.replace(cfg, separate_visual_qkv=True)


def _bidirectional(cfg: ModelConfig, _: ModelConfig) -> ModelConfig:
    return dataclasses.replace(cfg, policy=MaskPolicy.VISUAL_BIDIRECTIONAL)


def _no_visual_attention(cfg: ModelConfig, _: ModelConfig) -> ModelConfig:
    return dataclasses.replace(cfg, policy=MaskPolicy.NO_VISUAL_ATTENTION)


CATALOGUE: dict[str, Variant] = {
    variant.name: variant for variant in (
        Variant("baseline", None, "baseline", _single_tap),
        Variant("sep-qkv", "baseline", "+ separate visual QKV",
                _separate_qkv),
        Variant("sep-qkv+bidir", "sep-qkv", "+ bidirectional visual attention",
                _bidirectional),
        Variant("sep-qkv+local-global", "sep-qkv", "+ local/global features",
                _local_global),
        Variant("llavit", "sep-qkv+bidir", "all three mechanisms",
                _local_global),
        Variant("no-visual-attention", "baseline",
                "baseline without visual attention updates",
                _no_visual_attention),
    )
}

# rows of the comparison table, in order
TABLE_ROWS: tuple[str, ...] = (
    "baseline", "sep-qkv", "sep-qkv+bidir", "sep-qkv+local-global", "llavit",
)

ABLATION_ROW = "no-visual-attention"


def resolve_variants(
    names: Sequence[str],
    reference: ModelConfig,
) -> dict[str, ModelConfig]:
    """Configs of the named variants.

    :param Sequence[str] names: variants to resolve
    :param ModelConfig reference: the base config; its taps are the
        local/global taps
    :returns: config by variant name
    :raises ValueError: on an unknown variant
    """
    unknown = [n for n in names if n not in CATALOGUE]
    if unknown:
        raise ValueError(
            f"Unknown variants: {unknown}. Choose from {sorted(CATALOGUE)}")

    graph = deps.mapping_graph(
        {name: [v.base] if v.base else [] for name, v in CATALOGUE.items()})
    configs: dict[str, ModelConfig] = {}
    for name in deps.topological_sort(graph):
        variant = CATALOGUE[name]
        start = configs[variant.base] if variant.base else reference
        configs[name] = variant.change(start, reference)
    return {name: configs[name] for name in names}


@dataclasses.dataclass
class AblationRow:
    """Eval accuracy of one variant over the seeds."""

    variant: str
    describe: str
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def spread(self) -> tuple[float, float]:
        return float(np.min(self.accuracies)), float(np.max(self.accuracies))


@dataclasses.dataclass
class AblationTable:
    """The comparison table, one row per variant in run order."""

    seeds: list[int]
    rows: list[AblationRow]

    def row(self, variant: str) -> AblationRow:
        for row in self.rows:
            if row.variant == variant:
                return row
        raise ValueError(f"No row for variant {variant!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "seeds": self.seeds,
            "rows": [
                {
                    "variant": row.variant,
                    "accuracies": row.accuracies,
                    "mean": row.mean,
                    "min": row.spread[0],
                    "max": row.spread[1],
                }
                for row in self.rows
            ],
        }

    def render(self) -> str:
        """Plain-text table: variant, one column per seed, mean and range."""
        width = max(len(row.variant) for row in self.rows)
        header = [f"{'variant':<{width}}"]
        header += [f"seed {seed:>4}" for seed in self.seeds]
        header += ["    mean", "      range"]
        lines = ["  ".join(header)]
        for row in self.rows:
            cells = [f"{row.variant:<{width}}"]
            cells += [f"{acc:>9.3f}" for acc in row.accuracies]
            lo, hi = row.spread
            cells += [f"{row.mean:>8.3f}", f"{lo:.3f}-{hi:.3f}"]
            lines.append("  ".join(cells))
        return "\n".join(lines)


def run_ablation_matrix(
    reference: ModelConfig,
    stages: Sequence[train.StageSpec],
    dataset: Sequence[data.SynthSample],
    vocab: data.Vocab,
    seeds: Sequence[int],
    variants: Sequence[str] = TABLE_ROWS,
    metrics: train.MetricsLog | None = None,
) -> AblationTable:
    """Train and evaluate every variant with every seed.

    Every (variant, seed) run gets the same data and its own model, so the
    runs are independent; up to MODELLAB_THREADS of them run at once.

    :returns: one row per variant, in the order given
    :raises ValueError: with no seeds or an unknown variant
    """
    if not seeds:
        raise ValueError("The ablation matrix needs at least one seed")
    configs = resolve_variants(variants, reference)

    def run(job: tuple[str, int]) -> float:
        name, seed = job
        logger.info("Training variant %s with seed %d", name, seed)
        result = train.run_pipeline(
            configs[name], stages, dataset, vocab, seed, variant=name,
            metrics=metrics)
        return result.evaluation.accuracy

    jobs = [(name, seed) for name in variants for seed in seeds]
    with concurrent.futures.ThreadPoolExecutor(
            max_workers=utils.worker_threads()) as pool:
        accuracies = list(pool.map(run, jobs))

    rows = []
    for idx, name in enumerate(variants):
        per_seed = accuracies[idx * len(seeds):(idx + 1) * len(seeds)]
        rows.append(AblationRow(name, CATALOGUE[name].describe, per_seed))
    return AblationTable(list(seeds), rows)
