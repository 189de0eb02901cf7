"""Two-stage training: stage specs, AdamW, the schedule, evaluation.

Pre-training trains the projector (and visual QKV when the model has it) on
captions; fine-tuning trains the whole language model plus the projector on
questions. The vision encoder is never trained.
"""
import dataclasses
import hashlib
import json
import logging
import math
import pathlib
import threading
from typing import Any, Sequence

import numpy as np

from modellab import checkpoint, data, mllm
from modellab import tensor as T
from modellab.lib import utils
from modellab.mllm import EOS_ID, LLM_GROUPS, MllmModel, Sample
from modellab.tensor import NonFiniteError, Tensor

logger = logging.getLogger(__name__)

STAGES: tuple[str, ...] = ("pretrain", "finetune")

SCHEDULES: set[str] = {"cosine", "constant"}

VISUAL_QKV_LR = 2e-4


def trainable_groups(stage: str, separate_visual_qkv: bool) -> frozenset[str]:
    """Groups a stage trains.

    :raises ValueError: on an unknown stage name
    """
    if stage == "pretrain":
        groups = {"projector"}
        if separate_visual_qkv:
            groups.add("visual_qkv")
        return frozenset(groups)
    if stage == "finetune":
        groups = set(LLM_GROUPS) | {"projector"}
        if not separate_visual_qkv:
            groups.discard("visual_qkv")
        return frozenset(groups)
    raise ValueError(f"Unknown stage {stage!r}. Choose from {STAGES}")


@dataclasses.dataclass(frozen=True)
class StageSpec:
    """How one stage trains.

    trainable is derived from the stage name and the model when left None.
    lr_overrides replaces base_lr for whole groups.
    """

    name: str
    base_lr: float
    epochs: int = 1
    batch_size: int = 32
    warmup_fraction: float = 0.03
    schedule: str = "cosine"
    min_lr_factor: float = 0.0
    lr_overrides: dict[str, float] = dataclasses.field(
        default_factory=lambda: {"visual_qkv": VISUAL_QKV_LR})
    trainable: frozenset[str] | None = None

    def __post_init__(self) -> None:
        if self.name not in STAGES:
            raise ValueError(
                f"Unknown stage {self.name!r}. Choose from {STAGES}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError(
                f"epochs and batch_size must be positive: {self.epochs}, "
                f"{self.batch_size}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError(
                f"warmup_fraction must lie in [0, 1), got "
                f"{self.warmup_fraction}")
        if self.schedule not in SCHEDULES:
            raise ValueError(
                f"Unknown schedule {self.schedule!r}. Choose from "
                f"{sorted(SCHEDULES)}")
        if not 0.0 <= self.min_lr_factor <= 1.0:
            raise ValueError(
                f"min_lr_factor must lie in [0, 1], got {self.min_lr_factor}")
        unknown = set(self.lr_overrides) - set(mllm.GROUPS)
        if unknown:
            raise ValueError(
                f"lr_overrides name unknown groups: {sorted(unknown)}")

    def groups_for(self, model: MllmModel) -> frozenset[str]:
        if self.trainable is not None:
            return self.trainable
        return trainable_groups(self.name, model.cfg.separate_visual_qkv)

    def lr_for(self, group: str) -> float:
        return self.lr_overrides.get(group, self.base_lr)


def default_stage(name: str) -> StageSpec:
    """Desk-scale defaults for a stage: (base lr, epochs) per stage name."""
    recipe = {"pretrain": (1e-3, 2), "finetune": (3e-3, 8)}
    if name not in recipe:
        raise ValueError(f"Unknown stage {name!r}. Choose from {STAGES}")
    base_lr, epochs = recipe[name]
    return StageSpec(name=name, base_lr=base_lr, epochs=epochs)


def lr_factor(
    step: int,
    total: int,
    warmup_fraction: float,
    schedule: str = "cosine",
    min_factor: float = 0.0,
) -> float:
    """Multiplier on the learning rate at a 0-based step.

    Linear warmup over the first round(warmup_fraction * total) steps, then
    cosine decay that is exactly 1.0 on the first step after warmup and
    exactly min_factor on the final step.
    """
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside a run of {total} steps")
    if schedule == "constant":
        return 1.0

    warmup = int(round(warmup_fraction * total))
    if step < warmup:
        return (step + 1) / (warmup + 1)

    decay_steps = total - 1 - warmup
    if decay_steps <= 0:
        return 1.0
    progress = (step - warmup) / decay_steps
    return min_factor + (1.0 - min_factor) * 0.5 * (1.0 + math.cos(
        math.pi * progress))


class AdamW:
    """AdamW over a fixed set of named tensors.

    Moments exist only for the tensors it was built with; weight decay is
    decoupled from the gradient.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lrs: dict[str, float],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> None:
        missing = set(params) - set(lrs)
        if missing:
            raise ValueError(f"No learning rate for: {sorted(missing)}")
        self.params = params
        self.lrs = lrs
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.steps = 0
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {
            name: (np.zeros_like(p.data), np.zeros_like(p.data))
            for name, p in params.items()
        }

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def step(self, factor: float = 1.0) -> None:
        """One update with every learning rate scaled by factor."""
        self.steps += 1
        beta1, beta2 = self.betas
        correct1 = 1.0 - beta1 ** self.steps
        correct2 = 1.0 - beta2 ** self.steps

        for name, param in self.params.items():
            grad = param.grad if param.grad is not None \
                else np.zeros_like(param.data)
            first, second = self.moments[name]
            first = beta1 * first + (1.0 - beta1) * grad
            second = beta2 * second + (1.0 - beta2) * grad * grad
            self.moments[name] = (first, second)

            lr = self.lrs[name] * factor
            update = (first / correct1) / (np.sqrt(second / correct2)
                                           + self.eps)
            update = update + self.weight_decay * param.data
            # fresh array, the old one may still be referenced by a tape
            param.data = (param.data - lr * update).astype(T.DTYPE)


@dataclasses.dataclass
class MetricsLog:
    """JSON-lines metrics, flushed to disk in one atomic append."""

    path: pathlib.Path | None = None
    pending: list[dict[str, Any]] = dataclasses.field(default_factory=list)
    # shared by ablation workers
    lock: threading.Lock = dataclasses.field(
        default_factory=threading.Lock, repr=False, compare=False)

    def record(self, entry: dict[str, Any]) -> None:
        with self.lock:
            self.pending.append(entry)

    def flush(self) -> None:
        with self.lock:
            if self.path is not None and self.pending:
                utils.atomic_append(
                    self.path,
                    [json.dumps(e, sort_keys=True) for e in self.pending])
            self.pending.clear()


@dataclasses.dataclass
class RunReport:
    """What a stage did."""

    stage: str
    seed: int
    fingerprint: str
    losses: list[float] = dataclasses.field(default_factory=list)
    lr_log: list[dict[str, float]] = dataclasses.field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def fingerprint(cfg: mllm.ModelConfig, stage: StageSpec | None = None) -> str:
    """Short stable hash of a model config (and stage)."""
    payload: dict[str, Any] = {"model": cfg.to_dict()}
    if stage is not None:
        stage_dict = dataclasses.asdict(stage)
        if stage.trainable is not None:
            stage_dict["trainable"] = sorted(stage.trainable)
        payload["stage"] = stage_dict
    raw = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()[:12]


def _batches(
    count: int,
    batch_size: int,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    order = rng.permutation(count)
    return [order[i:i + batch_size] for i in range(0, count, batch_size)]


def run_stage(
    model: MllmModel,
    stage: StageSpec,
    samples: Sequence[Sample],
    seed: int,
    metrics: MetricsLog | None = None,
) -> RunReport:
    """Train one stage in place.

    :param MllmModel model: updated in place
    :param StageSpec stage: what to train and how
    :param Sequence[Sample] samples: training samples for this stage
    :param int seed: shuffling seed
    :param MetricsLog metrics: receives one record per step
    :returns: the per-step losses and learning rates
    :rtype: RunReport
    :raises NonFiniteError: if the loss stops being finite
    :raises ValueError: if the stage trains a group the model does not have
    """
    if not samples:
        raise ValueError(f"No samples to train the {stage.name} stage on")

    groups = stage.groups_for(model)
    model.set_trainable(groups)
    by_group = model.groups()
    empty = sorted(g for g in groups if not by_group[g])
    if empty:
        raise ValueError(
            f"The {stage.name} stage trains groups the model does not have: "
            f"{empty}")

    params, lrs = {}, {}
    for group in sorted(groups):
        for name, value in by_group[group].items():
            params[name] = value
            lrs[name] = stage.lr_for(group)
    optimizer = AdamW(params, lrs)

    rng = np.random.default_rng([seed, STAGES.index(stage.name)])
    plan = [batch for _ in range(stage.epochs)
            for batch in _batches(len(samples), stage.batch_size, rng)]
    report = RunReport(stage.name, seed, fingerprint(model.cfg, stage))
    logger.info(
        "Stage %s: %d steps, trainable %s", stage.name, len(plan),
        sorted(groups))

    for step, indices in enumerate(plan):
        factor = lr_factor(step, len(plan), stage.warmup_fraction,
                           stage.schedule, stage.min_lr_factor)
        lr_by_group = {g: stage.lr_for(g) * factor for g in sorted(groups)}

        optimizer.zero_grad()
        batch = mllm.assemble([samples[i] for i in indices], model.cfg)
        try:
            value = mllm.loss(mllm.forward(batch, model), batch)
            T.backward(value)
        except NonFiniteError as error:
            last = report.losses[-1] if report.losses else None
            raise NonFiniteError(
                f"Non-finite loss in stage {stage.name} at step {step + 1} "
                f"(last finite loss: {last}): {error}") from error

        optimizer.step(factor)
        report.losses.append(value.item())
        report.lr_log.append(lr_by_group)
        logger.info(
            "%s step %d/%d loss %.4f lr %s", stage.name, step + 1, len(plan),
            value.item(),
            " ".join(f"{g}={lr:.2e}" for g, lr in lr_by_group.items()))

        if metrics is not None:
            metrics.record({
                "step": step + 1,
                "stage": stage.name,
                "loss": value.item(),
                "lr_by_group": lr_by_group,
            })

    if metrics is not None:
        metrics.flush()
    return report


def _strip_eos(ids: Sequence[int]) -> list[int]:
    ids = list(ids)
    if EOS_ID in ids:
        ids = ids[:ids.index(EOS_ID)]
    return ids


@dataclasses.dataclass
class EvalResult:
    """Per-sample greedy answers and their exact-match accuracy."""

    records: list[dict[str, Any]]

    @property
    def accuracy(self) -> float:
        if not self.records:
            return 0.0
        return sum(r["correct"] for r in self.records) / len(self.records)


def evaluate(
    model: MllmModel,
    samples: Sequence[Sample],
    max_new: int | None = None,
    batch_size: int = 32,
) -> EvalResult:
    """Greedy-decode every sample and compare with its answer.

    Answers are compared without their EOS token; a prediction is correct
    only when every token matches.
    """
    records = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        width = max_new or max(len(s.answer) for s in chunk)
        outputs = mllm.generate_greedy(model, chunk, width)
        for offset, (sample, output) in enumerate(zip(chunk, outputs)):
            predicted = _strip_eos(output)
            expected = _strip_eos(sample.answer)
            records.append({
                "sample": start + offset,
                "predicted": predicted,
                "expected": expected,
                "correct": predicted == expected,
            })
    return EvalResult(records)


@dataclasses.dataclass
class PipelineResult:
    """A model trained through its stages and evaluated."""

    model: MllmModel
    reports: list[RunReport]
    evaluation: EvalResult


def run_pipeline(
    cfg: mllm.ModelConfig,
    stages: Sequence[StageSpec],
    dataset: Sequence[data.SynthSample],
    vocab: data.Vocab,
    seed: int,
    variant: str = "",
    metrics: MetricsLog | None = None,
    checkpoint_dir: pathlib.Path | None = None,
) -> PipelineResult:
    """Initialise a model, train it stage by stage and evaluate it.

    Pre-training sees captions of the train split, fine-tuning sees its
    questions; evaluation uses the questions of the eval split. A checkpoint
    is written after every stage when checkpoint_dir is given.
    """
    model = mllm.init_model(cfg, seed)
    train_split = data.split(dataset, "train")
    eval_split = data.split(dataset, "eval")

    reports = []
    for stage in stages:
        samples = [
            s.caption_sample(vocab) if stage.name == "pretrain"
            else s.qa_sample(vocab)
            for s in train_split
        ]
        reports.append(run_stage(model, stage, samples, seed, metrics))

        if checkpoint_dir is not None:
            meta = {"seed": seed, "stage": stage.name, "variant": variant}
            checkpoint.save(
                checkpoint_dir / f"{variant or 'model'}-{stage.name}.ckpt",
                model, meta)

    evaluation = evaluate(model, [s.qa_sample(vocab) for s in eval_split])
    logger.info(
        "Variant %s seed %d: eval accuracy %.3f", variant or "-", seed,
        evaluation.accuracy)

    if metrics is not None:
        metrics.record({
            "variant": variant,
            "seed": seed,
            "accuracy": evaluation.accuracy,
        })
        metrics.flush()

    return PipelineResult(model, reports, evaluation)
