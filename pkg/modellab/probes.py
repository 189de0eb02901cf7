"""Logit-lens probes over the visual tokens.

The input lens compares every visual token entering the language model with
every row of the word-embedding table (cosine similarity). The output lens
reads the next-word distribution the LM head assigns at every visual
position. Both report the top-k words per visual token together with the
patch-grid cell the token came from.
"""
import dataclasses
import json
import logging
from typing import Any, Sequence

import numpy as np

from modellab import mllm
from modellab.mllm import AssembledBatch, MllmModel

logger = logging.getLogger(__name__)

LENSES: tuple[str, ...] = ("input", "output")

# pixels per patch cell in the PPM overlay
CELL_PIXELS = 8


@dataclasses.dataclass(frozen=True)
class LensEntry:
    """Top-k words of one visual token."""

    token: int
    grid: tuple[int, int]
    top: tuple[tuple[int, float], ...]


@dataclasses.dataclass
class LensReport:
    """Per-visual-token top-k words, from one lens."""

    lens: str
    k: int
    grid_side: int
    entries: list[LensEntry]

    def to_dict(self) -> dict[str, Any]:
        return {
            "lens": self.lens,
            "k": self.k,
            "grid_side": self.grid_side,
            "entries": [
                {
                    "token": entry.token,
                    "grid": list(entry.grid),
                    "top": [[word, score] for word, score in entry.top],
                }
                for entry in self.entries
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def top1(self) -> list[int]:
        return [entry.top[0][0] for entry in self.entries]


def grid_of(token: int, grid_side: int) -> tuple[int, int]:
    """Row-major patch grid cell of a visual token."""
    return divmod(token, grid_side)


def _grid_side(model: MllmModel, batch: AssembledBatch) -> int:
    if model.cfg.vision is not None:
        return model.cfg.vision.grid
    return max(1, int(round(batch.layout.n ** 0.5)))


def _report(
    lens: str,
    k: int,
    grid_side: int,
    tops: Sequence[list[tuple[int, float]]],
) -> LensReport:
    entries = [
        LensEntry(token, grid_of(token, grid_side), tuple(top))
        for token, top in enumerate(tops)
    ]
    return LensReport(lens, k, grid_side, entries)


def cosine_scores(vectors: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Cosine similarity of every vector with every table row.

    A zero vector or row scores 0 against everything.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    table = np.asarray(table, dtype=np.float64)
    v_norm = np.linalg.norm(vectors, axis=-1, keepdims=True)
    t_norm = np.linalg.norm(table, axis=-1, keepdims=True)
    dots = vectors @ table.T
    denom = v_norm * t_norm.T
    scores = np.divide(dots, denom, out=np.zeros_like(dots),
                       where=denom > 0)
    return np.clip(scores, -1.0, 1.0)


def input_lens(
    model: MllmModel,
    batch: AssembledBatch,
    k: int,
    sample: int = 0,
) -> LensReport:
    """Top-k words by cosine similarity with each input visual token.

    :param MllmModel model: the model
    :param AssembledBatch batch: must hold visual tokens
    :param int k: words per token
    :param int sample: which sample of the batch to probe
    :raises ValueError: without visual tokens or with k out of range
    """
    if batch.layout.n < 1:
        raise ValueError("The input lens needs at least one visual token")
    if not 1 <= k <= model.cfg.vocab_size:
        raise ValueError(
            f"k must lie in 1..{model.cfg.vocab_size}, got {k}")

    start, stop = batch.layout.visual_span
    visual = mllm.embed(model, batch).data[sample, start:stop]
    scores = cosine_scores(visual, model.embed.data)
    tops = [mllm.top_k(row, k) for row in scores]
    return _report("input", k, _grid_side(model, batch), tops)


def output_lens(
    model: MllmModel,
    batch: AssembledBatch,
    k: int,
    sample: int = 0,
) -> LensReport:
    """Top-k next-word probabilities at each visual position.

    Scores are exactly those of mllm.logit_lens_output.
    """
    tops = mllm.logit_lens_output(model, batch, k)[sample]
    return _report("output", k, _grid_side(model, batch), tops)


def translation_accuracy(report: LensReport, expected: Sequence[int]) -> float:
    """Fraction of visual tokens whose top-1 word is the expected word.

    :raises ValueError: if expected does not give one word per token
    """
    if len(expected) != len(report.entries):
        raise ValueError(
            f"Need one expected word per visual token: {len(expected)} for "
            f"{len(report.entries)} tokens")
    hits = sum(top == want for top, want in zip(report.top1(), expected))
    return hits / len(expected)


def render_ppm(report: LensReport) -> bytes:
    """Binary P6 overlay of the patch grid, brightness = top-1 score.

    Cosine scores map [-1, 1] onto [0, 255], probabilities map [0, 1].
    """
    side = report.grid_side
    intensity = np.zeros((side, side), dtype=np.float64)
    for entry in report.entries:
        score = entry.top[0][1]
        if report.lens == "input":
            score = (score + 1.0) / 2.0
        intensity[entry.grid] = score

    pixels = np.clip(np.round(intensity * 255.0), 0, 255).astype(np.uint8)
    pixels = np.kron(pixels, np.ones((CELL_PIXELS, CELL_PIXELS),
                                     dtype=np.uint8))
    rgb = np.repeat(pixels[..., None], 3, axis=-1)

    size = side * CELL_PIXELS
    header = f"P6\n{size} {size}\n255\n".encode("ascii")
    return header + rgb.tobytes()
