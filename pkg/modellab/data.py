"""Synthetic grid-of-shapes dataset and its tokenizer.

Every image is a g x g grid of cells, each holding one coloured shape. A
colour is a one-hot channel, so colours are separable straight from the
pixels. Captions list every cell as "colour shape at r c"; questions ask
"colour at r c ?" and are answered by a single colour word.
"""
import concurrent.futures
import dataclasses
import hashlib
import json
import logging
import pathlib
from typing import Any, Iterable, Sequence

import numpy as np

from modellab.lib import utils
from modellab.mllm import BOS_ID, EOS_ID, Sample
from modellab.vision import VisionConfig

logger = logging.getLogger(__name__)

COLORS: tuple[str, ...] = (
    "red", "green", "blue", "yellow", "purple", "orange", "white", "black",
)

SHAPES: tuple[str, ...] = ("square", "disk", "cross", "bar")

# words that carry structure rather than content
PROMPT_WORDS: tuple[str, ...] = ("<sys>", "describe", "color", "at", "?")

SPLITS: tuple[str, ...] = ("train", "eval")

# largest grid side a single digit token can address
MAX_GRID = 10


class Vocab:
    """Word <-> id mapping of the synthetic language.

    ids 0, 1, 2 are pad, bos and eos; then the prompt words, digits, colours
    and shapes; filler words pad the table up to the requested size.
    """

    def __init__(self, size: int = 512) -> None:
        words = ["<pad>", "<bos>", "<eos>"]
        words += list(PROMPT_WORDS)
        words += [str(d) for d in range(MAX_GRID)]
        words += list(COLORS) + list(SHAPES)
        if size < len(words):
            raise ValueError(
                f"Vocab size {size} is smaller than the {len(words)} words "
                f"the task needs")
        words += [f"<w{i}>" for i in range(size - len(words))]

        self.words: tuple[str, ...] = tuple(words)
        self._ids = {word: idx for idx, word in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        if word not in self._ids:
            raise ValueError(f"Unknown word: {word!r}")
        return self._ids[word]

    def encode(self, words: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.id(word) for word in words)

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for idx in ids:
            if not 0 <= idx < len(self.words):
                raise ValueError(f"Token id out of range: {idx}")
            out.append(self.words[idx])
        return out


@dataclasses.dataclass(frozen=True)
class DataSpec:
    """What gen_dataset produces."""

    count: int = 768
    grid: int = 3
    palette: int = 6
    eval_fraction: float = 0.25

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError(f"count must be positive, got {self.count}")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ValueError(
                f"eval_fraction must lie in [0, 1), got {self.eval_fraction}")
        if self.n_eval < 1:
            raise ValueError(
                f"eval_fraction {self.eval_fraction} of {self.count} samples "
                f"leaves the eval split empty")

    @property
    def n_eval(self) -> int:
        return int(round(self.count * self.eval_fraction))


@dataclasses.dataclass(frozen=True, eq=False)
class SynthSample:
    """One generated image with its caption and a question about one cell.

    cells holds (colour, shape) per cell, row-major.
    """

    index: int
    image: np.ndarray
    cells: tuple[tuple[str, str], ...]
    row: int
    col: int
    caption: tuple[int, ...]
    question: tuple[int, ...]
    answer: tuple[int, ...]
    split: str
    image_hash: str

    @property
    def grid(self) -> int:
        return int(round(len(self.cells) ** 0.5))

    def caption_sample(self, vocab: Vocab) -> Sample:
        """Pre-training form: describe the image, the caption supervised."""
        return Sample(
            system=system_prompt(vocab),
            prompt=vocab.encode(["describe"]),
            answer=self.caption + (EOS_ID,),
            image=self.image,
        )

    def qa_sample(self, vocab: Vocab) -> Sample:
        """Fine-tuning form: the question, only the answer supervised."""
        return Sample(
            system=system_prompt(vocab),
            prompt=self.question,
            answer=self.answer,
            image=self.image,
        )

    def to_record(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "cells": [list(cell) for cell in self.cells],
            "row": self.row,
            "col": self.col,
            "split": self.split,
            "hash": self.image_hash,
        }


def system_prompt(vocab: Vocab) -> tuple[int, ...]:
    return (BOS_ID, vocab.id("<sys>"))


def _check_geometry(spec: DataSpec, vision: VisionConfig) -> None:
    """Raise ValueError when the grid cannot be drawn on these images."""
    if spec.palette < 1 or spec.palette > min(len(COLORS), vision.channels):
        raise ValueError(
            f"palette must lie in 1..{min(len(COLORS), vision.channels)} "
            f"(colours available, image channels), got {spec.palette}")
    if spec.grid < 1 or spec.grid > MAX_GRID:
        raise ValueError(f"grid must lie in 1..{MAX_GRID}, got {spec.grid}")
    if spec.grid ** 2 > vision.n_tokens:
        raise ValueError(
            f"A {spec.grid}x{spec.grid} grid needs more cells than the "
            f"{vision.n_tokens} image patches")
    if vision.image_size % spec.grid:
        raise ValueError(
            f"image_size {vision.image_size} is not divisible by grid "
            f"{spec.grid}")

    distinct = (spec.palette * len(SHAPES)) ** (spec.grid ** 2)
    if distinct < spec.count:
        raise ValueError(
            f"Only {distinct} distinct images exist for grid {spec.grid} and "
            f"palette {spec.palette}, {spec.count} requested")


def _shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean size x size stamp of a shape."""
    yy, xx = np.mgrid[0:size, 0:size]
    centre = (size - 1) / 2.0
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "disk":
        return (yy - centre) ** 2 + (xx - centre) ** 2 <= (size / 2.0) ** 2
    if shape == "cross":
        band = max(1, size // 4)
        return (np.abs(yy - centre) < band) | (np.abs(xx - centre) < band)
    if shape == "bar":
        return np.abs(yy - centre) < max(1, size // 4)
    raise ValueError(f"Unknown shape: {shape!r}")


def render(cells: Sequence[tuple[str, str]], vision: VisionConfig) \
        -> np.ndarray:
    """Draw a grid of cells as an [S, S, C] image."""
    grid = int(round(len(cells) ** 0.5))
    if grid * grid != len(cells):
        raise ValueError(f"{len(cells)} cells do not form a square grid")
    size = vision.image_size // grid

    image = np.zeros(
        (vision.image_size, vision.image_size, vision.channels),
        dtype=np.float32)
    for idx, (color, shape) in enumerate(cells):
        row, col = divmod(idx, grid)
        stamp = _shape_mask(shape, size)
        block = image[row * size:(row + 1) * size, col * size:(col + 1) * size]
        block[..., COLORS.index(color)][stamp] = 1.0
    return image


def image_hash(image: np.ndarray) -> str:
    digest = hashlib.sha256(np.ascontiguousarray(image).tobytes())
    return digest.hexdigest()[:16]


def caption_words(cells: Sequence[tuple[str, str]]) -> list[str]:
    grid = int(round(len(cells) ** 0.5))
    words = []
    for idx, (color, shape) in enumerate(cells):
        row, col = divmod(idx, grid)
        words += [color, shape, "at", str(row), str(col)]
    return words


def _build(
    vocab: Vocab,
    vision: VisionConfig,
    index: int,
    cells: tuple[tuple[str, str], ...],
    cell: int,
    split: str,
) -> SynthSample:
    grid = int(round(len(cells) ** 0.5))
    row, col = divmod(cell, grid)
    image = render(cells, vision)
    return SynthSample(
        index=index,
        image=image,
        cells=cells,
        row=row,
        col=col,
        caption=vocab.encode(caption_words(cells)),
        question=vocab.encode(["color", "at", str(row), str(col), "?"]),
        answer=(vocab.id(cells[cell][0]), EOS_ID),
        split=split,
        image_hash=image_hash(image),
    )


def gen_dataset(
    seed: int,
    spec: DataSpec,
    vision: VisionConfig,
    vocab: Vocab,
) -> list[SynthSample]:
    """Generate a deterministic dataset of distinct images.

    The layouts are drawn sequentially from the seed; rendering then runs on
    up to MODELLAB_THREADS workers, which does not change the result.

    :param int seed: RNG seed
    :param DataSpec spec: count, grid side, palette size, eval fraction
    :param VisionConfig vision: the image geometry
    :param Vocab vocab: the tokenizer
    :returns: samples in index order; the last round(count * eval_fraction)
        of a seeded permutation form the eval split
    :rtype: list[SynthSample]
    :raises ValueError: on infeasible geometry
    """
    _check_geometry(spec, vision)
    rng = np.random.default_rng(seed)
    colors, cells_per_image = COLORS[:spec.palette], spec.grid ** 2

    layouts: list[tuple[tuple[str, str], ...]] = []
    seen: set[tuple[tuple[str, str], ...]] = set()
    while len(layouts) < spec.count:
        picks = rng.integers(0, spec.palette, cells_per_image)
        shapes = rng.integers(0, len(SHAPES), cells_per_image)
        layout = tuple(
            (colors[c], SHAPES[s]) for c, s in zip(picks, shapes))
        if layout in seen:
            continue
        seen.add(layout)
        layouts.append(layout)

    questions = rng.integers(0, cells_per_image, spec.count)
    n_eval = spec.n_eval
    eval_ids = set(rng.permutation(spec.count)[spec.count - n_eval:].tolist())
    splits = ["eval" if i in eval_ids else "train" for i in range(spec.count)]

    with concurrent.futures.ThreadPoolExecutor(
            max_workers=utils.worker_threads()) as pool:
        samples = list(pool.map(
            lambda i: _build(vocab, vision, i, layouts[i],
                             int(questions[i]), splits[i]),
            range(spec.count)))

    logger.info(
        "Generated %d samples (%d eval) with seed %d",
        len(samples), n_eval, seed)
    return samples


def split(samples: Sequence[SynthSample], name: str) -> list[SynthSample]:
    """The samples of one split.

    :raises ValueError: on an unknown split name
    """
    if name not in SPLITS:
        raise ValueError(f"Unknown split {name!r}. Choose from {SPLITS}")
    return [s for s in samples if s.split == name]


def patch_colors(
    sample: SynthSample,
    vision: VisionConfig,
    vocab: Vocab,
) -> list[int]:
    """Colour word id of the cell every image patch lies in, row-major."""
    grid = sample.grid
    out = []
    for patch in range(vision.n_tokens):
        prow, pcol = divmod(patch, vision.grid)
        # patch centre in pixels, then the cell holding it
        y = (prow + 0.5) * vision.patch_size
        x = (pcol + 0.5) * vision.patch_size
        cell_size = vision.image_size / grid
        cell = int(y // cell_size) * grid + int(x // cell_size)
        out.append(vocab.id(sample.cells[cell][0]))
    return out


def save_dataset(
    filepath: pathlib.Path,
    samples: Sequence[SynthSample],
    header: dict[str, Any],
) -> None:
    """Write a dataset as JSON lines: the header, then one record per sample.

    Images are not stored; load_dataset redraws them from the cells.
    """
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(s.to_record(), sort_keys=True) for s in samples]
    utils.atomic_write(filepath, "".join(f"{line}\n" for line in lines))


def load_dataset(
    filepath: pathlib.Path,
    vision: VisionConfig,
    vocab: Vocab,
) -> tuple[dict[str, Any], list[SynthSample]]:
    """Read a dataset written by save_dataset.

    :returns: the header and the samples
    :raises ValueError: on a malformed file or a hash mismatch
    """
    lines = pathlib.Path(filepath).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"Empty dataset file: {filepath}")

    header = json.loads(lines[0])
    samples = []
    for line in lines[1:]:
        record = json.loads(line)
        cells = tuple((c, s) for c, s in record["cells"])
        grid = int(round(len(cells) ** 0.5))
        sample = _build(vocab, vision, record["index"], cells,
                        record["row"] * grid + record["col"], record["split"])
        if sample.image_hash != record["hash"]:
            raise ValueError(
                f"Sample {record['index']} does not redraw to its stored "
                f"image (hash {record['hash']}, got {sample.image_hash})")
        samples.append(sample)

    return header, samples
