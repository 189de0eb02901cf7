"""Shared builders: a model small enough to train in a unit test."""

import pytest

from modellab import data
from modellab.mllm import ModelConfig
from modellab.vision import VisionConfig

TINY_VISION = VisionConfig(
    image_size=8,
    patch_size=4,
    channels=4,
    d_model=8,
    layers=2,
    heads=2,
    mlp_hidden=12,
    taps=(1, 2),
)

TINY_MODEL = ModelConfig(
    vocab_size=32,
    d_model=8,
    layers=2,
    heads=2,
    mlp_hidden=12,
    vision=TINY_VISION,
)

TINY_DATA = data.DataSpec(count=20, grid=2, palette=4, eval_fraction=0.2)


@pytest.fixture
def tiny_config():
    return TINY_MODEL


@pytest.fixture
def vocab():
    return data.Vocab(TINY_MODEL.vocab_size)


@pytest.fixture
def tiny_dataset(vocab):
    return data.gen_dataset(0, TINY_DATA, TINY_VISION, vocab)
