"""Testing modellab utility functions."""

import pytest

from modellab.lib import utils

# example "language" array, these are the words config keys are made of
LANG = [
    "base", "batch", "d", "epochs", "factor", "fraction", "lr", "min",
    "mlp", "model", "overrides", "policy", "qkv", "separate", "size",
    "visual", "vocab", "warmup",
]


@pytest.mark.parametrize("word,expected", [
    ("lr", ["lr"]),
    ("baseLr", ["base", "lr"]),
    ("base_lr", ["base", "lr"]),
    ("base-lr", ["base", "lr"]),
    ("BASE_LR", ["base", "lr"]),
    ("separateVisualQkv", ["separate", "visual", "qkv"]),
    ("SEPARATE_visual-QKV", ["separate", "visual", "qkv"]),
    ("minLrFactor", ["min", "lr", "factor"]),
    ("dmodel", ["d", "model"]),
    # bad spelling
    ("baseLrr", []),
    ("base lr", []),
    ("iDoNotExist", []),
    ("", []),
])
def test_key_validator__spellings(word, expected):
    assert utils.key_validator(word, LANG) == expected


def test_key_validator__longest_word_first():
    lang = ["base", "lr", "baselr"]

    assert utils.key_validator("base_lr", lang) == ["baselr"]


def test_key_validator__backtracks():
    """A longer word that leads nowhere is given up for a shorter one."""
    lang = ["lr", "lro", "overrides"]

    assert utils.key_validator("lroverrides", lang) == ["lr", "overrides"]


def test_atomic_write__creates_and_overwrites(tmp_path):
    target = tmp_path / "out.txt"

    utils.atomic_write(target, "first")
    utils.atomic_write(target, b"second")

    assert target.read_bytes() == b"second"
    # no temp files left behind
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]


def test_atomic_write__missing_directory(tmp_path):
    target = tmp_path / "missing" / "out.txt"

    with pytest.raises(OSError):
        utils.atomic_write(target, "payload")

    assert not target.exists()


def test_atomic_append__appends_lines(tmp_path):
    target = tmp_path / "metrics.jsonl"

    utils.atomic_append(target, ["a", "b"])
    utils.atomic_append(target, ["c"])

    assert target.read_text() == "a\nb\nc\n"


@pytest.mark.parametrize("raw,expected", [
    (None, 1),
    ("", 1),
    ("4", 4),
    (" 2 ", 2),
])
def test_worker_threads__valid(monkeypatch, raw, expected):
    if raw is None:
        monkeypatch.delenv(utils.THREADS_ENV, raising=False)
    else:
        monkeypatch.setenv(utils.THREADS_ENV, raw)

    assert utils.worker_threads() == expected


@pytest.mark.parametrize("raw", ["0", "-1", "two", "1.5"])
def test_worker_threads__invalid(monkeypatch, raw):
    monkeypatch.setenv(utils.THREADS_ENV, raw)

    with pytest.raises(ValueError) as err:
        utils.worker_threads()

    assert utils.THREADS_ENV in str(err.value)
