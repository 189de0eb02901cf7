import pytest

from modellab import config
from modellab.config import ConfigError
from modellab.masking import MaskPolicy
from modellab.mllm import ModelConfig
from modellab.train import VISUAL_QKV_LR
from modellab.vision import VisionConfig


def test_from_dict__defaults():
    run = config.from_dict(None)

    assert run.model == ModelConfig()
    assert run.seed == 0
    assert run.pretrain.name == "pretrain"
    assert run.pretrain.base_lr == pytest.approx(1e-3)
    assert run.pretrain.epochs == 2
    assert run.finetune.base_lr == pytest.approx(3e-3)
    assert run.finetune.epochs == 8
    assert run.finetune.lr_for("visual_qkv") == VISUAL_QKV_LR
    assert run.data.count == 768
    assert run.data.n_eval == 192
    assert run.stages == (run.pretrain, run.finetune)


def test_from_dict__spellings():
    run = config.from_dict({
        "Model": {
            "dModel": 64,
            "SEPARATE_visual-QKV": True,
            "policy": "bidir",
            "vision": {"Taps": [2, 5], "image-size": 24},
        },
        "stage": {"finetune": {"baseLr": 1e-4, "BATCH_SIZE": 8}},
        "data": {"evalFraction": 0.5},
        "seed": 3,
    })

    assert run.model.d_model == 64
    assert run.model.separate_visual_qkv
    assert run.model.policy is MaskPolicy.VISUAL_BIDIRECTIONAL
    assert run.model.vision.taps == (2, 5)
    assert run.finetune.base_lr == pytest.approx(1e-4)
    assert run.finetune.batch_size == 8
    # untouched values keep their defaults
    assert run.finetune.epochs == 8
    assert run.pretrain.batch_size == 32
    assert run.data.eval_fraction == 0.5
    assert run.seed == 3


def test_from_dict__text_only_model():
    run = config.from_dict({"model": {"vision": None}})

    assert run.model.vision is None


def test_from_dict__lr_overrides():
    run = config.from_dict({
        "stage": {"pretrain": {"lr_overrides": {"projector": 5e-4}}}})

    assert run.pretrain.lr_for("projector") == pytest.approx(5e-4)
    assert run.pretrain.lr_for("visual_qkv") == run.pretrain.base_lr


def test_from_dict__duplicate_key():
    with pytest.raises(ConfigError) as err:
        config.from_dict({"model": {"d_model": 64, "dModel": 32}})

    assert str(err.value) == \
        "Each key can only be used once. Offending key: dModel"


@pytest.mark.parametrize("doc,message", [
    ({"modle": {}}, "'modle' is an invalid key for the run config"),
    ({"model": {"width": 3}}, "'width' is an invalid key for model"),
    ({"model": {"vision": {"depth": 3}}},
     "'depth' is an invalid key for model.vision"),
    ({"stage": {"warmup": {}}}, "'warmup' is an invalid key for stage"),
    ({"stage": {"pretrain": {"lr": 1}}},
     "'lr' is an invalid key for stage.pretrain"),
])
def test_from_dict__unknown_key(doc, message):
    with pytest.raises(ConfigError) as err:
        config.from_dict(doc)

    assert str(err.value) == message


@pytest.mark.parametrize("doc", [
    {"model": {"policy": "prefix-lm"}},
    {"model": {"heads": 3}},
    {"stage": {"finetune": {"schedule": "linear"}}},
    {"stage": {"pretrain": {"lr_overrides": {"decoder": 1e-3}}}},
    {"data": {"eval_fraction": 1.5}},
    {"data": {"eval_fraction": 0}},
    {"model": {"vision": {"taps": [9]}}},
])
def test_from_dict__invalid_value(doc):
    with pytest.raises(ConfigError) as err:
        config.from_dict(doc)

    assert str(err.value).startswith("Invalid run config: ")


@pytest.mark.parametrize("seed", [-1, "3", True, 1.5])
def test_from_dict__invalid_seed(seed):
    with pytest.raises(ConfigError) as err:
        config.from_dict({"seed": seed})

    assert "seed must be a non-negative integer" in str(err.value)


@pytest.mark.parametrize("doc", [[1, 2], "model"])
def test_from_dict__not_a_mapping(doc):
    with pytest.raises(ConfigError):
        config.from_dict(doc)


def test_from_dict__section_not_a_mapping():
    with pytest.raises(ConfigError) as err:
        config.from_dict({"model": [1]})

    assert str(err.value) == "Section model must be a mapping"


def test_load__file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(
        "model:\n"
        "  layers: 2\n"
        "  vision:\n"
        "    taps: [6]\n"
        "stage:\n"
        "  pretrain:\n"
        "    schedule: constant\n"
        "seed: 9\n")

    run = config.load(path)

    assert run.model.layers == 2
    assert run.model.vision == VisionConfig(taps=(6,))
    assert run.pretrain.schedule == "constant"
    assert run.seed == 9


def test_load__none_gives_defaults():
    assert config.load(None) == config.from_dict({})


def test_load__missing_file(tmp_path):
    path = tmp_path / "nope.yaml"

    with pytest.raises(ConfigError) as err:
        config.load(path)

    assert str(err.value) == f"Config file not found: {path}"


def test_load__unparsable_file(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("model: [unclosed\n")

    with pytest.raises(ConfigError) as err:
        config.load(path)

    assert str(err.value).startswith(f"Cannot parse {path}")


@pytest.mark.parametrize("key,expected", [
    ("vocab_size", "vocab_size"),
    ("VocabSize", "vocab_size"),
    ("rope-base", "rope_base"),
    ("QKV_BIAS", "qkv_bias"),
])
def test_resolve_key__canonical(key, expected):
    valid = {"vocab_size", "rope_base", "qkv_bias"}

    assert config.resolve_key(key, valid, "model") == expected
