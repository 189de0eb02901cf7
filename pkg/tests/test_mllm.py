import dataclasses

import numpy as np
import pytest

from modellab import mllm
from modellab import tensor as T
from modellab.blocks import NORM_EPS
from modellab.masking import MaskPolicy
from modellab.mllm import ModelConfig, Sample

from conftest import TINY_MODEL, TINY_VISION


def _image(seed=0):
    return np.random.default_rng(seed).random((8, 8, 4)).astype(np.float32)


def _samples():
    return [
        Sample(system=(1, 3), prompt=(5, 6), answer=(20, 2), image=_image(0)),
        Sample(system=(1, 3), prompt=(5,), answer=(21, 22, 2),
               image=_image(1)),
    ]


def test_assemble__layout_and_loss_mask():
    batch = mllm.assemble(_samples(), TINY_MODEL)

    assert batch.layout == mllm.TokenLayout(2, 4, 4)
    np.testing.assert_array_equal(
        batch.user_ids, [[5, 6, 20, 2], [5, 21, 22, 2]])
    np.testing.assert_array_equal(batch.user_lengths, [4, 4])
    np.testing.assert_array_equal(
        batch.loss_mask,
        [[0, 0, 0, 0, 0, 0, 0, 0, 1, 1],
         [0, 0, 0, 0, 0, 0, 0, 1, 1, 1]])


def test_assemble__right_pads_user_segment():
    samples = _samples()
    samples[1] = dataclasses.replace(samples[1], answer=(21, 2))

    batch = mllm.assemble(samples, TINY_MODEL)

    np.testing.assert_array_equal(
        batch.user_ids, [[5, 6, 20, 2], [5, 21, 2, mllm.PAD_ID]])
    assert batch.loss_mask[1].sum() == 2


def test_assemble__text_only():
    batch = mllm.assemble(Sample((1,), (5, 6), (7,)), TINY_MODEL)

    assert batch.layout == mllm.TokenLayout(1, 0, 3)
    assert batch.images is None


@pytest.mark.parametrize("samples,message", [
    ([], "empty batch"),
    ([Sample((1,), (5,), (6,)), Sample((1, 3), (5,), (6,))],
     "system prompt length"),
    ([Sample((1,), (5,), (6,)), Sample((1,), (5,), (6,), _image())],
     "no sample has an image"),
    ([Sample((1,), (99,), (6,))], "out of range"),
])
def test_assemble__invalid(samples, message):
    with pytest.raises(ValueError) as err:
        mllm.assemble(samples, TINY_MODEL)

    assert message in str(err.value)


def test_shifted_targets__supervise_answer_tokens_only():
    batch = mllm.assemble(_samples()[:1], TINY_MODEL)

    targets = mllm.shifted_targets(batch)

    ignore = mllm.IGNORE_INDEX
    np.testing.assert_array_equal(
        targets[0],
        [ignore] * 7 + [20, 2, ignore])


def test_loss__only_answer_positions_count():
    model = mllm.init_model(TINY_MODEL, 0)
    batch = mllm.assemble(_samples(), TINY_MODEL)

    logits = mllm.forward(batch, model)
    value = mllm.loss(logits, batch).item()

    probs = mllm.softmax(logits.data.astype(np.float64))
    targets = mllm.shifted_targets(batch)
    rows, cols = np.nonzero(targets != mllm.IGNORE_INDEX)
    expected = -np.log(probs[rows, cols, targets[rows, cols]]).mean()
    assert value == pytest.approx(expected, rel=1e-4)
    assert len(rows) == 5


def test_groups__partition_every_tensor(tiny_config):
    cfg = dataclasses.replace(tiny_config, separate_visual_qkv=True)
    model = mllm.init_model(cfg, 0)

    groups = model.groups()

    assert set(groups) == set(mllm.GROUPS)
    names = [name for members in groups.values() for name in members]
    assert sorted(names) == sorted(model.named())
    assert "layers.1.attn.w_q_vis" in groups["visual_qkv"]
    assert "layers.0.attn.b_k_text" in groups["text_qkv"]
    assert "layers.0.attn.w_o" in groups["attn_out"]
    assert "layers.0.attn_norm" in groups["attn_out"]
    assert "layers.1.mlp.gate" in groups["mlp"]
    assert "final_norm" in groups["lm_head"]
    assert "projector.w_in" in groups["projector"]
    assert len(groups["visual_qkv"]) == 2 * 6


def test_groups__no_visual_qkv_without_routing(tiny_config):
    model = mllm.init_model(tiny_config, 0)

    assert model.groups()["visual_qkv"] == {}


def test_group_of__unknown_name():
    with pytest.raises(ValueError) as err:
        mllm.group_of("layers.0.attn.w_z")

    assert str(err.value) == \
        "Parameter 'layers.0.attn.w_z' belongs to no group"


def test_set_trainable__freezes_everything_else(tiny_config):
    model = mllm.init_model(tiny_config, 0)

    model.set_trainable({"projector"})

    for group, members in model.groups().items():
        for value in members.values():
            assert value.requires_grad == (group == "projector")


@pytest.mark.parametrize("groups,message", [
    ({"encoder"}, "never trainable"),
    ({"decoder"}, "Unknown parameter groups"),
])
def test_set_trainable__invalid(tiny_config, groups, message):
    model = mllm.init_model(tiny_config, 0)

    with pytest.raises(ValueError) as err:
        model.set_trainable(groups)

    assert message in str(err.value)


def test_forward__gradients_match_finite_differences(tiny_config):
    cfg = dataclasses.replace(
        tiny_config, separate_visual_qkv=True,
        policy=MaskPolicy.VISUAL_BIDIRECTIONAL)
    model = mllm.init_model(cfg, 0)
    named = model.named()
    for name in ("layers.0.attn.w_q_vis", "layers.1.attn.b_v_text"):
        named[name].data[...] = np.random.default_rng(1).normal(
            0.0, 0.3, named[name].shape)
    model.set_trainable({"embed", "text_qkv", "visual_qkv", "attn_out",
                         "mlp", "lm_head", "projector"})
    batch = mllm.assemble(_samples(), cfg)

    def loss():
        return mllm.loss(mllm.forward(batch, model), batch)

    T.backward(loss())

    for name in ("layers.0.attn.w_q_vis", "layers.1.attn.b_v_text",
                 "projector.b_in", "final_norm"):
        leaf = named[name]
        np.testing.assert_allclose(
            leaf.grad, T.numeric_grad(loss, leaf), rtol=1e-2, atol=1e-3,
            err_msg=name)


def _random_samples(rng, count):
    samples = []
    for _ in range(count):
        prompt = tuple(int(t) for t in rng.integers(3, 32, rng.integers(1, 4)))
        answer = tuple(int(t) for t in rng.integers(3, 32, rng.integers(0, 3)))
        samples.append(Sample(
            system=(1, 3), prompt=prompt, answer=answer + (mllm.EOS_ID,),
            image=rng.random((8, 8, 4)).astype(np.float32)))
    return samples


@pytest.mark.parametrize("policy", [
    MaskPolicy.CAUSAL,
    MaskPolicy.VISUAL_BIDIRECTIONAL,
])
def test_init_model__routing_is_free_at_init(tiny_config, policy):
    """Copy-initialised visual QKV gives the baseline's logits exactly."""
    base_cfg = dataclasses.replace(tiny_config, policy=policy)
    baseline = mllm.init_model(base_cfg, 3)
    routed = mllm.init_model(
        dataclasses.replace(base_cfg, separate_visual_qkv=True), 3)
    copied = mllm.init_model(base_cfg, 3)
    copied.add_visual_qkv()
    assert copied.cfg.separate_visual_qkv

    rng = np.random.default_rng(11)
    for _ in range(24):
        batch = mllm.assemble(_random_samples(rng, 3), base_cfg)
        expected = mllm.forward(batch, baseline).data
        for model in (routed, copied):
            np.testing.assert_allclose(
                mllm.forward(batch, model).data, expected, rtol=0.0,
                atol=1e-6)

    baseline.add_visual_qkv()
    assert baseline.cfg.separate_visual_qkv
    np.testing.assert_array_equal(
        mllm.forward(batch, baseline).data, expected)


def test_init_model__single_tap_shares_llm_weights(tiny_config):
    one_tap = dataclasses.replace(
        tiny_config, vision=dataclasses.replace(TINY_VISION, taps=(2,)))

    a = mllm.init_model(tiny_config, 5).named()
    b = mllm.init_model(one_tap, 5).named()

    for name in ("embed", "layers.1.mlp.up", "lm_head",
                 "encoder.blocks.0.attn.w_q_text"):
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert a["projector.w_in"].shape == (16, 8)
    assert b["projector.w_in"].shape == (8, 8)


def test_forward__trace_records_every_layer(tiny_config):
    model = mllm.init_model(tiny_config, 0)
    batch = mllm.assemble(_samples(), tiny_config)
    trace = mllm.ForwardTrace()

    logits = mllm.forward(batch, model, trace)

    assert logits.shape == (2, 10, 32)
    assert len(trace.inputs) == len(trace.after_attn) == \
        len(trace.after_mlp) == 2
    np.testing.assert_array_equal(trace.inputs[1].data,
                                  trace.after_mlp[0].data)


def _lively_model(cfg, seed=0):
    """A model whose LLM weights are large enough for small changes to
    reach the logits."""
    model = mllm.init_model(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for name, value in model.named().items():
        if value.data.ndim == 2 and not name.startswith("encoder."):
            value.data[...] = rng.normal(0.0, 0.3, value.shape)
    return model


def _row_change(a, b):
    """Largest absolute change per [batch, row], over the vocab."""
    return np.abs(a - b).max(axis=-1)


def test_forward__no_visual_attention_leaves_visual_rows(tiny_config):
    cfg = dataclasses.replace(
        tiny_config, policy=MaskPolicy.NO_VISUAL_ATTENTION)
    model = _lively_model(cfg)
    batch = mllm.assemble(_samples(), cfg)
    trace = mllm.ForwardTrace()

    mllm.forward(batch, model, trace)

    start, stop = batch.layout.visual_span
    for layer in range(cfg.layers):
        before = trace.inputs[layer].data
        after = trace.after_attn[layer].data
        np.testing.assert_allclose(
            after[:, start:stop], before[:, start:stop], rtol=0.0,
            atol=1e-6, err_msg=f"layer {layer}")
        # text rows still get an attention update
        assert np.abs(after[:, stop:] - before[:, stop:]).max() > 1e-6


def test_forward__no_visual_attention_text_still_sees_image(tiny_config):
    cfg = dataclasses.replace(
        tiny_config, policy=MaskPolicy.NO_VISUAL_ATTENTION)
    model = _lively_model(cfg)
    samples = _samples()
    other = [dataclasses.replace(s, image=_image(10 + i))
             for i, s in enumerate(samples)]

    logits = mllm.forward(mllm.assemble(samples, cfg), model).data
    changed = mllm.forward(mllm.assemble(other, cfg), model).data

    stop = mllm.assemble(samples, cfg).layout.visual_span[1]
    assert (_row_change(logits, changed)[:, stop:] > 1e-6).all()


@pytest.mark.parametrize("position", [2, 6, 7, 9])
def test_forward__causal_rows_ignore_later_tokens(tiny_config, position):
    model = _lively_model(tiny_config)
    batch = mllm.assemble(_samples(), tiny_config)
    # layout (2, 4, 4): visual rows 2..5, user rows 6..9
    if position == 2:
        edited = dataclasses.replace(batch, images=batch.images[::-1].copy())
    else:
        user_ids = batch.user_ids.copy()
        user_ids[:, position - 6] = 30
        edited = dataclasses.replace(batch, user_ids=user_ids)

    logits = mllm.forward(batch, model).data
    changed = mllm.forward(edited, model).data

    np.testing.assert_allclose(
        changed[:, :position], logits[:, :position], rtol=0.0, atol=1e-6)
    assert (_row_change(logits, changed)[:, position] > 1e-6).all()


@pytest.mark.parametrize("policy,visual_row,changed_rows", [
    (MaskPolicy.VISUAL_BIDIRECTIONAL, 0, range(2, 10)),
    (MaskPolicy.VISUAL_BIDIRECTIONAL, 3, range(2, 10)),
    (MaskPolicy.CAUSAL, 0, range(2, 10)),
    (MaskPolicy.CAUSAL, 3, range(5, 10)),
])
def test_decode__visual_token_reach(tiny_config, policy, visual_row,
                                    changed_rows):
    cfg = dataclasses.replace(tiny_config, policy=policy)
    model = _lively_model(cfg)
    batch = mllm.assemble(_samples(), cfg)
    visual = mllm.visual_tokens(model, batch.images)
    bumped = visual.data.copy()
    bumped[:, visual_row] += 0.5

    logits = mllm.decode(
        model, mllm.embed(model, batch, visual), batch.layout).data
    changed = mllm.decode(
        model, mllm.embed(model, batch, T.Tensor(bumped)), batch.layout).data

    change = _row_change(logits, changed)
    untouched = [row for row in range(10) if row not in changed_rows]
    assert (change[:, list(changed_rows)] > 1e-6).all()
    np.testing.assert_allclose(
        changed[:, untouched], logits[:, untouched], rtol=0.0, atol=1e-6)


def test_forward__no_layers_is_norm_and_head(tiny_config):
    cfg = dataclasses.replace(tiny_config, layers=0)
    model = mllm.init_model(cfg, 2)
    batch = mllm.assemble(_samples(), cfg)

    logits = mllm.forward(batch, model).data

    x = mllm.embed(model, batch).data.astype(np.float64)
    normed = x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + NORM_EPS)
    expected = (normed * model.final_norm.data) @ model.lm_head.data
    np.testing.assert_allclose(logits, expected, rtol=1e-4, atol=1e-6)


def test_loss__uniform_logits_cost_log_vocab():
    cfg = ModelConfig(vocab_size=4, d_model=8, layers=1, heads=2,
                      mlp_hidden=12, vision=None)
    model = mllm.init_model(cfg, 0)
    model.lm_head.data[...] = 0.0
    batch = mllm.assemble(Sample((1,), (3,), (3, 2)), cfg)

    value = mllm.loss(mllm.forward(batch, model), batch).item()

    assert value == pytest.approx(np.log(4.0), rel=1e-5)


def test_generate_greedy__padding_does_not_change_output(tiny_config):
    model = mllm.init_model(tiny_config, 7)
    short = Sample((1, 3), (5,), (), _image(2))
    long = Sample((1, 3), (5, 6, 7, 8, 9), (), _image(3))

    alone = mllm.generate_greedy(model, short, 4)
    batched = mllm.generate_greedy(model, [short, long], 4)

    assert batched[0] == alone[0]
    assert all(len(out) <= 4 for out in batched)
    for out in batched:
        if mllm.EOS_ID in out:
            assert out.index(mllm.EOS_ID) == len(out) - 1


def test_generate_greedy__first_token_is_argmax(tiny_config):
    model = mllm.init_model(tiny_config, 7)
    prompt = Sample((1, 3), (5, 6), (), _image(4))

    out = mllm.generate_greedy(model, prompt, 1)

    logits = mllm.forward(mllm.assemble(prompt, tiny_config), model).data
    assert out == [[int(np.argmax(logits[0, -1]))]]


def test_generate_greedy__max_new():
    with pytest.raises(ValueError):
        mllm.generate_greedy(None, [], 0)


@pytest.mark.parametrize("k", [1, 3, 32])
def test_logit_lens_output__matches_softmax_oracle(tiny_config, k):
    model = mllm.init_model(tiny_config, 1)
    batch = mllm.assemble(_samples(), tiny_config)

    lens = mllm.logit_lens_output(model, batch, k)

    probs = mllm.softmax(mllm.forward(batch, model).data[:, 2:6])
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, rtol=1e-5)
    assert len(lens) == 2
    for sample, sample_probs in zip(lens, probs):
        assert len(sample) == 4
        for entry, token_probs in zip(sample, sample_probs):
            order = np.argsort(-token_probs, kind="stable")[:k]
            assert [idx for idx, _ in entry] == order.tolist()
            np.testing.assert_allclose(
                [p for _, p in entry], token_probs[order], rtol=1e-5)


def test_logit_lens_output__invalid(tiny_config):
    model = mllm.init_model(tiny_config, 1)
    text_only = mllm.assemble(Sample((1,), (5,), (6,)), tiny_config)
    batch = mllm.assemble(_samples(), tiny_config)

    with pytest.raises(ValueError):
        mllm.logit_lens_output(model, text_only, 1)
    with pytest.raises(ValueError):
        mllm.logit_lens_output(model, batch, 33)


def test_top_k__ties_go_to_lower_id():
    scores = np.array([0.1, 0.4, 0.4, 0.1])

    assert mllm.top_k(scores, 3) == [(1, 0.4), (2, 0.4), (0, 0.1)]


def test_model_config__round_trip(tiny_config):
    cfg = dataclasses.replace(
        tiny_config, policy=MaskPolicy.VISUAL_BIDIRECTIONAL,
        separate_visual_qkv=True)

    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_model_config__no_visual_attention_excludes_routing():
    with pytest.raises(ValueError) as err:
        ModelConfig(policy=MaskPolicy.NO_VISUAL_ATTENTION,
                    separate_visual_qkv=True)

    assert "baseline mode" in str(err.value)
