import numpy as np
import pytest

from modellab import tensor as T
from modellab.tensor import NonFiniteError, Tensor


def _leaf(rng, shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def _weighted_sum(out):
    """Scalar loss with a fixed random weight per output element."""
    weights = Tensor(np.random.default_rng(99).normal(size=out.shape))
    return T.sum_all(T.mul(out, weights))


def _causal(n):
    return np.tril(np.ones((n, n), dtype=bool))


def _case_matmul(rng):
    a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5))
    return (lambda: _weighted_sum(T.matmul(a, b))), [a, b]


def _case_add(rng):
    a, bias = _leaf(rng, (3, 4)), _leaf(rng, (4,))
    return (lambda: _weighted_sum(T.add(a, bias))), [a, bias]


def _case_mul(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 1))
    return (lambda: _weighted_sum(T.mul(a, b))), [a, b]


def _case_scale(rng):
    a = _leaf(rng, (2, 3))
    return (lambda: _weighted_sum(T.scale(a, -0.5))), [a]


def _case_silu(rng):
    a = _leaf(rng, (3, 4))
    return (lambda: _weighted_sum(T.silu(a))), [a]


def _case_reshape_transpose(rng):
    a = _leaf(rng, (2, 6))
    return (lambda: _weighted_sum(
        T.transpose(T.reshape(a, (2, 2, 3)), (2, 0, 1)))), [a]


def _case_slice_concat(rng):
    a, b = _leaf(rng, (5, 3)), _leaf(rng, (5, 2))

    def loss():
        rows = T.concat_rows([T.slice_rows(a, 3, 5), T.slice_rows(a, 0, 2)])
        return _weighted_sum(
            T.concat_last_dim([rows, T.slice_rows(b, 1, 5)]))
    return loss, [a, b]


def _case_embedding(rng):
    table = _leaf(rng, (6, 3))
    ids = np.array([[1, 4, 1], [0, 5, 4]])
    return (lambda: _weighted_sum(T.embedding_lookup(table, ids))), \
        [table]


def _case_rms_norm(rng):
    x, gain = _leaf(rng, (3, 4)), _leaf(rng, (4,))
    return (lambda: _weighted_sum(T.rms_norm(x, gain, 1e-6))), [x, gain]


def _case_masked_softmax(rng):
    scores = _leaf(rng, (2, 4, 4))
    return (lambda: _weighted_sum(
        T.masked_softmax(scores, _causal(4)))), [scores]


def _case_masked_scores(rng):
    q, k = _leaf(rng, (2, 4, 3)), _leaf(rng, (2, 4, 3))
    allowed = _causal(4)
    allowed[0, 2] = True
    return (lambda: _weighted_sum(T.masked_scores(q, k, allowed))), \
        [q, k]


def _case_weighted_values(rng):
    probs, values = _leaf(rng, (2, 4, 4)), _leaf(rng, (2, 4, 3))
    return (lambda: _weighted_sum(
        T.weighted_values(probs, values, _causal(4)))), [probs, values]


def _case_rotate_pairs(rng):
    x = _leaf(rng, (2, 3, 4))
    angles = rng.normal(size=(3, 2))
    return (lambda: _weighted_sum(
        T.rotate_pairs(x, np.cos(angles), np.sin(angles)))), [x]


def _case_cross_entropy(rng):
    logits = _leaf(rng, (2, 3, 5))
    targets = np.array([[1, -100, 4], [0, 2, -100]])
    return (lambda: T.cross_entropy_with_ignore_index(
        logits, targets, -100)), [logits]


@pytest.mark.parametrize("case", [
    _case_matmul,
    _case_add,
    _case_mul,
    _case_scale,
    _case_silu,
    _case_reshape_transpose,
    _case_slice_concat,
    _case_embedding,
    _case_rms_norm,
    _case_masked_softmax,
    _case_masked_scores,
    _case_weighted_values,
    _case_rotate_pairs,
    _case_cross_entropy,
])
def test_backward__matches_finite_differences(case):
    loss_fn, leaves = case(np.random.default_rng(0))

    T.backward(loss_fn())

    for leaf in leaves:
        numeric = T.numeric_grad(loss_fn, leaf)
        np.testing.assert_allclose(leaf.grad, numeric, rtol=1e-2, atol=1e-3)


def test_backward__accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)

    T.backward(T.sum_all(T.scale(x, 3.0)))
    T.backward(T.sum_all(T.scale(x, 3.0)))

    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_backward__shared_input():
    """mul(x, x) routes two gradient contributions into one leaf."""
    x = Tensor([3.0], requires_grad=True)

    T.backward(T.sum_all(T.mul(x, x)))

    np.testing.assert_allclose(x.grad, [6.0])


def test_backward__frozen_leaf_has_no_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    frozen = Tensor([4.0, 5.0])

    T.backward(T.sum_all(T.mul(x, frozen)))

    np.testing.assert_array_equal(x.grad, [4.0, 5.0])
    assert frozen.grad is None


def test_backward__non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)

    with pytest.raises(ValueError) as err:
        T.backward(T.scale(x, 2.0))

    assert "(2,)" in str(err.value)


def test_tape__inputs_before_outputs():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    loss = T.sum_all(T.silu(T.matmul(x, x)))

    tape = T.Tape.from_loss(loss)

    assert [entry.op for entry in tape.entries] == ["matmul", "silu", "sum"]


def test_tensor__rejects_non_finite():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])


def test_tensor__rejects_empty_extent():
    with pytest.raises(ValueError):
        Tensor(np.zeros((0, 3)))


def test_op__non_finite_output():
    with pytest.raises(NonFiniteError):
        T.scale(Tensor([3e38]), 10.0)


def test_matmul__shape_mismatch():
    with pytest.raises(ValueError) as err:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    assert str(err.value) == "matmul shape mismatch: (2, 3) and (2, 3)"


def test_masked_softmax__masked_entries_exactly_zero():
    scores = Tensor(np.random.default_rng(1).normal(size=(3, 3)),
                    requires_grad=True)
    allowed = _causal(3)

    probs = T.masked_softmax(scores, allowed)
    T.backward(T.sum_all(T.mul(probs, Tensor(np.arange(9.0).reshape(3, 3)))))

    assert (probs.data[~allowed] == 0.0).all()
    np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, rtol=1e-6)
    assert (scores.grad[~allowed] == 0.0).all()


def test_masked_softmax__large_scores_stay_finite():
    scores = Tensor([[80.0, 0.0], [-80.0, 80.0]])

    probs = T.masked_softmax(scores, np.ones((2, 2), dtype=bool))

    assert np.isfinite(probs.data).all()


def test_masked_softmax__fully_masked_row():
    allowed = _causal(3)
    allowed[1] = False

    with pytest.raises(ValueError) as err:
        T.masked_softmax(Tensor(np.zeros((3, 3))), allowed)

    assert str(err.value) == "Fully masked attention rows: [1]"


def test_cross_entropy__ignores_targets():
    logits = np.log(np.array([[0.5, 0.25, 0.25], [0.1, 0.1, 0.8]]))
    targets = np.array([0, -100])

    loss = T.cross_entropy_with_ignore_index(Tensor(logits), targets)

    assert loss.item() == pytest.approx(-np.log(0.5), rel=1e-5)


def test_cross_entropy__empty_supervision():
    with pytest.raises(ValueError) as err:
        T.cross_entropy_with_ignore_index(
            Tensor(np.zeros((2, 3))), np.array([-100, -100]))

    assert str(err.value) == "Empty supervision set: every target is ignored"


def test_embedding_lookup__out_of_range():
    with pytest.raises(ValueError) as err:
        T.embedding_lookup(Tensor(np.zeros((4, 2))), np.array([0, 4]))

    assert "vocab of 4" in str(err.value)


def test_count_macs__matmul():
    with T.count_macs() as counter:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))

    assert counter.total == 2 * 4 * 3
    assert counter.by_op == {"matmul": 24}


def test_count_macs__masked_ops_price_allowed_entries():
    allowed = _causal(4)
    q = Tensor(np.ones((2, 4, 3)))

    with T.count_macs() as counter:
        probs = T.masked_softmax(T.masked_scores(q, q, allowed), allowed)
        T.weighted_values(probs, q, allowed)

    # 2 batches * 10 allowed entries * width 3, for each op
    assert counter.by_op == {"masked_scores": 60, "weighted_values": 60}


def test_count_macs__nested_and_events():
    with T.count_macs() as outer:
        T.matmul(Tensor(np.ones((1, 2))), Tensor(np.ones((2, 1))))
        with T.count_macs() as inner:
            T.matmul(Tensor(np.ones((1, 2))), Tensor(np.ones((2, 1))))
            T.note("block")

    assert outer.total == 4
    assert inner.total == 2
    assert outer.events == inner.events == {"block": 1}


def test_count_macs__inactive_outside_block():
    with T.count_macs() as counter:
        pass
    T.matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))

    assert counter.total == 0
