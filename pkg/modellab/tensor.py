"""Dense float32 tensors with reverse-mode automatic differentiation.

Every number the laboratory computes flows through the ops in this module.
Each op produces a fresh output tensor and, when any input requires a
gradient, attaches a TapeEntry holding its inputs and its backward rule.
`backward` gathers the entries reachable from a scalar loss into a Tape
(topologically ordered with modellab.lib.deps) and replays it in reverse.

A Tape is confined to the thread that built it. Tensors themselves are plain
values: nothing here mutates an array that is already part of a live graph.
"""
import contextlib
import dataclasses
import logging
import threading
from typing import Any, Callable, Iterator, Protocol, Sequence

import numpy as np

from modellab.lib import deps

logger = logging.getLogger(__name__)

DTYPE = np.float32

# backward rules map the output gradient to one gradient per input, None for
# inputs that do not need one
BackwardRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class NonFiniteError(ValueError):
    """A NaN or Inf showed up where only finite values are allowed."""


class SupportMask(Protocol):
    """Anything carrying a boolean `allowed` matrix (see masking)."""

    allowed: np.ndarray


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"Non-finite values produced by {what}")


class Tensor:
    """A dense row-major float32 array that can take part in autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_entry")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: str = "",
    ) -> None:
        """Wrap an array.

        :param Any data: anything numpy can turn into a float array
        :param bool requires_grad: whether backward should fill `grad`
        :param str name: optional label, used in error messages
        :raises NonFiniteError: if data holds NaN or Inf
        """
        arr = np.array(data, dtype=DTYPE)
        if any(extent < 1 for extent in arr.shape):
            raise ValueError(f"Tensor extents must be positive: {arr.shape}")
        _check_finite(arr, name or "tensor construction")

        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._entry: TapeEntry | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape}>"

    def numpy(self) -> np.ndarray:
        """A copy of the values."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single value, shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclasses.dataclass(eq=False)
class TapeEntry:
    """One recorded operation."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


@dataclasses.dataclass
class Tape:
    """Recorded operations in topological order, inputs first."""

    entries: list[TapeEntry]

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        """Collect every entry the loss depends on.

        :param Tensor loss: the tensor to differentiate
        :returns: the tape, ordered so every entry follows the entries that
            produced its inputs
        :rtype: Tape
        """
        if loss._entry is None:
            return cls([])

        def edges(entry: TapeEntry) -> Iterator[TapeEntry]:
            for tensor in entry.inputs:
                if tensor._entry is not None:
                    yield tensor._entry

        graph = deps.dep_graph([loss._entry], edges)
        return cls(deps.topological_sort(graph))

    def replay(self, loss: Tensor) -> None:
        """Run every backward rule once, in reverse order.

        :param Tensor loss: the scalar tensor the tape was built from
        """
        # gradients of intermediate tensors live only for this pass
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)}

        for entry in reversed(self.entries):
            upstream = grads.pop(id(entry.output), None)
            if upstream is None:
                continue

            in_grads = entry.backward(upstream)
            for tensor, grad in zip(entry.inputs, in_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                grad = np.asarray(grad, dtype=DTYPE)
                if grad.shape != tensor.shape:
                    raise ValueError(
                        f"{entry.op} backward produced shape {grad.shape} "
                        f"for an input of shape {tensor.shape}")

                if tensor._entry is None:
                    # leaf: accumulate, callers zero between steps
                    if tensor.grad is None:
                        tensor.grad = grad.copy()
                    else:
                        tensor.grad = tensor.grad + grad
                elif id(tensor) in grads:
                    grads[id(tensor)] = grads[id(tensor)] + grad
                else:
                    grads[id(tensor)] = grad

        # a loss that is itself a leaf
        if loss._entry is None and loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None \
                else loss.grad + 1.0


def backward(loss: Tensor) -> Tape:
    """Populate grads of every requires_grad leaf the loss depends on.

    Grads accumulate (+=); callers zero them between steps. Leaves with
    requires_grad=False stay grad-free.

    :param Tensor loss: a scalar tensor
    :returns: the tape that was replayed
    :rtype: Tape
    :raises ValueError: if loss is not a scalar
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ValueError(
            f"backward needs a scalar loss, got shape {loss.shape}")

    tape = Tape.from_loss(loss)
    tape.replay(loss)
    return tape


# --------------------------------------------------------------------------
# instrumentation


@dataclasses.dataclass
class MacCounter:
    """Multiply-adds and named events seen while the counter was active."""

    total: int = 0
    by_op: dict[str, int] = dataclasses.field(default_factory=dict)
    events: dict[str, int] = dataclasses.field(default_factory=dict)

    def add(self, op: str, macs: int) -> None:
        self.total += macs
        self.by_op[op] = self.by_op.get(op, 0) + macs


_local = threading.local()


def _counters() -> list[MacCounter]:
    if not hasattr(_local, "counters"):
        _local.counters = []
    return _local.counters


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count every multiply-add executed by this thread inside the block."""
    counter = MacCounter()
    _counters().append(counter)
    try:
        yield counter
    finally:
        _counters().remove(counter)


def _tally(op: str, macs: int) -> None:
    for counter in _counters():
        counter.add(op, macs)


def note(event: str) -> None:
    """Record a named event with every active counter."""
    for counter in _counters():
        counter.events[event] = counter.events.get(event, 0) + 1


# --------------------------------------------------------------------------
# op plumbing


def _make(
    op: str,
    data: np.ndarray,
    inputs: tuple[Tensor, ...],
    rule: BackwardRule,
) -> Tensor:
    """Wrap an op result and record it when a gradient is needed."""
    out = Tensor(data, name=op)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._entry = TapeEntry(op, inputs, out, rule)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so grad matches shape."""
    if grad.shape == shape:
        return grad

    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)

    for dim, extent in enumerate(shape):
        if extent == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)

    return grad


def _support(mask: "SupportMask | np.ndarray") -> np.ndarray:
    allowed = mask if isinstance(mask, np.ndarray) else mask.allowed
    return np.asarray(allowed, dtype=bool)


# --------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    :param Tensor a: shape [..., p, q]
    :param Tensor b: shape [..., q, r]
    :returns: shape [..., p, r]
    :rtype: Tensor
    :raises ValueError: if the inner extents differ or batch extents do
        not broadcast
    """
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul shape mismatch: {a.shape} and {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as error:
        raise ValueError(
            f"matmul shape mismatch: {a.shape} and {b.shape}") from error

    _tally("matmul", int(np.prod(data.shape)) * a.shape[-1])

    def rule(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_a = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return (_unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape))

    return _make("matmul", data, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum, b may broadcast against a (e.g. a bias row)."""
    data = a.data + b.data

    def rule(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (_unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape))

    return _make("add", data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product, b may broadcast against a."""
    data = a.data * b.data

    def rule(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            _unbroadcast(grad * b.data, a.shape),
            _unbroadcast(grad * a.data, b.shape),
        )

    return _make("mul", data, (a, b), rule)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply every element by a constant."""
    factor = DTYPE(factor)
    data = x.data * factor

    def rule(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * factor,)

    return _make("scale", data, (x,), rule)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, a scalar."""
    data = np.asarray(x.data.sum(dtype=DTYPE), dtype=DTYPE)

    def rule(grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(grad, x.shape).astype(DTYPE),)

    return _make("sum", data, (x,), rule)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    sig = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * sig

    def rule(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _make("silu", data, (x,), rule)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def rule(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad.reshape(x.shape),)

    return _make("reshape", data, (x,), rule)


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    """Permute axes, by default swap the last two.

    :param Tensor x: input
    :param tuple axes: a full permutation of x's axes
    """
    if axes is None:
        axes = tuple(range(x.data.ndim - 2)) + (x.data.ndim - 1,
                                                 x.data.ndim - 2)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ValueError(f"Invalid permutation {axes} for shape {x.shape}")

    data = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def rule(grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.transpose(grad, inverse),)

    return _make("transpose", data, (x,), rule)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) along the second-to-last axis."""
    rows = x.shape[-2]
    if not 0 <= start < stop <= rows:
        raise ValueError(
            f"Invalid row slice [{start}, {stop}) for shape {x.shape}")

    data = x.data[..., start:stop, :]

    def rule(grad: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(x.shape, dtype=DTYPE)
        full[..., start:stop, :] = grad
        return (full,)

    return _make("slice_rows", data, (x,), rule)


def _concat(op: str, tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError(f"{op} needs at least one tensor")

    shapes = [t.shape for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as error:
        raise ValueError(f"{op} shape mismatch: {shapes}") from error

    bounds = np.cumsum([0] + [s[axis] for s in shapes])

    def rule(grad: np.ndarray) -> list[np.ndarray]:
        return [
            np.take(grad, np.arange(lo, hi), axis=axis)
            for lo, hi in zip(bounds[:-1], bounds[1:])
        ]

    return _make(op, data, tuple(tensors), rule)


def concat_last_dim(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the feature (last) axis."""
    return _concat("concat_last_dim", tensors, -1)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the sequence (second-to-last) axis."""
    return _concat("concat_rows", tensors, -2)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of an embedding table.

    :param Tensor table: shape [vocab, d]
    :param np.ndarray ids: integer array of any shape
    :returns: shape ids.shape + (d,)
    :raises ValueError: if an id is outside the table
    """
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError(
            f"Token id out of range for vocab of {vocab}: "
            f"{int(ids.min())}..{int(ids.max())}")

    data = table.data[ids]

    def rule(grad: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), grad.reshape(-1, table.shape[1]))
        return (full,)

    return _make("embedding_lookup", data, (table,), rule)


def rms_norm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain over the last axis.

    :param Tensor x: shape [..., d]
    :param Tensor gain: shape [d]
    :param float eps: positive stabiliser
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if gain.shape != (x.shape[-1],):
        raise ValueError(
            f"rms_norm shape mismatch: {x.shape} and gain {gain.shape}")

    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True)
                        + DTYPE(eps))
    normed = x.data * inv
    data = normed * gain.data

    def rule(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_gain = _unbroadcast(grad * normed, gain.shape)
        grad_normed = grad * gain.data
        proj = np.mean(grad_normed * normed, axis=-1, keepdims=True)
        return (inv * (grad_normed - normed * proj), grad_gain)

    return _make("rms_norm", data, (x, gain), rule)


# the name the model code has always used for it
layer_norm_rms = rms_norm


def masked_softmax(scores: Tensor, mask: "SupportMask | np.ndarray") -> Tensor:
    """Softmax over the last axis restricted to allowed entries.

    Masked entries are exactly 0 and receive exactly 0 gradient. The row
    max is taken over allowed entries only.

    :param Tensor scores: shape [..., N, N]
    :param mask: an AttentionMask or a boolean [N, N] array
    :raises ValueError: if the mask does not match or a row has no
        allowed entry
    """
    allowed = _support(mask)
    if allowed.shape != scores.shape[-2:]:
        raise ValueError(
            f"Mask of shape {allowed.shape} does not match scores "
            f"{scores.shape}")
    empty = np.flatnonzero(~allowed.any(axis=-1))
    if empty.size:
        raise ValueError(
            f"Fully masked attention rows: {empty.tolist()}")

    shifted = np.where(allowed, scores.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    expd = np.where(allowed, np.exp(shifted), 0.0).astype(DTYPE)
    probs = expd / expd.sum(axis=-1, keepdims=True)

    def rule(grad: np.ndarray) -> tuple[np.ndarray]:
        inner = np.sum(grad * probs, axis=-1, keepdims=True)
        return (probs * (grad - inner),)

    return _make("masked_softmax", probs, (scores,), rule)


def masked_scores(
    q: Tensor,
    k: Tensor,
    mask: "SupportMask | np.ndarray",
) -> Tensor:
    """q @ k^T evaluated on the allowed entries only.

    Disallowed entries are 0. Only allowed entries are priced by the
    multiply-add counter.

    :param Tensor q: shape [..., N, h]
    :param Tensor k: shape [..., N, h]
    :param mask: an AttentionMask or a boolean [N, N] array
    """
    allowed = _support(mask)
    if q.shape != k.shape or allowed.shape != (q.shape[-2], k.shape[-2]):
        raise ValueError(
            f"masked_scores shape mismatch: {q.shape}, {k.shape}, "
            f"mask {allowed.shape}")

    keep = allowed.astype(DTYPE)
    data = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * keep
    batch = int(np.prod(q.shape[:-2]))
    _tally("masked_scores", batch * int(allowed.sum()) * q.shape[-1])

    def rule(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad = grad * keep
        return (
            np.matmul(grad, k.data),
            np.matmul(np.swapaxes(grad, -1, -2), q.data),
        )

    return _make("masked_scores", data, (q, k), rule)


def weighted_values(
    probs: Tensor,
    values: Tensor,
    mask: "SupportMask | np.ndarray",
) -> Tensor:
    """probs @ values where probs is zero outside the allowed entries.

    :param Tensor probs: shape [..., N, N]
    :param Tensor values: shape [..., N, h]
    :param mask: an AttentionMask or a boolean [N, N] array
    """
    allowed = _support(mask)
    if allowed.shape != probs.shape[-2:] or \
            probs.shape[-1] != values.shape[-2]:
        raise ValueError(
            f"weighted_values shape mismatch: {probs.shape}, "
            f"{values.shape}, mask {allowed.shape}")

    keep = allowed.astype(DTYPE)
    data = np.matmul(probs.data * keep, values.data)
    batch = int(np.prod(probs.shape[:-2]))
    _tally("weighted_values", batch * int(allowed.sum()) * values.shape[-1])

    def rule(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_probs = np.matmul(grad, np.swapaxes(values.data, -1, -2)) * keep
        grad_values = np.matmul(np.swapaxes(probs.data * keep, -1, -2), grad)
        return (grad_probs, grad_values)

    return _make("weighted_values", data, (probs, values), rule)


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate channel pairs (c, c + h/2) by per-position angles.

    :param Tensor x: shape [..., N, h] with h even
    :param np.ndarray cos: shape [N, h/2]
    :param np.ndarray sin: shape [N, h/2]
    """
    width = x.shape[-1]
    if width % 2:
        raise ValueError(f"Rotary pairs need an even width, got {width}")
    half = width // 2
    if cos.shape != (x.shape[-2], half) or sin.shape != cos.shape:
        raise ValueError(
            f"Rotation tables {cos.shape} do not match input {x.shape}")

    cos = cos.astype(DTYPE)
    sin = sin.astype(DTYPE)
    first, second = x.data[..., :half], x.data[..., half:]
    data = np.concatenate(
        [first * cos - second * sin, second * cos + first * sin], axis=-1)

    def rule(grad: np.ndarray) -> tuple[np.ndarray]:
        g_first, g_second = grad[..., :half], grad[..., half:]
        return (np.concatenate(
            [g_first * cos + g_second * sin, g_second * cos - g_first * sin],
            axis=-1),)

    return _make("rotate_pairs", data, (x,), rule)


def cross_entropy_with_ignore_index(
    logits: Tensor,
    targets: np.ndarray,
    ignore_index: int = -100,
) -> Tensor:
    """Mean cross-entropy over targets that are not ignore_index.

    :param Tensor logits: shape [..., vocab]
    :param np.ndarray targets: integer array of shape logits.shape[:-1]
    :param int ignore_index: target value that contributes nothing
    :raises ValueError: if nothing is supervised or a target is out of range
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(
            f"Targets of shape {targets.shape} do not match logits "
            f"{logits.shape}")

    vocab = logits.shape[-1]
    flat_logits = logits.data.reshape(-1, vocab)
    flat_targets = targets.reshape(-1)
    keep = flat_targets != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ValueError("Empty supervision set: every target is ignored")
    if (flat_targets[keep] < 0).any() or (flat_targets[keep] >= vocab).any():
        raise ValueError(f"Target id out of range for vocab of {vocab}")

    shifted = flat_logits - flat_logits.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.flatnonzero(keep)
    picked = log_probs[rows, flat_targets[rows]]
    data = np.asarray(-picked.sum() / count, dtype=DTYPE)

    def rule(grad: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(flat_logits)
        full[rows] = np.exp(log_probs[rows])
        full[rows, flat_targets[rows]] -= 1.0
        return ((full * (grad / count)).reshape(logits.shape),)

    return _make("cross_entropy", data, (logits,), rule)


# --------------------------------------------------------------------------
# gradient checking


def numeric_grad(
    loss_fn: Callable[[], Tensor],
    tensor: Tensor,
    step: float = 1e-3,
) -> np.ndarray:
    """Central finite-difference gradient of a scalar function.

    The tensor's values are perturbed in place one at a time and restored,
    so loss_fn must rebuild its graph on every call.

    :param Callable loss_fn: recomputes the scalar loss
    :param Tensor tensor: the tensor to differentiate against
    :param float step: the difference step h
    :returns: float64 array shaped like the tensor
    :rtype: np.ndarray
    """
    grad = np.zeros(tensor.shape, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    for idx in range(flat.size):
        original = flat[idx]
        flat[idx] = original + DTYPE(step)
        plus = np.float64(loss_fn().item())
        flat[idx] = original - DTYPE(step)
        minus = np.float64(loss_fn().item())
        flat[idx] = original
        grad.reshape(-1)[idx] = (plus - minus) / (2.0 * step)
    return grad
