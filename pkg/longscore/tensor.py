"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Operations record a node on the active `Tape` when one of their inputs requires a
gradient. With no active tape nothing is recorded, which is the inference path used by
evaluation and the benchmark.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from common import (
    ConfigurationError,
    ContractError,
    DimensionError,
    LabelError,
    VocabularyError,
)

logger = logging.getLogger(__name__)

RMS_EPS = 1e-6

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Dense double-precision value with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.name = ""
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def detach(self) -> "Tensor":
        """Same values, cut from the graph (stop-gradient)."""
        return Tensor._wrap(self.data, False)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Append-only record of the operations of one graph.

    Use as a context manager; nested tapes shadow outer ones on the same thread.
    """

    _local = threading.local()

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.visits = 0

    def __enter__(self) -> "Tape":
        stack = getattr(Tape._local, "stack", None)
        if stack is None:
            stack = Tape._local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._local.stack.pop()

    @classmethod
    def active(cls) -> "Tape | None":
        stack = getattr(cls._local, "stack", None)
        return stack[-1] if stack else None

    def __len__(self) -> int:
        return len(self.nodes)


def custom_op(
    op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn
) -> Tensor:
    """Wrap `data` as the result of `op` and record it on the active tape if needed.

    `backward_fn` maps the output gradient to one gradient (or None) per input.
    """
    if not np.all(np.isfinite(data)):
        raise ContractError(f"{op} produced non-finite values")
    tape = Tape.active()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, needs_grad)
    if needs_grad:
        tape.nodes.append(Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate `.grad` of every requires-grad tensor reachable from `loss`.

    Leaf gradients accumulate into existing buffers; nodes are replayed once each in
    reverse insertion order.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    pending: dict[int, tuple[Tensor, np.ndarray]] = {id(loss): (loss, np.ones(()))}
    for node in reversed(tape.nodes):
        tape.visits += 1
        entry = pending.pop(id(node.output), None)
        if entry is None:
            continue
        grad_out = entry[1]
        node.output.grad = grad_out
        for tensor, grad in zip(node.inputs, node.backward(grad_out)):
            if grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in pending:
                pending[key] = (tensor, pending[key][1] + grad)
            else:
                pending[key] = (tensor, grad)
    for tensor, grad in pending.values():
        if tensor.grad is None:
            tensor.grad = np.array(grad, dtype=np.float64).reshape(tensor.shape)
        else:
            tensor.grad = tensor.grad + grad


# ============================================================================
# Elementwise and structural ops
# ============================================================================


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    return custom_op(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return custom_op(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return custom_op(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    return custom_op("scale", a.data * factor, (a,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return custom_op(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    return custom_op("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = a.shape
    return custom_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _backward(g: np.ndarray):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(sizes))
        )

    return custom_op(
        "concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward
    )


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    key = tuple(index)

    def _backward(g: np.ndarray):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return custom_op("slice", a.data[key].copy(), (a,), _backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    return slice_axis(a, start, stop, axis=0)


def sum_all(a: Tensor) -> Tensor:
    return custom_op(
        "sum", np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),)
    )


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return custom_op(
        "mean",
        np.array(a.data.sum() / n),
        (a,),
        lambda g: (np.broadcast_to(g / n, a.shape).copy(),),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return custom_op("exp", out, (a,), lambda g: (g * out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a: Tensor) -> Tensor:
    return custom_op(
        "softplus", np.logaddexp(0.0, a.data), (a,), lambda g: (g * _sigmoid(a.data),)
    )


def activations(x: Tensor, kind: str) -> Tensor:
    """sigmoid(x) = 1/(1+e^-x); silu(x) = x * sigmoid(x)."""
    s = _sigmoid(x.data)
    if kind == "sigmoid":
        return custom_op("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))
    if kind == "silu":
        return custom_op(
            "silu", x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),)
        )
    raise ConfigurationError(f"unknown activation {kind!r}")


def silu(x: Tensor) -> Tensor:
    return activations(x, "silu")


# ============================================================================
# Neural-network kernels
# ============================================================================


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def _softmax_backward(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


def softmax_lastaxis(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    p = _softmax_rows(x.data)
    return custom_op("softmax", p, (x,), lambda g: (_softmax_backward(p, g),))


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the allowed entries of each row; disallowed entries are exactly 0."""
    if mask.shape != x.shape:
        raise DimensionError(f"mask shape {mask.shape} does not cover scores {x.shape}")
    if not mask.any(axis=-1).all():
        raise ContractError("a query row has no attendable key")
    masked = np.where(mask, x.data, -np.inf)
    shifted = np.where(mask, np.exp(masked - masked.max(axis=-1, keepdims=True)), 0.0)
    p = shifted / shifted.sum(axis=-1, keepdims=True)
    return custom_op("masked_softmax", p, (x,), lambda g: (_softmax_backward(p, g),))


def rmsnorm(x: Tensor, weight: Tensor) -> Tensor:
    d = x.shape[-1]
    if d < 1 or weight.shape != (d,):
        raise DimensionError(f"rmsnorm weight {weight.shape} does not match input {x.shape}")
    rms = np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + RMS_EPS)
    normed = x.data / rms

    def _backward(g: np.ndarray):
        gn = g * weight.data
        gx = (gn - normed * (gn * normed).mean(axis=-1, keepdims=True)) / rms
        gw = (g * normed).reshape(-1, d).sum(axis=0)
        return gx, gw

    return custom_op("rmsnorm", normed * weight.data, (x, weight), _backward)


def causal_depthwise_conv1d(x: Tensor, kernels: Tensor, max_width: int | None = None) -> Tensor:
    """out[t, c] = sum_j kernels[j, c] * x[t - k + 1 + j, c], zero left padding."""
    if x.ndim != 2 or kernels.ndim != 2 or kernels.shape[1] != x.shape[1]:
        raise DimensionError(f"conv kernels {kernels.shape} do not match input {x.shape}")
    k = kernels.shape[0]
    if k < 1 or (max_width is not None and k > max_width):
        raise ConfigurationError(f"conv width {k} outside [1, {max_width}]")
    T, d = x.shape
    padded = np.concatenate([np.zeros((k - 1, d)), x.data], axis=0)
    out = np.zeros((T, d))
    for j in range(k):
        out += kernels.data[j] * padded[j : j + T]

    def _backward(g: np.ndarray):
        g_padded = np.zeros_like(padded)
        g_kernels = np.zeros_like(kernels.data)
        for j in range(k):
            g_kernels[j] = (g * padded[j : j + T]).sum(axis=0)
            g_padded[j : j + T] += g * kernels.data[j]
        return g_padded[k - 1 :], g_kernels

    return custom_op("conv1d", out, (x, kernels), _backward)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    vocab_size = table.shape[0]
    for token_id in ids:
        if not 0 <= token_id < vocab_size:
            raise VocabularyError(int(token_id), vocab_size)
    index = np.asarray(ids, dtype=np.int64)

    def _backward(g: np.ndarray):
        g_table = np.zeros_like(table.data)
        np.add.at(g_table, index, g)
        return (g_table,)

    return custom_op("embedding", table.data[index], (table,), _backward)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of `targets` under softmax(logits)."""
    if logits.ndim != 2 or logits.shape[0] != len(targets):
        raise DimensionError(f"logits {logits.shape} do not match {len(targets)} targets")
    batch, classes = logits.shape
    for target in targets:
        if not 0 <= target < classes:
            raise LabelError(f"target {target} outside [0, {classes})")
    rows = np.arange(batch)
    index = np.asarray(targets, dtype=np.int64)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    loss = -log_probs[rows, index].sum() / batch

    def _backward(g: np.ndarray):
        grad = np.exp(log_probs)
        grad[rows, index] -= 1.0
        return (grad * (g / batch),)

    return custom_op("cross_entropy", np.array(loss), (logits,), _backward)


# ============================================================================
# Finite-difference oracle
# ============================================================================


def numeric_gradient(fn: Callable[..., Tensor], inputs: Sequence[Tensor], target: Tensor,
                     step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar `fn(*inputs)` with respect to `target`."""
    numeric = np.zeros_like(target.data)
    for idx in np.ndindex(*target.shape):
        original = target.data[idx]
        target.data[idx] = original + step
        plus = fn(*inputs).item()
        target.data[idx] = original - step
        minus = fn(*inputs).item()
        target.data[idx] = original
        numeric[idx] = (plus - minus) / (2.0 * step)
    return numeric


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
              rtol: float = 1e-4, atol: float = 1e-7) -> bool:
    """Compare tape gradients of scalar `fn` against central differences for every input."""
    for tensor in inputs:
        tensor.requires_grad = True
        tensor.grad = None
    with Tape() as tape:
        loss = fn(*inputs)
    backward(loss, tape)
    for position, tensor in enumerate(inputs):
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        numeric = numeric_gradient(fn, inputs, tensor, step)
        error = np.abs(analytic - numeric) - rtol * np.maximum(np.abs(analytic), np.abs(numeric))
        if (error > atol).any():
            logger.warning(
                "❌ gradcheck failed for input %d: worst deviation %.3e",
                position,
                float(np.abs(analytic - numeric).max()),
            )
            return False
    return True
