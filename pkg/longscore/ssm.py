"""Discretized diagonal state-space recurrence and the Mamba layer built around it.

h_t = A * h_{t-1} + B * x_t and y_t = sum_n C[:, n] * h_t[:, n], per channel, h_0 = 0.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from common import ConfigurationError, ContractError, DimensionError
from tensor import (
    Tensor,
    add,
    causal_depthwise_conv1d,
    custom_op,
    exp,
    matmul,
    mul,
    scale,
    silu,
    softplus,
)

logger = logging.getLogger(__name__)

# Per-parameter role under the partial-freeze fine-tuning recipe.
FROZEN_NAMES = frozenset({"a_raw", "B", "C", "conv", "gate_weight", "gate_bias"})
TRAINABLE_NAMES = frozenset({"in_weight", "in_bias", "out_weight"})
TRAINABLE_TOP_LEVEL = frozenset({"embedding", "head.weight", "head.bias"})


@dataclass
class SSMParams:
    A: Tensor
    B: Tensor
    C: Tensor

    def __post_init__(self) -> None:
        if self.A.ndim != 2 or self.A.shape != self.B.shape or self.A.shape != self.C.shape:
            raise DimensionError(
                f"A {self.A.shape}, B {self.B.shape}, C {self.C.shape} must share d x N"
            )
        if not (np.abs(self.A.data) < 1.0).all():
            raise ConfigurationError("every |A| entry must be strictly below 1")

    @property
    def channels(self) -> int:
        return self.A.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A.shape[1]


def _readout(C: np.ndarray, states: np.ndarray) -> np.ndarray:
    return (states * C).sum(axis=-1)


def _run_states(A: np.ndarray, B: np.ndarray, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    states = np.empty((x.shape[0],) + A.shape)
    for t in range(x.shape[0]):
        h = A * h + B * x[t][:, None]
        states[t] = h
    return states


def _scan_backward(params: SSMParams, x: np.ndarray, states: np.ndarray, g: np.ndarray):
    A, B, C = params.A.data, params.B.data, params.C.data
    g_A = np.zeros_like(A)
    g_B = np.zeros_like(B)
    g_C = (g[:, :, None] * states).sum(axis=0)
    g_x = np.empty_like(x)
    carry = np.zeros_like(A)
    for t in range(x.shape[0] - 1, -1, -1):
        carry = carry + g[t][:, None] * C
        if t > 0:
            g_A += carry * states[t - 1]
        g_B += carry * x[t][:, None]
        g_x[t] = (carry * B).sum(axis=-1)
        carry = A * carry
    return g_A, g_B, g_C, g_x


def _check_input(params: SSMParams, x: Tensor) -> None:
    if x.ndim != 2 or x.shape[1] != params.channels or x.shape[0] < 1:
        raise DimensionError(f"scan input {x.shape} does not match {params.channels} channels")


def ssm_scan_sequential(params: SSMParams, x: Tensor) -> Tensor:
    """Reference scan, one step at a time; O(T * d * N)."""
    _check_input(params, x)
    states = _run_states(params.A.data, params.B.data, x.data, np.zeros(params.A.shape))
    y = _readout(params.C.data, states)
    return custom_op(
        "ssm_scan",
        y,
        (params.A, params.B, params.C, x),
        lambda g: _scan_backward(params, x.data, states, g),
    )


def ssm_scan_chunked(params: SSMParams, x: Tensor, chunk: int) -> Tensor:
    """Blocked scan: unroll the recurrence inside fixed-size chunks, carry h across them.

    Each chunk's readout is one batched reduction; only the chunk's states are held
    unless gradients are being recorded.
    """
    if chunk < 1:
        raise ConfigurationError(f"chunk must be >= 1, got {chunk}")
    _check_input(params, x)
    A, B, C = params.A.data, params.B.data, params.C.data
    keep = params.A.requires_grad or params.B.requires_grad or params.C.requires_grad
    keep = keep or x.requires_grad
    T = x.shape[0]
    y = np.empty((T, params.channels))
    kept = []
    h = np.zeros(A.shape)
    for start in range(0, T, chunk):
        stop = min(start + chunk, T)
        states = _run_states(A, B, x.data[start:stop], h)
        y[start:stop] = _readout(C, states)
        h = states[-1]
        if keep:
            kept.append(states)

    def _backward(g: np.ndarray):
        return _scan_backward(params, x.data, np.concatenate(kept, axis=0), g)

    return custom_op("ssm_scan_chunked", y, (params.A, params.B, params.C, x), _backward)


# ============================================================================
# Mamba layer
# ============================================================================


def _timescale_init(state_dim: int, channels: int) -> np.ndarray:
    """Unconstrained a_raw whose decays A = exp(-softplus(a_raw)) span short to long memory."""
    timescales = np.geomspace(1.5, 256.0, state_dim)
    rates = 1.0 / timescales
    raw = np.log(np.expm1(rates))
    return np.tile(raw, (channels, 1))


@dataclass
class MambaBlock:
    in_weight: Tensor
    in_bias: Tensor
    gate_weight: Tensor
    gate_bias: Tensor
    conv: Tensor
    a_raw: Tensor
    B: Tensor
    C: Tensor
    out_weight: Tensor
    conv_max_width: int | None = None

    @classmethod
    def init(cls, d_model: int, d_inner: int, state_dim: int, conv_width: int,
             rng: np.random.Generator, conv_max_width: int | None = None) -> "MambaBlock":
        if conv_max_width is not None and conv_width > conv_max_width:
            raise ConfigurationError(f"conv width {conv_width} exceeds {conv_max_width}")

        def normal(shape: tuple[int, int], fan_in: int) -> Tensor:
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), shape), True)

        return cls(
            in_weight=normal((d_model, d_inner), d_model),
            in_bias=Tensor(np.zeros(d_inner), True),
            gate_weight=normal((d_model, d_inner), d_model),
            gate_bias=Tensor(np.zeros(d_inner), True),
            conv=normal((conv_width, d_inner), conv_width),
            a_raw=Tensor(_timescale_init(state_dim, d_inner), True),
            B=normal((d_inner, state_dim), 1),
            C=normal((d_inner, state_dim), state_dim),
            out_weight=normal((d_inner, d_model), d_inner),
            conv_max_width=conv_max_width,
        )

    @property
    def d_model(self) -> int:
        return self.in_weight.shape[0]

    @property
    def d_inner(self) -> int:
        return self.in_weight.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {
            "in_weight": self.in_weight,
            "in_bias": self.in_bias,
            "gate_weight": self.gate_weight,
            "gate_bias": self.gate_bias,
            "conv": self.conv,
            "a_raw": self.a_raw,
            "B": self.B,
            "C": self.C,
            "out_weight": self.out_weight,
        }

    def ssm_params(self) -> SSMParams:
        return SSMParams(A=exp(scale(softplus(self.a_raw), -1.0)), B=self.B, C=self.C)


def mamba_block(x: Tensor, block: MambaBlock, chunk: int | None = None) -> Tensor:
    """out = L_out( SSM(silu(conv(L_in x))) * silu(L_gate x) )."""
    if x.ndim != 2 or x.shape[1] != block.d_model:
        raise ConfigurationError(f"block expects width {block.d_model}, got shape {x.shape}")
    inner = add(matmul(x, block.in_weight), block.in_bias)
    inner = silu(causal_depthwise_conv1d(inner, block.conv, block.conv_max_width))
    params = block.ssm_params()
    if chunk is None:
        scanned = ssm_scan_sequential(params, inner)
    else:
        scanned = ssm_scan_chunked(params, inner, chunk)
    gate = silu(add(matmul(x, block.gate_weight), block.gate_bias))
    return matmul(mul(scanned, gate), block.out_weight)


def freeze_partition(model) -> tuple[set[str], set[str]]:
    """Freeze SSM, conv and L_gate weights; train embedding, L_in, L_out and the head.

    Applies `requires_grad` accordingly and returns (frozen, trainable) parameter names.
    """
    frozen: set[str] = set()
    trainable: set[str] = set()
    for name, tensor in model.parameters().items():
        leaf = name.rsplit(".", 1)[-1]
        if name in TRAINABLE_TOP_LEVEL or (name.startswith("blocks.") and leaf in TRAINABLE_NAMES):
            trainable.add(name)
            tensor.requires_grad = True
        elif name.startswith("blocks.") and leaf in FROZEN_NAMES:
            frozen.add(name)
            tensor.requires_grad = False
            tensor.grad = None
        else:
            raise ContractError(f"parameter {name!r} belongs to neither partition")
    logger.info("🧊 froze %d tensors, training %d", len(frozen), len(trainable))
    return frozen, trainable
