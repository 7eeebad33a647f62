"""Attention mechanisms: full and sliding-window masks, segment recurrence, RoPE,
the Llama decoder layer and low-rank adapters on its projections."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from common import ConfigurationError, ContractError, DimensionError, InputError
from tensor import (
    Tensor,
    add,
    concat,
    custom_op,
    masked_softmax,
    matmul,
    mul,
    rmsnorm,
    scale,
    silu,
    slice_axis,
    transpose,
)

logger = logging.getLogger(__name__)

LORA_TARGETS = ("L_q", "L_k", "L_v")
_TARGET_ATTRS = {"L_q": "wq", "L_k": "wk", "L_v": "wv"}


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    window_radius: int | None = None
    global_token_ids: frozenset[int] = frozenset()
    causal: bool = False
    rope_base: float | None = 10000.0

    def __post_init__(self) -> None:
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigurationError(
                f"d_model {self.d_model} is not divisible into {self.n_heads} heads"
            )
        if self.window_radius is not None and self.window_radius < 1:
            raise ConfigurationError(f"window radius must be >= 1, got {self.window_radius}")
        if self.rope_base is not None and self.rope_base <= 0:
            raise ConfigurationError(f"rope base must be positive, got {self.rope_base}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class SegmentMemory:
    """Cached per-layer inputs of the previous segment, held without gradients."""

    depth: int
    states: list[Tensor | None] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ConfigurationError("memory depth must be positive")
        if not self.states:
            self.states = [None] * self.depth

    def update(self, layer_inputs: Sequence[Tensor]) -> None:
        self.states = [state.detach() for state in layer_inputs]


@dataclass
class LoraAdapter:
    rank: int
    alpha: float
    down: Tensor
    up: Tensor
    target: str

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def create(cls, d_model: int, rank: int, alpha: float, target: str,
               rng: np.random.Generator) -> "LoraAdapter":
        if rank < 1 or alpha <= 0:
            raise ConfigurationError(f"invalid adapter rank {rank} / alpha {alpha}")
        down = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_model), (d_model, rank)), True)
        up = Tensor(np.zeros((rank, d_model)), True)
        return cls(rank, alpha, down, up, target)


@dataclass
class LlamaLayer:
    """Parameters of one decoder layer: RMSNorm, MHA with L_q/L_k/L_v/L_o, SwiGLU FFN."""

    config: AttentionConfig
    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ffn_norm: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor
    rope_base: float | None = None
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)

    @classmethod
    def init(cls, config: AttentionConfig, d_ff: int, rng: np.random.Generator,
             rope_base: float | None = None) -> "LlamaLayer":
        d = config.d_model

        def weight(rows: int, cols: int) -> Tensor:
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(rows), (rows, cols)), True)

        return cls(
            config=config,
            attn_norm=Tensor(np.ones(d), True),
            wq=weight(d, d),
            wk=weight(d, d),
            wv=weight(d, d),
            wo=weight(d, d),
            ffn_norm=Tensor(np.ones(d), True),
            w_gate=weight(d, d_ff),
            w_up=weight(d, d_ff),
            w_down=weight(d_ff, d),
            rope_base=rope_base if rope_base is not None else config.rope_base,
        )

    def parameters(self) -> dict[str, Tensor]:
        params = {
            "attn_norm": self.attn_norm,
            "wq": self.wq,
            "wk": self.wk,
            "wv": self.wv,
            "wo": self.wo,
            "ffn_norm": self.ffn_norm,
            "w_gate": self.w_gate,
            "w_up": self.w_up,
            "w_down": self.w_down,
        }
        for target, adapter in self.adapters.items():
            params[f"lora.{target}.down"] = adapter.down
            params[f"lora.{target}.up"] = adapter.up
        return params

    def projection(self, target: str) -> Tensor:
        """Effective weight of L_q/L_k/L_v: W, or W + (alpha/r) down @ up with an adapter."""
        base = getattr(self, _TARGET_ATTRS[target])
        adapter = self.adapters.get(target)
        if adapter is None:
            return base
        return add(base, scale(matmul(adapter.down, adapter.up), adapter.scaling))


# ============================================================================
# Positions and masks
# ============================================================================


def rope_apply(x: Tensor, positions: Sequence[int], base: float,
               d_head: int | None = None) -> Tensor:
    """Rotate consecutive pairs (x[2i], x[2i+1]) by pos * base^(-2i/d_head).

    With `d_head` smaller than the width, the same frequencies repeat for every head.
    """
    width = x.shape[-1]
    d_head = width if d_head is None else d_head
    if d_head % 2 or width % d_head:
        raise ConfigurationError(f"rope needs an even head width, got {d_head} of {width}")
    if len(positions) != x.shape[0]:
        raise DimensionError(f"{len(positions)} positions for {x.shape[0]} rows")
    pair = np.arange(width // 2) % (d_head // 2)
    freqs = base ** (-2.0 * pair / d_head)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = x.data[:, 0::2], x.data[:, 1::2]
    out = np.empty_like(x.data)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos

    def _backward(g: np.ndarray):
        g_even, g_odd = g[:, 0::2], g[:, 1::2]
        grad = np.empty_like(g)
        grad[:, 0::2] = g_even * cos + g_odd * sin
        grad[:, 1::2] = -g_even * sin + g_odd * cos
        return (grad,)

    return custom_op("rope", out, (x,), _backward)


def build_mask(T: int, config: AttentionConfig) -> np.ndarray:
    """Boolean T x T mask of allowed (query, key) pairs."""
    if T < 1:
        raise InputError("sequence length must be >= 1")
    rows = np.arange(T)[:, None]
    cols = np.arange(T)[None, :]
    if config.window_radius is None:
        allowed = np.ones((T, T), dtype=bool)
    else:
        offset = rows - cols
        if config.causal:
            allowed = (offset >= 0) & (offset <= config.window_radius)
        else:
            allowed = np.abs(offset) <= config.window_radius
        if config.global_token_ids:
            if max(config.global_token_ids) >= T:
                raise ConfigurationError(
                    f"global position {max(config.global_token_ids)} outside length {T}"
                )
            is_global = np.zeros(T, dtype=bool)
            is_global[sorted(config.global_token_ids)] = True
            allowed = allowed | is_global[:, None] | is_global[None, :]
    if config.causal:
        allowed = allowed & (cols <= rows)
    return allowed


def build_segment_mask(memory_length: int, T: int, config: AttentionConfig) -> np.ndarray:
    """Mask for T queries over memory_length cached keys followed by the T current keys."""
    rows = np.arange(T)[:, None] + memory_length
    cols = np.arange(memory_length + T)[None, :]
    if config.causal:
        return cols <= rows
    return np.ones((T, memory_length + T), dtype=bool)


def receptive_field_bound(segment_length: int, depth: int) -> int:
    """Tokens a segment-recurrent stack can look back from a segment-initial token."""
    return segment_length * depth


# ============================================================================
# Attention
# ============================================================================


def mha(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, n_heads: int) -> Tensor:
    """Scaled dot-product attention per head, heads concatenated."""
    if k.shape != v.shape or q.shape[1] != k.shape[1] or q.shape[1] % n_heads:
        raise DimensionError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    if mask.shape != (q.shape[0], k.shape[0]):
        raise DimensionError(f"mask {mask.shape} does not cover {q.shape[0]}x{k.shape[0]}")
    d_head = q.shape[1] // n_heads
    factor = 1.0 / math.sqrt(d_head)
    heads = []
    for h in range(n_heads):
        lo, hi = h * d_head, (h + 1) * d_head
        qh = slice_axis(q, lo, hi, axis=1)
        kh = slice_axis(k, lo, hi, axis=1)
        vh = slice_axis(v, lo, hi, axis=1)
        weights = masked_softmax(scale(matmul(qh, transpose(kh)), factor), mask)
        heads.append(matmul(weights, vh))
    return heads[0] if n_heads == 1 else concat(heads, axis=1)


def llama_block(x: Tensor, layer: LlamaLayer, memory: Tensor | None = None) -> Tensor:
    """One decoder layer; with `memory`, keys and values also cover the cached segment.

    y1 = x + L_o MHA(RoPE(L_q n(x)), RoPE(L_k n(x)), L_v n(x)); out = y1 + SwiGLU(n(y1)).
    """
    config = layer.config
    if x.ndim != 2 or x.shape[1] != config.d_model:
        raise DimensionError(f"layer expects width {config.d_model}, got shape {x.shape}")
    T = x.shape[0]
    normed = rmsnorm(x, layer.attn_norm)
    if memory is None:
        memory_length = 0
        context = normed
        mask = build_mask(T, config)
    else:
        memory_length = memory.shape[0]
        context = concat([rmsnorm(memory, layer.attn_norm), normed], axis=0)
        mask = build_segment_mask(memory_length, T, config)
    q = matmul(normed, layer.projection("L_q"))
    k = matmul(context, layer.projection("L_k"))
    v = matmul(context, layer.projection("L_v"))
    if layer.rope_base is not None:
        q = rope_apply(q, range(memory_length, memory_length + T), layer.rope_base, config.d_head)
        k = rope_apply(k, range(memory_length + T), layer.rope_base, config.d_head)
    y1 = add(x, matmul(mha(q, k, v, mask, config.n_heads), layer.wo))
    z = rmsnorm(y1, layer.ffn_norm)
    gated = mul(silu(matmul(z, layer.w_gate)), matmul(z, layer.w_up))
    return add(y1, matmul(gated, layer.w_down))


def segment_forward(segments: Sequence[Tensor], layers: Sequence[LlamaLayer]) -> list[Tensor]:
    """Run segments in order; layer n attends over SG(previous input to n) + current input."""
    if not segments:
        raise InputError("segment_forward needs at least one segment")
    memory = SegmentMemory(len(layers))
    outputs = []
    for segment in segments:
        hidden = segment
        layer_inputs = []
        for n, layer in enumerate(layers):
            layer_inputs.append(hidden)
            hidden = llama_block(hidden, layer, memory=memory.states[n])
        memory.update(layer_inputs)
        outputs.append(hidden)
    return outputs


# ============================================================================
# Low-rank adapters
# ============================================================================


def lora_attach(layer: LlamaLayer, adapter: LoraAdapter) -> None:
    """Attach `adapter` to one projection and freeze that projection's base weight."""
    if adapter.target not in LORA_TARGETS:
        raise ConfigurationError(f"adapter target {adapter.target!r} not in {LORA_TARGETS}")
    if adapter.target in layer.adapters:
        raise ConfigurationError(f"{adapter.target} already carries an adapter")
    d = layer.config.d_model
    if adapter.rank > d:
        raise ConfigurationError(f"adapter rank {adapter.rank} exceeds width {d}")
    if adapter.down.shape != (d, adapter.rank) or adapter.up.shape != (adapter.rank, d):
        raise DimensionError(
            f"adapter shapes {adapter.down.shape}/{adapter.up.shape} do not fit width {d}"
        )
    getattr(layer, _TARGET_ATTRS[adapter.target]).requires_grad = False
    adapter.down.requires_grad = True
    adapter.up.requires_grad = True
    layer.adapters[adapter.target] = adapter


# ============================================================================
# Blocked forward kernel (no autodiff)
# ============================================================================


def attention_forward_blocked(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                              window_radius: int | None = None, causal: bool = False,
                              block: int = 256) -> np.ndarray:
    """Single-head attention over query blocks without materialising the T x T matrix.

    With a window only the banded key range of each block is touched, so the cost is
    linear in T; without one it is quadratic.
    """
    T, d = q.shape
    factor = 1.0 / math.sqrt(d)
    out = np.empty_like(v)
    for start in range(0, T, block):
        stop = min(start + block, T)
        if window_radius is None:
            k_lo, k_hi = 0, (stop if causal else T)
        else:
            k_lo = max(0, start - window_radius)
            k_hi = stop if causal else min(T, stop + window_radius)
        scores = (q[start:stop] @ k[k_lo:k_hi].T) * factor
        rows = np.arange(start, stop)[:, None]
        cols = np.arange(k_lo, k_hi)[None, :]
        allowed = np.ones(scores.shape, dtype=bool)
        if window_radius is not None:
            allowed &= np.abs(rows - cols) <= window_radius
        if causal:
            allowed &= cols <= rows
        if not allowed.any(axis=1).all():
            raise ContractError("a query row has no attendable key")
        scores = np.where(allowed, scores, -np.inf)
        weights = np.exp(scores - scores.max(axis=1, keepdims=True))
        weights /= weights.sum(axis=1, keepdims=True)
        out[start:stop] = weights @ v[k_lo:k_hi]
    return out
