"""Essay-score classifier: embedding, a block stack of one architecture, pooling and a
randomly initialised classification head. Also the binary checkpoint container."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from attention import (
    LORA_TARGETS,
    AttentionConfig,
    LlamaLayer,
    LoraAdapter,
    llama_block,
    lora_attach,
    segment_forward,
)
from common import ConfigurationError, InputError, SchemaError, canonical_json
from ssm import MambaBlock, mamba_block
from tensor import Tensor, add, concat, embedding_lookup, matmul, reshape, slice_rows

logger = logging.getLogger(__name__)

ARCHITECTURES = ("full-attention", "sliding-window", "segment-recurrent", "ssm")
POOLINGS = ("first-token", "last-token")

CHECKPOINT_MAGIC = b"LSCK"
CHECKPOINT_VERSION = 1
_PREAMBLE = 10  # magic, <H version, <I header length


@dataclass(frozen=True)
class ModelConfig:
    architecture: str
    vocab_size: int
    n_classes: int
    d_model: int = 32
    depth: int = 2
    n_heads: int = 2
    d_ff: int | None = None
    causal: bool = True
    window_radius: int | None = None
    global_tokens: tuple[int, ...] = (0,)
    segment_length: int | None = None
    rope_base: float | None = 10000.0
    rope_base_overrides: tuple[float, ...] = ()
    state_dim: int = 8
    conv_width: int = 4
    conv_max_width: int = 8
    expand: int = 2
    scan_chunk: int | None = 64
    max_length: int = 8192
    pooling: str | None = None
    lora_rank: int | None = None
    lora_alpha: float | None = None

    def __post_init__(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.architecture!r}")
        if self.n_classes < 2:
            raise ConfigurationError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.max_length < 1 or self.vocab_size < 1 or self.d_model < 1 or self.depth < 1:
            raise ConfigurationError("max_length, vocab_size, d_model and depth must be positive")
        if self.pooling is not None and self.pooling not in POOLINGS:
            raise ConfigurationError(f"unknown pooling {self.pooling!r}")
        if self.architecture == "sliding-window" and not self.window_radius:
            raise ConfigurationError("sliding-window needs window_radius")
        if self.architecture == "segment-recurrent" and not self.segment_length:
            raise ConfigurationError("segment-recurrent needs segment_length")
        if self.architecture == "ssm":
            if self.state_dim < 1 or self.conv_width < 1 or self.expand < 1:
                raise ConfigurationError("ssm needs positive state_dim, conv_width and expand")
            if self.conv_width > self.conv_max_width:
                raise ConfigurationError(
                    f"conv width {self.conv_width} exceeds {self.conv_max_width}"
                )
            if self.lora_rank:
                raise ConfigurationError("adapters apply to attention projections only")
        else:
            if self.d_model % self.n_heads:
                raise ConfigurationError(f"{self.n_heads} heads do not divide {self.d_model}")
            if self.rope_base is not None and (self.d_model // self.n_heads) % 2:
                raise ConfigurationError("rope needs an even head width")
            if self.rope_base_overrides and len(self.rope_base_overrides) != self.depth:
                raise ConfigurationError("rope_base_overrides needs one base per layer")
        if self.lora_rank is not None and (self.lora_rank < 1 or self.lora_rank > self.d_model):
            raise ConfigurationError(f"lora rank {self.lora_rank} outside [1, {self.d_model}]")

    @property
    def resolved_pooling(self) -> str:
        if self.pooling is not None:
            return self.pooling
        if self.architecture == "sliding-window" or (
            self.architecture == "full-attention" and not self.causal
        ):
            return "first-token"
        return "last-token"

    def attention_config(self) -> AttentionConfig:
        if self.architecture == "sliding-window":
            return AttentionConfig(
                d_model=self.d_model,
                n_heads=self.n_heads,
                window_radius=self.window_radius,
                global_token_ids=frozenset(self.global_tokens),
                causal=False,
                rope_base=self.rope_base,
            )
        return AttentionConfig(
            d_model=self.d_model,
            n_heads=self.n_heads,
            causal=self.causal or self.architecture == "segment-recurrent",
            rope_base=self.rope_base,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        payload = dict(payload)
        payload["global_tokens"] = tuple(payload.get("global_tokens", (0,)))
        payload["rope_base_overrides"] = tuple(payload.get("rope_base_overrides", ()))
        return cls(**payload)


@dataclass
class Classifier:
    config: ModelConfig
    seed: int
    embedding: Tensor
    blocks: list = field(default_factory=list)
    head_weight: Tensor | None = None
    head_bias: Tensor | None = None

    def parameters(self) -> dict[str, Tensor]:
        params = {"embedding": self.embedding}
        for index, block in enumerate(self.blocks):
            for name, tensor in block.parameters().items():
                params[f"blocks.{index}.{name}"] = tensor
        params["head.weight"] = self.head_weight
        params["head.bias"] = self.head_bias
        return params

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {name: t for name, t in self.parameters().items() if t.requires_grad}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters().items()}

    def restore(self, state: dict[str, np.ndarray]) -> None:
        for name, tensor in self.parameters().items():
            tensor.data[...] = state[name]


def parameter_census(model: Classifier) -> dict[str, int]:
    """Parameter counts per component: embedding, each block, head."""
    census = {"embedding": model.embedding.data.size}
    for index, block in enumerate(model.blocks):
        census[f"blocks.{index}"] = sum(t.data.size for t in block.parameters().values())
    census["head"] = model.head_weight.data.size + model.head_bias.data.size
    return census


def parameter_count(model: Classifier) -> int:
    return sum(t.data.size for t in model.parameters().values())


def lora_partition(model: Classifier) -> tuple[set[str], set[str]]:
    """Train adapters and the head; freeze every base weight."""
    frozen, trainable = set(), set()
    for name, tensor in model.parameters().items():
        if ".lora." in name or name.startswith("head."):
            tensor.requires_grad = True
            trainable.add(name)
        else:
            tensor.requires_grad = False
            frozen.add(name)
    return frozen, trainable


def build_classifier(config: ModelConfig, seed: int) -> Classifier:
    """Deterministically initialise every parameter from `seed`."""
    rng = np.random.default_rng(seed)
    d = config.d_model
    embedding = Tensor(rng.normal(0.0, 1.0, (config.vocab_size, d)), True)
    blocks: list = []
    if config.architecture == "ssm":
        for _ in range(config.depth):
            blocks.append(
                MambaBlock.init(
                    d,
                    d * config.expand,
                    config.state_dim,
                    config.conv_width,
                    rng,
                    config.conv_max_width,
                )
            )
    else:
        attention = config.attention_config()
        d_ff = config.d_ff or 2 * d
        for index in range(config.depth):
            base = config.rope_base_overrides[index] if config.rope_base_overrides else None
            blocks.append(LlamaLayer.init(attention, d_ff, rng, rope_base=base))
    bound = 1.0 / math.sqrt(d)
    head_weight = Tensor(rng.uniform(-bound, bound, (d, config.n_classes)), True)
    head_bias = Tensor(rng.uniform(-bound, bound, config.n_classes), True)
    model = Classifier(config, seed, embedding, blocks, head_weight, head_bias)
    if config.lora_rank:
        alpha = config.lora_alpha if config.lora_alpha is not None else float(config.lora_rank)
        for layer in blocks:
            for target in LORA_TARGETS:
                lora_attach(layer, LoraAdapter.create(d, config.lora_rank, alpha, target, rng))
        lora_partition(model)
    logger.debug("🔧 built %s classifier with %d parameters", config.architecture,
                 parameter_count(model))
    return model


def _run_blocks(model: Classifier, hidden: Tensor) -> Tensor:
    config = model.config
    if config.architecture == "ssm":
        for block in model.blocks:
            hidden = add(hidden, mamba_block(hidden, block, config.scan_chunk))
        return hidden
    if config.architecture == "segment-recurrent":
        length = config.segment_length
        T = hidden.shape[0]
        segments = [
            slice_rows(hidden, start, min(start + length, T)) for start in range(0, T, length)
        ]
        outputs = segment_forward(segments, model.blocks)
        return outputs[0] if len(outputs) == 1 else concat(outputs, axis=0)
    for layer in model.blocks:
        hidden = llama_block(hidden, layer)
    return hidden


def forward_logits(model: Classifier, token_ids: Sequence[int]) -> Tensor:
    """Logits of shape (n_classes,) for one essay, truncated to max_length tokens."""
    if len(token_ids) == 0:
        raise InputError("cannot score an empty token sequence")
    ids = list(token_ids[: model.config.max_length])
    hidden = _run_blocks(model, embedding_lookup(model.embedding, ids))
    position = 0 if model.config.resolved_pooling == "first-token" else len(ids) - 1
    pooled = slice_rows(hidden, position, position + 1)
    logits = add(matmul(pooled, model.head_weight), model.head_bias)
    return reshape(logits, (model.config.n_classes,))


def argmax_score(logits: np.ndarray, score_offset: int) -> int:
    """First maximal class (ties go to the lower index) mapped back to a rubric score."""
    return int(np.argmax(logits)) + score_offset


def predict_score(model: Classifier, token_ids: Sequence[int], score_offset: int) -> int:
    return argmax_score(forward_logits(model, token_ids).data, score_offset)


# ============================================================================
# Checkpoint container
# ============================================================================


def save_checkpoint(model: Classifier, path: Path) -> None:
    """Write magic, version, a length-prefixed JSON header and float64 payloads."""
    params = model.parameters()
    header = canonical_json(
        {
            "config": model.config.to_dict(),
            "seed": model.seed,
            "parameters": [[name, list(t.shape)] for name, t in params.items()],
        }
    ).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
        handle.write(header)
        for tensor in params.values():
            handle.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def load_checkpoint(path: Path) -> Classifier:
    """Rebuild the classifier from its config echo and overwrite every parameter."""
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise SchemaError(f"{path} is not a checkpoint")
    if len(blob) < _PREAMBLE:
        raise SchemaError(f"{path} ends inside the preamble")
    version, header_length = struct.unpack_from("<HI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise SchemaError(f"unsupported checkpoint version {version}")
    offset = _PREAMBLE
    if len(blob) < offset + header_length:
        raise SchemaError(f"{path} ends inside the header")
    try:
        header = json.loads(blob[offset : offset + header_length].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        seed = int(header["seed"])
        entries = [(str(name), list(shape)) for name, shape in header["parameters"]]
    except (ValueError, KeyError, TypeError) as e:
        raise SchemaError(f"{path} has a malformed header: {e}") from e
    offset += header_length
    model = build_classifier(config, seed)
    params = model.parameters()
    missing = set(params) - {name for name, _ in entries}
    if missing:
        raise SchemaError(f"checkpoint lacks {', '.join(sorted(missing))}")
    for name, shape in entries:
        if name not in params or list(params[name].shape) != shape:
            raise SchemaError(f"checkpoint parameter {name} {shape} does not fit the model")
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * count > len(blob):
            raise SchemaError(f"{path} is truncated inside parameter {name}")
        values = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        params[name].data[...] = values.reshape(shape)
        offset += 8 * count
    if offset != len(blob):
        raise SchemaError(f"{path} has {len(blob) - offset} trailing bytes")
    return model
