"""Run configuration: environment settings and flat `key = value` config files."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from common import ConfigurationError, canonical_json, sha256_text
from corpus import FIELDS
from model import ModelConfig
from training import TrainConfig

logger = logging.getLogger(__name__)

# --- CONFIG ---
LOG_LEVEL = os.getenv("LONGSCORE_LOG_LEVEL", "INFO")
LEDGER_PATH = os.getenv("LONGSCORE_LEDGER", "")  # Empty means runs.db under --out
LONG_ESSAY_TOKENS = int(os.getenv("LONGSCORE_LONG_ESSAY_TOKENS", "2048"))


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse_optional(text: str) -> Any:
        return None if text.lower() in ("", "none") else parse(text)

    return parse_optional


def _list(parse: Callable[[str], Any]) -> Callable[[str], tuple]:
    def parse_list(text: str) -> tuple:
        return tuple(parse(item.strip()) for item in text.split(",") if item.strip())

    return parse_list


@dataclass(frozen=True)
class ConfigKey:
    name: str
    kind: str
    default: Any
    doc: str

    @property
    def parse(self) -> Callable[[str], Any]:
        return _PARSERS[self.kind]


_PARSERS: dict[str, Callable[[str], Any]] = {
    "int": int,
    "float": float,
    "str": str,
    "bool": _bool,
    "int?": _optional(int),
    "float?": _optional(float),
    "str?": _optional(str),
    "int list": _list(int),
    "float list": _list(float),
    "str list": _list(str),
}

_KEYS = [
    # model
    ConfigKey("architecture", "str", "full-attention",
              "full-attention, sliding-window, segment-recurrent or ssm"),
    ConfigKey("d_model", "int", 32, "hidden width"),
    ConfigKey("depth", "int", 2, "number of blocks"),
    ConfigKey("n_heads", "int", 2, "attention heads"),
    ConfigKey("d_ff", "int?", None, "feed-forward width (2 x d_model when unset)"),
    ConfigKey("causal", "bool", True, "causal mask for full attention"),
    ConfigKey("window_radius", "int?", None, "sliding-window radius"),
    ConfigKey("global_tokens", "int list", (0,), "positions attending everywhere"),
    ConfigKey("segment_length", "int?", None, "segment length for segment recurrence"),
    ConfigKey("rope", "bool", True, "rotary position encoding on queries and keys"),
    ConfigKey("rope_base", "float", 10000.0, "rotary frequency base"),
    ConfigKey("rope_base_overrides", "float list", (), "one rotary base per layer"),
    ConfigKey("state_dim", "int", 8, "state dimension per ssm channel"),
    ConfigKey("conv_width", "int", 4, "causal depthwise conv width"),
    ConfigKey("conv_max_width", "int", 8, "largest conv width accepted"),
    ConfigKey("expand", "int", 2, "ssm inner width as a multiple of d_model"),
    ConfigKey("scan_chunk", "int?", 64, "chunk length of the blocked scan (none: sequential)"),
    ConfigKey("max_length", "int", 8192, "tokens kept per essay"),
    ConfigKey("pooling", "str?", None, "first-token or last-token (architecture default)"),
    ConfigKey("lora_rank", "int?", None, "attach adapters of this rank to L_q, L_k, L_v"),
    ConfigKey("lora_alpha", "float?", None, "adapter scale numerator (rank when unset)"),
    # training
    ConfigKey("seed", "int", 0, "seed for initialisation, split and shuffling"),
    ConfigKey("lr", "float?", None, "initial learning rate (1e-6, or 1e-5 for ssm)"),
    ConfigKey("epochs", "int", 10, "epoch limit"),
    ConfigKey("batch_size", "int?", None, "batch size (4, or 8 for ssm)"),
    ConfigKey("weight_decay", "float", 0.01, "decoupled weight decay"),
    ConfigKey("beta1", "float", 0.9, "first-moment decay"),
    ConfigKey("beta2", "float", 0.999, "second-moment decay"),
    ConfigKey("eps", "float", 1e-8, "optimizer epsilon"),
    ConfigKey("dev_fraction", "float", 0.10, "share of train held out for early stopping"),
    ConfigKey("patience", "int", 3, "epochs without dev improvement before stopping"),
    ConfigKey("freeze_ssm", "bool", True, "freeze A, B, C, conv and L_gate when training ssm"),
    ConfigKey("long_essay_tokens", "int?", None,
              "singleton batches above this length (LONGSCORE_LONG_ESSAY_TOKENS)"),
    # corpus
    ConfigKey("corpus_path", "str?", None, "corpus file, relative to the config file"),
    ConfigKey("corpus_format", "str", "csv", "csv or jsonl"),
    ConfigKey("score_min", "int?", None, "lowest rubric score (span of data when unset)"),
    ConfigKey("score_max", "int?", None, "highest rubric score (span of data when unset)"),
    *(ConfigKey(f"column_{name}", "str?", None, f"source column holding {name}")
      for name in FIELDS),
    ConfigKey("min_freq", "int", 2, "vocabulary frequency cutoff"),
    ConfigKey("synthetic_train", "int", 0, "generate this many train essays instead of reading"),
    ConfigKey("synthetic_test", "int", 0, "generated test essays"),
    ConfigKey("synthetic_scores", "int", 4, "score classes of the generated corpus"),
    ConfigKey("synthetic_min_words", "int", 50, "shortest generated essay"),
    ConfigKey("synthetic_max_words", "int", 400, "longest generated essay"),
    ConfigKey("human_baseline", "float?", None, "human-human kappa row for reports"),
    # bench
    ConfigKey("bench_mechanisms", "str list", ("full-attention", "sliding-window", "ssm-scan"),
              "mechanisms to time"),
    ConfigKey("bench_lengths", "int list", (1024, 2048, 4096, 8192, 16384),
              "sequence lengths, strictly increasing"),
    ConfigKey("bench_reps", "int", 5, "repetitions per length (median reported)"),
    ConfigKey("bench_d_model", "int", 32, "channel width"),
    ConfigKey("bench_window_radius", "int", 128, "sliding-window radius"),
    ConfigKey("bench_state_dim", "int", 16, "ssm state dimension"),
]

CONFIG_KEYS: dict[str, ConfigKey] = {key.name: key for key in _KEYS}


def defaults() -> dict[str, Any]:
    return {name: key.default for name, key in CONFIG_KEYS.items()}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Explicitly set keys of a `key = value` file; `#` starts a comment."""
    values: dict[str, Any] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{number}: expected key = value")
        name, value = (part.strip() for part in line.split("=", 1))
        if name not in CONFIG_KEYS:
            raise ConfigurationError(f"{source}:{number}: unknown key {name!r}")
        if name in values:
            raise ConfigurationError(f"{source}:{number}: duplicate key {name!r}")
        key = CONFIG_KEYS[name]
        try:
            values[name] = key.parse(value)
        except ValueError as exc:
            raise ConfigurationError(
                f"{source}:{number}: {name} expects {key.kind}, got {value!r}"
            ) from exc
    return values


def load_config(path: Path | None) -> dict[str, Any]:
    """Defaults overlaid with the file's values."""
    values = defaults()
    if path is None:
        return values
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} not found")
    values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    if values["corpus_path"] is not None and not Path(values["corpus_path"]).is_absolute():
        values["corpus_path"] = str(path.parent / values["corpus_path"])
    logger.debug("⚙️ loaded %s", path)
    return values


def config_hash(values: Mapping[str, Any]) -> str:
    return sha256_text(canonical_json({k: _jsonable(v) for k, v in values.items()}))


def _jsonable(value: Any) -> Any:
    return list(value) if isinstance(value, tuple) else value


def describe_keys() -> str:
    return "\n".join(
        f"  {key.name} ({key.kind}, default {_render_default(key.default)}): {key.doc}"
        for key in CONFIG_KEYS.values()
    )


def _render_default(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value) or "empty"
    return str(value).lower() if isinstance(value, bool) else str(value)


# ============================================================================
# Typed views
# ============================================================================


def model_config_from(values: Mapping[str, Any], vocab_size: int,
                      n_classes: int) -> ModelConfig:
    return ModelConfig(
        architecture=values["architecture"],
        vocab_size=vocab_size,
        n_classes=n_classes,
        d_model=values["d_model"],
        depth=values["depth"],
        n_heads=values["n_heads"],
        d_ff=values["d_ff"],
        causal=values["causal"],
        window_radius=values["window_radius"],
        global_tokens=tuple(values["global_tokens"]),
        segment_length=values["segment_length"],
        rope_base=values["rope_base"] if values["rope"] else None,
        rope_base_overrides=tuple(values["rope_base_overrides"]),
        state_dim=values["state_dim"],
        conv_width=values["conv_width"],
        conv_max_width=values["conv_max_width"],
        expand=values["expand"],
        scan_chunk=values["scan_chunk"],
        max_length=values["max_length"],
        pooling=values["pooling"],
        lora_rank=values["lora_rank"],
        lora_alpha=values["lora_alpha"],
    )


def train_config_from(values: Mapping[str, Any]) -> TrainConfig:
    return TrainConfig.for_architecture(
        values["architecture"],
        lr=values["lr"],
        epochs=values["epochs"],
        batch_size=values["batch_size"],
        weight_decay=values["weight_decay"],
        betas=(values["beta1"], values["beta2"]),
        eps=values["eps"],
        dev_fraction=values["dev_fraction"],
        patience=values["patience"],
        seed=values["seed"],
        long_essay_tokens=values["long_essay_tokens"] or LONG_ESSAY_TOKENS,
        freeze_ssm=values["freeze_ssm"],
    )


@dataclass(frozen=True)
class CorpusSettings:
    path: Path | None
    fmt: str
    score_range: tuple[int, int] | None
    column_map: dict[str, str]
    min_freq: int
    synthetic_train: int
    synthetic_test: int
    synthetic_scores: int
    synthetic_min_words: int
    synthetic_max_words: int
    human_baseline: float | None

    @property
    def synthetic(self) -> bool:
        return self.synthetic_train > 0


def corpus_settings_from(values: Mapping[str, Any]) -> CorpusSettings:
    low, high = values["score_min"], values["score_max"]
    if (low is None) != (high is None):
        raise ConfigurationError("score_min and score_max must be set together")
    column_map = {
        name: values[f"column_{name}"] for name in FIELDS if values[f"column_{name}"] is not None
    }
    return CorpusSettings(
        path=Path(values["corpus_path"]) if values["corpus_path"] else None,
        fmt=values["corpus_format"],
        score_range=None if low is None else (low, high),
        column_map=column_map,
        min_freq=values["min_freq"],
        synthetic_train=values["synthetic_train"],
        synthetic_test=values["synthetic_test"],
        synthetic_scores=values["synthetic_scores"],
        synthetic_min_words=values["synthetic_min_words"],
        synthetic_max_words=values["synthetic_max_words"],
        human_baseline=values["human_baseline"],
    )


@dataclass(frozen=True)
class BenchSettings:
    mechanisms: tuple[str, ...]
    lengths: tuple[int, ...]
    reps: int
    d_model: int
    window_radius: int
    state_dim: int
    seed: int


def bench_settings_from(values: Mapping[str, Any]) -> BenchSettings:
    return BenchSettings(
        mechanisms=tuple(values["bench_mechanisms"]),
        lengths=tuple(values["bench_lengths"]),
        reps=values["bench_reps"],
        d_model=values["bench_d_model"],
        window_radius=values["bench_window_radius"],
        state_dim=values["bench_state_dim"],
        seed=values["seed"],
    )
