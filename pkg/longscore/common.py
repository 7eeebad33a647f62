"""Common utilities shared between the toolkit modules and main.py."""
import hashlib
import json
from pathlib import Path
from typing import Any


class LongScoreError(Exception):
    """Base error. `category` is the machine-readable tag the CLI prints."""

    category = "runtime"

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class DimensionError(LongScoreError):
    category = "dimension"


class ConfigurationError(LongScoreError):
    category = "configuration"


class VocabularyError(LongScoreError):
    category = "vocabulary"

    def __init__(self, token_id: int, vocab_size: int):
        super().__init__(f"token id {token_id} outside vocabulary of size {vocab_size}")
        self.token_id = token_id


class LabelError(LongScoreError):
    category = "label"


class ContractError(LongScoreError):
    category = "contract"


class InputError(LongScoreError):
    category = "input"


class SchemaError(LongScoreError):
    category = "schema"


class UndefinedKappaError(LongScoreError):
    category = "undefined-kappa"


class UsageError(LongScoreError):
    category = "usage"


class TrainingAbortedError(LongScoreError):
    category = "training-aborted"

    def __init__(self, detail: str, diagnostics: dict[str, Any] | None = None):
        super().__init__(detail)
        self.diagnostics = diagnostics or {}


def canonical_json(payload: Any) -> str:
    """JSON with sorted keys and no whitespace, so equal payloads hash equally."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def file_checksum(path: Path) -> str:
    """SHA-256 of a file's bytes, read in blocks."""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()
