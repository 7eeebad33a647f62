"""Essay corpora: ingestion, vocabulary, tokenization, length statistics and prompts."""
from __future__ import annotations

import csv
import io
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from common import InputError, SchemaError

logger = logging.getLogger(__name__)

FIELDS = ("essay_id", "full_text", "score", "grade", "split")
GRADES = (6, 8, 9, 10)
SPLITS = ("train", "test")
FORMATS = ("csv", "jsonl")

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")

PROMPT_USER = (
    "Assign a **Score** to the **Essay** using the **Rubric** provided. "
    "\n\n**Rubric**: {rubric}\n\n**Essay**: {essay}"
)
PROMPT_ASSISTANT = "**Score**: {score}"


@dataclass(frozen=True)
class EssayRecord:
    essay_id: str
    full_text: str
    score: int
    grade: int
    split: str

    @property
    def word_count(self) -> int:
        return len(self.full_text.split())


@dataclass(frozen=True)
class Reject:
    line: int
    reason: str


@dataclass
class Corpus:
    records: list[EssayRecord]
    score_min: int
    score_max: int
    rejects: list[Reject] = field(default_factory=list)

    def split(self, name: str) -> list[EssayRecord]:
        return [r for r in self.records if r.split == name]

    @property
    def n_classes(self) -> int:
        return self.score_max - self.score_min + 1


def _parse_record(raw: Mapping, line: int, score_range: tuple[int, int] | None):
    """EssayRecord or a Reject explaining why the row was dropped."""
    missing = [name for name in FIELDS if raw.get(name) in (None, "")]
    if missing:
        return Reject(line, f"missing {', '.join(missing)}")
    try:
        score = int(str(raw["score"]).strip())
    except ValueError:
        return Reject(line, f"unparseable score {raw['score']!r}")
    try:
        grade = int(str(raw["grade"]).strip())
    except ValueError:
        return Reject(line, f"unparseable grade {raw['grade']!r}")
    if grade not in GRADES:
        return Reject(line, f"grade {grade} not in {GRADES}")
    split = str(raw["split"]).strip().lower()
    if split not in SPLITS:
        return Reject(line, f"unknown split {raw['split']!r}")
    if score_range is not None and not score_range[0] <= score <= score_range[1]:
        return Reject(line, f"score {score} outside [{score_range[0]}, {score_range[1]}]")
    text = str(raw["full_text"])
    if not text.strip():
        return Reject(line, "empty essay text")
    return EssayRecord(str(raw["essay_id"]), text, score, grade, split)


def _csv_rows(path: Path, column_map: Mapping[str, str]):
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        absent = [column_map.get(name, name) for name in FIELDS
                  if column_map.get(name, name) not in header]
        if absent:
            raise SchemaError(f"{path} lacks column(s) {', '.join(absent)}")
        line = reader.line_num + 1
        for row in reader:
            yield line, {name: row.get(column_map.get(name, name)) for name in FIELDS}
            line = reader.line_num + 1


def _jsonl_rows(path: Path, column_map: Mapping[str, str]):
    with open(path, encoding="utf-8") as handle:
        for line, text in enumerate(handle, start=1):
            if not text.strip():
                continue
            try:
                payload = json.loads(text)
            except json.JSONDecodeError as exc:
                yield line, exc
                continue
            if not isinstance(payload, dict):
                yield line, ValueError("record is not an object")
                continue
            yield line, {name: payload.get(column_map.get(name, name)) for name in FIELDS}


def ingest(path: Path, fmt: str = "csv", column_map: Mapping[str, str] | None = None,
           score_range: tuple[int, int] | None = None) -> Corpus:
    """Validate every row; malformed rows become rejects carrying their line number.

    Without `score_range` the range is the span of accepted scores.
    """
    path = Path(path)
    if fmt not in FORMATS:
        raise InputError(f"unknown corpus format {fmt!r}")
    if not path.is_file():
        raise InputError(f"corpus file {path} not found")
    rows = _csv_rows if fmt == "csv" else _jsonl_rows
    records: list[EssayRecord] = []
    rejects: list[Reject] = []
    try:
        for line, raw in rows(path, column_map or {}):
            if isinstance(raw, Exception):
                rejects.append(Reject(line, f"unparseable record: {raw}"))
                continue
            parsed = _parse_record(raw, line, score_range)
            (rejects if isinstance(parsed, Reject) else records).append(parsed)
    except UnicodeDecodeError as e:
        raise SchemaError(f"{path} is not valid UTF-8: {e}") from e
    if not records:
        raise InputError(f"{path} holds no valid records ({len(rejects)} rejected)")
    if score_range is None:
        score_range = (min(r.score for r in records), max(r.score for r in records))
    logger.info("📚 ingested %d records from %s, %d rejected", len(records), path.name,
                len(rejects))
    return Corpus(records, score_range[0], score_range[1], rejects)


def write_corpus(records: Iterable[EssayRecord], path: Path, fmt: str = "csv") -> None:
    """Serialize records under the canonical field names."""
    rows = [asdict(record) for record in records]
    with open(path, "w", newline="", encoding="utf-8") as handle:
        if fmt == "jsonl":
            for row in rows:
                handle.write(json.dumps(row, ensure_ascii=False) + "\n")
            return
        writer = csv.DictWriter(handle, fieldnames=FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def format_rejects(rejects: Sequence[Reject], fmt: str = "text") -> str:
    if fmt == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["line", "reason"])
        writer.writerows((r.line, r.reason) for r in rejects)
        return buffer.getvalue()
    return "".join(f"line {r.line}: {r.reason}\n" for r in rejects)


# ============================================================================
# Tokenization and vocabulary
# ============================================================================


def _is_word_char(ch: str) -> bool:
    return ch.isalnum() or ch == "_"


def split_tokens(text: str) -> list[str]:
    """Lowercase, split on whitespace, detach leading and trailing punctuation one mark each."""
    tokens: list[str] = []
    for word in text.lower().split():
        start, stop = 0, len(word)
        while start < stop and not _is_word_char(word[start]):
            start += 1
        while stop > start and not _is_word_char(word[stop - 1]):
            stop -= 1
        tokens.extend(word[:start])
        if start < stop:
            tokens.append(word[start:stop])
        tokens.extend(word[stop:])
    return tokens


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.tokens[: len(RESERVED)] != RESERVED:
            raise SchemaError("vocabulary must start with the reserved tokens")
        object.__setattr__(self, "_ids", {token: i for i, token in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def save(self, path: Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "Vocab":
        return cls(tuple(Path(path).read_text(encoding="utf-8").splitlines()))


def build_vocab(records: Iterable[EssayRecord], min_freq: int = 2) -> Vocab:
    """Vocabulary over the training split: by descending frequency, ties alphabetical."""
    counts = Counter()
    for record in records:
        if record.split == "train":
            counts.update(split_tokens(record.full_text))
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    logger.info("🔤 vocabulary of %d tokens (%d below cutoff)", len(kept) + len(RESERVED),
                len(counts) - len(kept))
    return Vocab(RESERVED + tuple(kept))


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [BOS] + [vocab.id_of(token) for token in split_tokens(text)] + [EOS]


# ============================================================================
# Length statistics
# ============================================================================


@dataclass(frozen=True)
class LengthRow:
    split: str
    grade: str
    count: int
    mean_words: float


def length_stats(corpus: Corpus) -> list[LengthRow]:
    """Per split and grade: essay count and mean whitespace word count, plus split totals."""
    if not corpus.records:
        raise InputError("length statistics need a non-empty corpus")
    rows: list[LengthRow] = []
    for split in SPLITS:
        records = corpus.split(split)
        if not records:
            continue
        for grade in GRADES:
            words = [r.word_count for r in records if r.grade == grade]
            if words:
                rows.append(LengthRow(split, str(grade), len(words), float(np.mean(words))))
        words = [r.word_count for r in records]
        rows.append(LengthRow(split, "total", len(words), float(np.mean(words))))
    return rows


def format_length_stats(rows: Sequence[LengthRow], fmt: str = "text") -> str:
    table = [["split", "grade", "count", "avg_words"]]
    table += [[r.split, r.grade, str(r.count), f"{r.mean_words:.1f}"] for r in rows]
    if fmt == "csv":
        buffer = io.StringIO()
        csv.writer(buffer, lineterminator="\n").writerows(table)
        return buffer.getvalue()
    widths = [max(len(line[k]) for line in table) for k in range(4)]
    return "".join(
        "  ".join(cell.rjust(w) if k >= 2 else cell.ljust(w)
                  for k, (cell, w) in enumerate(zip(line, widths))).rstrip() + "\n"
        for line in table
    )


# ============================================================================
# Prompt template
# ============================================================================


def render_prompt(rubric: str, essay: str, score: int | None = None) -> tuple[str, str]:
    """(user, assistant) strings of the instruction-tuning template."""
    if not rubric or not essay:
        raise InputError("rubric and essay must be non-empty")
    user = PROMPT_USER.format(rubric=rubric, essay=essay)
    assistant = "" if score is None else PROMPT_ASSISTANT.format(score=score)
    return user, assistant


# ============================================================================
# Synthetic keyword-density corpus
# ============================================================================

KEYWORDS = ("evidence", "because", "therefore", "however", "analysis", "example",
            "furthermore", "conclusion")
FILLER = ("the", "a", "student", "school", "day", "went", "said", "they", "it", "was",
          "very", "good", "and", "then", "we", "people", "think", "time", "many", "things",
          "like", "would", "could", "about", "world", "important", "really", "just")
DENSITY_CEILING = 0.4


def keyword_density(text: str) -> float:
    words = [w.strip(".,").lower() for w in text.split()]
    return sum(w in KEYWORDS for w in words) / max(len(words), 1)


def density_score(density: float, score_min: int, n_scores: int) -> int:
    bucket = int(density / (DENSITY_CEILING / n_scores))
    return score_min + min(max(bucket, 0), n_scores - 1)


def synthesize_corpus(n_train: int, n_test: int, seed: int, n_scores: int = 4,
                      score_min: int = 1, min_words: int = 50, max_words: int = 400,
                      ) -> Corpus:
    """Essays whose score is the bucket of their keyword density."""
    rng = np.random.default_rng(seed)
    width = DENSITY_CEILING / n_scores
    records = []
    for index in range(n_train + n_test):
        split = "train" if index < n_train else "test"
        target = rng.integers(n_scores)
        length = int(rng.integers(min_words, max_words + 1))
        n_keywords = int(round((target + 0.5) * width * length))
        is_keyword = np.zeros(length, dtype=bool)
        is_keyword[rng.choice(length, size=n_keywords, replace=False)] = True
        words = [
            KEYWORDS[rng.integers(len(KEYWORDS))] if flag else FILLER[rng.integers(len(FILLER))]
            for flag in is_keyword
        ]
        for end in range(11, length, 12):
            words[end] += "."
        text = " ".join(words)
        grades = GRADES if split == "train" else (6, 8, 10)
        records.append(
            EssayRecord(
                essay_id=f"syn-{index:05d}",
                full_text=text,
                score=density_score(n_keywords / length, score_min, n_scores),
                grade=grades[index % len(grades)],
                split=split,
            )
        )
    return Corpus(records, score_min, score_min + n_scores - 1)
