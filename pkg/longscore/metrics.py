"""Rater agreement: observed / expected proportion matrices and weighted kappa."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from common import InputError, LabelError, UndefinedKappaError

logger = logging.getLogger(__name__)

WEIGHTINGS = ("quadratic", "linear")
REPORT_GRADES = (6, 8, 10)
REPORT_COLUMNS = ("model", "overall", "grade6", "grade8", "grade10")
EXTENDED_COLUMNS = ("model", "L", "params", "overall", "grade6", "grade8", "grade10")


@dataclass(frozen=True)
class RatingTable:
    pairs: tuple[tuple[int, int], ...]
    score_min: int
    score_max: int
    groups: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.score_max - self.score_min + 1 < 2:
            raise InputError(f"score range [{self.score_min}, {self.score_max}] needs 2 scores")
        if self.groups is not None and len(self.groups) != len(self.pairs):
            raise InputError(f"{len(self.groups)} group labels for {len(self.pairs)} pairs")

    @classmethod
    def from_raters(cls, first: Sequence[int], second: Sequence[int], score_min: int,
                    score_max: int, groups: Sequence[int] | None = None) -> "RatingTable":
        if len(first) != len(second):
            raise InputError(f"rater lengths differ: {len(first)} vs {len(second)}")
        pairs = tuple((int(a), int(b)) for a, b in zip(first, second))
        return cls(pairs, score_min, score_max, tuple(groups) if groups is not None else None)

    @property
    def n_scores(self) -> int:
        return self.score_max - self.score_min + 1

    def subset(self, group: int) -> "RatingTable":
        if self.groups is None:
            raise InputError("table carries no group labels")
        pairs = tuple(p for p, g in zip(self.pairs, self.groups) if g == group)
        return RatingTable(pairs, self.score_min, self.score_max)


@dataclass(frozen=True)
class AgreementMatrices:
    O: np.ndarray
    E: np.ndarray
    W: np.ndarray


def weight_matrix(n: int, weights: str = "quadratic") -> np.ndarray:
    if weights not in WEIGHTINGS:
        raise InputError(f"unknown weighting {weights!r}")
    i, j = np.indices((n, n))
    distance = np.abs(i - j) / (n - 1)
    return distance**2 if weights == "quadratic" else distance


def build_matrices(table: RatingTable, weights: str = "quadratic") -> AgreementMatrices:
    """O from pair counts, E from the product of marginals, both as proportions."""
    if not table.pairs:
        raise InputError("cannot compute agreement on an empty table")
    n = table.n_scores
    counts = np.zeros((n, n))
    for first, second in table.pairs:
        for score in (first, second):
            if not table.score_min <= score <= table.score_max:
                raise LabelError(
                    f"score {score} outside [{table.score_min}, {table.score_max}]"
                )
        counts[first - table.score_min, second - table.score_min] += 1
    observed = counts / len(table.pairs)
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    return AgreementMatrices(O=observed, E=expected, W=weight_matrix(n, weights))


def weighted_kappa(matrices: AgreementMatrices) -> float:
    """kappa = 1 - sum(W*O) / sum(W*E); unclamped."""
    disagreement = float((matrices.W * matrices.O).sum())
    chance = float((matrices.W * matrices.E).sum())
    if chance <= 0.0:
        raise UndefinedKappaError("both raters use a single identical score; kappa is 0/0")
    return 1.0 - disagreement / chance


def quadratic_weighted_kappa(first: Sequence[int], second: Sequence[int], score_min: int,
                             score_max: int) -> float:
    table = RatingTable.from_raters(first, second, score_min, score_max)
    return weighted_kappa(build_matrices(table))


@dataclass(frozen=True)
class KappaReport:
    model: str
    overall: float | None
    per_grade: dict[int, float | None]
    context_length: int | None = None
    parameters: int | None = None

    def cell(self, column: str) -> str:
        if column == "L":
            return "" if self.context_length is None else str(self.context_length)
        if column == "params":
            return "" if self.parameters is None else str(self.parameters)
        if column == "overall":
            return _fmt(self.overall)
        return _fmt(self.per_grade.get(int(column.removeprefix("grade"))))


def _kappa_or_none(table: RatingTable, weights: str, label: str) -> float | None:
    if not table.pairs:
        return None
    try:
        return weighted_kappa(build_matrices(table, weights))
    except UndefinedKappaError:
        logger.warning("⚠️ kappa undefined for %s", label)
        return None


def per_group_report(table: RatingTable, model: str, grades: Sequence[int] = REPORT_GRADES,
                     weights: str = "quadratic") -> KappaReport:
    """Overall kappa plus one kappa per grade; grades without pairs stay blank.

    The overall value raises on a degenerate table; per-grade values turn into blanks.
    """
    overall = weighted_kappa(build_matrices(table, weights))
    per_grade: dict[int, float | None] = {}
    if table.groups is not None:
        for grade in grades:
            per_grade[grade] = _kappa_or_none(table.subset(grade), weights, f"grade {grade}")
    return KappaReport(model, overall, per_grade)


def human_baseline(value: float, grades: Sequence[int] = REPORT_GRADES) -> KappaReport:
    return KappaReport("human", value, {grade: None for grade in grades})


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.3f}"


def format_report(rows: Sequence[KappaReport], fmt: str = "text",
                  extended: bool = False) -> str:
    """Model rows by columns overall, grade6, grade8, grade10.

    `extended` adds the context length L and the parameter count after the model name;
    rows that do not know them leave the cells blank.
    """
    columns = EXTENDED_COLUMNS if extended else REPORT_COLUMNS
    table = [list(columns)]
    for row in rows:
        table.append([row.model] + [row.cell(column) for column in columns[1:]])
    if fmt == "csv":
        buffer = io.StringIO()
        csv.writer(buffer, lineterminator="\n").writerows(table)
        return buffer.getvalue()
    if fmt != "text":
        raise InputError(f"unknown report format {fmt!r}")
    widths = [max(len(line[k]) for line in table) for k in range(len(columns))]
    lines = []
    for line in table:
        cells = [line[0].ljust(widths[0])]
        cells += [cell.rjust(width) for cell, width in zip(line[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def report_from_dict(payload: Mapping) -> KappaReport:
    per_grade = {int(k): v for k, v in payload.get("per_grade", {}).items()}
    return KappaReport(payload["model"], payload.get("overall"), per_grade,
                       payload.get("context_length"), payload.get("parameters"))


def report_to_dict(report: KappaReport) -> dict:
    return {
        "model": report.model,
        "overall": report.overall,
        "per_grade": {str(k): v for k, v in report.per_grade.items()},
        "context_length": report.context_length,
        "parameters": report.parameters,
    }
