"""Fine-tuning regime: stratified dev split, AdamW, linear decay and early stopping on dev QWK."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from common import (
    ConfigurationError,
    InputError,
    TrainingAbortedError,
    UndefinedKappaError,
)
from corpus import Corpus, EssayRecord, Vocab, tokenize
from metrics import KappaReport, RatingTable, per_group_report, quadratic_weighted_kappa
from model import Classifier, argmax_score, forward_logits
from ssm import freeze_partition
from tensor import Tape, backward, concat, cross_entropy, reshape

logger = logging.getLogger(__name__)

LONG_ESSAY_TOKENS = 2048


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-6
    epochs: int = 10
    batch_size: int = 4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    dev_fraction: float = 0.10
    patience: int = 3
    seed: int = 0
    long_essay_tokens: int = LONG_ESSAY_TOKENS
    freeze_ssm: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.dev_fraction < 1.0:
            raise ConfigurationError(f"dev_fraction must lie in (0, 1), got {self.dev_fraction}")
        if self.lr <= 0.0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.patience < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("patience, epochs and batch_size must be >= 1")

    @classmethod
    def for_architecture(cls, architecture: str, **overrides) -> "TrainConfig":
        """Defaults of the regime: the ssm recipe uses lr 1e-5 and batch 8."""
        defaults = {"lr": 1e-5, "batch_size": 8} if architecture == "ssm" else {}
        defaults.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**defaults)


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def split_dev(records: Sequence[EssayRecord], fraction: float, seed: int):
    """Hold out round(fraction * N) records, apportioned over scores by largest remainder."""
    if len(records) < 10:
        raise InputError(f"a dev split needs at least 10 records, got {len(records)}")
    n_dev = int(np.floor(fraction * len(records) + 0.5))
    if n_dev == 0 or n_dev == len(records):
        raise ConfigurationError(f"dev fraction {fraction} leaves an empty split")
    by_score: dict[int, list[int]] = defaultdict(list)
    for index, record in enumerate(records):
        by_score[record.score].append(index)
    scores = sorted(by_score)
    exact = {s: fraction * len(by_score[s]) for s in scores}
    quota = {s: int(np.floor(exact[s])) for s in scores}
    extra = n_dev - sum(quota.values())
    for s in sorted(scores, key=lambda s: (-(exact[s] - quota[s]), s))[:extra]:
        quota[s] += 1
    rng = np.random.default_rng(seed)
    dev_index: set[int] = set()
    for s in scores:
        members = by_score[s]
        chosen = rng.permutation(len(members))[: quota[s]]
        dev_index.update(members[k] for k in chosen)
    train = [r for i, r in enumerate(records) if i not in dev_index]
    dev = [r for i, r in enumerate(records) if i in dev_index]
    return train, dev


def linear_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        raise ConfigurationError("the schedule needs at least one step")
    if not 0 <= step <= total_steps:
        raise ConfigurationError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 - step / total_steps)


def adamw_step(params: dict, state: OptimState, lr: float, config: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update over every parameter with requires_grad."""
    trainable = {name: p for name, p in params.items() if p.requires_grad}
    broken = [
        name for name, p in trainable.items()
        if p.grad is not None and not np.isfinite(p.grad).all()
    ]
    if broken:
        raise TrainingAbortedError(
            f"non-finite gradient in {', '.join(sorted(broken))}",
            {"step": state.t + 1, "parameters": sorted(broken), "lr": lr},
        )
    beta1, beta2 = config.betas
    state.t += 1
    correction1 = 1.0 - beta1**state.t
    correction2 = 1.0 - beta2**state.t
    for name, p in trainable.items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        update = (m / correction1) / (np.sqrt(v / correction2) + config.eps)
        p.data[...] = p.data - lr * update - lr * config.weight_decay * p.data


def plan_batches(lengths: Sequence[int], batch_size: int, long_threshold: int,
                 rng: np.random.Generator) -> list[list[int]]:
    """Shuffled index batches; a batch holding an over-long essay becomes singletons."""
    order = rng.permutation(len(lengths)).tolist()
    plan = []
    for start in range(0, len(order), batch_size):
        batch = order[start : start + batch_size]
        if any(lengths[i] > long_threshold for i in batch):
            plan.extend([i] for i in batch)
        else:
            plan.append(batch)
    return plan


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    dev_qwk: float | None
    lr: float


@dataclass
class TrainReport:
    epochs: list[EpochLog]
    best_epoch: int | None
    best_dev_qwk: float | None
    stopped_epoch: int
    total_steps: int

    def to_log_lines(self) -> list[str]:
        lines = []
        for log in self.epochs:
            qwk = "undefined" if log.dev_qwk is None else repr(log.dev_qwk)
            lines.append(
                f"epoch={log.epoch} train_loss={log.train_loss!r} dev_qwk={qwk} lr={log.lr!r}"
            )
        lines.append(
            f"best_epoch={self.best_epoch} best_dev_qwk={self.best_dev_qwk!r} "
            f"stopped_epoch={self.stopped_epoch} total_steps={self.total_steps}"
        )
        return lines


DevKappa = Callable[[Classifier, int], "float | None"]


def _encode(records: Sequence[EssayRecord], vocab: Vocab, max_length: int) -> list[list[int]]:
    return [tokenize(r.full_text, vocab)[:max_length] for r in records]


def _dev_qwk(model: Classifier, encoded: list[list[int]], records: Sequence[EssayRecord],
             corpus: Corpus) -> float | None:
    predicted = [argmax_score(forward_logits(model, ids).data, corpus.score_min) for ids in encoded]
    try:
        return quadratic_weighted_kappa([r.score for r in records], predicted,
                                        corpus.score_min, corpus.score_max)
    except UndefinedKappaError:
        return None


def _zero_grads(params: dict) -> None:
    for tensor in params.values():
        tensor.grad = None


def train(model: Classifier, corpus: Corpus, vocab: Vocab, config: TrainConfig,
          dev_kappa: DevKappa | None = None) -> TrainReport:
    """Train on the corpus' train split; the model ends holding its best-dev-QWK weights."""
    if model.config.n_classes != corpus.n_classes:
        raise ConfigurationError(
            f"model has {model.config.n_classes} classes, corpus spans {corpus.n_classes}"
        )
    if model.config.architecture == "ssm" and config.freeze_ssm:
        freeze_partition(model)
    train_records, dev_records = split_dev(corpus.split("train"), config.dev_fraction, config.seed)
    encoded = _encode(train_records, vocab, model.config.max_length)
    dev_encoded = _encode(dev_records, vocab, model.config.max_length)
    targets = [r.score - corpus.score_min for r in train_records]

    rng = np.random.default_rng(config.seed)
    lengths = [len(ids) for ids in encoded]
    plans = [
        plan_batches(lengths, config.batch_size, config.long_essay_tokens, rng)
        for _ in range(config.epochs)
    ]
    total_steps = sum(len(plan) for plan in plans)
    params = model.parameters()
    state = OptimState()
    n_classes = model.config.n_classes
    logger.info("🚀 training %s on %d essays (%d dev), %d steps", model.config.architecture,
                len(train_records), len(dev_records), total_steps)

    logs: list[EpochLog] = []
    best_qwk: float | None = None
    best_epoch: int | None = None
    best_state = None
    stale = 0
    step = 0
    for epoch, plan in enumerate(plans, start=1):
        losses = []
        lr = config.lr
        for batch in plan:
            _zero_grads(params)
            with Tape() as tape:
                rows = [reshape(forward_logits(model, encoded[i]), (1, n_classes)) for i in batch]
                logits = rows[0] if len(rows) == 1 else concat(rows, axis=0)
                loss = cross_entropy(logits, [targets[i] for i in batch])
            backward(loss, tape)
            lr = linear_lr(step, total_steps, config.lr)
            adamw_step(params, state, lr, config)
            losses.append(loss.item())
            step += 1
        if dev_kappa is not None:
            qwk = dev_kappa(model, epoch)
        else:
            qwk = _dev_qwk(model, dev_encoded, dev_records, corpus)
        log = EpochLog(epoch, float(np.mean(losses)), qwk, lr)
        logs.append(log)
        logger.info("📈 epoch %d train_loss=%.4f dev_qwk=%s", epoch, log.train_loss,
                    "undefined" if qwk is None else f"{qwk:.3f}")
        if qwk is not None and (best_qwk is None or qwk > best_qwk):
            best_qwk, best_epoch, best_state, stale = qwk, epoch, model.snapshot(), 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("⏹️ no dev improvement for %d epochs, stopping", stale)
                break
    _zero_grads(params)
    if best_state is not None:
        model.restore(best_state)
    else:
        logger.warning("⚠️ dev kappa never defined; keeping final weights")
    logger.info("✅ best dev_qwk=%s at epoch %s", best_qwk, best_epoch)
    return TrainReport(logs, best_epoch, best_qwk, logs[-1].epoch, total_steps)


# ============================================================================
# Evaluation
# ============================================================================


Scorer = Callable[[EssayRecord], int]


def classifier_scorer(model: Classifier, vocab: Vocab, score_min: int) -> Scorer:
    def score(record: EssayRecord) -> int:
        ids = tokenize(record.full_text, vocab)
        return argmax_score(forward_logits(model, ids).data, score_min)

    return score


def echo_scorer(record: EssayRecord) -> int:
    """Stub scorer returning the human score."""
    return record.score


def evaluate(scorer: Scorer, records: Sequence[EssayRecord], score_min: int, score_max: int,
             model_name: str) -> tuple[RatingTable, KappaReport]:
    """Pair human (first rater) with machine (second rater) scores and report kappa per grade."""
    if not records:
        raise InputError("evaluation needs a non-empty test set")
    predicted = [scorer(r) for r in records]
    if len(set(predicted)) == 1:
        logger.warning("⚠️ %s predicts the constant score %d", model_name, predicted[0])
    table = RatingTable.from_raters(
        [r.score for r in records], predicted, score_min, score_max, [r.grade for r in records]
    )
    report = per_group_report(table, model_name)
    logger.info("🎯 %s overall QWK %.3f on %d essays", model_name, report.overall, len(records))
    return table, report
