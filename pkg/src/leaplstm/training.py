"""Objective, Adam, and the epoch / early-stopping loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, backward
from .data import Document, make_batches, mask_probability, schedule_mask
from .model import LeapLSTM

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class ScheduleConfig:
    enabled: bool = False
    r_m: float = 0.45
    beta: float = 0.15
    index_base: int = 0


@dataclass
class TrainConfig:
    lam: float = 1.0
    r_target: float = 0.0
    tau: float = 0.1
    lr: float = 0.001
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 3
    seed: int = 0
    clip_norm: float | None = None
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = ScheduleConfig(**self.schedule)
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 <= self.r_target <= 1.0:
            raise ValueError(f"r_target must lie in [0, 1], got {self.r_target}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if self.schedule.index_base not in (0, 1):
            raise ValueError(f"schedule index_base must be 0 or 1, got {self.schedule.index_base}")


@dataclass
class Metrics:
    accuracy: float
    loss: float
    skip_rate: float
    seconds: float = 0.0
    penalty: float = 0.0
    updates: int = 0
    tokens: int = 0

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("seconds")
        return d


@dataclass
class LossTerms:
    total: Tensor
    classifier: Tensor
    penalty: Tensor


def loss(tape: Tape, class_probs: Tensor, labels, r: Tensor, cfg: TrainConfig) -> LossTerms:
    """Cross-entropy plus ``lam * (r_target - r)**2``."""
    ce = tape.cross_entropy(class_probs, labels)
    gap = tape.sub(np.asarray(cfg.r_target), r)
    penalty = tape.scale(tape.mul(gap, gap), cfg.lam)
    return LossTerms(tape.add(ce, penalty), ce, penalty)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter group {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm:
        for g in grads.values():
            g *= max_norm / total


def train_epoch(model: LeapLSTM, docs: Sequence[Document], cfg: TrainConfig, epoch: int,
                state: AdamState, rng: np.random.Generator) -> Metrics:
    """One pass over ``docs``: forward, loss, backward, Adam step per batch.

    In schedule mode (plain LSTM only) each document first loses words with
    this epoch's mask probability.
    """
    start = time.perf_counter()
    if cfg.schedule.enabled:
        if model.cfg.skip:
            raise TrainingError("schedule-training applies to the plain LSTM; disable the skip pathway")
        s = cfg.schedule
        docs = [schedule_mask(d, epoch, s.r_m, s.beta, rng, s.index_base) for d in docs]

    n_seen = n_right = 0
    ce_sum = pen_sum = skip_sum = 0.0
    tok_sum = 0
    shuffle_seed = int(rng.integers(2**31))
    for b_idx, batch in enumerate(make_batches(docs, cfg.batch_size, shuffle_seed)):
        tape = Tape()
        out = model.forward_train(batch, cfg.tau, rng, tape)
        terms = loss(tape, out.probs, batch.labels, out.skip_rate, cfg)
        value = float(terms.total.data)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b_idx}")
        grads = backward(tape, terms.total, out.params)
        if cfg.clip_norm:
            _clip(grads, cfg.clip_norm)
        adam_step(model.params, grads, state, cfg.lr)

        n = batch.size
        n_tok = int(batch.lengths.sum())
        n_seen += n
        n_right += int((out.probs.data.argmax(axis=1) == batch.labels).sum())
        ce_sum += float(terms.classifier.data) * n
        pen_sum += float(terms.penalty.data) * n
        skip_sum += float(out.skip_rate.data) * n_tok
        tok_sum += n_tok
    return Metrics(
        accuracy=n_right / n_seen,
        loss=ce_sum / n_seen,
        skip_rate=skip_sum / tok_sum,
        seconds=time.perf_counter() - start,
        penalty=pen_sum / n_seen,
        tokens=tok_sum,
    )


def evaluate(model: LeapLSTM, docs: Sequence[Document],
             rng: np.random.Generator | None = None) -> Metrics:
    """Hard-decision inference over ``docs``; skip rate = skipped / real tokens.

    Decisions are argmax unless ``rng`` is given, in which case they are
    sampled from the skip distribution.
    """
    start = time.perf_counter()
    right = 0
    ce = 0.0
    updates = tokens = 0
    for doc in docs:
        res = model.forward_infer(doc, rng=rng)
        if res.updates != res.trace.kept:
            raise AssertionError(f"executed {res.updates} cell updates for {res.trace.kept} kept tokens")
        right += int(res.prediction == doc.label)
        ce -= float(np.log(max(res.probs[doc.label], 1e-12)))
        updates += res.updates
        tokens += doc.length
    n = max(len(docs), 1)
    return Metrics(
        accuracy=right / n,
        loss=ce / n,
        skip_rate=(1.0 - updates / tokens) if tokens else 0.0,
        seconds=time.perf_counter() - start,
        updates=updates,
        tokens=tokens,
    )


@dataclass
class FitResult:
    model: LeapLSTM
    history: list[dict]
    timings: list[float]
    best_epoch: int
    best_dev_accuracy: float


def fit(model: LeapLSTM, train: Sequence[Document], dev: Sequence[Document], cfg: TrainConfig,
        history_path: str | Path | None = None,
        on_best: Callable[[LeapLSTM, int], None] | None = None) -> FitResult:
    """Train with dev-set early stopping; returns the best model seen.

    An epoch improves on the best so far if its dev accuracy is higher, or
    equal with a lower dev classifier loss.  Training stops after
    ``cfg.patience`` epochs in a row without improvement.

    ``history_path`` receives one JSON line per epoch (no wall-clock fields,
    so reruns give identical files).  ``on_best`` is called with the model and
    epoch whenever dev accuracy improves, e.g. to write a checkpoint.
    """
    if not dev:
        raise ValueError("fit needs a non-empty dev set")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.zeros_like(model.params)
    history: list[dict] = []
    timings: list[float] = []
    best = model.copy()
    best_acc = -1.0
    best_loss = float("inf")
    best_epoch = -1
    stale = 0
    fh = open(history_path, "w") if history_path is not None else None
    try:
        for epoch in range(cfg.max_epochs):
            s = cfg.schedule
            p_mask = mask_probability(epoch, s.r_m, s.beta, s.index_base) if s.enabled else 0.0
            tr = train_epoch(model, train, cfg, epoch, state, rng)
            dv = evaluate(model, dev)
            timings.append(tr.seconds + dv.seconds)
            entry = {"epoch": epoch, "mask_prob": p_mask,
                     "train": tr.to_dict(timing=False), "dev": dv.to_dict(timing=False)}
            history.append(entry)
            if fh is not None:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
                fh.flush()
            log.info("epoch %d: mask %.2f train acc %.4f loss %.4f skip %.4f | dev acc %.4f skip %.4f",
                     epoch, p_mask, tr.accuracy, tr.loss, tr.skip_rate, dv.accuracy, dv.skip_rate)
            # Equal accuracy still counts when the dev loss went down.
            if dv.accuracy > best_acc or (dv.accuracy == best_acc and dv.loss < best_loss):
                best_acc, best_loss, best_epoch, stale = dv.accuracy, dv.loss, epoch, 0
                best = model.copy()
                if on_best is not None:
                    on_best(best, epoch)
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    finally:
        if fh is not None:
            fh.close()
    return FitResult(best, history, timings, best_epoch, best_acc)
