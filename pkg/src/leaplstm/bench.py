"""Wall-clock inference timing against a plain LSTM baseline."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .data import Document
from .model import LeapLSTM


@dataclass
class BenchEntry:
    name: str
    skip_rate: float
    docs_per_sec: float
    mean_latency_ms: float
    speedup: float
    updates: int
    tokens: int
    times: list[float] = field(default_factory=list)

    @property
    def update_ratio(self) -> float:
        """Executed cell updates per token: the hardware-independent cost proxy."""
        return self.updates / self.tokens if self.tokens else 0.0

    @property
    def median_seconds(self) -> float:
        return statistics.median(self.times)

    @property
    def speedup_label(self) -> str:
        return f"{self.speedup:.1f}x"


@dataclass
class BenchReport:
    entries: list[BenchEntry]
    repetitions: int
    n_docs: int

    def entry(self, name: str) -> BenchEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)


def _time_once(model: LeapLSTM, docs: Sequence[Document], force) -> tuple[float, int]:
    updates = 0
    start = time.perf_counter()
    for i, doc in enumerate(docs):
        f = force[i] if isinstance(force, list) else force
        updates += model.forward_infer(doc, force=f).updates
    return time.perf_counter() - start, updates


def time_inference(model: LeapLSTM, docs: Sequence[Document], repetitions: int = 5,
                   force=None) -> tuple[list[float], int]:
    """Per-repetition wall-clock seconds over ``docs`` after one untimed warm-up pass.

    ``force`` is passed to :meth:`LeapLSTM.forward_infer`; a list supplies one
    value per document.
    """
    _, updates = _time_once(model, docs, force)
    times = []
    for _ in range(repetitions):
        t, u = _time_once(model, docs, force)
        if u != updates:
            raise AssertionError("cell-update count changed between repetitions")
        times.append(t)
    return times, updates


def benchmark_inference(model: LeapLSTM, baseline: LeapLSTM, docs: Sequence[Document],
                        repetitions: int = 5, force=None, threads: int = 1) -> BenchReport:
    """Time ``model`` and a plain-LSTM ``baseline`` on the same documents.

    Speedups are ratios of median repetition times; the baseline's is 1.0.
    """
    if repetitions < 3:
        raise ValueError(f"need at least 3 repetitions, got {repetitions}")
    if not docs:
        raise ValueError("cannot benchmark an empty document set")
    tokens = sum(d.length for d in docs)
    with threadpool_limits(limits=threads):
        base_times, base_updates = time_inference(baseline, docs, repetitions)
        times, updates = time_inference(model, docs, repetitions, force)
    base_med = statistics.median(base_times)
    med = statistics.median(times)
    n = len(docs)

    def entry(name, ts, ups, speed):
        m = statistics.median(ts)
        return BenchEntry(name, 1.0 - ups / tokens, n / m, 1000.0 * m / n, speed, ups, tokens, list(ts))

    return BenchReport(
        [entry("model", times, updates, base_med / med),
         entry("baseline", base_times, base_updates, 1.0)],
        repetitions, n,
    )


def plain_baseline(model: LeapLSTM) -> LeapLSTM:
    """Plain LSTM sharing ``model``'s embedding, cell and classifier weights."""
    from dataclasses import replace

    cfg = replace(model.cfg, skip=False)
    params = {k: model.params[k].copy() for k in cfg.param_shapes()}
    return LeapLSTM(cfg, params)


def random_documents(n: int, length: int, vocab_size: int, seed: int = 0) -> list[Document]:
    rng = np.random.default_rng(seed)
    return [Document(rng.integers(2, vocab_size, size=length), 0) for _ in range(n)]
