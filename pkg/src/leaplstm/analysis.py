"""Per-word keep rates, kept/skipped case rendering and report files."""

from __future__ import annotations

import csv
import html
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .bench import BenchEntry, BenchReport
from .data import Document, Vocabulary
from .model import KEEP, LeapLSTM, SkipTrace

SCHEMA_VERSION = 1
ALL_CLASSES = "all"

KEEP_RATE_COLUMNS = ["word", "class", "keep_rate", "kept", "appeared"]
BENCH_COLUMNS = ["name", "skip_rate", "docs_per_sec", "mean_latency_ms", "speedup",
                 "updates", "tokens", "update_ratio", "median_s", "times"]


@dataclass
class KeepRow:
    word: str
    keep_rate: float
    kept: int
    appeared: int


@dataclass
class KeepRateTable:
    """Ranked rows per class label, plus the same ranking over all documents."""
    per_class: dict[int, list[KeepRow]] = field(default_factory=dict)
    overall: list[KeepRow] = field(default_factory=list)

    def rows(self) -> Iterable[tuple[str, KeepRow]]:
        for cls in sorted(self.per_class):
            for row in self.per_class[cls]:
                yield str(cls), row
        for row in self.overall:
            yield ALL_CLASSES, row


def count_keeps(pairs: Iterable[tuple[Sequence[int], Sequence[int], int]]):
    """Tally (kept, appeared) per class and word id from (ids, decisions, label) triples."""
    counts: dict[int, dict[int, list[int]]] = defaultdict(lambda: defaultdict(lambda: [0, 0]))
    for ids, decisions, label in pairs:
        for tok, dec in zip(ids, decisions):
            c = counts[int(label)][int(tok)]
            c[0] += int(dec == KEEP)
            c[1] += 1
    return counts


def _rank(counts: dict[int, list[int]], vocab: Vocabulary | None,
          top_n: int | None, min_appear: int) -> list[KeepRow]:
    rows = []
    for tok, (kept, appeared) in counts.items():
        if appeared < min_appear:
            continue
        word = vocab.itos[tok] if vocab is not None else str(tok)
        rows.append(KeepRow(word, kept / appeared, kept, appeared))
    rows.sort(key=lambda r: (-r.keep_rate, -r.appeared, r.word))
    return rows if top_n is None else rows[:top_n]


def keep_rate_table(model: LeapLSTM, docs: Sequence[Document], top_n: int | None = 5,
                    min_appear: int = 10, vocab: Vocabulary | None = None) -> KeepRateTable:
    """Rank words by how often the model keeps them, per document class.

    Rows are ordered by keep rate, then appearance count, both descending.
    Words seen fewer than ``min_appear`` times are left out.  Without a
    ``vocab`` the word column holds token ids.
    """
    if min_appear < 1:
        raise ValueError(f"min_appear must be >= 1, got {min_appear}")
    traces = ((d.tokens, model.forward_infer(d).trace.decisions, d.label) for d in docs)
    return table_from_counts(count_keeps(traces), vocab, top_n, min_appear)


def table_from_counts(counts, vocab: Vocabulary | None, top_n: int | None,
                      min_appear: int) -> KeepRateTable:
    merged: dict[int, list[int]] = defaultdict(lambda: [0, 0])
    for per_word in counts.values():
        for tok, (k, a) in per_word.items():
            merged[tok][0] += k
            merged[tok][1] += a
    return KeepRateTable(
        {cls: _rank(per_word, vocab, top_n, min_appear) for cls, per_word in counts.items()},
        _rank(merged, vocab, top_n, min_appear),
    )


_ANSI_KEPT = "\x1b[1;31m"
_ANSI_SKIPPED = "\x1b[90m"
_ANSI_RESET = "\x1b[0m"


def render_case(tokens: Sequence[str], trace: SkipTrace | Sequence[int], fmt: str = "text") -> str:
    """Show which words were kept.

    ``text`` strikes skipped words through (``~~word~~``), ``ansi`` prints kept
    words in red and skipped ones in grey, ``html`` wraps each word in a span
    with class ``kept`` or ``skipped``.
    """
    decisions = trace.decisions if isinstance(trace, SkipTrace) else np.asarray(trace)
    if len(decisions) != len(tokens):
        raise ValueError(f"trace has {len(decisions)} decisions for {len(tokens)} tokens")
    out = []
    for tok, dec in zip(tokens, decisions):
        kept = int(dec) == KEEP
        if fmt == "text":
            out.append(tok if kept else f"~~{tok}~~")
        elif fmt == "ansi":
            out.append(f"{_ANSI_KEPT if kept else _ANSI_SKIPPED}{tok}{_ANSI_RESET}")
        elif fmt == "html":
            cls = "kept" if kept else "skipped"
            out.append(f'<span class="{cls}">{html.escape(tok)}</span>')
        else:
            raise ValueError(f"unknown render format {fmt!r}")
    text = " ".join(out)
    if fmt == "html":
        return f'<p class="leap-case">{text}</p>'
    return text


HTML_STYLE = ("<style>.leap-case .kept{color:#c00;font-weight:bold}"
              ".leap-case .skipped{color:#999}</style>")


# Report files.  Every file names its kind and carries SCHEMA_VERSION; TSV
# files do so in a leading "#" line followed by the column header.

def _kind(obj) -> str:
    if isinstance(obj, KeepRateTable):
        return "keep_rate_table"
    if isinstance(obj, BenchReport):
        return "bench_report"
    raise TypeError(f"cannot export {type(obj).__name__}")


def _bench_to_dict(report: BenchReport) -> dict:
    entries = []
    for e in report.entries:
        d = asdict(e)
        d["update_ratio"] = e.update_ratio
        d["speedup_label"] = e.speedup_label
        entries.append(d)
    return {"repetitions": report.repetitions, "n_docs": report.n_docs, "entries": entries}


def export_report(obj: KeepRateTable | BenchReport, path: str | Path, fmt: str = "json") -> Path:
    path = Path(path)
    kind = _kind(obj)
    if fmt == "json":
        if kind == "keep_rate_table":
            body = {"per_class": {str(c): [asdict(r) for r in rows] for c, rows in sorted(obj.per_class.items())},
                    "overall": [asdict(r) for r in obj.overall]}
        else:
            body = _bench_to_dict(obj)
        doc = {"kind": kind, "version": SCHEMA_VERSION, **body}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path
    if fmt != "tsv":
        raise ValueError(f"unknown report format {fmt!r}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# kind={kind} version={SCHEMA_VERSION}")
        if kind == "bench_report":
            fh.write(f" repetitions={obj.repetitions} n_docs={obj.n_docs}")
        fh.write("\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
        if kind == "keep_rate_table":
            w.writerow(KEEP_RATE_COLUMNS)
            for cls, r in obj.rows():
                w.writerow([r.word, cls, f"{r.keep_rate:.6f}", r.kept, r.appeared])
        else:
            w.writerow(BENCH_COLUMNS)
            for e in obj.entries:
                w.writerow([e.name, repr(e.skip_rate), repr(e.docs_per_sec), repr(e.mean_latency_ms),
                            repr(e.speedup), e.updates, e.tokens, repr(e.update_ratio),
                            repr(e.median_seconds), ",".join(repr(t) for t in e.times)])
    return path


def _check_version(version, path) -> None:
    if int(version) != SCHEMA_VERSION:
        raise ValueError(f"{path}: schema version {version}, this reader handles {SCHEMA_VERSION}")


def import_report(path: str | Path) -> KeepRateTable | BenchReport:
    """Read a file written by :func:`export_report`; the format is sniffed."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if text.startswith("#"):
        return _import_tsv(path, text)
    doc = json.loads(text)
    _check_version(doc["version"], path)
    if doc["kind"] == "keep_rate_table":
        return KeepRateTable(
            {int(c): [KeepRow(**r) for r in rows] for c, rows in doc["per_class"].items()},
            [KeepRow(**r) for r in doc["overall"]],
        )
    if doc["kind"] == "bench_report":
        fields = {"name", "skip_rate", "docs_per_sec", "mean_latency_ms", "speedup", "updates", "tokens", "times"}
        entries = [BenchEntry(**{k: v for k, v in e.items() if k in fields}) for e in doc["entries"]]
        return BenchReport(entries, doc["repetitions"], doc["n_docs"])
    raise ValueError(f"{path}: unknown report kind {doc['kind']!r}")


def _import_tsv(path: Path, text: str):
    first, _, rest = text.partition("\n")
    meta = dict(item.split("=", 1) for item in first[1:].split())
    _check_version(meta["version"], path)
    rows = list(csv.DictReader(rest.splitlines(), delimiter="\t"))
    if meta["kind"] == "keep_rate_table":
        table = KeepRateTable()
        for r in rows:
            row = KeepRow(r["word"], float(r["keep_rate"]), int(r["kept"]), int(r["appeared"]))
            if r["class"] == ALL_CLASSES:
                table.overall.append(row)
            else:
                table.per_class.setdefault(int(r["class"]), []).append(row)
        return table
    if meta["kind"] == "bench_report":
        entries = [BenchEntry(r["name"], float(r["skip_rate"]), float(r["docs_per_sec"]),
                              float(r["mean_latency_ms"]), float(r["speedup"]), int(r["updates"]),
                              int(r["tokens"]), [float(t) for t in r["times"].split(",") if t])
                   for r in rows]
        return BenchReport(entries, int(meta["repetitions"]), int(meta["n_docs"]))
    raise ValueError(f"{path}: unknown report kind {meta['kind']!r}")
