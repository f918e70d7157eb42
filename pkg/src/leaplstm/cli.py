"""``leaplstm train | eval | bench | analyze``.

Settings come from a flat YAML mapping (``--config``), then ``--set key=value``
overrides, then the dedicated ``--seed``, ``--threads`` and ``--out`` flags.
Unknown keys, and keys that do not apply to the chosen mode, are errors.

Exit codes: 0 success, 1 runtime failure, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from .analysis import HTML_STYLE, export_report, keep_rate_table, render_case
from .bench import benchmark_inference, plain_baseline
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import CorpusError, Vocabulary, build_vocab, encode_corpus, load_corpus, load_embeddings, split_dev
from .model import LeapConfig, LeapLSTM
from .training import ScheduleConfig, TrainConfig, TrainingError, evaluate, fit

log = logging.getLogger("leaplstm")

MODES = ("leap", "plain_lstm", "plain_lstm_schedule")
ALL = frozenset(MODES)
LEAP = frozenset({"leap"})
SCHED = frozenset({"plain_lstm_schedule"})

# key: (default, modes it applies to)
KEYS: dict[str, tuple[object, frozenset]] = {
    "mode": ("leap", ALL),
    "train_path": (None, ALL),
    "test_path": (None, ALL),
    "embeddings_path": (None, ALL),
    "num_classes": (None, ALL),
    "min_freq": (2, ALL),
    "dev_fraction": (0.1, ALL),
    "seed": (0, ALL),
    "threads": (1, ALL),
    "out": ("runs/default", ALL),
    "hidden": (300, ALL),
    "embed_dim": (300, ALL),
    "lr": (0.001, ALL),
    "batch_size": (32, ALL),
    "max_epochs": (10, ALL),
    "patience": (3, ALL),
    "clip_norm": (None, ALL),
    "skip_hidden": (20, LEAP),
    "reverse_hidden": (20, LEAP),
    "kernel_widths": ([3, 4, 5], LEAP),
    "filters_per_width": (60, LEAP),
    "use_cnn": (True, LEAP),
    "use_rnn_r": (True, LEAP),
    "use_follow": (True, LEAP),
    "use_preceding": (True, LEAP),
    "use_current": (True, LEAP),
    "lam": (1.0, LEAP),
    "r_target": (0.0, LEAP),
    "tau": (0.1, LEAP),
    "r_m": (0.45, SCHED),
    "beta": (0.15, SCHED),
    "index_base": (0, SCHED),
    "bench_repetitions": (5, ALL),
    "bench_docs": (None, ALL),
    "top_n": (5, ALL),
    "min_appear": (10, ALL),
    "cases": (5, ALL),
}

MODEL_KEYS = ("hidden", "embed_dim", "skip_hidden", "reverse_hidden", "kernel_widths", "filters_per_width",
              "use_cnn", "use_rnn_r", "use_follow", "use_preceding", "use_current")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def mode(self) -> str:
        return self.values["mode"]

    def snapshot(self) -> str:
        return yaml.safe_dump(self.values, sort_keys=True)

    def model_config(self, vocab_size: int) -> LeapConfig:
        fields = {k: self.values[k] for k in MODEL_KEYS if k in self.values}
        return LeapConfig(vocab_size=vocab_size, num_classes=self.values["num_classes"],
                          skip=self.mode == "leap", **fields)

    def train_config(self) -> TrainConfig:
        v = self.values
        sched = ScheduleConfig()
        if self.mode == "plain_lstm_schedule":
            sched = ScheduleConfig(True, v["r_m"], v["beta"], v["index_base"])
        extra = {k: v[k] for k in ("lam", "r_target", "tau") if k in v}
        return TrainConfig(lr=v["lr"], batch_size=v["batch_size"], max_epochs=v["max_epochs"],
                           patience=v["patience"], seed=v["seed"], clip_norm=v["clip_norm"],
                           schedule=sched, **extra)


def _parse_override(item: str) -> tuple[str, object]:
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    return key.strip(), yaml.safe_load(raw) if raw.strip() else None


def _check_type(key: str, value):
    """Return ``value`` if it suits ``key``; raise ConfigError otherwise."""
    default = KEYS[key][0]
    if value is None:
        return value
    if key.endswith("_path") or key in ("out", "mode"):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
    elif key == "kernel_widths":
        if not isinstance(value, list) or not all(isinstance(w, int) and w > 0 for w in value):
            raise ConfigError(f"{key}: expected a list of positive integers, got {value!r}")
    elif isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true or false, got {value!r}")
    elif isinstance(default, float) or key == "clip_norm":
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" as a string.
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    return value


def resolve_config(config_path: str | None, overrides: list[str], *, seed=None, threads=None,
                   out=None) -> RunConfig:
    """Merge file, ``--set`` overrides and flags; validate and fill defaults."""
    given: dict = {}
    if config_path is not None:
        try:
            loaded = yaml.safe_load(Path(config_path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {config_path} is not valid YAML: {exc}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {config_path} must be a flat key: value mapping")
        given.update(loaded)
    for item in overrides:
        k, v = _parse_override(item)
        given[k] = v
    for k, v in (("seed", seed), ("threads", threads), ("out", out)):
        if v is not None:
            given[k] = v

    unknown = sorted(set(given) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    mode = given.get("mode", "leap")
    if mode not in MODES:
        raise ConfigError(f"mode: expected one of {', '.join(MODES)}, got {mode!r}")
    wrong = sorted(k for k in given if mode not in KEYS[k][1])
    if wrong:
        raise ConfigError(f"key(s) {', '.join(wrong)} do not apply to mode {mode}")
    given = {k: _check_type(k, v) for k, v in given.items()}

    values = {k: given.get(k, default) for k, (default, modes) in KEYS.items() if mode in modes}
    if values["threads"] < 1:
        raise ConfigError(f"threads: must be >= 1, got {values['threads']}")
    if not 0.0 < values["dev_fraction"] < 1.0:
        raise ConfigError(f"dev_fraction: must lie in (0, 1), got {values['dev_fraction']}")
    if values["num_classes"] is not None and values["num_classes"] < 2:
        raise ConfigError(f"num_classes: must be >= 2, got {values['num_classes']}")
    cfg = RunConfig(values)
    try:
        if values["num_classes"] is not None:
            cfg.model_config(vocab_size=2)
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _require_path(cfg: RunConfig, key: str) -> Path:
    value = cfg.values.get(key)
    if value is None:
        raise ConfigError(f"{key}: required but not set")
    path = Path(value)
    if not path.is_file():
        raise ConfigError(f"{key}: file {value} does not exist")
    return path


def _require(cfg: RunConfig, key: str):
    if cfg.values.get(key) is None:
        raise ConfigError(f"{key}: required but not set")
    return cfg.values[key]


def _load_docs(cfg: RunConfig, key: str, vocab: Vocabulary):
    path = _require_path(cfg, key)
    examples = load_corpus(path, _require(cfg, "num_classes"))
    if not examples:
        raise ConfigError(f"{key}: {path} contains no documents")
    return encode_corpus(examples, vocab)


def _checkpoint_path(args, cfg: RunConfig) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg["out"]) / "model.ckpt"


def _load_model(args, cfg: RunConfig) -> tuple[LeapLSTM, Vocabulary]:
    path = _checkpoint_path(args, cfg)
    if not path.is_file():
        raise ConfigError(f"checkpoint: file {path} does not exist")
    model, header = load_checkpoint(path)
    expected = cfg.model_config(model.cfg.vocab_size) if cfg["num_classes"] is not None else None
    if expected is not None and expected != model.cfg:
        diff = sorted(k for k, v in expected.to_dict().items() if model.cfg.to_dict()[k] != v)
        raise CheckpointError(f"checkpoint {path} does not match the config: {', '.join(diff)} differ")
    if cfg["num_classes"] is None:
        cfg.values["num_classes"] = model.cfg.num_classes
    if not header.get("vocab"):
        raise CheckpointError(f"checkpoint {path} carries no vocabulary")
    return model, Vocabulary(header["vocab"])


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_train(args, cfg: RunConfig) -> int:
    train_path = _require_path(cfg, "train_path")
    num_classes = _require(cfg, "num_classes")
    if cfg.values.get("embeddings_path") is not None:
        _require_path(cfg, "embeddings_path")
    examples = load_corpus(train_path, num_classes)
    if len(examples) < 2:
        raise ConfigError(f"train_path: {train_path} needs at least two documents")
    train_ex, dev_ex = split_dev(examples, cfg["dev_fraction"], cfg["seed"])
    vocab = build_vocab((ex.tokens for ex in train_ex), cfg["min_freq"])
    model_cfg = cfg.model_config(len(vocab))
    embedding = None
    if cfg.values.get("embeddings_path") is not None:
        embedding = load_embeddings(cfg["embeddings_path"], vocab, model_cfg.embed_dim,
                                    np.random.default_rng(cfg["seed"]))
    model = LeapLSTM.create(model_cfg, seed=cfg["seed"], embedding=embedding)
    out = _out_dir(cfg)
    (out / "config.resolved.yaml").write_text(cfg.snapshot(), encoding="utf-8")
    log.info("mode %s: %d train / %d dev documents, vocabulary %d", cfg.mode, len(train_ex),
             len(dev_ex), len(vocab))

    result = fit(model, encode_corpus(train_ex, vocab), encode_corpus(dev_ex, vocab),
                 cfg.train_config(), history_path=out / "history.jsonl")
    ckpt = _checkpoint_path(args, cfg)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, result.model, vocab.itos,
                    meta={"mode": cfg.mode, "best_epoch": result.best_epoch,
                          "best_dev_accuracy": result.best_dev_accuracy})
    summary = {"best_epoch": result.best_epoch, "best_dev_accuracy": result.best_dev_accuracy,
               "epochs_run": len(result.history)}
    print(f"best epoch {result.best_epoch}: dev accuracy {100 * result.best_dev_accuracy:.2f}")
    print(f"checkpoint written to {ckpt}")
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0


def run_eval(args, cfg: RunConfig) -> int:
    model, vocab = _load_model(args, cfg)
    docs = _load_docs(cfg, "test_path", vocab)
    m = evaluate(model, docs)
    print(f"accuracy {100 * m.accuracy:.2f}  skip rate {100 * m.skip_rate:.2f}  "
          f"updates {m.updates}/{m.tokens}  seconds {m.seconds:.3f}")
    out = _out_dir(cfg)
    (out / "metrics.json").write_text(json.dumps(m.to_dict(), indent=2, sort_keys=True) + "\n")
    return 0


def run_bench(args, cfg: RunConfig) -> int:
    reps = cfg["bench_repetitions"]
    if reps < 3:
        raise ConfigError(f"bench_repetitions: need at least 3, got {reps}")
    model, vocab = _load_model(args, cfg)
    docs = _load_docs(cfg, "test_path", vocab)
    if cfg["bench_docs"] is not None:
        docs = docs[:cfg["bench_docs"]]
    report = benchmark_inference(model, plain_baseline(model), docs, reps, threads=cfg["threads"])
    out = _out_dir(cfg)
    export_report(report, out / "bench.json", "json")
    export_report(report, out / "bench.tsv", "tsv")
    for e in report.entries:
        spread = f"{min(e.times):.3f}-{max(e.times):.3f}s"
        print(f"{e.name:8s} skip {100 * e.skip_rate:6.2f}  {e.docs_per_sec:9.1f} docs/s  "
              f"{e.mean_latency_ms:8.3f} ms/doc  speedup {e.speedup_label}  "
              f"update ratio {e.update_ratio:.4f}  ({reps} reps, {spread})")
    return 0


def run_analyze(args, cfg: RunConfig) -> int:
    model, vocab = _load_model(args, cfg)
    docs = _load_docs(cfg, "test_path", vocab)
    table = keep_rate_table(model, docs, cfg["top_n"], cfg["min_appear"], vocab)
    out = _out_dir(cfg)
    export_report(table, out / "keep_rates.json", "json")
    export_report(table, out / "keep_rates.tsv", "tsv")
    for cls in sorted(table.per_class):
        words = ", ".join(f"{r.word} {100 * r.keep_rate:.1f}%" for r in table.per_class[cls])
        print(f"class {cls + 1}: {words}")

    rng = np.random.default_rng(cfg["seed"])
    n = min(cfg["cases"], len(docs))
    picks = sorted(rng.choice(len(docs), size=n, replace=False).tolist()) if n else []
    html_parts = [HTML_STYLE]
    text_parts = []
    for i in picks:
        doc = docs[i]
        tokens = vocab.decode(doc.tokens)
        trace = model.forward_infer(doc).trace
        html_parts.append(f"<h4>document {i}, class {doc.label + 1}</h4>")
        html_parts.append(render_case(tokens, trace, "html"))
        text_parts.append(f"[{i}] {render_case(tokens, trace, 'text')}")
    (out / "cases.html").write_text("\n".join(html_parts) + "\n", encoding="utf-8")
    (out / "cases.txt").write_text("\n".join(text_parts) + ("\n" if text_parts else ""), encoding="utf-8")
    return 0


COMMANDS = {"train": run_train, "eval": run_eval, "bench": run_bench, "analyze": run_analyze}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="leaplstm", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="flat YAML file of settings")
    p.add_argument("--checkpoint", help="checkpoint path (default OUT/model.ckpt)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.overrides, seed=args.seed, threads=args.threads, out=args.out)
        with threadpool_limits(limits=cfg["threads"]):
            return COMMANDS[args.command](args, cfg)
    except (ConfigError, CorpusError, CheckpointError) as exc:
        print(f"leaplstm: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, OSError, ArithmeticError) as exc:
        print(f"leaplstm: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
