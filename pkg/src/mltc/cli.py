"""Command-line experiment runner.

Verbs: ``generate-data``, ``train`` (alias ``run``), ``evaluate``, ``ablate``,
``fisher`` and ``report``. Every verb reads one YAML experiment file
(``--config``); ``--print-defaults`` prints the complete default file.

Exit codes: 0 success, 2 invalid configuration or input data, 3 training
failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import yaml

from .data import (
    PRESETS as DATA_PRESETS,
    Dataset,
    generate,
    jsonl_lines,
    label_statistics,
    load_dataset,
    preset_spec,
    save_dataset,
    split_chronological,
)
from .errors import ConfigError, DataError, SpecError, TrainingError
from .labelspace import DescriptorScheme, ParseResult
from .methods import Classifier, MethodKind, check_scheme, default_scheme
from .metrics import LabelCounts, MetricsReport, aggregate_seeds, significant_pairs
from .training import TrainConfig, build_model, train
from .transformer import PRESETS as MODEL_PRESETS
from .transformer import ModelConfig, load_checkpoint, preset, save_checkpoint

log = logging.getLogger("mltc")

ATTENTION_ROWS = (
    ("Encoder+Head", "encoder_head"),
    ("Single-step T5Enc", "t5enc_single_step"),
    ("T5Enc", "t5enc"),
    ("No attention", "t5enc_none"),
    ("Full attention", "t5enc_full"),
)
DEPTH_GRID = (1, 4, 6, 12)
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
_MODEL_FIELDS = {f.name for f in fields(ModelConfig)} - {"vocab_size"}


# ---------------------------------------------------------------- configuration

@dataclass
class ExperimentConfig:
    dataset: str = "uklex"
    dataset_overrides: dict = field(default_factory=dict)
    level: int = 1
    methods: list = field(default_factory=lambda: ["encoder_head", "t5enc"])
    size: str = "small"
    scheme: str | None = None
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    split_mode: str = "chronological"
    ablation: str = "attention"
    depths: list = field(default_factory=lambda: list(DEPTH_GRID))
    out: str = "runs"

    @classmethod
    def from_dict(cls, raw: dict | None) -> "ExperimentConfig":
        raw = dict(raw or {})
        unknown = sorted(set(raw) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping")
        return cls.from_dict(raw)

    def train_config(self) -> TrainConfig:
        opts = dict(self.train)
        if "seeds" in opts:
            opts["seeds"] = tuple(int(s) for s in opts["seeds"])
        return TrainConfig(**opts)

    def method_kinds(self) -> list[MethodKind]:
        return [MethodKind.parse(m) if isinstance(m, str) else MethodKind(**m) for m in self.methods]

    def semantic_dict(self) -> dict:
        """Everything that affects results, with defaults filled in."""
        out = asdict(self)
        out.pop("out")
        out["train"] = asdict(self.train_config())
        out["methods"] = [m.name for m in self.method_kinds()]
        return out

    def validate(self, methods: Sequence[MethodKind] | None = None) -> None:
        """Reject every invalid combination before any work starts."""
        if self.level not in (1, 2):
            raise ConfigError(f"level must be 1 or 2, got {self.level!r}")
        if self.dataset not in DATA_PRESETS and not Path(self.dataset).is_dir():
            raise ConfigError(
                f"dataset {self.dataset!r} is neither a preset {sorted(DATA_PRESETS)} nor a dataset directory"
            )
        if self.dataset not in DATA_PRESETS and self.dataset_overrides:
            raise ConfigError("dataset_overrides only apply to generated presets")
        if self.size not in MODEL_PRESETS:
            raise ConfigError(f"unknown size {self.size!r}; choose from {sorted(MODEL_PRESETS)}")
        bad = sorted(set(self.train) - _TRAIN_FIELDS)
        if bad:
            raise ConfigError(f"unknown train options {bad}")
        self.train_config().validate()
        bad = sorted(set(self.model) - _MODEL_FIELDS)
        if bad:
            raise ConfigError(f"unknown model options {bad}")
        preset(self.size, 16, **self.model)
        if not self.methods:
            raise ConfigError("no methods requested")
        scheme = DescriptorScheme(self.scheme) if self.scheme else None
        for method in methods if methods is not None else self.method_kinds():
            check_scheme(method, scheme or default_scheme(method.kind, self.level))
        if self.ablation not in ("attention", "depth"):
            raise ConfigError(f"ablation must be 'attention' or 'depth', got {self.ablation!r}")
        if not self.depths or any(int(d) < 1 for d in self.depths):
            raise ConfigError("depths must be positive integers")
        if self.split_mode not in ("chronological", "random"):
            raise ConfigError(f"unknown split_mode {self.split_mode!r}")
        if len(self.split) != 3:
            raise ConfigError("split needs three fractions (train, dev, test)")


def default_config_text() -> str:
    """The default experiment file with every training default spelled out."""
    cfg = asdict(ExperimentConfig())
    cfg["train"] = asdict(TrainConfig()) | {"seeds": list(TrainConfig().seeds)}
    return yaml.safe_dump(cfg, sort_keys=False)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.semantic_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def corpus_hash(dataset: Dataset) -> str:
    h = hashlib.sha256()
    for line in jsonl_lines(dataset):
        h.update(line.encode("utf-8"))
    return h.hexdigest()


# ---------------------------------------------------------------- datasets and runs

def load_corpus(cfg: ExperimentConfig, seed: int | None = None) -> Dataset:
    if cfg.dataset in DATA_PRESETS:
        overrides = dict(cfg.dataset_overrides)
        if seed is not None:
            overrides["seed"] = seed
        for key in ("doc_length",):
            if key in overrides:
                overrides[key] = tuple(overrides[key])
        try:
            return generate(preset_spec(cfg.dataset, **overrides))
        except TypeError as exc:
            raise ConfigError(f"bad dataset_overrides: {exc}") from None
    return load_dataset(cfg.dataset)


def run_name(dataset: str, level: int, method: str, size: str, seed: int) -> str:
    return f"{dataset}_L{level}_{method}_{size}_seed{seed}"


@dataclass
class RunSpec:
    label: str  # row name in tables and run directory component
    method: MethodKind
    model: dict


def novel_label_rate(parses: Iterable[ParseResult]) -> tuple[float, list[str]]:
    """Novel fragments as a percentage of all generated fragments, plus the distinct novel strings."""
    total = novel = 0
    seen: dict[str, None] = {}
    for p in parses:
        total += len(p.fragments)
        novel += len(p.novel)
        for frag in p.novel:
            seen.setdefault(frag, None)
    return (100.0 * novel / total if total else 0.0), sorted(seen)


def _predict_with_logs(model: Classifier, docs) -> tuple[list[frozenset[int]], list[dict]]:
    if model.method.kind != "seq2seq":
        return model.predict(docs), []
    preds, logs = [], []
    for d in docs:
        gen = model.generate(d)
        preds.append(gen.labels)
        logs.append({"text": gen.text, "fragments": gen.parse.fragments, "novel": gen.parse.novel})
    return preds, logs


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def execute_run(run: RunSpec, cfg: ExperimentConfig, dataset: Dataset, split, seed: int, out: Path) -> dict:
    """Train one (method, seed) cell and write its directory."""
    name = run_name(dataset.name, cfg.level, run.label, cfg.size, seed)
    rdir = out / "runs" / name
    rdir.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train_config()
    model = build_model(run.method, dataset, cfg.level, cfg.size, cfg.scheme, seed,
                        {**cfg.model, **run.model}, tcfg.threshold, split.train)
    docs = lambda ids: [dataset.documents[i].tokens for i in ids]  # noqa: E731
    golds = lambda ids: [sorted(dataset.documents[i].labels(cfg.level)) for i in ids]  # noqa: E731
    history = rdir / "history.jsonl"
    with open(history, "w", encoding="utf-8", newline="\n") as fh:
        result = train(model, docs(split.train), golds(split.train), docs(split.dev), golds(split.dev),
                       tcfg, seed, on_record=lambda rec: fh.write(rec.to_json() + "\n"))
    save_checkpoint(rdir / "checkpoint.npz", model.cfg, model.params,
                    {"method": run.method.name, "label": run.label, "seed": seed, "scheme": model.vocab.scheme.value})
    metrics = score_test_split(model, dataset, split, cfg.level, rdir)
    metrics.update(run=name, method=run.label, dataset=dataset.name, level=cfg.level, size=cfg.size, seed=seed,
                   best_dev=asdict(result.best), epochs=len(result.history))
    _write_json(rdir / "metrics.json", metrics)
    log.info("%s: test micro-F1 %.4f macro-F1 %.4f", name, metrics["test"]["micro_f1"], metrics["test"]["macro_f1"])
    return metrics


def score_test_split(model: Classifier, dataset: Dataset, split, level: int, rdir: Path) -> dict:
    ids = split.test
    preds, logs = _predict_with_logs(model, [dataset.documents[i].tokens for i in ids])
    golds = [dataset.documents[i].labels(level) for i in ids]
    report = MetricsReport.from_counts(LabelCounts.from_sets(golds, preds, model.num_labels))
    out = {"test": {"micro_f1": report.micro_f1, "macro_f1": report.macro_f1, "per_label": report.per_label}}
    if logs:
        with open(rdir / "generations.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for rec in logs:
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
        rate, novel = novel_label_rate(ParseResult(frozenset(), r["fragments"], r["novel"]) for r in logs)
        out["novel"] = {"rate": rate, "fragments": sum(len(r["fragments"]) for r in logs),
                        "novel": sum(len(r["novel"]) for r in logs), "strings": novel}
    return out


# ---------------------------------------------------------------- tables

def _aggregate_rows(records: Sequence[dict], order: Sequence[str]) -> list[dict]:
    by_method: dict[str, list[dict]] = {}
    for rec in records:
        by_method.setdefault(rec["method"], []).append(rec)
    rows = []
    for method in order:
        recs = sorted(by_method.get(method, []), key=lambda r: r["seed"])
        if not recs:
            continue
        micro = aggregate_seeds([r["test"]["micro_f1"] for r in recs])
        macro = aggregate_seeds([r["test"]["macro_f1"] for r in recs])
        rows.append({"method": method, "dataset": recs[0]["dataset"], "level": recs[0]["level"],
                     "seeds": " ".join(str(r["seed"]) for r in recs),
                     "micro_f1": micro.format(), "macro_f1": macro.format()})
    return rows


def format_tables(rows: Sequence[dict], columns: Sequence[str]) -> tuple[str, str]:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    widths = [max(len(c), *(len(str(r[c])) for r in rows)) for c in columns]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(str(r[c]).ljust(w) for c, w in zip(columns, widths)) for r in rows]
    return buf.getvalue(), "\n".join(line.rstrip() for line in lines) + "\n"


RESULT_COLUMNS = ("method", "dataset", "level", "seeds", "micro_f1", "macro_f1")


def write_tables(out: Path, stem: str, rows: Sequence[dict], columns: Sequence[str] = RESULT_COLUMNS) -> None:
    text_csv, text_txt = format_tables(rows, columns)
    (out / f"{stem}.csv").write_text(text_csv, encoding="utf-8", newline="")
    (out / f"{stem}.txt").write_text(text_txt, encoding="utf-8", newline="")


def ablation_report(records: Sequence[dict], kind: str = "attention",
                    depths: Sequence[int] = DEPTH_GRID) -> list[dict]:
    """Rows of the attention ablation or the decoder-depth grid.

    Every row must be backed by runs over the same seeds on the same dataset.
    """
    if not records:
        raise ConfigError("ablation report needs at least one run")
    datasets = {(r["dataset"], r["level"]) for r in records}
    if len(datasets) != 1:
        raise ConfigError(f"runs mix datasets {sorted(datasets)}")
    if kind == "attention":
        spec = list(ATTENTION_ROWS)
    elif kind == "depth":
        spec = [(f"N={n}", f"t5enc_dec{n}") for n in depths]
    else:
        raise ConfigError(f"unknown ablation {kind!r}")
    seed_sets = {}
    for _, label in spec:
        seeds = sorted(r["seed"] for r in records if r["method"] == label)
        if not seeds:
            raise ConfigError(f"no runs for ablation row {label!r}")
        seed_sets[label] = seeds
    if len({tuple(s) for s in seed_sets.values()}) != 1:
        raise ConfigError(f"ablation rows use different seed sets: {seed_sets}")
    rows = _aggregate_rows(records, [label for _, label in spec])
    for (title, _), row in zip(spec, rows):
        row["row"] = title
    return rows


def collect_records(out: Path) -> list[dict]:
    paths = sorted((out / "runs").glob("*/metrics.json"))
    return [json.loads(p.read_text(encoding="utf-8")) for p in paths]


# ---------------------------------------------------------------- verbs

def _seeds(cfg: ExperimentConfig, seed: int | None) -> list[int]:
    return [seed] if seed is not None else list(cfg.train_config().seeds)


def _prepare(cfg: ExperimentConfig, runs: Sequence[RunSpec]):
    cfg.validate([r.method for r in runs])
    dataset = load_corpus(cfg)
    dataset.vocab(cfg.level)
    split = split_chronological(dataset, cfg.split, cfg.split_mode)
    for r in runs:  # model-level checks (descriptor tokens, decoder depth) before any training
        build_model(r.method, dataset, cfg.level, cfg.size, cfg.scheme, 0, {**cfg.model, **r.model},
                    cfg.train_config().threshold, split.train)
    return dataset, split


def _manifest(out: Path, cfg: ExperimentConfig, dataset: Dataset, verb: str, runs: Sequence[str]) -> None:
    _write_json(out / "manifest.json", {
        "verb": verb,
        "config": cfg.semantic_dict(),
        "config_hash": config_hash(cfg),
        "corpus": dataset.name,
        "corpus_hash": corpus_hash(dataset),
        "runs": list(runs),
    })


def _grid(cfg: ExperimentConfig, runs: Sequence[RunSpec], seeds: Sequence[int], out: Path, verb: str) -> list[dict]:
    dataset, split = _prepare(cfg, runs)
    out.mkdir(parents=True, exist_ok=True)
    records = [execute_run(r, cfg, dataset, split, s, out) for r in runs for s in seeds]
    _manifest(out, cfg, dataset, verb, [rec["run"] for rec in records])
    return records


def cmd_train(cfg: ExperimentConfig, out: Path, seed: int | None) -> None:
    runs = [RunSpec(m.name, m, {}) for m in cfg.method_kinds()]
    records = _grid(cfg, runs, _seeds(cfg, seed), out, "train")
    write_tables(out, "results", _aggregate_rows(records, [r.label for r in runs]))
    print((out / "results.txt").read_text(), end="")


def ablation_runs(cfg: ExperimentConfig) -> list[RunSpec]:
    if cfg.ablation == "attention":
        return [RunSpec(label, MethodKind.parse(label), {}) for _, label in ATTENTION_ROWS]
    t5 = MethodKind.parse("t5enc")
    return [RunSpec(f"t5enc_dec{n}", t5, {"decoder_layers": int(n)}) for n in cfg.depths]


def cmd_ablate(cfg: ExperimentConfig, out: Path, seed: int | None) -> None:
    records = _grid(cfg, ablation_runs(cfg), _seeds(cfg, seed), out, "ablate")
    rows = ablation_report(records, cfg.ablation, cfg.depths)
    write_tables(out, f"ablation_{cfg.ablation}", rows, ("row",) + RESULT_COLUMNS)
    print((out / f"ablation_{cfg.ablation}.txt").read_text(), end="")


def cmd_evaluate(cfg: ExperimentConfig, out: Path, seed: int | None) -> None:
    """Re-score stored checkpoints on the test split and rewrite their metrics."""
    dataset = load_corpus(cfg)
    split = split_chronological(dataset, cfg.split, cfg.split_mode)
    records = []
    wanted = set(_seeds(cfg, seed))
    for path in sorted((out / "runs").glob("*/checkpoint.npz")):
        prev = json.loads((path.parent / "metrics.json").read_text(encoding="utf-8"))
        if prev["seed"] not in wanted:
            continue
        mcfg, params, meta = load_checkpoint(path)
        method = MethodKind.parse(meta["method"])
        model = build_model(method, dataset, cfg.level, cfg.size, meta["scheme"], prev["seed"],
                            {k: v for k, v in asdict(mcfg).items() if k != "vocab_size"},
                            cfg.train_config().threshold, split.train)
        missing = set(model.params) ^ set(params)
        if missing:
            raise DataError(f"{path}: parameters do not match the configured model ({sorted(missing)[:3]})")
        model.params = params
        metrics = score_test_split(model, dataset, split, cfg.level, path.parent)
        prev.update(metrics)
        _write_json(path.parent / "metrics.json", prev)
        records.append(prev)
    if not records:
        raise DataError(f"no checkpoints under {out / 'runs'}")
    cmd_report(cfg, out, seed)


def cmd_report(cfg: ExperimentConfig, out: Path, seed: int | None) -> None:
    """Rebuild every table from the stored per-seed metrics."""
    records = collect_records(out)
    if seed is not None:
        records = [r for r in records if r["seed"] == seed]
    if not records:
        raise DataError(f"no run metrics under {out / 'runs'}")
    order = list(dict.fromkeys(r["method"] for r in sorted(records, key=lambda r: r["run"])))
    requested = [m.name for m in cfg.method_kinds()]
    order = [m for m in requested if m in order] + [m for m in order if m not in requested]
    write_tables(out, "results", _aggregate_rows(records, order))
    print((out / "results.txt").read_text(), end="")


def cmd_generate(cfg: ExperimentConfig, out: Path, seed: int | None) -> None:
    if cfg.dataset not in DATA_PRESETS:
        raise ConfigError("generate-data needs a dataset preset name")
    dataset = load_corpus(cfg, seed)
    save_dataset(dataset, out)
    _write_json(out / "stats.json", label_statistics(dataset) | {"corpus_hash": corpus_hash(dataset)})
    print(f"wrote {len(dataset)} documents to {out}")


def cmd_fisher(cfg: ExperimentConfig, out: Path, seed: int | None, alpha: float = 0.001) -> None:
    dataset = load_corpus(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    rows, detail = [], {}
    for level in (1, 2):
        if level == 2 and dataset.vocab_l2 is None:
            continue
        m = dataset.label_matrix(level)
        L = m.shape[1]
        pairs = significant_pairs(m, alpha)
        rate = 100.0 * len(pairs) / (L * (L - 1) // 2) if L > 1 else 0.0
        rows.append({"dataset": dataset.name, "level": level, "labels": L,
                     "significant_pairs": len(pairs), "rate": f"{rate:.1f}"})
        detail[f"L{level}"] = [{"a": i, "b": j, "p": p} for i, j, p in pairs]
    write_tables(out, "fisher", rows, ("dataset", "level", "labels", "significant_pairs", "rate"))
    _write_json(out / "fisher_pairs.json", detail)
    print((out / "fisher.txt").read_text(), end="")


VERBS = {
    "generate-data": cmd_generate,
    "train": cmd_train,
    "run": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "fisher": cmd_fisher,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mltc", description=__doc__.split("\n\n")[0])
    parser.add_argument("verb", nargs="?", choices=sorted(VERBS))
    parser.add_argument("--config", type=Path, help="YAML experiment file (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, help="single run seed (corpus seed for generate-data and fisher)")
    parser.add_argument("--out", type=Path, help="output directory (overrides the config's 'out')")
    parser.add_argument("--print-defaults", action="store_true", help="print the default config and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.print_defaults:
        print(default_config_text(), end="")
        return 0
    if not args.verb:
        print("error: a verb is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        out = args.out or Path(cfg.out)
        VERBS[args.verb](cfg, out, args.seed)
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, SpecError, DataError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (TypeError, ValueError) as exc:
        # malformed option values inside the config file
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
