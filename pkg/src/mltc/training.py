"""Training loop: Adafactor, one-epoch linear warm-up, early stopping."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, Split
from .errors import ConfigError, TrainingError
from .labelspace import DescriptorScheme
from .methods import Classifier, MethodKind, default_scheme
from .metrics import LabelCounts, MetricsReport
from .optim import Adafactor
from .tensor import Tape
from .transformer import ModelConfig, preset

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    warmup_epochs: int = 1
    max_epochs: int = 20
    patience: int = 3
    batch_size: int = 16
    seeds: tuple[int, ...] = (0, 1, 2, 3)
    eval_every: str | int = "epoch"
    threshold: float = 0.5
    stop_at: float | None = None

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.eval_every != "epoch" and not (isinstance(self.eval_every, int) and self.eval_every >= 1):
            raise ConfigError("eval_every must be 'epoch' or a positive step count")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")


@dataclass
class EvalRecord:
    step: int
    epoch: int
    lr: float
    train_loss: float
    dev_micro_f1: float
    dev_macro_f1: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    history: list[EvalRecord]
    lrs: list[float]
    losses: list[float]
    best_index: int
    stopped_early: bool

    @property
    def best(self) -> EvalRecord:
        return self.history[self.best_index]


def warmup_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """Learning rate at 1-based ``step``: linear ramp, then constant."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


def evaluate(model: Classifier, docs: Sequence[Sequence[int]], golds: Sequence[Sequence[int]]) -> MetricsReport:
    preds = model.predict(list(docs))
    return MetricsReport.from_counts(LabelCounts.from_sets(golds, preds, model.num_labels))


def train(
    model: Classifier,
    train_docs: Sequence[Sequence[int]],
    train_golds: Sequence[Sequence[int]],
    dev_docs: Sequence[Sequence[int]],
    dev_golds: Sequence[Sequence[int]],
    cfg: TrainConfig,
    seed: int = 0,
    evaluate_fn: Callable[[Classifier, int], tuple[float, float]] | None = None,
    on_record: Callable[[EvalRecord], None] | None = None,
) -> TrainResult:
    """Train ``model`` in place and leave it holding the best-dev parameters.

    Early stopping tolerates ``patience`` evaluations without improvement in
    dev micro-F1 and stops at the next one. ``evaluate_fn(model, k)`` may
    replace the dev evaluation (k counts evaluations from 1).
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    n = len(train_docs)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    opt = Adafactor(model.params, lr=cfg.learning_rate)
    history: list[EvalRecord] = []
    lrs: list[float] = []
    losses: list[float] = []
    best_value = -math.inf
    best_index = -1
    best_params = None
    bad = 0
    step = 0
    window: list[float] = []
    stopped = False

    def run_eval(epoch: int) -> bool:
        nonlocal best_value, best_index, best_params, bad
        k = len(history) + 1
        if evaluate_fn is not None:
            micro, macro = evaluate_fn(model, k)
        else:
            report = evaluate(model, dev_docs, dev_golds)
            micro, macro = report.micro_f1, report.macro_f1
        rec = EvalRecord(step, epoch, lrs[-1] if lrs else 0.0,
                         float(np.mean(window)) if window else float("nan"), micro, macro)
        window.clear()
        history.append(rec)
        if on_record:
            on_record(rec)
        log.info("eval %d: step %d micro-F1 %.4f macro-F1 %.4f", k, step, micro, macro)
        if micro > best_value:
            best_value, best_index, bad = micro, len(history) - 1, 0
            best_params = {name: p.data.copy() for name, p in model.params.items()}
        else:
            bad += 1
        if cfg.stop_at is not None and micro >= cfg.stop_at:
            return True
        return bad > cfg.patience

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            step += 1
            lr = warmup_lr(step, cfg.learning_rate, warmup_steps)
            with Tape() as tape:
                loss = model.loss([train_docs[i] for i in idx], [train_golds[i] for i in idx], rng)
            grads = tape.backward(loss, model.params)
            value = loss.item()
            if not math.isfinite(value) or not all(np.isfinite(g).all() for g in grads.values()):
                norms = {k: float(np.linalg.norm(g)) for k, g in grads.items()}
                worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:5]
                raise TrainingError(f"non-finite loss {value} at step {step} (lr={lr:g}); largest grad norms {worst}")
            opt.step(grads, lr)
            lrs.append(lr)
            losses.append(value)
            window.append(value)
            if cfg.eval_every != "epoch" and step % cfg.eval_every == 0:
                if run_eval(epoch):
                    stopped = True
                    break
        if stopped:
            break
        if cfg.eval_every == "epoch" and run_eval(epoch):
            stopped = True
            break

    if best_params is not None:
        for name, arr in best_params.items():
            model.params[name].data = arr
    return TrainResult(history, lrs, losses, max(best_index, 0), stopped)


def build_model(method: MethodKind, dataset: Dataset, level: int, size: str = "small",
                scheme: DescriptorScheme | str | None = None, seed: int = 0,
                model_overrides: dict | None = None, threshold: float = 0.5,
                train_ids: Sequence[int] | None = None) -> Classifier:
    """Classifier for ``method`` on one label level of ``dataset``."""
    scheme = DescriptorScheme(scheme) if scheme else default_scheme(method.kind, level)
    vocab = dataset.vocab(level).with_scheme(scheme)
    overrides = dict(model_overrides or {})
    if not method.uses_decoder:
        overrides.setdefault("decoder_layers", 0)
    cfg = preset(size, len(dataset.tokenizer), **overrides)
    max_target = None
    if method.kind == "seq2seq":
        ids = range(len(dataset)) if train_ids is None else train_ids
        longest = max((len(dataset.documents[i].labels(level)) for i in ids), default=1)
        max_target = 2 * max(longest, 1) + 1
    return Classifier(method, cfg, vocab, dataset.tokenizer, seed=seed, threshold=threshold,
                      max_target_len=max_target)


def fit(method: MethodKind, dataset: Dataset, split: Split, level: int, cfg: TrainConfig, seed: int,
        size: str = "small", scheme=None, model_overrides: dict | None = None,
        on_record=None) -> tuple[Classifier, TrainResult]:
    model = build_model(method, dataset, level, size, scheme, seed, model_overrides, cfg.threshold, split.train)

    def docs(ids):
        return [dataset.documents[i].tokens for i in ids]

    def golds(ids):
        return [sorted(dataset.documents[i].labels(level)) for i in ids]

    result = train(model, docs(split.train), golds(split.train), docs(split.dev), golds(split.dev),
                   cfg, seed, on_record=on_record)
    return model, result


def evaluate_split(model: Classifier, dataset: Dataset, ids: Sequence[int], level: int) -> MetricsReport:
    docs = [dataset.documents[i].tokens for i in ids]
    golds = [sorted(dataset.documents[i].labels(level)) for i in ids]
    return evaluate(model, docs, golds)
