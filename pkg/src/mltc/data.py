"""Synthetic two-level multi-label corpora, splits and JSONL ingestion.

Generation uses a counter-based SplitMix64 stream (Steele, Lea & Flood
constants), so a corpus is a pure function of its :class:`DatasetSpec` and
can be reproduced bit-for-bit by any implementation of the same steps.

Labels are ranked by id: label 0 is the most frequent. Level-1 labels are
independent Bernoulli draws with Zipf-shaped probabilities; a document that
draws none gets one label sampled in proportion to the Zipf weights. In the
default hierarchical mode each level-2 label has a parent (``id % |L1|``) and
can only fire when its parent is active. Planted pairs add co-occurrence on
top, with an activation rate solved from the sample's own statistics so the
realised lift is close to the requested one.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, SpecError
from .labelspace import (
    EOS_ID,
    PROBE_WORD,
    RESERVED,
    Label,
    LabelVocabulary,
    Tokenizer,
    load_labels,
    save_labels,
)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MASK = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """SplitMix64; the i-th output is ``mix(seed + i * golden)``.

    Being counter based, blocks of draws are produced with vectorised numpy
    arithmetic (uint64 wraps modulo 2**64) and match the scalar recurrence.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self, n: int) -> np.ndarray:
        counter = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + counter * _GOLDEN
        self.state = (self.state + n * int(_GOLDEN)) & _MASK
        return _mix64(z)

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def integers(self, high: int, n: int) -> np.ndarray:
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)


# ---------------------------------------------------------------- records

@dataclass(frozen=True)
class Document:
    id: int
    tokens: tuple[int, ...]
    labels_l1: frozenset[int]
    labels_l2: frozenset[int] = frozenset()
    timestamp: int = 0

    def labels(self, level: int) -> frozenset[int]:
        return self.labels_l1 if level == 1 else self.labels_l2


@dataclass
class Dataset:
    documents: list[Document]
    vocab_l1: LabelVocabulary
    vocab_l2: LabelVocabulary | None
    tokenizer: Tokenizer
    name: str = "dataset"

    def __len__(self) -> int:
        return len(self.documents)

    def vocab(self, level: int) -> LabelVocabulary:
        v = self.vocab_l1 if level == 1 else self.vocab_l2
        if v is None:
            raise DataError(f"dataset {self.name!r} has no level-{level} labels")
        return v

    def label_matrix(self, level: int, ids: Sequence[int] | None = None) -> np.ndarray:
        """Binary [D, L] gold matrix (optionally restricted to ``ids``)."""
        docs = self.documents if ids is None else [self.documents[i] for i in ids]
        out = np.zeros((len(docs), len(self.vocab(level))), dtype=np.int8)
        for r, doc in enumerate(docs):
            out[r, list(doc.labels(level))] = 1
        return out

    def subset(self, ids: Sequence[int]) -> list[Document]:
        return [self.documents[i] for i in ids]


@dataclass(frozen=True)
class DependencyPair:
    a: int
    b: int
    lift: float
    level: int = 2


@dataclass(frozen=True)
class DatasetSpec:
    num_docs: int = 2000
    num_labels_l1: int = 18
    num_labels_l2: int = 69
    mean_labels_per_doc_l1: float = 1.2
    mean_labels_per_doc_l2: float = 1.5
    zipf_exponent: float = 1.0
    dependency_pairs: tuple[DependencyPair, ...] = ()
    doc_length: tuple[int, int] = (40, 200)
    seed: int = 0
    hierarchical: bool = True
    signature_tokens: int = 3
    signature_rate: float = 0.25
    background_vocab: int = 2000
    background_zipf: float = 1.0
    name: str = "synthetic"

    def validate(self) -> None:
        if self.num_docs < 1:
            raise SpecError("num_docs must be positive")
        if self.num_labels_l1 < 1 or self.num_labels_l2 < 0:
            raise SpecError("need at least one level-1 label")
        if not 1.0 <= self.mean_labels_per_doc_l1 <= self.num_labels_l1:
            raise SpecError(
                f"level-1 labels per document must lie in [1, {self.num_labels_l1}], "
                f"got {self.mean_labels_per_doc_l1}"
            )
        if self.num_labels_l2 and not 0.0 < self.mean_labels_per_doc_l2 <= self.num_labels_l2:
            raise SpecError(f"level-2 labels per document must lie in (0, {self.num_labels_l2}]")
        if self.zipf_exponent < 0:
            raise SpecError("zipf_exponent must be >= 0")
        lo, hi = self.doc_length
        if not 1 <= lo <= hi:
            raise SpecError(f"bad document length range {self.doc_length}")
        if self.signature_tokens < 3:
            raise SpecError("each label needs at least 3 signature tokens")
        if not 0.0 < self.signature_rate <= 1.0:
            raise SpecError("signature_rate must lie in (0, 1]")
        if self.background_vocab < 1:
            raise SpecError("background_vocab must be positive")
        for pair in self.dependency_pairs:
            size = self.num_labels_l1 if pair.level == 1 else self.num_labels_l2
            if pair.level not in (1, 2) or not (0 <= pair.a < size and 0 <= pair.b < size) or pair.a == pair.b:
                raise SpecError(f"dependency pair {pair} does not name two distinct level-{pair.level} labels")
            if pair.lift <= 1.0:
                raise SpecError(f"dependency pair {pair} needs lift > 1")


PRESETS: dict[str, dict] = {
    # label counts and labels-per-document after the four real corpora
    "uklex": dict(num_labels_l1=18, mean_labels_per_doc_l1=1.2, num_labels_l2=69, mean_labels_per_doc_l2=1.5),
    "eurlex": dict(num_labels_l1=21, mean_labels_per_doc_l1=3.2, num_labels_l2=127, mean_labels_per_doc_l2=4.5),
    "bioasq": dict(num_labels_l1=16, mean_labels_per_doc_l1=5.6, num_labels_l2=116, mean_labels_per_doc_l2=8.9),
    "mimic": dict(num_labels_l1=19, mean_labels_per_doc_l1=6.0, num_labels_l2=184, mean_labels_per_doc_l2=10.1),
    # level-2 style corpus with planted pairs, used for the method comparison
    "l2dep": dict(
        num_docs=10_000,
        num_labels_l1=10,
        mean_labels_per_doc_l1=1.5,
        num_labels_l2=60,
        mean_labels_per_doc_l2=2.5,
        zipf_exponent=1.1,
        dependency_pairs=tuple(DependencyPair(a, a + 11, 5.0) for a in range(4, 20, 2)),
        doc_length=(20, 60),
    ),
    # small, easily separable corpus for convergence checks
    "separable": dict(
        num_docs=200,
        num_labels_l1=8,
        mean_labels_per_doc_l1=1.5,
        num_labels_l2=16,
        mean_labels_per_doc_l2=2.0,
        zipf_exponent=0.5,
        doc_length=(30, 60),
        signature_rate=0.9,
        background_vocab=100,
    ),
}


def preset_spec(name: str, **overrides) -> DatasetSpec:
    try:
        base = PRESETS[name]
    except KeyError:
        raise SpecError(f"unknown dataset preset {name!r}; choose from {sorted(PRESETS)}") from None
    return DatasetSpec(**{**base, "name": name, **overrides})


# ---------------------------------------------------------------- label marginals

def zipf_weights(n: int, exponent: float) -> np.ndarray:
    return np.arange(1, n + 1, dtype=np.float64) ** (-exponent)


def _bisect(fn, target: float, lo: float = 0.0, hi: float = 1.0, iters: int = 200) -> float:
    while fn(hi) < target:
        hi *= 2.0
        if hi > 1e12:
            raise SpecError(f"cannot reach target {target}")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if fn(mid) < target:
            lo = mid
        else:
            hi = mid
    return hi


def level1_probabilities(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-label draw probabilities and the resulting marginals at level 1.

    Returns ``(q, marginal)`` where ``marginal = q + P(no draw) * weight``.
    """
    z = zipf_weights(spec.num_labels_l1, spec.zipf_exponent)
    w = z / z.sum()

    def mean_size(c):
        q = np.minimum(1.0, c * z)
        return q.sum() + np.prod(1.0 - q)

    target = spec.mean_labels_per_doc_l1
    if target >= spec.num_labels_l1:
        q = np.ones_like(z)
    elif target <= 1.0:
        q = np.zeros_like(z)
    else:
        q = np.minimum(1.0, _bisect(mean_size, target) * z)
    empty = np.prod(1.0 - q)
    return q, q + empty * w


def level2_marginals(spec: DatasetSpec, parent_marginal: np.ndarray | None) -> np.ndarray:
    """Zipf-shaped level-2 marginals summing to the target labels per document.

    In hierarchical mode each marginal is capped by its parent's marginal.
    """
    n = spec.num_labels_l2
    z = zipf_weights(n, spec.zipf_exponent)
    cap = np.ones(n) if parent_marginal is None else parent_marginal[np.arange(n) % spec.num_labels_l1]
    target = spec.mean_labels_per_doc_l2
    if cap.sum() < target - 1e-12:
        raise SpecError(
            f"level-2 labels per document {target} unreachable; at most {cap.sum():.3f} given the hierarchy"
        )
    k = _bisect(lambda c: np.minimum(cap, c * z).sum(), target)
    return np.minimum(cap, k * z)


# ---------------------------------------------------------------- generation

def _label_names(spec: DatasetSpec) -> tuple[LabelVocabulary, LabelVocabulary | None]:
    l1 = [Label(i, 1, f"area {i} policy", f"area{i}", f"<label_{i + 1}>") for i in range(spec.num_labels_l1)]
    vocab_l1 = LabelVocabulary(1, l1)
    if not spec.num_labels_l2:
        return vocab_l1, None
    l2 = []
    for c in range(spec.num_labels_l2):
        parent = c % spec.num_labels_l1 if spec.hierarchical else None
        l2.append(Label(c, 2, f"subject {c} matters", f"subject{c}", f"<label_{c + 1}>", parent))
    return vocab_l1, LabelVocabulary(2, l2)


def _tokenizer(spec: DatasetSpec, vocabs: Iterable[LabelVocabulary]) -> Tokenizer:
    words = list(RESERVED) + [PROBE_WORD]
    words += [f"w{j}" for j in range(spec.background_vocab)]
    words += [f"sig1_{i}_{k}" for i in range(spec.num_labels_l1) for k in range(spec.signature_tokens)]
    words += [f"sig2_{c}_{k}" for c in range(spec.num_labels_l2) for k in range(spec.signature_tokens)]
    seen = set(words)
    for vocab in vocabs:
        for lab in vocab.labels:
            for form in (lab.original, lab.simplified, lab.numeric):
                for w in form.split():
                    if w not in seen:
                        seen.add(w)
                        words.append(w)
    return Tokenizer(words)


def _plant(active: np.ndarray, pairs: Sequence[DependencyPair], rng: SplitMix64,
           parents: np.ndarray | None = None, parent_active: np.ndarray | None = None) -> None:
    """Co-activate ``b`` given ``a`` so that P(b|a) / P(b) hits each lift."""
    n = active.shape[0]
    for pair in pairs:
        a, b = active[:, pair.a], active[:, pair.b]
        pa, pb = a.mean(), b.mean()
        u = rng.uniform(n)
        if pa == 0.0:
            continue
        pb_a = (a & b).sum() / a.sum()
        lam = pair.lift
        if lam * pa >= 1.0:
            raise SpecError(f"lift {lam} infeasible for label {pair.a} with marginal {pa:.3f}")
        beta = (lam * pb - pb_a) / ((1.0 - pb_a) * (1.0 - lam * pa)) if pb_a < 1.0 else 0.0
        if beta > 1.0:
            raise SpecError(f"lift {lam} infeasible for pair ({pair.a}, {pair.b})")
        fire = a & ~b & (u < max(beta, 0.0))
        active[fire, pair.b] = True
        if parents is not None and parent_active is not None:
            parent_active[fire, parents[pair.b]] = True


def generate(spec: DatasetSpec) -> Dataset:
    """Generate a corpus; deterministic in ``spec`` (including its seed)."""
    spec.validate()
    rng = SplitMix64(spec.seed)
    D, L1, L2 = spec.num_docs, spec.num_labels_l1, spec.num_labels_l2

    # level 1: independent draws, forced label when nothing fired
    q1, marg1 = level1_probabilities(spec)
    act1 = rng.uniform(D * L1).reshape(D, L1) < q1
    empty = ~act1.any(axis=1)
    w1 = zipf_weights(L1, spec.zipf_exponent)
    cdf1 = np.cumsum(w1 / w1.sum())
    forced = np.minimum(np.searchsorted(cdf1, rng.uniform(D), side="right"), L1 - 1)
    act1[np.flatnonzero(empty), forced[empty]] = True

    # level 2
    parents = np.arange(L2) % L1 if L2 else np.zeros(0, dtype=np.int64)
    if L2:
        if spec.hierarchical:
            m2 = level2_marginals(spec, marg1)
            rate = m2 / marg1[parents]
            draws = rng.uniform(D * L2).reshape(D, L2) < rate
            act2 = draws & act1[:, parents]
        else:
            m2 = level2_marginals(spec, None)
            act2 = rng.uniform(D * L2).reshape(D, L2) < m2
    else:
        act2 = np.zeros((D, 0), dtype=bool)

    pairs1 = [p for p in spec.dependency_pairs if p.level == 1]
    pairs2 = [p for p in spec.dependency_pairs if p.level == 2]
    _plant(act1, pairs1, rng)
    if L2:
        if spec.hierarchical:
            _plant(act2, pairs2, rng, parents, act1)
        else:
            _plant(act2, pairs2, rng)

    # tokens: signature tokens of a random active label, else Zipf background
    lo, hi = spec.doc_length
    lengths = lo + rng.integers(hi - lo + 1, D)
    timestamps = rng.integers(1_000_000, D)
    combined = np.concatenate([act1, act2], axis=1)
    counts = combined.sum(axis=1)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    flat_labels = np.nonzero(combined)[1]  # row-major: grouped by document
    total = int(lengths.sum())
    doc_of = np.repeat(np.arange(D), lengths)
    u_kind, u_label, u_sig, u_bg = (rng.uniform(total) for _ in range(4))
    pick = starts[doc_of] + np.minimum((u_label * counts[doc_of]).astype(np.int64), counts[doc_of] - 1)
    label_col = flat_labels[pick]
    sig_index = np.minimum((u_sig * spec.signature_tokens).astype(np.int64), spec.signature_tokens - 1)
    base_bg = len(RESERVED) + 1
    base_sig = base_bg + spec.background_vocab
    sig_tok = base_sig + label_col * spec.signature_tokens + sig_index
    bgw = zipf_weights(spec.background_vocab, spec.background_zipf)
    bg_cdf = np.cumsum(bgw / bgw.sum())
    bg_tok = base_bg + np.minimum(np.searchsorted(bg_cdf, u_bg, side="right"), spec.background_vocab - 1)
    tokens = np.where(u_kind < spec.signature_rate, sig_tok, bg_tok)

    vocab_l1, vocab_l2 = _label_names(spec)
    tokenizer = _tokenizer(spec, [v for v in (vocab_l1, vocab_l2) if v is not None])
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    docs = []
    for i in range(D):
        docs.append(
            Document(
                id=i,
                tokens=tuple(int(t) for t in tokens[bounds[i]: bounds[i + 1]]),
                labels_l1=frozenset(np.flatnonzero(act1[i]).tolist()),
                labels_l2=frozenset(np.flatnonzero(act2[i]).tolist()),
                timestamp=int(timestamps[i]),
            )
        )
    return Dataset(docs, vocab_l1, vocab_l2, tokenizer, spec.name)


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class Split:
    train: tuple[int, ...]
    dev: tuple[int, ...]
    test: tuple[int, ...]


def split_chronological(dataset: Dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1),
                        mode: str = "chronological", seed: int = 0) -> Split:
    """Sort by timestamp (or shuffle, for ``mode="random"``) and slice."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(dataset)
    if n < 3:
        raise DataError(f"cannot split {n} documents into train/dev/test")
    if mode == "chronological":
        order = sorted(range(n), key=lambda i: (dataset.documents[i].timestamp, dataset.documents[i].id))
    elif mode == "random":
        order = np.argsort(SplitMix64(seed).uniform(n), kind="stable").tolist()
    else:
        raise DataError(f"unknown split mode {mode!r}")
    cut1 = int(round(fractions[0] * n))
    cut2 = int(round((fractions[0] + fractions[1]) * n))
    return Split(tuple(order[:cut1]), tuple(order[cut1:cut2]), tuple(order[cut2:]))


# ---------------------------------------------------------------- JSONL

def _record(doc: Document, dataset: Dataset) -> dict:
    rec = {
        "id": doc.id,
        "tokens": list(doc.tokens),
        "labels_l1": sorted(dataset.vocab_l1.labels[i].original for i in doc.labels_l1),
    }
    if dataset.vocab_l2 is not None:
        rec["labels_l2"] = sorted(dataset.vocab_l2.labels[i].original for i in doc.labels_l2)
    rec["timestamp"] = doc.timestamp
    return rec


def jsonl_lines(dataset: Dataset) -> Iterable[str]:
    """The exact lines :func:`save_jsonl` writes, newline included."""
    for doc in dataset.documents:
        yield json.dumps(_record(doc, dataset), ensure_ascii=False) + "\n"


def save_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(jsonl_lines(dataset))


def load_jsonl(path, vocab_l1: LabelVocabulary, vocab_l2: LabelVocabulary | None = None,
               tokenizer: Tokenizer | None = None, name: str | None = None) -> Dataset:
    """Read documents; ``text`` records are tokenized, ``tokens`` taken as is.

    Without a tokenizer, one is built from the file's texts.
    """
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            if "labels_l1" not in rec:
                raise DataError(f"{path}:{lineno}: missing 'labels_l1'")
            if ("text" in rec) == ("tokens" in rec):
                raise DataError(f"{path}:{lineno}: need exactly one of 'text' or 'tokens'")
            rows.append((lineno, rec))
    if tokenizer is None:
        tokenizer = Tokenizer.from_texts(rec["text"] for _, rec in rows if "text" in rec)
    docs = []
    for pos, (lineno, rec) in enumerate(rows):
        if "text" in rec:
            tokens = [t for t in tokenizer.encode(rec["text"]) if t != EOS_ID]
        else:
            tokens = rec["tokens"]
            if not all(isinstance(t, int) and 0 <= t < len(tokenizer) for t in tokens):
                raise DataError(f"{path}:{lineno}: token ids must be integers below {len(tokenizer)}")
        if not tokens:
            raise DataError(f"{path}:{lineno}: document has no tokens")
        l1 = _resolve(rec["labels_l1"], vocab_l1, path, lineno)
        if not l1:
            raise DataError(f"{path}:{lineno}: every document needs at least one level-1 label")
        l2 = frozenset()
        if rec.get("labels_l2") is not None:
            if vocab_l2 is None:
                raise DataError(f"{path}:{lineno}: level-2 labels given but no level-2 vocabulary")
            l2 = _resolve(rec["labels_l2"], vocab_l2, path, lineno)
        docs.append(Document(int(rec.get("id", pos)), tuple(tokens), l1, l2, int(rec.get("timestamp", pos))))
    return Dataset(docs, vocab_l1, vocab_l2, tokenizer, name or Path(path).stem)


def _resolve(names, vocab: LabelVocabulary, path, lineno) -> frozenset[int]:
    unknown = []
    ids = set()
    for name in names:
        try:
            ids.add(vocab.resolve(name))
        except DataError:
            unknown.append(name)
    if unknown:
        raise DataError(f"{path}:{lineno}: unknown level-{vocab.level} labels {unknown}")
    return frozenset(ids)


def save_dataset(dataset: Dataset, directory) -> Path:
    """Write ``docs.jsonl``, ``labels.tsv``, ``vocab.txt`` and ``meta.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_jsonl(dataset, d / "docs.jsonl")
    save_labels(d / "labels.tsv", [v for v in (dataset.vocab_l1, dataset.vocab_l2) if v is not None])
    dataset.tokenizer.save(d / "vocab.txt")
    (d / "meta.json").write_text(json.dumps({"name": dataset.name}) + "\n", encoding="utf-8")
    return d


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    vocabs = load_labels(d / "labels.tsv")
    tokenizer = Tokenizer.load(d / "vocab.txt") if (d / "vocab.txt").exists() else None
    name = json.loads((d / "meta.json").read_text())["name"] if (d / "meta.json").exists() else d.name
    return load_jsonl(d / "docs.jsonl", vocabs[1], vocabs.get(2), tokenizer, name)


def label_statistics(dataset: Dataset) -> dict:
    """Corpus summary in the style of the usual dataset tables."""
    out = {"documents": len(dataset)}
    for level in (1, 2):
        vocab = dataset.vocab_l1 if level == 1 else dataset.vocab_l2
        if vocab is None:
            continue
        sizes = [len(doc.labels(level)) for doc in dataset.documents]
        out[f"L{level}"] = len(vocab)
        out[f"L/D (L{level})"] = float(np.mean(sizes))
        desc = [len(dataset.tokenizer.encode(lab.original)) for lab in vocab.labels]
        out[f"T/L (L{level})"] = float(np.mean(desc))
    return out
