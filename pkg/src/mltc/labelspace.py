"""Label vocabularies, descriptor schemes and the word-level tokenizer.

Seq2Seq targets are descriptor strings sorted byte-wise and joined by
``", "``; predictions are parsed back by splitting on commas and keeping only
exact descriptor matches. T5Enc needs every descriptor to be one token, which
holds for simplified descriptors (checked) and pseudo descriptors (added to
the tokenizer as reserved ids).
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

from .errors import ConfigError, DataError

PAD, EOS, UNK, COMMA = "<pad>", "</s>", "<unk>", ","
PAD_ID, EOS_ID, UNK_ID, COMMA_ID = 0, 1, 2, 3
RESERVED = (PAD, EOS, UNK, COMMA)
PROBE_WORD = "label"

_WORD_RE = re.compile(r",|[^\s,]+")


class DescriptorScheme(str, Enum):
    ORIGINAL = "original"
    SIMPLIFIED = "simplified"
    NUMERIC = "numeric"
    PSEUDO = "pseudo"


T5ENC_SCHEMES = (DescriptorScheme.SIMPLIFIED, DescriptorScheme.PSEUDO)
SEQ2SEQ_SCHEMES = (DescriptorScheme.ORIGINAL, DescriptorScheme.SIMPLIFIED, DescriptorScheme.NUMERIC)


class Tokenizer:
    """Whitespace word tokenizer; commas are always their own token.

    Ids 0-3 are reserved for pad/start, end-of-sequence, unknown and comma.
    """

    def __init__(self, words: Iterable[str]):
        words = list(words)
        if tuple(words[:4]) != RESERVED:
            words = list(RESERVED) + [w for w in words if w not in RESERVED]
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}
        if len(self.index) != len(words):
            raise ConfigError("tokenizer vocabulary contains duplicate words")

    @classmethod
    def from_texts(cls, texts: Iterable[str], extra: Iterable[str] = ()) -> "Tokenizer":
        """Vocabulary from training texts, most frequent first, ties by string."""
        counts: dict[str, int] = {}
        for text in texts:
            for w in _WORD_RE.findall(text):
                counts[w] = counts.get(w, 0) + 1
        ordered = sorted(counts, key=lambda w: (-counts[w], w))
        seen = set(RESERVED)
        words = list(RESERVED)
        for w in list(extra) + ordered:
            if w not in seen:
                seen.add(w)
                words.append(w)
        return cls(words)

    def __len__(self) -> int:
        return len(self.words)

    def add(self, word: str) -> int:
        if word not in self.index:
            self.index[word] = len(self.words)
            self.words.append(word)
        return self.index[word]

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, UNK_ID) for w in _WORD_RE.findall(text)]

    def decode(self, ids: Iterable[int]) -> str:
        """Inverse of :meth:`encode` for canonical text; stops at end-of-sequence."""
        out = ""
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i == PAD_ID:
                continue
            w = self.words[i] if 0 <= i < len(self.words) else UNK
            if w == COMMA:
                out += ","
            else:
                out += (" " if out else "") + w
        return out

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


@dataclass(frozen=True)
class Label:
    id: int
    level: int
    original: str
    simplified: str
    pseudo: str
    parent: int | None = field(default=None, compare=False)

    @property
    def numeric(self) -> str:
        return str(self.id + 1)

    def descriptor(self, scheme: DescriptorScheme) -> str:
        return getattr(self, DescriptorScheme(scheme).value)


@dataclass
class LabelVocabulary:
    """Labels of one granularity level, read through one descriptor scheme."""

    level: int
    labels: list[Label]
    scheme: DescriptorScheme = DescriptorScheme.ORIGINAL
    _lookup: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.scheme = DescriptorScheme(self.scheme)
        if not self.labels:
            raise ConfigError("a label vocabulary needs at least one label")
        if self.level not in (1, 2):
            raise ConfigError(f"level must be 1 or 2, got {self.level}")
        for pos, lab in enumerate(self.labels):
            if lab.id != pos:
                raise ConfigError(f"label ids must be 0..L-1 in order; found {lab.id} at position {pos}")
            if lab.level != self.level:
                raise ConfigError(f"label {lab.id} has level {lab.level}, vocabulary is level {self.level}")
        for scheme in DescriptorScheme:
            forms = [lab.descriptor(scheme) for lab in self.labels]
            for lab, form in zip(self.labels, forms):
                if "," in form:
                    raise ConfigError(
                        f"descriptor {form!r} of label {lab.id} contains a comma; supply a comma-free alias"
                    )
                if not form.strip() or form != form.strip():
                    raise ConfigError(f"descriptor {form!r} of label {lab.id} is empty or padded with spaces")
            if len(set(forms)) != len(forms):
                raise ConfigError(f"{scheme.value} descriptors are not unique at level {self.level}")
        self._lookup = {lab.descriptor(self.scheme): lab.id for lab in self.labels}

    def __len__(self) -> int:
        return len(self.labels)

    def with_scheme(self, scheme: DescriptorScheme) -> "LabelVocabulary":
        return LabelVocabulary(self.level, self.labels, DescriptorScheme(scheme))

    def descriptor(self, label_id: int) -> str:
        return self.labels[label_id].descriptor(self.scheme)

    def lookup(self, descriptor: str) -> int:
        try:
            return self._lookup[descriptor]
        except KeyError:
            raise DataError(f"unknown {self.scheme.value} descriptor {descriptor!r}") from None

    def get(self, descriptor: str) -> int | None:
        return self._lookup.get(descriptor)

    def resolve(self, name: str) -> int:
        """Label id for a descriptor in any scheme (original first)."""
        for scheme in DescriptorScheme:
            for lab in self.labels:
                if lab.descriptor(scheme) == name:
                    return lab.id
        raise DataError(f"unknown level-{self.level} label {name!r}")


# ---------------------------------------------------------------- seq2seq text

def format_target(labels: Iterable[int], vocab: LabelVocabulary) -> str:
    """Descriptors of ``labels`` sorted byte-wise and joined by ``", "``."""
    names = set()
    for lab in labels:
        if not 0 <= int(lab) < len(vocab):
            raise DataError(f"label id {lab} is not in the level-{vocab.level} vocabulary")
        names.add(vocab.descriptor(int(lab)))
    return ", ".join(sorted(names, key=lambda s: s.encode("utf-8")))


@dataclass
class ParseResult:
    labels: frozenset[int]
    fragments: list[str]
    novel: list[str]


def parse_prediction_detailed(text: str, vocab: LabelVocabulary) -> ParseResult:
    """Split ``text`` on commas and keep exact descriptor matches.

    Empty fragments are ignored; any other unmatched fragment is reported as
    novel.
    """
    found: set[int] = set()
    fragments: list[str] = []
    novel: list[str] = []
    for piece in text.split(","):
        piece = piece.strip()
        if not piece:
            continue
        fragments.append(piece)
        lab = vocab.get(piece)
        if lab is None:
            novel.append(piece)
        else:
            found.add(lab)
    return ParseResult(frozenset(found), fragments, novel)


def parse_prediction(text: str, vocab: LabelVocabulary) -> frozenset[int]:
    return parse_prediction_detailed(text, vocab).labels


def descriptor_token(label: Label | int, vocab: LabelVocabulary, tokenizer: Tokenizer,
                     scheme: DescriptorScheme | None = None) -> int:
    """Single tokenizer id of a label's simplified or pseudo descriptor."""
    scheme = DescriptorScheme(scheme or vocab.scheme)
    if scheme not in T5ENC_SCHEMES:
        raise ConfigError(f"{scheme.value} descriptors cannot be used as single decoder tokens")
    lab = vocab.labels[label] if isinstance(label, int) else label
    form = lab.descriptor(scheme)
    ids = tokenizer.encode(form)
    if len(ids) != 1 or ids[0] == UNK_ID:
        raise ConfigError(f"label {lab.id} ({lab.original!r}): {scheme.value} descriptor {form!r} is not a single token")
    return ids[0]


def descriptor_tokens(vocab: LabelVocabulary, tokenizer: Tokenizer) -> list[int]:
    ids = [descriptor_token(lab, vocab, tokenizer) for lab in vocab.labels]
    if len(set(ids)) != len(ids):
        raise ConfigError("descriptor tokens are not distinct")
    return ids


def add_pseudo_tokens(tokenizer: Tokenizer, vocab: LabelVocabulary) -> list[int]:
    """Append each label's pseudo descriptor as a reserved token."""
    base = len(tokenizer)
    ids = []
    for lab in vocab.labels:
        if lab.pseudo in tokenizer.index and tokenizer.index[lab.pseudo] < base:
            raise ConfigError(f"pseudo token {lab.pseudo!r} collides with a natural-text token")
        ids.append(tokenizer.add(lab.pseudo))
    return ids


def label_from_token(token_id: int, vocab: LabelVocabulary, tokenizer: Tokenizer) -> int:
    return vocab.lookup(tokenizer.words[token_id])


# ---------------------------------------------------------------- vocabulary file

def save_labels(path, vocabs: Iterable[LabelVocabulary]) -> None:
    """``id<TAB>level<TAB>original<TAB>simplified<TAB>pseudo`` per label."""
    lines = []
    for vocab in vocabs:
        for lab in vocab.labels:
            lines.append(f"{lab.id}\t{lab.level}\t{lab.original}\t{lab.simplified}\t{lab.pseudo}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_labels(path) -> dict[int, LabelVocabulary]:
    by_level: dict[int, list[Label]] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        try:
            lid, level = int(parts[0]), int(parts[1])
        except ValueError:
            raise DataError(f"{path}:{lineno}: id and level must be integers") from None
        by_level.setdefault(level, []).append(Label(lid, level, parts[2], parts[3], parts[4]))
    out = {}
    for level, labels in sorted(by_level.items()):
        labels.sort(key=lambda lab: lab.id)
        try:
            out[level] = LabelVocabulary(level, labels)
        except ConfigError as exc:
            raise DataError(f"{path}: {exc}") from None
    return out
