"""The multi-label classification methods built on the encoder-decoder.

* ``encoder_head``: end-of-sequence encoder state -> L linear heads.
* ``lwan``: one label-wise attention query per label (and head) over the
  encoder states, each pooled vector scored by its own linear head.
* ``seq2seq``: the decoder generates "desc_a, desc_b" and the text is parsed
  back into a label set.
* ``t5enc``: the decoder reads the L single-token descriptors in one pass;
  decoder position l feeds head l. Self-attention is causal, full or none.
* ``t5enc_single_step``: the decoder reads one probe token; its output feeds
  L heads.
"""
from __future__ import annotations

import copy
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DataError
from .labelspace import (
    EOS_ID,
    PAD_ID,
    PROBE_WORD,
    SEQ2SEQ_SCHEMES,
    T5ENC_SCHEMES,
    UNK_ID,
    DescriptorScheme,
    LabelVocabulary,
    ParseResult,
    Tokenizer,
    add_pseudo_tokens,
    descriptor_tokens,
    format_target,
    parse_prediction_detailed,
)
from .tensor import Tensor
from .transformer import (
    AttentionScheme,
    EncoderOutput,
    ModelConfig,
    decode_batch,
    encode_batch,
    init_params,
    lm_logits,
    pad_batch,
    truncate,
)

KINDS = ("encoder_head", "lwan", "seq2seq", "t5enc", "t5enc_single_step")
STANDARD_LWAN_HEADS = (1, 4, 6, 12)


@dataclass(frozen=True)
class MethodKind:
    """Which method to run and its options.

    ``lwan_heads`` applies to ``lwan``, ``decoding``/``beam_width`` to
    ``seq2seq`` and ``scheme`` to ``t5enc``.
    """

    kind: str
    lwan_heads: int = 1
    decoding: str = "beam"
    beam_width: int = 4
    scheme: AttentionScheme = AttentionScheme.CAUSAL

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown method {self.kind!r}; choose from {KINDS}")
        object.__setattr__(self, "scheme", AttentionScheme(self.scheme))
        if self.lwan_heads < 1:
            raise ConfigError("lwan_heads must be >= 1")
        if self.decoding not in ("greedy", "beam"):
            raise ConfigError(f"decoding must be 'greedy' or 'beam', got {self.decoding!r}")
        if self.beam_width < 1:
            raise ConfigError("beam_width must be >= 1")

    @property
    def name(self) -> str:
        if self.kind == "lwan":
            return f"lwan{self.lwan_heads}"
        if self.kind == "seq2seq":
            return "seq2seq_greedy" if self.decoding == "greedy" else f"seq2seq_beam{self.beam_width}"
        if self.kind == "t5enc":
            return "t5enc" if self.scheme is AttentionScheme.CAUSAL else f"t5enc_{self.scheme.value}"
        return self.kind

    @property
    def standard_grid(self) -> bool:
        return self.kind != "lwan" or self.lwan_heads in STANDARD_LWAN_HEADS

    @property
    def uses_decoder(self) -> bool:
        return self.kind in ("seq2seq", "t5enc", "t5enc_single_step")

    @classmethod
    def parse(cls, name: str) -> "MethodKind":
        """Inverse of :attr:`name` (e.g. ``lwan4``, ``seq2seq_beam4``, ``t5enc_none``)."""
        if name in ("encoder_head", "t5enc_single_step", "t5enc"):
            return cls(name)
        if m := re.fullmatch(r"lwan(\d+)", name):
            return cls("lwan", lwan_heads=int(m.group(1)))
        if name == "seq2seq_greedy":
            return cls("seq2seq", decoding="greedy")
        if m := re.fullmatch(r"seq2seq(?:_beam(\d+))?", name):
            return cls("seq2seq", beam_width=int(m.group(1) or 4))
        if m := re.fullmatch(r"t5enc_(causal|none|full)", name):
            return cls("t5enc", scheme=AttentionScheme(m.group(1)))
        raise ConfigError(f"cannot parse method name {name!r}")


ENCODER_HEAD = MethodKind("encoder_head")
T5ENC = MethodKind("t5enc")
T5ENC_SINGLE_STEP = MethodKind("t5enc_single_step")


@dataclass
class LabelScores:
    logits: np.ndarray
    method: MethodKind


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    finished: bool


@dataclass
class Generation:
    labels: frozenset[int]
    text: str
    tokens: tuple[int, ...]
    score: float
    parse: ParseResult


def default_scheme(kind: str, level: int) -> DescriptorScheme:
    if kind == "t5enc":
        return DescriptorScheme.SIMPLIFIED if level == 1 else DescriptorScheme.PSEUDO
    return DescriptorScheme.SIMPLIFIED


def check_scheme(method: MethodKind, scheme: DescriptorScheme) -> None:
    scheme = DescriptorScheme(scheme)
    if method.kind == "t5enc" and scheme not in T5ENC_SCHEMES:
        raise ConfigError(
            f"t5enc needs single-token descriptors (simplified or pseudo), got {scheme.value}"
        )
    if method.kind == "seq2seq" and scheme not in SEQ2SEQ_SCHEMES:
        raise ConfigError(f"seq2seq needs original, simplified or numeric descriptors, got {scheme.value}")


class Classifier:
    """A method bound to a label vocabulary, tokenizer and parameters."""

    def __init__(self, method: MethodKind, cfg: ModelConfig, vocab: LabelVocabulary, tokenizer: Tokenizer,
                 seed: int = 0, head_init: str = "normal", threshold: float = 0.5,
                 max_target_len: int | None = None, params: dict[str, Tensor] | None = None):
        check_scheme(method, vocab.scheme)
        self.method = method
        self.vocab = vocab
        self.tokenizer = copy.deepcopy(tokenizer)
        if vocab.scheme is DescriptorScheme.PSEUDO:
            add_pseudo_tokens(self.tokenizer, vocab)
        if cfg.vocab_size != len(self.tokenizer):
            cfg = ModelConfig(**{**cfg.__dict__, "vocab_size": len(self.tokenizer)})
        if method.uses_decoder and cfg.decoder_layers == 0:
            raise ConfigError(f"{method.name} needs decoder_layers >= 1")
        self.cfg = cfg
        self.threshold = threshold
        self.label_tokens = descriptor_tokens(vocab, self.tokenizer) if method.kind == "t5enc" else None
        self.probe_token = None
        if method.kind == "t5enc_single_step":
            self.probe_token = self.tokenizer.index.get(PROBE_WORD)
            if self.probe_token is None:
                raise ConfigError(f"probe token {PROBE_WORD!r} is missing from the vocabulary")
        self.max_target_len = max_target_len or 2 * len(vocab) + 1
        if params is None:
            rng = np.random.default_rng(seed)
            params = init_params(cfg, rng)
            params.update(self._head_params(rng, head_init))
        self.params = params

    @property
    def num_labels(self) -> int:
        return len(self.vocab)

    def _head_params(self, rng: np.random.Generator, head_init: str) -> dict[str, Tensor]:
        if self.method.kind == "seq2seq":
            return {}
        d, L = self.cfg.d_model, self.num_labels
        if head_init == "zeros":
            w = np.zeros((L, d))
        elif head_init == "normal":
            w = rng.normal(0.0, d ** -0.5, size=(L, d))
        else:
            raise ConfigError(f"unknown head_init {head_init!r}")
        out = {"head.w": Tensor(w, True, "head.w"), "head.b": Tensor(np.zeros(L), True, "head.b")}
        if self.method.kind == "lwan":
            q = rng.normal(0.0, 1.0, size=(self.method.lwan_heads, L, d))
            out["lwan.query"] = Tensor(q, True, "lwan.query")
        return out

    # ------------------------------------------------------------ inputs

    def prepare(self, tokens: Sequence[int]) -> list[int]:
        """Append end-of-sequence if absent and truncate to ``max_len``."""
        toks = [int(t) for t in tokens]
        if not toks:
            raise ContractError("document has no tokens")
        if toks[-1] != EOS_ID:
            toks.append(EOS_ID)
        return truncate(toks, self.cfg.max_len)

    def encode(self, docs: Sequence[Sequence[int]], rng=None) -> EncoderOutput:
        ids, mask = pad_batch([self.prepare(d) for d in docs])
        return encode_batch(ids, mask, self.cfg, self.params, rng)

    # ------------------------------------------------------------ label scores

    def logits(self, docs: Sequence[Sequence[int]], rng=None) -> Tensor:
        """[B, L] label logits for the head-based methods."""
        kind = self.method.kind
        if kind == "seq2seq":
            raise ConfigError("seq2seq produces label sets, not label logits")
        enc = self.encode(docs, rng)
        if kind == "encoder_head":
            return self._encoder_head(enc)
        if kind == "lwan":
            return self._lwan(enc)
        if kind == "t5enc":
            return self.t5enc_position_logits(enc, self.label_tokens, None, rng)
        return self._single_step(enc, rng)

    def _linear_heads(self, h: Tensor) -> Tensor:
        return h @ self.params["head.w"].transpose(1, 0) + self.params["head.b"]

    def _encoder_head(self, enc: EncoderOutput) -> Tensor:
        lengths = enc.attention_mask.sum(axis=1)
        rows = np.arange(len(lengths))
        ids_ok = enc.attention_mask[rows, lengths - 1]
        if not ids_ok.all():
            raise ContractError("end-of-sequence position is masked")
        return self._linear_heads(enc.hidden[rows, lengths - 1])

    def _lwan(self, enc: EncoderOutput) -> Tensor:
        h = enc.hidden  # [B, N, d]
        b, n, d = h.shape
        heads = self.method.lwan_heads
        query = self.params["lwan.query"]  # [heads, L, d]
        h4 = h.reshape(b, 1, n, d)
        scores = T.matmul(query, h4.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))  # [B, heads, L, N]
        scores = scores + np.where(enc.attention_mask, 0.0, -1e30)[:, None, None, :]
        pooled = T.matmul(T.softmax_rows(scores), h4)  # [B, heads, L, d]
        doc_repr = pooled.mean(axis=1) if heads > 1 else pooled.reshape(b, self.num_labels, d)
        return (doc_repr * self.params["head.w"]).sum(axis=-1) + self.params["head.b"]

    def t5enc_position_logits(self, enc: EncoderOutput, decoder_tokens, head_index=None, rng=None,
                              scheme: AttentionScheme | None = None) -> Tensor:
        """Logits per decoder position for arbitrary decoder inputs.

        ``head_index[p]`` names the label head applied at position ``p``
        (identity by default), so permuting tokens and heads together is the
        same as relabelling positions.
        """
        dec = np.asarray(decoder_tokens, dtype=np.int64)
        b = enc.hidden.shape[0]
        if dec.ndim == 1:
            dec = np.broadcast_to(dec, (b, dec.size))
        heads = np.arange(dec.shape[1]) if head_index is None else np.asarray(head_index)
        hidden = decode_batch(dec, enc, scheme or self.method.scheme, self.cfg, self.params, rng)
        w = T.index(self.params["head.w"], heads)
        bias = T.index(self.params["head.b"], heads)
        return (hidden * w).sum(axis=-1) + bias

    def _single_step(self, enc: EncoderOutput, rng=None) -> Tensor:
        b = enc.hidden.shape[0]
        dec = np.full((b, 1), self.probe_token, dtype=np.int64)
        hidden = decode_batch(dec, enc, AttentionScheme.CAUSAL, self.cfg, self.params, rng)
        return self._linear_heads(hidden.reshape(b, self.cfg.d_model))

    # ------------------------------------------------------------ seq2seq

    def target_ids(self, gold: Sequence[int]) -> list[int]:
        text = format_target(gold, self.vocab)
        ids = self.tokenizer.encode(text)
        if UNK_ID in ids:
            raise DataError(f"target {text!r} contains words unknown to the tokenizer")
        return ids + [EOS_ID]

    def seq2seq_logits(self, docs, golds, rng=None) -> tuple[Tensor, np.ndarray, np.ndarray]:
        targets = [self.target_ids(g) for g in golds]
        tgt, mask = pad_batch(targets)
        dec_in = np.concatenate([np.full((len(targets), 1), PAD_ID), tgt[:, :-1]], axis=1)
        enc = self.encode(docs, rng)
        hidden = decode_batch(dec_in, enc, AttentionScheme.CAUSAL, self.cfg, self.params, rng)
        return lm_logits(hidden, self.cfg, self.params), tgt, mask

    def step_logprobs(self, enc: EncoderOutput) -> Callable[[list[tuple[int, ...]]], np.ndarray]:
        """Next-token log-probabilities for a batch of prefixes of one document."""

        def fn(prefixes):
            width = max(len(p) for p in prefixes) + 1
            dec = np.zeros((len(prefixes), width), dtype=np.int64)
            last = np.zeros(len(prefixes), dtype=np.int64)
            for i, p in enumerate(prefixes):
                dec[i, 1 : len(p) + 1] = p
                last[i] = len(p)
            hidden = decode_batch(dec, enc, AttentionScheme.CAUSAL, self.cfg, self.params)
            logits = lm_logits(hidden, self.cfg, self.params).data[np.arange(len(prefixes)), last]
            z = logits - logits.max(axis=-1, keepdims=True)
            return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

        return fn

    def generate(self, tokens: Sequence[int], decoding: str | None = None, beam_width: int | None = None,
                 max_len: int | None = None) -> Generation:
        if self.method.kind != "seq2seq":
            raise ConfigError("generate is only defined for seq2seq")
        max_len = max_len or self.max_target_len
        if max_len < 1:
            raise ContractError("max_len must be >= 1")
        decoding = decoding or self.method.decoding
        width = beam_width or self.method.beam_width
        step = self.step_logprobs(self.encode([tokens]))
        if decoding == "greedy":
            best = greedy_search(step, max_len)
        else:
            best = beam_search(step, width, max_len)[0]
        text = self.tokenizer.decode(best.tokens)
        parsed = parse_prediction_detailed(text, self.vocab)
        return Generation(parsed.labels, text, best.tokens, best.score, parsed)

    # ------------------------------------------------------------ training interface

    def loss(self, docs, golds, rng=None) -> Tensor:
        if self.method.kind == "seq2seq":
            logits, tgt, mask = self.seq2seq_logits(docs, golds, rng)
            return T.cross_entropy_vocab(logits, tgt, mask)
        targets = np.zeros((len(docs), self.num_labels))
        for i, g in enumerate(golds):
            targets[i, list(g)] = 1.0
        return T.bce_with_logits(self.logits(docs, rng), targets)

    def predict(self, docs, batch_size: int = 32) -> list[frozenset[int]]:
        if self.method.kind == "seq2seq":
            return [self.generate(d).labels for d in docs]
        out = []
        cut = math.log(self.threshold / (1.0 - self.threshold))
        for start in range(0, len(docs), batch_size):
            z = self.logits(docs[start : start + batch_size]).data
            out.extend(frozenset(np.flatnonzero(row > cut).tolist()) for row in z)
        return out


# ---------------------------------------------------------------- search

def greedy_search(step_fn, max_len: int, eos: int = EOS_ID) -> Hypothesis:
    tokens: tuple[int, ...] = ()
    score = 0.0
    for _ in range(max_len):
        logp = step_fn([tokens])[0]
        tok = int(np.argmax(logp))
        tokens += (tok,)
        score += float(logp[tok])
        if tok == eos:
            return Hypothesis(tokens, score, True)
    return Hypothesis(tokens, score, False)


def beam_search(step_fn, width: int, max_len: int, eos: int = EOS_ID) -> list[Hypothesis]:
    """Beam search without length normalisation.

    Finished hypotheses stay in the beam and compete for its ``width`` slots;
    ties are broken towards the lexicographically smaller token sequence.
    Hypotheses still open after ``max_len`` tokens count as complete.
    Returns the final beam, best first.
    """
    beam = [Hypothesis((), 0.0, False)]
    for _ in range(max_len):
        alive = [h for h in beam if not h.finished]
        if not alive:
            break
        logp = step_fn([h.tokens for h in alive])
        cands = [h for h in beam if h.finished]
        for h, row in zip(alive, logp):
            # only the best `width` continuations of a prefix can survive
            top = np.argsort(-row, kind="stable")[:width]
            for tok in top:
                tok = int(tok)
                cands.append(Hypothesis(h.tokens + (tok,), h.score + float(row[tok]), tok == eos))
        cands.sort(key=lambda h: (-h.score, h.tokens))
        beam = cands[:width]
    return beam


# ---------------------------------------------------------------- functional entry points

def _check(model: Classifier, kind: str) -> None:
    if model.method.kind != kind:
        raise ConfigError(f"model runs {model.method.name}, not {kind}")


def encoder_head_forward(model: Classifier, tokens) -> LabelScores:
    _check(model, "encoder_head")
    return LabelScores(model.logits([tokens]).data[0], model.method)


def lwan_forward(model: Classifier, tokens) -> LabelScores:
    _check(model, "lwan")
    return LabelScores(model.logits([tokens]).data[0], model.method)


def t5enc_forward(model: Classifier, tokens, scheme: AttentionScheme | None = None) -> LabelScores:
    _check(model, "t5enc")
    enc = model.encode([tokens])
    z = model.t5enc_position_logits(enc, model.label_tokens, scheme=scheme)
    return LabelScores(z.data[0], model.method)


def t5enc_single_step_forward(model: Classifier, tokens) -> LabelScores:
    _check(model, "t5enc_single_step")
    return LabelScores(model.logits([tokens]).data[0], model.method)


def seq2seq_loss(model: Classifier, tokens, gold_labels) -> Tensor:
    _check(model, "seq2seq")
    return model.loss([tokens], [sorted(gold_labels)])


def seq2seq_generate(model: Classifier, tokens, decoding: str = "beam", beam_width: int = 4,
                     max_len: int | None = None) -> Generation:
    _check(model, "seq2seq")
    return model.generate(tokens, decoding, beam_width, max_len)
