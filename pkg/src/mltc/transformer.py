"""T5-shaped encoder-decoder built on :mod:`mltc.tensor`.

Pre-norm residual blocks with RMS normalisation, ReLU feed-forward layers,
bucketed relative position bias shared across layers, and a decoder whose
self-attention can be causal, bidirectional (``full``) or skipped (``none``).
All batched functions take ``[B, N]`` integer id arrays plus a boolean mask.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

PAD_ID = 0
EOS_ID = 1
MASK_VALUE = -1e30


class AttentionScheme(str, Enum):
    CAUSAL = "causal"
    NONE = "none"
    FULL = "full"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 128
    encoder_layers: int = 2
    decoder_layers: int = 2
    relative_bias: bool = True
    decoder_relative_bias: bool = True
    num_buckets: int = 32
    max_distance: int = 128
    dropout: float = 0.1
    tie_embeddings: bool = True
    max_len: int = 512

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if self.encoder_layers < 1:
            raise ConfigError("encoder_layers must be >= 1")
        if self.decoder_layers < 0:
            raise ConfigError("decoder_layers must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads


PRESETS = {
    "small": dict(d_model=64, num_heads=4, d_ff=128, encoder_layers=2, decoder_layers=2),
    "base": dict(d_model=128, num_heads=4, d_ff=256, encoder_layers=3, decoder_layers=3),
    "large": dict(d_model=256, num_heads=8, d_ff=512, encoder_layers=4, decoder_layers=4),
}


def preset(name: str, vocab_size: int, **overrides) -> ModelConfig:
    try:
        shape = PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown size preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ModelConfig(vocab_size=vocab_size, **{**shape, **overrides})


@dataclass
class EncoderOutput:
    hidden: Tensor  # [B, N, d] (or [N, d] from :func:`encode`)
    attention_mask: np.ndarray  # [B, N] (or [N]) booleans


# ---------------------------------------------------------------- parameters

def _normal(rng: np.random.Generator, shape, std: float, name: str) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def _ones(shape, name: str) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


def _attn_params(p: dict, prefix: str, d: int, rng) -> None:
    for w in ("q", "k", "v", "o"):
        p[f"{prefix}.{w}"] = _normal(rng, (d, d), d ** -0.5, f"{prefix}.{w}")


def _ff_params(p: dict, prefix: str, d: int, d_ff: int, rng) -> None:
    p[f"{prefix}.wi"] = _normal(rng, (d, d_ff), d ** -0.5, f"{prefix}.wi")
    p[f"{prefix}.wo"] = _normal(rng, (d_ff, d), d_ff ** -0.5, f"{prefix}.wo")


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Randomly initialised encoder-decoder parameters keyed by name."""
    d = cfg.d_model
    p: dict[str, Tensor] = {"embed": _normal(rng, (cfg.vocab_size, d), 1.0, "embed")}
    if cfg.relative_bias:
        p["enc.rel_bias"] = _normal(rng, (cfg.num_buckets, cfg.num_heads), 0.1, "enc.rel_bias")
    for i in range(cfg.encoder_layers):
        pre = f"enc.{i}"
        p[f"{pre}.attn_norm"] = _ones(d, f"{pre}.attn_norm")
        _attn_params(p, f"{pre}.attn", d, rng)
        p[f"{pre}.ff_norm"] = _ones(d, f"{pre}.ff_norm")
        _ff_params(p, f"{pre}.ff", d, cfg.d_ff, rng)
    p["enc.final_norm"] = _ones(d, "enc.final_norm")
    if cfg.decoder_layers:
        if cfg.relative_bias and cfg.decoder_relative_bias:
            p["dec.rel_bias"] = _normal(rng, (cfg.num_buckets, cfg.num_heads), 0.1, "dec.rel_bias")
        for i in range(cfg.decoder_layers):
            pre = f"dec.{i}"
            p[f"{pre}.self_norm"] = _ones(d, f"{pre}.self_norm")
            _attn_params(p, f"{pre}.self", d, rng)
            p[f"{pre}.cross_norm"] = _ones(d, f"{pre}.cross_norm")
            _attn_params(p, f"{pre}.cross", d, rng)
            p[f"{pre}.ff_norm"] = _ones(d, f"{pre}.ff_norm")
            _ff_params(p, f"{pre}.ff", d, cfg.d_ff, rng)
        p["dec.final_norm"] = _ones(d, "dec.final_norm")
        if not cfg.tie_embeddings:
            p["lm_head"] = _normal(rng, (d, cfg.vocab_size), d ** -0.5, "lm_head")
    return p


# ---------------------------------------------------------------- attention

def relative_position_bucket(relative: np.ndarray, bidirectional: bool, num_buckets: int, max_distance: int) -> np.ndarray:
    """T5 bucketing of ``key_pos - query_pos`` into ``num_buckets`` ids."""
    n = -np.asarray(relative, dtype=np.int64)
    ret = np.zeros_like(n)
    if bidirectional:
        num_buckets //= 2
        ret += (n < 0).astype(np.int64) * num_buckets
        n = np.abs(n)
    else:
        n = np.maximum(n, 0)
    max_exact = num_buckets // 2
    small = n < max_exact
    with np.errstate(divide="ignore"):
        large = max_exact + (
            np.log(np.maximum(n, 1) / max_exact) / math.log(max_distance / max_exact) * (num_buckets - max_exact)
        ).astype(np.int64)
    large = np.minimum(large, num_buckets - 1)
    return ret + np.where(small, n, large)


def position_bias(table: Tensor, q_len: int, k_len: int, bidirectional: bool, cfg: ModelConfig) -> Tensor:
    """Bias of shape [H, q_len, k_len] gathered from a [buckets, H] table."""
    rel = np.arange(k_len)[None, :] - np.arange(q_len)[:, None]
    buckets = relative_position_bucket(rel, bidirectional, cfg.num_buckets, cfg.max_distance)
    return T.transpose(T.embedding(table, buckets), (2, 0, 1))


def attention(q: Tensor, k: Tensor, v: Tensor, mask, bias: Tensor | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d_head) + bias + mask) v over the last two axes.

    ``mask`` is boolean (True = may attend) and broadcastable to the score
    shape. Every query row must keep at least one key.
    """
    m = np.asarray(mask, dtype=bool)
    score_shape = np.broadcast_shapes(q.shape[:-1] + (k.shape[-2],), m.shape)
    if not np.broadcast_to(m, score_shape).any(axis=-1).all():
        raise ContractError("attention mask blocks every key for some query row")
    scores = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if bias is not None:
        scores = scores + bias
    if not m.all():
        scores = scores + np.where(m, 0.0, MASK_VALUE)
    return T.matmul(T.softmax_rows(scores), v)


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def multi_head_attention(x_q: Tensor, x_kv: Tensor, params: dict, prefix: str, cfg: ModelConfig, mask, bias=None) -> Tensor:
    h = cfg.num_heads
    q = _split_heads(x_q @ params[f"{prefix}.q"], h)
    k = _split_heads(x_kv @ params[f"{prefix}.k"], h)
    v = _split_heads(x_kv @ params[f"{prefix}.v"], h)
    return _merge_heads(attention(q, k, v, mask, bias)) @ params[f"{prefix}.o"]


def _feed_forward(x: Tensor, params: dict, prefix: str) -> Tensor:
    return T.relu(x @ params[f"{prefix}.wi"]) @ params[f"{prefix}.wo"]


# ---------------------------------------------------------------- encoder / decoder

def encode_batch(ids: np.ndarray, mask: np.ndarray, cfg: ModelConfig, params: dict, rng=None) -> EncoderOutput:
    """Encode a padded batch ``ids`` [B, N] with key mask ``mask`` [B, N]."""
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if ids.ndim != 2 or ids.shape[1] < 1:
        raise ContractError("encoder input must be a non-empty [B, N] id array")
    if ids.max() >= cfg.vocab_size or ids.min() < 0:
        raise ContractError(f"token id outside vocabulary of size {cfg.vocab_size}")
    if not mask.any(axis=1).all():
        raise ContractError("every document needs at least one unmasked token")
    rate = cfg.dropout if rng is not None else 0.0
    h = T.dropout(T.embedding(params["embed"], ids), rate, rng)
    n = ids.shape[1]
    bias = position_bias(params["enc.rel_bias"], n, n, True, cfg) if cfg.relative_bias else None
    key_mask = mask[:, None, None, :]
    for i in range(cfg.encoder_layers):
        pre = f"enc.{i}"
        x = T.rms_norm(h, params[f"{pre}.attn_norm"])
        h = h + T.dropout(multi_head_attention(x, x, params, f"{pre}.attn", cfg, key_mask, bias), rate, rng)
        x = T.rms_norm(h, params[f"{pre}.ff_norm"])
        h = h + T.dropout(_feed_forward(x, params, f"{pre}.ff"), rate, rng)
    h = T.dropout(T.rms_norm(h, params["enc.final_norm"]), rate, rng)
    return EncoderOutput(h, mask)


def truncate(tokens, max_len: int) -> list[int]:
    """Hard truncation to ``max_len`` ids, keeping a trailing end-of-sequence."""
    tokens = list(tokens)
    if len(tokens) <= max_len:
        return tokens
    if tokens[-1] == EOS_ID:
        return tokens[: max_len - 1] + [EOS_ID]
    return tokens[:max_len]


def pad_batch(seqs, pad: int = PAD_ID) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def encode(tokens, cfg: ModelConfig, params: dict, rng=None) -> EncoderOutput:
    """Encode a single document; returns hidden states of shape [N, d]."""
    tokens = list(tokens)
    if not tokens:
        raise ContractError("cannot encode an empty document")
    tokens = truncate(tokens, cfg.max_len)
    ids, mask = pad_batch([tokens])
    out = encode_batch(ids, mask, cfg, params, rng)
    return EncoderOutput(out.hidden[0], out.attention_mask[0])


def _self_mask(m: int, scheme: AttentionScheme) -> np.ndarray:
    if scheme is AttentionScheme.CAUSAL:
        return np.tril(np.ones((m, m), dtype=bool))
    return np.ones((m, m), dtype=bool)


def decode_batch(
    dec_ids: np.ndarray,
    enc: EncoderOutput,
    scheme: AttentionScheme,
    cfg: ModelConfig,
    params: dict,
    rng=None,
) -> Tensor:
    """Decoder hidden states [B, M, d] for decoder inputs ``dec_ids`` [B, M].

    ``enc.hidden`` may have batch size 1 and is then shared by every row.
    """
    scheme = AttentionScheme(scheme)
    if cfg.decoder_layers == 0:
        raise ConfigError("decode called on a model without decoder layers")
    dec_ids = np.asarray(dec_ids, dtype=np.int64)
    if dec_ids.ndim != 2 or dec_ids.shape[1] < 1:
        raise ContractError("decoder input must be a non-empty [B, M] id array")
    if dec_ids.max() >= cfg.vocab_size or dec_ids.min() < 0:
        raise ContractError(f"decoder token id outside vocabulary of size {cfg.vocab_size}")
    rate = cfg.dropout if rng is not None else 0.0
    m = dec_ids.shape[1]
    h = T.dropout(T.embedding(params["embed"], dec_ids), rate, rng)
    self_mask = _self_mask(m, scheme)
    bias = None
    if scheme is not AttentionScheme.NONE and "dec.rel_bias" in params:
        bias = position_bias(params["dec.rel_bias"], m, m, scheme is AttentionScheme.FULL, cfg)
    cross_mask = np.asarray(enc.attention_mask, dtype=bool)[:, None, None, :]
    for i in range(cfg.decoder_layers):
        pre = f"dec.{i}"
        if scheme is not AttentionScheme.NONE:
            x = T.rms_norm(h, params[f"{pre}.self_norm"])
            h = h + T.dropout(multi_head_attention(x, x, params, f"{pre}.self", cfg, self_mask, bias), rate, rng)
        x = T.rms_norm(h, params[f"{pre}.cross_norm"])
        h = h + T.dropout(multi_head_attention(x, enc.hidden, params, f"{pre}.cross", cfg, cross_mask), rate, rng)
        x = T.rms_norm(h, params[f"{pre}.ff_norm"])
        h = h + T.dropout(_feed_forward(x, params, f"{pre}.ff"), rate, rng)
    return T.dropout(T.rms_norm(h, params["dec.final_norm"]), rate, rng)


def decode(decoder_tokens, enc: EncoderOutput, scheme: AttentionScheme, cfg: ModelConfig, params: dict, rng=None) -> Tensor:
    """Decode one sequence against a single-document :class:`EncoderOutput`."""
    tokens = list(decoder_tokens)
    if not tokens:
        raise ContractError("decoder input must contain at least one token")
    hidden = enc.hidden if enc.hidden.ndim == 3 else enc.hidden.reshape(1, *enc.hidden.shape)
    mask = np.atleast_2d(enc.attention_mask)
    out = decode_batch(np.array([tokens]), EncoderOutput(hidden, mask), scheme, cfg, params, rng)
    return out[0]


def lm_logits(hidden: Tensor, cfg: ModelConfig, params: dict) -> Tensor:
    """Vocabulary logits from decoder states (tied embeddings are rescaled)."""
    if cfg.tie_embeddings:
        return (hidden * cfg.d_model ** -0.5) @ params["embed"].transpose(1, 0)
    return hidden @ params["lm_head"]


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, cfg: ModelConfig, params: dict[str, Tensor], meta: dict | None = None) -> None:
    """Write parameters, their config and optional metadata to one ``.npz``."""
    arrays = {f"param/{k}": v.data for k, v in params.items()}
    arrays["__config__"] = np.array(json.dumps(asdict(cfg), sort_keys=True))
    arrays["__meta__"] = np.array(json.dumps(meta or {}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor], dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        cfg = ModelConfig(**json.loads(str(z["__config__"])))
        meta = json.loads(str(z["__meta__"]))
        params = {
            k[len("param/"):]: Tensor(z[k].copy(), requires_grad=True, name=k[len("param/"):])
            for k in z.files
            if k.startswith("param/")
        }
    return cfg, params, meta


def with_overrides(cfg: ModelConfig, **changes) -> ModelConfig:
    return replace(cfg, **changes)
