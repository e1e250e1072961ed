"""How often does Beam(k) miss the exhaustive maximum on randomly initialised decoders?

Beam search is a heuristic; on tiny vocabularies the miss rate depends on how
peaked the model's next-token distributions are. This script measures it for
several model widths.
"""
import argparse
import math

import numpy as np

from mltc.labelspace import EOS_ID
from mltc.methods import beam_search
from mltc.transformer import ModelConfig, decode_batch, encode_batch, init_params, lm_logits


def random_step_fn(seed: int, d_model: int, layers: int):
    rng = np.random.default_rng(seed)
    vocab, max_len = int(rng.integers(3, 9)), int(rng.integers(1, 5))
    heads = 4 if d_model % 4 == 0 else 2
    cfg = ModelConfig(vocab_size=vocab, d_model=d_model, num_heads=heads, d_ff=2 * d_model,
                      encoder_layers=layers, decoder_layers=layers, dropout=0.0)
    params = init_params(cfg, rng)
    src = rng.integers(2, vocab, size=(1, int(rng.integers(1, 7))))
    enc = encode_batch(src, np.ones_like(src, dtype=bool), cfg, params)

    def step(prefixes):
        dec = np.zeros((len(prefixes), max(map(len, prefixes)) + 1), dtype=np.int64)
        for i, p in enumerate(prefixes):
            dec[i, 1: len(p) + 1] = p
        last = np.array([len(p) for p in prefixes])
        z = lm_logits(decode_batch(dec, enc, "causal", cfg, params), cfg, params).data[np.arange(len(prefixes)), last]
        z = z - z.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    return step, vocab, max_len


def exhaustive(step, vocab, max_len):
    best, frontier = -math.inf, [((), 0.0)]
    for t in range(max_len):
        rows = step([p for p, _ in frontier])
        nxt = []
        for (prefix, score), row in zip(frontier, rows):
            for tok in range(vocab):
                s = score + float(row[tok])
                if tok == EOS_ID or t == max_len - 1:
                    best = max(best, s)
                else:
                    nxt.append((prefix + (tok,), s))
        frontier = nxt
    return best


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--models", type=int, default=200)
    ap.add_argument("--width", type=int, default=4)
    args = ap.parse_args()
    for d_model, layers in ((16, 1), (32, 1), (64, 2)):
        misses = 0
        for seed in range(args.models):
            step, vocab, max_len = random_step_fn(seed, d_model, layers)
            misses += abs(beam_search(step, args.width, max_len)[0].score - exhaustive(step, vocab, max_len)) > 1e-9
        print(f"d_model={d_model:<3} layers={layers}: Beam({args.width}) missed the maximum on {misses}/{args.models}")


if __name__ == "__main__":
    main()
