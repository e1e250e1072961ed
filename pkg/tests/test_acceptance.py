"""The ten acceptance criteria, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v -s``; a PASS/FAIL line per
criterion is printed and repeated in the terminal summary.
"""
import json
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from mltc.cli import main as cli_main
from mltc.cli import novel_label_rate, score_test_split
from mltc.data import DatasetSpec, generate, preset_spec, split_chronological
from mltc.labelspace import EOS_ID, DescriptorScheme, ParseResult, format_target, parse_prediction
from mltc.methods import MethodKind, beam_search, greedy_search
from mltc.metrics import ContingencyTable, LabelCounts, fisher_exact_p, macro_f1, micro_f1, significant_pair_rate, significant_pairs
from mltc.optim import adafactor_step, decay_rate, init_state
from mltc.tensor import gradcheck
from mltc.training import TrainConfig, build_model, fit
from mltc.transformer import ModelConfig, encode_batch, decode_batch, init_params, lm_logits

ROOT = Path(__file__).resolve().parents[1]
SMALL_DATA = dict(num_docs=30, doc_length=(6, 10))


@pytest.fixture(scope="module")
def separable_small():
    return generate(preset_spec("separable", **SMALL_DATA))


# ---------------------------------------------------------------- 1

def test_c1_gradients(verdict, separable_small):
    ds = separable_small
    docs = [d.tokens for d in ds.documents[:2]]
    start = time.time()
    worst, checked = {}, 0
    for name in ("encoder_head", "lwan4", "seq2seq_beam4", "t5enc", "t5enc_single_step"):
        model = build_model(MethodKind.parse(name), ds, 1, "small", model_overrides={"dropout": 0.0})
        golds = [sorted(d.labels_l1) for d in ds.documents[:2]]
        loss_fn = lambda: model.loss(docs, golds)  # noqa: E731
        report = gradcheck(loss_fn, model.params, num_coords=100, h=1e-4, seed=1)
        for pname in model.params:  # a few coordinates of every tensor as well
            report += gradcheck(loss_fn, model.params, num_coords=2, h=1e-4, seed=2, names=[pname])
        checked += len(report)
        worst[name] = max(r[4] for r in report)
    elapsed = time.time() - start
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(1, ok, f"max rel err {detail}; {checked} coordinates in {elapsed:.0f}s")


# ---------------------------------------------------------------- 2

def _t5(ds, scheme, seed, **overrides):
    return build_model(MethodKind("t5enc", scheme=scheme), ds, 1, "small", seed=seed,
                       model_overrides={"dropout": 0.0, **overrides})


def test_c2_attention_schemes(verdict, separable_small):
    ds = separable_small
    rng = np.random.default_rng(0)
    L = len(ds.vocab_l1)
    worst = {"none": 0.0, "causal": 0.0, "full": 0.0}
    models = {s: [_t5(ds, s, k) for k in range(4)] for s in ("none", "causal")}
    models["full"] = [_t5(ds, "full", k, decoder_relative_bias=False) for k in range(4)]
    for trial in range(100):
        doc = ds.documents[int(rng.integers(len(ds)))].tokens
        for scheme in ("none", "causal", "full"):
            m = models[scheme][trial % 4]
            enc = m.encode([doc])
            base_tokens = np.array(m.label_tokens)
            base = m.t5enc_position_logits(enc, base_tokens).data[0]
            if scheme == "full":
                perm = rng.permutation(L)
                z = m.t5enc_position_logits(enc, base_tokens[perm], head_index=perm).data[0]
                worst[scheme] = max(worst[scheme], float(np.abs(z - base[perm]).max()))
                continue
            tokens = base_tokens.copy()
            if scheme == "none":
                keep = int(rng.integers(L))
                changed = [j for j in range(L) if j != keep]
                compare = [keep]
            else:
                i = int(rng.integers(L - 1))
                changed = list(range(i + 1, L))
                compare = list(range(i + 1))
            tokens[changed] = rng.integers(4, m.cfg.vocab_size, size=len(changed))
            z = m.t5enc_position_logits(enc, tokens).data[0]
            worst[scheme] = max(worst[scheme], float(np.abs(z[compare] - base[compare]).max()))
    ok = all(v <= 1e-9 for v in worst.values())
    verdict(2, ok, "max deviation " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " over 100 trials each")


# ---------------------------------------------------------------- 3

def _random_decoder(seed):
    """A Small-preset encoder-decoder with default initialisation over a tiny vocabulary."""
    rng = np.random.default_rng(seed)
    vocab = int(rng.integers(3, 9))
    max_len = int(rng.integers(1, 5))
    cfg = ModelConfig(vocab_size=vocab, dropout=0.0)
    params = init_params(cfg, rng)
    src = rng.integers(2, vocab, size=(1, int(rng.integers(1, 7))))
    enc = encode_batch(src, np.ones_like(src, dtype=bool), cfg, params)

    def step(prefixes):
        width = max(len(p) for p in prefixes) + 1
        dec = np.zeros((len(prefixes), width), dtype=np.int64)
        for i, p in enumerate(prefixes):
            dec[i, 1: len(p) + 1] = p
        last = np.array([len(p) for p in prefixes])
        z = lm_logits(decode_batch(dec, enc, "causal", cfg, params), cfg, params).data[np.arange(len(prefixes)), last]
        z = z - z.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    return step, vocab, max_len


def _exhaustive(step, vocab, max_len):
    """Best score over all sequences that end in EOS or reach ``max_len``."""
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


def test_c3_beam_oracle(verdict):
    misses = 0
    for seed in range(200):
        step, vocab, max_len = _random_decoder(seed)
        if abs(beam_search(step, 4, max_len)[0].score - _exhaustive(step, vocab, max_len)) > 1e-9:
            misses += 1
    greedy_diff = 0
    for seed in range(100):
        step, _, _ = _random_decoder(10_000 + seed)
        g, b = greedy_search(step, 4), beam_search(step, 1, 4)[0]
        greedy_diff += (g.tokens != b.tokens) or (g.score != b.score)
    verdict(3, misses == 0 and greedy_diff == 0,
            f"Beam(4) missed the exhaustive maximum on {misses}/200 models; Beam(1) differed from greedy on {greedy_diff}/100")


# ---------------------------------------------------------------- 4

def _fisher_oracle(t):
    r1, c1, n = t.a + t.b, t.a + t.c, t.n
    total = math.comb(n, c1)
    probs = [Fraction(math.comb(r1, x) * math.comb(n - r1, c1 - x), total)
             for x in range(max(0, r1 + c1 - n), min(r1, c1) + 1)]
    observed = Fraction(math.comb(r1, t.a) * math.comb(n - r1, c1 - t.a), total)
    return float(sum(p for p in probs if p <= observed * (1 + Fraction(1, 10 ** 7))))


def test_c4_fisher(verdict):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(0, 201))
        cells = rng.multinomial(n, rng.dirichlet(np.ones(4)))
        t = ContingencyTable(*map(int, cells))
        worst = max(worst, abs(fisher_exact_p(t) - _fisher_oracle(t)))
    null_rates = []
    for seed in range(20):
        spec = DatasetSpec(num_docs=10_000, num_labels_l1=10, mean_labels_per_doc_l1=1.5, num_labels_l2=60,
                           mean_labels_per_doc_l2=2.5, zipf_exponent=0.0, hierarchical=False,
                           doc_length=(1, 1), seed=seed)
        null_rates.append(significant_pair_rate(generate(spec), 2))
    detected = 0
    for seed in range(20):
        spec = preset_spec("l2dep", seed=seed, doc_length=(1, 1))
        found = {(i, j) for i, j, _ in significant_pairs(generate(spec).label_matrix(2))}
        detected += all((p.a, p.b) in found for p in spec.dependency_pairs)
    ok = worst <= 1e-10 and max(null_rates) <= 1.0 and detected >= 19
    verdict(4, ok, f"oracle max |dp| {worst:.1e} on 1000 tables; null rate max {max(null_rates):.2f}% "
                   f"over 20 seeds; all planted pairs found in {detected}/20 seeds")


# ---------------------------------------------------------------- 5

def test_c5_metric_oracle(verdict):
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(1000):
        L, D = int(rng.integers(1, 12)), int(rng.integers(0, 30))
        gold = [set(np.flatnonzero(rng.random(L) < 0.3).tolist()) for _ in range(D)]
        pred = [set(np.flatnonzero(rng.random(L) < 0.3).tolist()) for _ in range(D)]
        tp = [0] * L
        fp = [0] * L
        fn = [0] * L
        for g, p in zip(gold, pred):  # per-example recount
            for lab in p:
                if lab in g:
                    tp[lab] += 1
                else:
                    fp[lab] += 1
            for lab in g - p:
                fn[lab] += 1
        st, sp, sn = sum(tp), sum(fp), sum(fn)
        micro = 2 * st / (2 * st + sp + sn) if 2 * st + sp + sn else 0.0
        per = [2 * a / (2 * a + b + c) if 2 * a + b + c else 0.0 for a, b, c in zip(tp, fp, fn)]
        macro = sum(per) / L
        counts = LabelCounts.from_sets(gold, pred, L)
        mismatches += counts.triples() != list(zip(tp, fp, fn))
        mismatches += micro_f1(counts) != micro or macro_f1(counts) != macro
    two_thirds = micro_f1(LabelCounts(np.array([2]), np.array([1]), np.array([1]))) == 2 / 3
    verdict(5, mismatches == 0 and two_thirds,
            f"{mismatches} mismatches on 1000 random prediction sets; micro(2,1,1)=2/3 exactly: {two_thirds}")


# ---------------------------------------------------------------- 6

OVERFIT_METHODS = ("encoder_head", "lwan1", "lwan4", "seq2seq_beam4", "t5enc", "t5enc_single_step")


def test_c6_overfit(verdict):
    ds = generate(preset_spec("separable"))
    split = split_chronological(ds, (0.6, 0.2, 0.2))
    cfg = TrainConfig(learning_rate=3e-3, max_epochs=200, patience=200, batch_size=16, stop_at=0.95)
    results = []
    for name in OVERFIT_METHODS:
        for seed in (0, 1):
            start = time.time()
            _, res = fit(MethodKind.parse(name), ds, split, 1, cfg, seed=seed, model_overrides={"dropout": 0.0})
            results.append((name, seed, res.best.dev_micro_f1, len(res.history), time.time() - start))
    ok = all(f1 >= 0.95 and secs < 600 for _, _, f1, _, secs in results)
    detail = "; ".join(f"{n}/s{s} {f1:.3f} ({ep} ep, {secs:.0f}s)" for n, s, f1, ep, secs in results)
    verdict(6, ok, detail)


# ---------------------------------------------------------------- 7

def test_c7_trend(verdict, tmp_path):
    config = ROOT / "scripts" / "configs" / "trend_l2dep.yaml"
    assert cli_main(["train", "--config", str(config), "--out", str(tmp_path)]) == 0
    records = [json.loads(p.read_text()) for p in sorted((tmp_path / "runs").glob("*/metrics.json"))]

    def mean(method, metric):
        vals = [r["test"][metric] for r in records if r["method"] == method]
        assert len(vals) == 4
        return sum(vals) / 4

    t5_macro, eh_macro = mean("t5enc", "macro_f1"), mean("encoder_head", "macro_f1")
    t5_micro, none_micro = mean("t5enc", "micro_f1"), mean("t5enc_none", "micro_f1")
    ok = t5_macro >= eh_macro and t5_micro >= none_micro
    verdict(7, ok, f"macro-F1 T5Enc {100 * t5_macro:.1f} vs Encoder+Head {100 * eh_macro:.1f}; "
                   f"micro-F1 T5Enc {100 * t5_micro:.1f} vs no attention {100 * none_micro:.1f} (4 seeds)")


# ---------------------------------------------------------------- 8

def test_c8_seq2seq_parsing(verdict, tmp_path):
    ds = generate(preset_spec("l2dep", num_docs=200))
    rng = np.random.default_rng(8)
    failures = 0
    schemes = [DescriptorScheme.ORIGINAL, DescriptorScheme.SIMPLIFIED, DescriptorScheme.NUMERIC]
    for k in range(10_000):
        level = 1 + k % 2
        vocab = ds.vocab(level).with_scheme(schemes[k % 3])
        subset = set(np.flatnonzero(rng.random(len(vocab)) < rng.uniform(0, 0.3)).tolist())
        failures += parse_prediction(format_target(subset, vocab), vocab) != subset

    # telemetry: a briefly trained model emits both valid and novel fragments
    small = generate(preset_spec("separable", num_docs=60, doc_length=(6, 10)))
    split = split_chronological(small, (0.5, 0.1, 0.4))
    model, _ = fit(MethodKind.parse("seq2seq_greedy"), small, split, 2,
                   TrainConfig(learning_rate=3e-3, max_epochs=4, patience=10), seed=0,
                   model_overrides={"dropout": 0.0})
    metrics = score_test_split(model, small, split, 2, tmp_path)
    raw = [json.loads(line) for line in (tmp_path / "generations.jsonl").read_text().splitlines()]
    valid = {model.vocab.descriptor(i) for i in range(len(model.vocab))}
    frags = [f.strip() for r in raw for f in r["text"].split(",") if f.strip()]
    novel = [f for f in frags if f not in valid]
    recount_rate = 100.0 * len(novel) / len(frags) if frags else 0.0
    tele = metrics["novel"]
    rate, strings = novel_label_rate(ParseResult(frozenset(), r["fragments"], r["novel"]) for r in raw)
    telemetry_ok = (len(novel) > 0 and tele["fragments"] == len(frags) and tele["novel"] == len(novel)
                    and tele["rate"] == recount_rate == rate and tele["strings"] == sorted(set(novel)) == strings)
    verdict(8, failures == 0 and telemetry_ok,
            f"{failures}/10000 round-trip failures; telemetry {tele['novel']}/{tele['fragments']} novel "
            f"vs recount {len(novel)}/{len(frags)}")


# ---------------------------------------------------------------- 9

def test_c9_determinism(verdict, tmp_path):
    config = tmp_path / "grid.yaml"
    config.write_text(
        "dataset: separable\n"
        "dataset_overrides: {num_docs: 60, doc_length: [10, 20]}\n"
        "methods: [lwan1, t5enc]\n"
        "train: {learning_rate: 0.003, max_epochs: 3, seeds: [0, 1]}\n"
    )
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [cli_main(["run", "--config", str(config), "--out", str(o)]) for o in outs]
    same_csv = (outs[0] / "results.csv").read_bytes() == (outs[1] / "results.csv").read_bytes()
    runs = sorted(p.name for p in (outs[0] / "runs").iterdir())
    same_runs = all((outs[0] / "runs" / r / f).read_bytes() == (outs[1] / "runs" / r / f).read_bytes()
                    for r in runs for f in ("metrics.json", "history.jsonl"))
    ok = codes == [0, 0] and same_csv and same_runs and len(runs) == 4
    verdict(9, ok, f"exit codes {codes}; results.csv identical: {same_csv}; per-run files identical: {same_runs}")


# ---------------------------------------------------------------- 10

def _unfactored(param, grad, v, step, lr):
    beta2 = decay_rate(step)
    v = beta2 * v + (1 - beta2) * (grad * grad + 1e-30)
    u = grad / np.sqrt(v)
    u = u / max(1.0, float(np.sqrt(np.mean(u * u))))
    return param - lr * u, v


def test_c10_adafactor_rank1(verdict):
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(100):
        shape = tuple(int(s) for s in rng.integers(1, 9, size=2))
        p = rng.normal(size=shape)
        pf, pu = p.copy(), p.copy()
        state, v = init_state(shape), np.zeros(shape)
        r, c = rng.normal(size=shape[0]), rng.normal(size=shape[1])
        lr = float(rng.uniform(1e-4, 1e-1))
        for step in range(1, int(rng.integers(1, 6)) + 1):
            g = np.outer(r, c) * rng.uniform(0.1, 3.0)
            pf, state, _ = adafactor_step(pf, g, state, step, lr)
            pu, v = _unfactored(pu, g, v, step, lr)
        worst = max(worst, float(np.abs(pf - pu).max()))
    verdict(10, worst <= 1e-9, f"max |factored - unfactored| {worst:.1e} over 100 trials")
