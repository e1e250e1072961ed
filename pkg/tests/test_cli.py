import json

import pytest
import yaml

from mltc import cli
from mltc.cli import ExperimentConfig, ablation_report, config_hash, main, novel_label_rate
from mltc.errors import ConfigError, TrainingError
from mltc.labelspace import ParseResult

TINY_MODEL = {"d_model": 16, "num_heads": 2, "d_ff": 32, "encoder_layers": 1, "decoder_layers": 1}


def write_config(path, **kw):
    cfg = {
        "dataset": "separable",
        "dataset_overrides": {"num_docs": 40, "doc_length": [6, 12]},
        "methods": ["encoder_head", "t5enc"],
        "model": TINY_MODEL,
        "train": {"learning_rate": 0.003, "max_epochs": 2, "seeds": [0, 1]},
    }
    cfg.update(kw)
    path.write_text(yaml.safe_dump(cfg))
    return path


def record(method, seed, micro=0.5, macro=0.4, dataset="d", level=1):
    return {"method": method, "seed": seed, "dataset": dataset, "level": level,
            "test": {"micro_f1": micro, "macro_f1": macro}}


def test_print_defaults(capsys):
    assert main(["--print-defaults"]) == 0
    printed = yaml.safe_load(capsys.readouterr().out)
    assert printed["train"]["learning_rate"] == 1e-4 and printed["train"]["patience"] == 3
    assert ExperimentConfig.from_dict(printed).train_config().seeds == (0, 1, 2, 3)


def test_grid_layout(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    runs = sorted(p.name for p in (tmp_path / "o" / "runs").iterdir())
    assert runs == [f"separable_L1_{m}_small_seed{s}" for m in ("encoder_head", "t5enc") for s in (0, 1)]
    for r in runs:
        d = tmp_path / "o" / "runs" / r
        assert {"checkpoint.npz", "history.jsonl", "metrics.json"} <= {p.name for p in d.iterdir()}
        lines = (d / "history.jsonl").read_text().splitlines()
        assert set(json.loads(lines[0])) == {"step", "epoch", "lr", "train_loss", "dev_micro_f1", "dev_macro_f1"}
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert len(manifest["config_hash"]) == 64 and len(manifest["corpus_hash"]) == 64
    csv_text = (tmp_path / "o" / "results.csv").read_text()
    assert csv_text.splitlines()[0] == "method,dataset,level,seeds,micro_f1,macro_f1"
    assert " ± " in csv_text


def test_report_regenerates_tables(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", methods=["lwan2"])
    out = tmp_path / "o"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    first = (out / "results.csv").read_bytes()
    (out / "results.csv").unlink()
    assert main(["report", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "results.csv").read_bytes() == first
    assert main(["evaluate", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "results.csv").read_bytes() == first


def test_invalid_combination_rejected_before_training(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", methods=["encoder_head", "t5enc"], scheme="original")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "single-token" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("change", [
    {"level": 3}, {"size": "giant"}, {"train": {"patience": 0}}, {"model": {"depth": 2}},
    {"methods": ["bert"]}, {"dataset": "missing_preset"}, {"unknown_key": 1},
])
def test_config_errors_exit_2(tmp_path, change):
    cfg = write_config(tmp_path / "c.yaml", **change)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_training_failure_exit_3(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise TrainingError("non-finite loss nan at step 1")

    monkeypatch.setattr(cli, "train", boom)
    cfg = write_config(tmp_path / "c.yaml", methods=["encoder_head"])
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_config_hash_tracks_semantics():
    base = ExperimentConfig()
    assert config_hash(base) == config_hash(ExperimentConfig(out="elsewhere"))
    assert config_hash(base) == config_hash(ExperimentConfig(train={"learning_rate": 1e-4}))
    assert config_hash(base) != config_hash(ExperimentConfig(train={"learning_rate": 2e-4}))
    assert config_hash(base) != config_hash(ExperimentConfig(level=2))


def test_seed_flag_restricts_grid(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", methods=["encoder_head"])
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "7"]) == 0
    assert [p.name for p in (tmp_path / "o" / "runs").iterdir()] == ["separable_L1_encoder_head_small_seed7"]


def test_generate_and_train_from_directory(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    assert main(["generate-data", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
    cfg2 = write_config(tmp_path / "c2.yaml", dataset=str(tmp_path / "data"), dataset_overrides={},
                        methods=["seq2seq_greedy"], level=2, train={"learning_rate": 0.003, "max_epochs": 1, "seeds": [0]})
    assert main(["train", "--config", str(cfg2), "--out", str(tmp_path / "o")]) == 0
    run = next((tmp_path / "o" / "runs").iterdir())
    metrics = json.loads((run / "metrics.json").read_text())
    assert set(metrics["novel"]) == {"rate", "fragments", "novel", "strings"}


def test_fisher_verb(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    assert main(["fisher", "--config", str(cfg), "--out", str(tmp_path / "f")]) == 0
    assert (tmp_path / "f" / "fisher.csv").read_text().startswith("dataset,level,labels")


class TestNovelRate:
    def test_all_valid(self):
        assert novel_label_rate([ParseResult(frozenset({1}), ["a"], [])]) == (0.0, [])

    def test_one_in_five_hundred(self):
        parses = [ParseResult(frozenset(), ["x"] * 100, []) for _ in range(4)]
        parses.append(ParseResult(frozenset(), ["x"] * 99 + ["accommodation"], ["accommodation"]))
        rate, novel = novel_label_rate(parses)
        assert abs(rate - 0.2) < 1e-12 and novel == ["accommodation"]

    def test_no_fragments(self):
        assert novel_label_rate([]) == (0.0, [])


class TestAblationReport:
    def test_attention_rows(self):
        recs = [record(label, s) for _, label in cli.ATTENTION_ROWS for s in (0, 1)]
        rows = ablation_report(recs)
        assert [r["row"] for r in rows] == ["Encoder+Head", "Single-step T5Enc", "T5Enc", "No attention", "Full attention"]
        assert rows[0]["micro_f1"] == "50.0 ± 0.0"

    def test_depth_rows(self):
        recs = [record(f"t5enc_dec{n}", 0) for n in (1, 4, 6, 12)]
        assert [r["row"] for r in ablation_report(recs, "depth")] == ["N=1", "N=4", "N=6", "N=12"]

    def test_empty(self):
        with pytest.raises(ConfigError):
            ablation_report([])

    def test_mismatched_seeds(self):
        recs = [record(label, 0) for _, label in cli.ATTENTION_ROWS] + [record("t5enc", 1)]
        with pytest.raises(ConfigError, match="seed"):
            ablation_report(recs)

    def test_missing_row(self):
        with pytest.raises(ConfigError):
            ablation_report([record("t5enc", 0)])

    def test_ablate_depth_verb(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", ablation="depth", depths=[1, 2],
                           train={"learning_rate": 0.003, "max_epochs": 1, "seeds": [0]})
        assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        text = (tmp_path / "o" / "ablation_depth.csv").read_text().splitlines()
        assert [line.split(",")[0] for line in text[1:]] == ["N=1", "N=2"]
