import json

import numpy as np
import pytest

from posenet.cli import ConfigError, main, resolve_config
from posenet.data import read_corpus


def write_config(path, **overrides):
    document = {
        "model": {
            "depth": 8,
            "max_length": 12,
            "encoder": {"num_layers": 1, "heads": 2},
            "decoder": {"num_layers": 1, "heads": 2},
        },
        "task": {"kind": "copy", "symbols": 4, "min_len": 2, "max_len": 4},
        "train": {
            "train_steps": 4,
            "batch_size": 4,
            "eval_every": 2,
            "eval_size": 4,
        },
    }
    document.update(overrides)
    path.write_text(json.dumps(document))
    return path


class TestResolveConfig:
    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown top-level key"):
            resolve_config({"task": {}, "extra": 1})

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            resolve_config({"task": {"kind": "copy", "bogus": 3}})

    def test_unknown_encoder_key_rejected(self):
        with pytest.raises(ConfigError, match="model.encoder"):
            resolve_config({"model": {"encoder": {"bogus": 1}}})

    def test_vocab_derived_from_task(self):
        run_cfg = resolve_config({"task": {"kind": "copy", "symbols": 10}})
        assert run_cfg.model.vocab_size == 14

    def test_toggles_map_onto_model(self):
        run_cfg = resolve_config(
            {
                "task": {},
                "toggles": {
                    "encoder_pe_per_layer": False,
                    "encoder_dilation": False,
                    "decoder_pe_once": False,
                    "heads": 2,
                    "attention_mode": "projected",
                },
            }
        )
        assert run_cfg.model.encoder.pe_per_layer is False
        assert run_cfg.model.encoder.dilations == (1, 1)
        assert run_cfg.model.decoder.apply_pe_once is False
        assert run_cfg.model.encoder.heads == 2
        assert run_cfg.model.decoder.attention_mode == "projected"

    def test_unknown_toggle_rejected(self):
        with pytest.raises(ConfigError, match="unknown toggle"):
            resolve_config({"toggles": {"bogus": True}})

    def test_seed_override(self):
        run_cfg = resolve_config({"task": {}}, seed=99)
        assert run_cfg.model.seed == 99
        assert run_cfg.train.seed == 99


class TestCommands:
    def test_gen_data_writes_corpus_and_config(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json", gen={"count": 7})
        out = tmp_path / "data"
        assert main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
        pairs = read_corpus(out / "corpus.tsv")
        assert len(pairs) == 7
        echoed = json.loads((out / "config.json").read_text())
        assert echoed["model"]["vocab_size"] == 8

    def test_train_eval_translate_pipeline(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json")
        run_dir = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--out", str(run_dir)]) == 0
        assert (run_dir / "metrics.log").exists()
        assert (run_dir / "ckpt_final.pnet").exists()
        capsys.readouterr()

        code = main(
            ["eval", "--config", str(cfg), "--ckpt", str(run_dir / "ckpt_final.pnet")]
        )
        assert code == 0
        line = capsys.readouterr().out.strip()
        keys = [part.split("=")[0] for part in line.split(" ")]
        assert keys == [
            "step", "loss", "accuracy", "accuracy_top5",
            "neg_log_perplexity", "approx_bleu_score",
        ]

    def test_translate_reads_stdin(self, tmp_path, capsys, monkeypatch):
        import io

        cfg = write_config(tmp_path / "cfg.json")
        run_dir = tmp_path / "run"
        main(["train", "--config", str(cfg), "--out", str(run_dir)])
        capsys.readouterr()
        monkeypatch.setattr("sys.stdin", io.StringIO("4 5 6\n7 7\n"))
        code = main(["translate", "--ckpt", str(run_dir / "ckpt_final.pnet")])
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 2

    def test_missing_config_exits_2(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "nope.json")]) == 2

    def test_invalid_config_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"task": {"kind": "copy"}, "wrong": 1}')
        assert main(["train", "--config", str(bad)]) == 2

    def test_checkpoint_mismatch_exits_3(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json")
        run_dir = tmp_path / "run"
        main(["train", "--config", str(cfg), "--out", str(run_dir)])
        other = write_config(
            tmp_path / "other.json",
            model={
                "depth": 8,
                "max_length": 12,
                "encoder": {"num_layers": 2, "heads": 2},
                "decoder": {"num_layers": 1, "heads": 2},
            },
        )
        code = main(
            ["eval", "--config", str(other), "--ckpt", str(run_dir / "ckpt_final.pnet")]
        )
        assert code == 3

    def test_echoed_config_reproduces_run(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json")
        run_a = tmp_path / "a"
        main(["train", "--config", str(cfg), "--out", str(run_a)])
        run_b = tmp_path / "b"
        main(["train", "--config", str(run_a / "config.json"), "--out", str(run_b)])
        assert (run_a / "metrics.log").read_text() == (run_b / "metrics.log").read_text()
        assert (run_a / "ckpt_final.pnet").read_bytes() == (
            run_b / "ckpt_final.pnet"
        ).read_bytes()

    def test_ablate_emits_four_row_table(self, tmp_path, capsys):
        cfg = write_config(
            tmp_path / "cfg.json",
            task={"kind": "reverse", "symbols": 4, "min_len": 2, "max_len": 4},
            ablate={
                "grid": {
                    "encoder_pe_per_layer": [True, False],
                    "encoder_dilation": [True, False],
                }
            },
        )
        out = tmp_path / "abl"
        assert main(["ablate", "--config", str(cfg), "--out", str(out)]) == 0
        lines = (out / "ablation.csv").read_text().strip().splitlines()
        assert lines[0] == "step,encoder_pe_per_layer,encoder_dilation,accuracy,approx_bleu_score"
        assert len(lines) == 5
        for sub in out.iterdir():
            if sub.is_dir():
                assert (sub / "metrics.log").exists()
