"""End-to-end command-line pipeline on a tiny dataset, plus exit-code contracts."""

import json
from pathlib import Path

import pytest

from mint.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def cfg(name):
    return str(CONFIGS / name)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["--quiet", "gen-data", "--config", cfg("data_tiny.json"), "--out", str(data)]) == 0
    assert main(["--quiet", "pretrain", "--config", cfg("pretrain_tiny.json"), "--data", str(data), "--out", str(root / "base.mnta")]) == 0
    runs = {}
    for mode, role in (("mint", "mint"), ("st_on_cls_no_distill", "no_distill"), ("st_on_cls", "distill")):
        out = root / mode
        argv = ["--quiet", "train", "--config", cfg("train_tiny.json"), "--data", str(data), "--base", str(root / "base.mnta"), "--out", str(out), "--set", f"mode={mode}"]
        assert main(argv) == 0
        feats = out / "features.mnta"
        assert main(["--quiet", "features", "--ckpt", str(out / "final.mnta"), "--data", str(data), "--out", str(feats)]) == 0
        assert main(["--quiet", "eval", "--features", str(feats), "--data", str(data), "--protocol", cfg("protocol_tiny.json"), "--out", str(out / "eval.json")]) == 0
        runs[role] = out / "eval.json"
    out = root / "frozen"
    assert main(["--quiet", "features", "--ckpt", str(root / "base.mnta"), "--data", str(data), "--out", str(out / "features.mnta")]) == 0
    assert main(["--quiet", "eval", "--features", str(out / "features.mnta"), "--data", str(data), "--protocol", cfg("protocol_tiny.json"), "--out", str(out / "eval.json")]) == 0
    runs["frozen"] = out / "eval.json"
    return root, data, runs


class TestPipeline:
    def test_dataset_layout(self, pipeline):
        _, data, _ = pipeline
        for split, n in (("train", 46), ("eval", 80), ("pretrain", 40)):
            m = json.loads((data / split / "manifest.json").read_text())
            assert len(m["entries"]) == n
        eff = json.loads((data / "effective_config.json").read_text())
        assert eff["synth"]["tile_size"] == 32

    def test_train_artifacts(self, pipeline):
        root, _, _ = pipeline
        run = root / "mint"
        assert (run / "final.mnta").is_file()
        log = [json.loads(line) for line in (run / "train_log.jsonl").read_text().splitlines()]
        assert [r["step"] for r in log] == [1, 2, 3]
        assert {"lr", "m", "l_dino", "l_distill", "l_st", "l_pst", "total"} <= set(log[0])
        eff = json.loads((run / "effective_config.json").read_text())
        assert eff["train"]["iterations"] == 3 and len(eff["base"]["sha256"]) == 16

    def test_eval_reports(self, pipeline):
        _, _, runs = pipeline
        mint = json.loads(runs["mint"].read_text())
        assert set(mint["variants"]) == {"cls", "st", "sum", "concat"}
        for rep in mint["variants"].values():
            assert len(rep["per_gene_pearson"]) == 5
            assert 0.0 <= rep["probe_accuracy"] <= 1.0
            assert rep["config"]["protocol"]["n_pca"] == 8
            assert rep["config"]["features"]["mode"] == "mint"
        # CLS ablations carry no ST features; their checkpoints were trained with the ST token masked
        ab = json.loads(runs["no_distill"].read_text())
        assert set(ab["variants"]) == {"cls"}
        assert ab["variants"]["cls"]["config"]["features"]["mask_st"] is True
        assert runs["mint"].with_suffix(".tsv").read_text().startswith("variant\tmean_pearson")

    def test_report(self, pipeline, tmp_path):
        _, _, runs = pipeline
        out = tmp_path / "report.json"
        argv = ["--quiet", "report", "--out", str(out), "--runs"] + [f"{k}={v}" for k, v in runs.items()]
        assert main(argv) == 0
        rep = json.loads(out.read_text())
        for key in ("specialization", "sum_beats_cls", "concat_best", "cls_matches_frozen", "forgetting"):
            assert isinstance(rep[key]["verdict"], bool)
        assert rep["forgetting"]["min_drop"] == 0.02

    def test_teacher_and_frozen_encoders(self, pipeline, tmp_path):
        root, data, _ = pipeline
        for enc in ("teacher", "frozen"):
            assert main(["--quiet", "features", "--ckpt", str(root / "mint" / "final.mnta"), "--data", str(data), "--encoder", enc, "--out", str(tmp_path / f"{enc}.mnta")]) == 0


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self):
        assert main(["gradcheck", "--bogus"]) == 1

    def test_missing_config(self, tmp_path):
        assert main(["gen-data", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "d")]) == 1

    def test_unknown_config_key(self, tmp_path):
        p = tmp_path / "t.json"
        p.write_text(json.dumps({"iterations": 1, "lamda_st": 3}))
        assert main(["train", "--config", str(p), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 1

    def test_missing_data(self, tmp_path, monkeypatch):
        monkeypatch.delenv("MINT_DATA_ROOT", raising=False)
        assert main(["train", "--out", str(tmp_path / "o")]) == 1

    def test_data_root_env(self, pipeline, tmp_path, monkeypatch):
        root, data, _ = pipeline
        monkeypatch.setenv("MINT_DATA_ROOT", str(data))
        assert main(["--quiet", "features", "--ckpt", str(root / "base.mnta"), "--out", str(tmp_path / "f.mnta")]) == 0

    def test_st_variant_without_st_token(self, pipeline, tmp_path):
        root, data, _ = pipeline
        argv = ["features", "--ckpt", str(root / "base.mnta"), "--data", str(data), "--variant", "st", "--out", str(tmp_path / "f.mnta")]
        assert main(argv) == 1

    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck", "--seed", "0"]) == 0
        out = capsys.readouterr().out
        for name in ("dino", "distill", "st", "pst", "total"):
            assert f"{name}: max_rel_err=" in out
        assert "FAIL" not in out

    def test_corrupt_checkpoint_is_validation_error(self, tmp_path):
        bad = tmp_path / "bad.mnta"
        bad.write_bytes(b"not a container")
        assert main(["features", "--ckpt", str(bad), "--data", str(tmp_path), "--out", str(tmp_path / "f")]) == 1

    def test_failing_gradcheck_is_two(self, monkeypatch):
        import mint.trainer.gradcheck as gc

        real = gc.gradcheck

        def broken(**kw):
            rep = real(**kw)
            rep.max_rel_err["st"] = 1e-2
            return rep

        monkeypatch.setattr(gc, "gradcheck", broken)
        assert main(["gradcheck"]) == 2

    def test_runtime_failure_is_two(self, pipeline, tmp_path, monkeypatch):
        import mint.trainer.loop as loop

        def boom(*a, **k):
            raise FloatingPointError("non-finite loss component l_st")

        monkeypatch.setattr(loop, "train", boom)
        root, data, _ = pipeline
        argv = ["--quiet", "train", "--config", cfg("train_tiny.json"), "--data", str(data), "--out", str(tmp_path / "o")]
        assert main(argv) == 2
