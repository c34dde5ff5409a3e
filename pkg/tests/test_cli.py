import json

import pytest

from hbmlife import __version__
from hbmlife.cli import main
from hbmlife.dataset import load_feature_table, read_comment_header

FAST = ["--chains", "2", "--warmup", "150", "--samples", "150"]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--seed", "1", "--groups", "8", "--cells", "15", "--out", str(out)]) == 0
    return out


def manifest(d):
    return json.loads((d / "manifest.json").read_text())


class TestSynth:
    def test_outputs(self, synth_dir):
        assert (synth_dir / "features.csv").exists()
        truth = json.loads((synth_dir / "truth.json").read_text())
        m = manifest(synth_dir)
        assert m["seed"] == 1 and m["command"] == "synth" and m["version"] == __version__
        assert truth["manifest_hash"] == m["manifest_hash"]
        assert read_comment_header(synth_dir / "features.csv")[0] == f"manifest_hash={m['manifest_hash']}"
        assert len(load_feature_table(synth_dir / "features.csv")) == 120

    def test_no_paths_in_manifest(self, synth_dir, tmp_path):
        other = tmp_path / "elsewhere"
        assert main(["synth", "--seed", "1", "--groups", "8", "--cells", "15", "--out", str(other), "--threads", "2"]) == 0
        assert (other / "features.csv").read_bytes() == (synth_dir / "features.csv").read_bytes()
        assert str(tmp_path) not in (other / "manifest.json").read_text()

    def test_with_cycles_then_extract(self, tmp_path):
        assert main(["synth", "--seed", "2", "--groups", "2", "--cells", "3", "--with-cycles", "6", "--out", str(tmp_path / "s")]) == 0
        assert main(["extract", "--cycles", str(tmp_path / "s" / "cycles"), "--out", str(tmp_path / "e"), "--grid-points", "500"]) == 0
        t = load_feature_table(tmp_path / "e" / "features.csv")
        assert len(t) == 6
        assert manifest(tmp_path / "e")["config"]["grid_points"] == 500


class TestErrors:
    def test_unknown_flag(self, capsys):
        assert main(["synth", "--seed", "1", "--out", "x", "--bogus"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) == 2

    @pytest.mark.parametrize("cmd", ["synth", "fit", "evaluate"])
    def test_seed_mandatory(self, cmd, tmp_path):
        assert main([cmd, "--out", str(tmp_path), "--table", "x.csv"]) == 2

    def test_stage_error_names_module(self, synth_dir, tmp_path, capsys):
        code = main(["cluster", "--table", str(synth_dir / "features.csv"), "--k", "20", "--out", str(tmp_path)])
        assert code == 1
        err = capsys.readouterr().err.strip()
        assert err.startswith("hbmlife cluster: clustering:") and "10*20 = 200" in err
        assert len(err.splitlines()) == 1

    def test_missing_input(self, tmp_path, capsys):
        assert main(["cluster", "--table", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 1
        assert "does not exist" in capsys.readouterr().err

    def test_bad_config_key(self, synth_dir, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"cluster": {"nonsense": 1}}))
        assert main(["cluster", "--table", str(synth_dir / "features.csv"), "--config", str(cfg), "--out", str(tmp_path)]) == 1

    def test_unknown_model(self, synth_dir, tmp_path):
        assert main(["evaluate", "--table", str(synth_dir / "features.csv"), "--models", "xgb", "--seed", "1", "--out", str(tmp_path)]) == 1


class TestConfigPrecedence:
    def test_file_over_defaults_flags_over_file(self, synth_dir, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"cluster": {"k": 4, "restarts": 2}, "fit": {"warmup": 5}}))
        table = str(synth_dir / "features.csv")
        assert main(["cluster", "--table", table, "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        assert main(["cluster", "--table", table, "--config", str(cfg), "--k", "6", "--out", str(tmp_path / "b")]) == 0
        a, b = manifest(tmp_path / "a")["config"], manifest(tmp_path / "b")["config"]
        assert (a["k"], a["restarts"], a["min_size"]) == (4, 2, 10)
        assert (b["k"], b["restarts"]) == (6, 2)

    def test_flat_config(self, synth_dir, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"k": 3}))
        assert main(["cluster", "--table", str(synth_dir / "features.csv"), "--config", str(cfg), "--out", str(tmp_path)]) == 0
        assert json.loads((tmp_path / "centroids.json").read_text())["k"] == 3


class TestPipeline:
    def test_cluster_fit_predict(self, synth_dir, tmp_path):
        table = str(synth_dir / "features.csv")
        assert main(["cluster", "--table", table, "--seed", "3", "--out", str(tmp_path / "c")]) == 0
        lines = (tmp_path / "c" / "assignment.csv").read_text().splitlines()
        assert lines[2] == "cell_id,group" and len(lines) == 3 + 120
        assert main(["fit", "--table", table, "--assignment", str(tmp_path / "c" / "assignment.csv"), "--seed", "2", *FAST, "--out", str(tmp_path / "f")]) == 0
        post = json.loads((tmp_path / "f" / "posterior.json").read_text())
        assert len(post["gamma_samples"]) == 300
        assert {"rhat", "ess", "accept_rate"} <= set(post["diagnostics"])
        assert post["standardization"]["names"] == ["f1", "f2", "f3"]
        assert main(["predict", "--posterior", str(tmp_path / "f" / "posterior.json"), "--table", table, "--out", str(tmp_path / "p")]) == 0
        rows = (tmp_path / "p" / "predictions.csv").read_text().splitlines()
        assert rows[2].startswith("cell_id,group,mean_transformed") and len(rows) == 123

    def test_baseline(self, synth_dir, tmp_path):
        assert main(["baseline", "--table", str(synth_dir / "features.csv"), "--features", "f1,f2,f3,g", "--lambda-grid", "0.01,1,100", "--seed", "0", "--out", str(tmp_path)]) == 0
        doc = json.loads((tmp_path / "ridge.json").read_text())
        assert doc["features"] == ["f1", "f2", "f3", "g"] and doc["lambda"] in (0.01, 1.0, 100.0)
        assert len(doc["coefficients"]) == 4

    def test_evaluate_default_trial_counts_and_report(self, synth_dir, tmp_path, capsys):
        out = tmp_path / "v"
        assert main(["evaluate", "--table", str(synth_dir / "features.csv"), "--models", "ridge3,ridge4,mean", "--seed", "4", "--out", str(out)]) == 0
        rep = json.loads((out / "report.json").read_text())
        for m in ("ridge3", "ridge4", "mean"):
            assert sum(t["model"] == m for t in rep["per_trial"]) == 20
        for name in ("trials.csv", "scatter.csv", "hist.csv", "scatter.svg"):
            assert (out / name).exists()
        assert main(["report", str(out / "report.json"), str(out / "trials.csv"), str(out / "hist.csv")]) == 0
        text = capsys.readouterr().out
        assert "| RMSE | Median |" in text and "ridge3: 20" in text

    def test_report_refuses_mixed(self, synth_dir, tmp_path, capsys):
        table = str(synth_dir / "features.csv")
        for seed in ("1", "2"):
            assert main(["evaluate", "--table", table, "--models", "mean", "--repeats", "1", "--seed", seed, "--out", str(tmp_path / seed)]) == 0
        capsys.readouterr()
        assert main(["report", str(tmp_path / "1" / "report.json"), str(tmp_path / "2" / "trials.csv")]) == 1
        assert "mixed manifest" in capsys.readouterr().err
