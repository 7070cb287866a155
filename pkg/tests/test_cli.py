import json
import os
import subprocess
import sys

import pytest

from graphcaps.cli import main, read_config_file
from helpers import synthetic_dataset_graphs, write_tu_files


@pytest.fixture()
def syn_root(tu_dir):
    write_tu_files(tu_dir, "SYN", synthetic_dataset_graphs(num_graphs=16, seed=1))
    return tu_dir


def run_cli(args, **popen):
    return subprocess.run(
        [sys.executable, "-m", "graphcaps.cli", *args],
        capture_output=True, text=True, timeout=600, **popen,
    )


class TestTensorizeCommand:
    def test_creates_cache_then_noops(self, syn_root, tmp_path, capsys):
        out_root = str(tmp_path / "results")
        args = ["tensorize", "--dataset", "SYN", "--data-root", syn_root,
                "--out-root", out_root, "-w", "6", "-k", "4", "--seed", "3"]
        assert main(args) == 0
        cache_dir = os.path.join(out_root, "cache")
        files = os.listdir(cache_dir)
        assert files == ["SYN_bc_w6_k4_seed3.gct"]
        first = capsys.readouterr().out
        assert "16 tensors" in first
        assert main(args) == 0
        assert "nothing to do" in capsys.readouterr().out

    def test_force_rewrites(self, syn_root, tmp_path, capsys):
        out_root = str(tmp_path / "results")
        base = ["tensorize", "--dataset", "SYN", "--data-root", syn_root,
                "--out-root", out_root, "-w", "6", "-k", "4"]
        assert main(base) == 0
        capsys.readouterr()
        assert main(base + ["--force"]) == 0
        assert "tensors" in capsys.readouterr().out

    def test_unknown_dataset_fails_cleanly(self, tmp_path):
        result = run_cli(["tensorize", "--dataset", "NOPE",
                          "--data-root", str(tmp_path), "--out-root", str(tmp_path)])
        assert result.returncode == 1
        assert "NOPE" in result.stderr and "not found" in result.stderr

    def test_nauty_alias_maps_to_canonical(self, syn_root, tmp_path):
        out_root = str(tmp_path / "results")
        assert main(["tensorize", "--dataset", "SYN", "--data-root", syn_root,
                     "--out-root", out_root, "--labelling", "nauty", "-w", "5"]) == 0
        files = os.listdir(os.path.join(out_root, "cache"))
        assert files == ["SYN_canonical_w5_k10_seed1.gct"]


class TestRunCommand:
    def test_run_produces_report_and_manifest(self, syn_root, tmp_path, capsys):
        out_root = str(tmp_path / "results")
        rc = main(["run", "--dataset", "SYN", "--data-root", syn_root,
                   "--out-root", out_root, "--model", "capsules", "--preset", "small",
                   "--folds", "3", "--epochs", "2", "--seed", "2"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "BC + Capsules on SYN" in out
        run_dirs = [d for d in os.listdir(out_root) if d.startswith("SYN_bc_capsules")]
        assert len(run_dirs) == 1
        run_dir = os.path.join(out_root, run_dirs[0])
        report = open(os.path.join(run_dir, "report.csv")).read()
        assert "±" in report
        manifest = json.load(open(os.path.join(run_dir, "manifest.json")))
        assert manifest["resolved_config"]["dataset"] == "SYN"
        assert "SYN_A.txt" in manifest["dataset_checksums"]["SYN"]
        assert manifest["version"]

    def test_cnn_model(self, syn_root, tmp_path, capsys):
        rc = main(["run", "--dataset", "SYN", "--data-root", syn_root,
                   "--out-root", str(tmp_path / "results"), "--model", "cnn",
                   "--folds", "3", "--epochs", "2"])
        assert rc == 0
        assert "BC + CNN" in capsys.readouterr().out

    def test_unknown_flag_exits_2(self):
        result = run_cli(["run", "--dataset", "X", "--frobnicate"])
        assert result.returncode == 2
        assert "usage" in result.stderr.lower()

    def test_repeats_prints_mean(self, syn_root, tmp_path, capsys):
        rc = main(["run", "--dataset", "SYN", "--data-root", syn_root,
                   "--out-root", str(tmp_path / "results"), "--folds", "3",
                   "--epochs", "1", "--repeats", "2"])
        assert rc == 0
        assert "mean over 2 repetitions" in capsys.readouterr().out


class TestConfigFile:
    def test_parse_and_coerce(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs = 7\nlr = 0.005  # comment\nnaive-ties = true\n")
        values = read_config_file(str(cfg))
        assert values == {"epochs": "7", "lr": "0.005", "naive_ties": "true"}

    def test_config_provides_defaults_cli_overrides(self, syn_root, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"data_root = {syn_root}\nfolds = 3\nepochs = 1\n")
        out_root = str(tmp_path / "results")
        rc = main(["--config", str(cfg), "run", "--dataset", "SYN",
                   "--out-root", out_root, "--epochs", "2"])
        assert rc == 0
        run_dirs = os.listdir(out_root)
        run_dir = next(d for d in run_dirs if d.startswith("SYN"))
        config = json.load(open(os.path.join(out_root, run_dir, "config.json")))
        assert config["folds"] == 3   # from file
        assert config["epochs"] == 2  # CLI wins

    def test_malformed_config_rejected(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("this is not a key value line\n")
        rc = main(["--config", str(cfg), "selftest"])
        assert rc == 1


class TestEmbedAndReport:
    def test_embed_raw(self, syn_root, tmp_path, capsys):
        out_root = str(tmp_path / "results")
        rc = main(["embed", "--dataset", "SYN", "--data-root", syn_root,
                   "--out-root", out_root, "--source", "raw",
                   "--perplexity", "4", "--iters", "60", "--seed", "2"])
        assert rc == 0
        out_dir = os.path.join(out_root, "embed_SYN_raw_s2")
        assert os.path.isfile(os.path.join(out_dir, "embeddings.csv"))
        assert os.path.isfile(os.path.join(out_dir, "distances.csv"))
        assert "KL" in capsys.readouterr().out

    def test_embed_caps_trains_model(self, syn_root, tmp_path, capsys):
        out_root = str(tmp_path / "results")
        rc = main(["embed", "--dataset", "SYN", "--data-root", syn_root,
                   "--out-root", out_root, "--source", "caps", "--epochs", "1",
                   "--perplexity", "4", "--iters", "50"])
        assert rc == 0
        assert "training capsules" in capsys.readouterr().out

    def test_report_combines_runs(self, syn_root, tmp_path, capsys):
        out_root = str(tmp_path / "results")
        for model in ("capsules", "cnn"):
            main(["run", "--dataset", "SYN", "--data-root", syn_root,
                  "--out-root", out_root, "--model", model, "--folds", "3",
                  "--epochs", "1"])
        run_dirs = [os.path.join(out_root, d) for d in os.listdir(out_root)
                    if d.startswith("SYN_")]
        rc = main(["report", *run_dirs, "-o", str(tmp_path / "combined")])
        assert rc == 0
        text = open(str(tmp_path / "combined" / "report.txt")).read()
        assert "BC + Capsules" in text and "BC + CNN" in text

    def test_report_missing_result_errors(self, tmp_path, capsys):
        rc = main(["report", str(tmp_path), "-o", str(tmp_path / "out")])
        assert rc == 1


class TestSelftestCommand:
    def test_passes_on_healthy_build(self, capsys):
        assert main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 5
        assert "all suites passed" in out

    def test_detects_broken_kernel(self):
        env = dict(os.environ, GRAPHCAPS_SELFTEST_BREAK="1")
        result = run_cli(["selftest"], env=env)
        assert result.returncode == 1
        assert "FAIL" in result.stdout
