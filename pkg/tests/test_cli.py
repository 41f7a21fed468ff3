import json

import pytest
import yaml

from diffensemble.cli import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_OK,
    EXIT_USAGE,
    ConfigError,
    RunConfig,
    main,
    verify_isolation,
)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    from diffensemble.data import write_synthetic_dataset

    d = tmp_path_factory.mktemp("data")
    write_synthetic_dataset(d, seed=3)
    return d


@pytest.fixture(scope="module")
def run_env(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("run")
    config = {
        "data_dir": str(data_dir),
        "output_dir": str(out),
        "profile": "desk",
        "pool_size": 3,
        "train_subset": 48,
        "validation_subset": 24,
        "test_subset": 24,
        "repeats": 2,
        "n_max": 2,
        "train": {"epochs": 1, "seed": 1},
        "pruning": {"r_scheme": "i", "T": 2, "m": 2, "opt_steps": 20, "seed": 4},
    }
    cfg_path = out / "run.yaml"
    cfg_path.write_text(yaml.safe_dump(config))
    return cfg_path, out


class TestRunConfig:
    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError):
            RunConfig.from_mapping({"data_dir": "x", "typo_key": 1})

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError):
            RunConfig.from_mapping({"data_dir": "x", "train": {"lrr": 0.1}})

    def test_unknown_profile(self):
        with pytest.raises(ConfigError):
            RunConfig.from_mapping({"data_dir": "x", "profile": "gpu"})

    def test_env_fallback(self, monkeypatch):
        monkeypatch.setenv("DIFFENSEMBLE_DATA_DIR", "/somewhere")
        cfg = RunConfig.from_mapping({})
        assert cfg.data_dir == "/somewhere"

    def test_missing_data_dir(self, monkeypatch):
        monkeypatch.delenv("DIFFENSEMBLE_DATA_DIR", raising=False)
        with pytest.raises(ConfigError):
            RunConfig.from_mapping({})

    def test_profile_defaults(self):
        desk = RunConfig.from_mapping({"data_dir": "x", "profile": "desk"})
        paper = RunConfig.from_mapping({"data_dir": "x", "profile": "paper"})
        assert desk.grid.side == 64 and desk.layers == 3
        assert paper.grid.side == 128 and paper.layers == 5
        assert desk.pruning.opt_steps == 500
        assert paper.pruning.opt_steps == 10000

    def test_config_file_errors(self, tmp_path):
        assert main(["--config", str(tmp_path / "absent.yaml"), "prepare"]) == EXIT_CONFIG
        bad = tmp_path / "bad.yaml"
        bad.write_text("data_dir: x\nnot_a_key: 1\n")
        assert main(["--config", str(bad), "prepare"]) == EXIT_CONFIG


class TestUsage:
    def test_unknown_subcommand(self, run_env):
        cfg_path, _ = run_env
        assert main(["--config", str(cfg_path), "explode"]) == EXIT_USAGE

    def test_missing_config_flag(self):
        assert main(["prepare"]) == EXIT_USAGE


class TestPipeline:
    def test_stages_in_order(self, run_env, capsys):
        cfg_path, out = run_env
        argv = ["--config", str(cfg_path)]

        assert main(argv + ["prepare"]) == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["train"]["size"] == 48
        assert manifest["test"]["size"] == 24
        first_hashes = {k: v["sha256"] for k, v in manifest.items()}

        # idempotent prepare, identical hashes
        assert main(argv + ["prepare"]) == EXIT_OK
        manifest2 = json.loads((out / "manifest.json").read_text())
        assert {k: v["sha256"] for k, v in manifest2.items()} == first_hashes

        assert main(argv + ["train"]) == EXIT_OK
        ckpts = sorted((out / "checkpoints").glob("member_*.d2nn"))
        assert len(ckpts) == 3
        stamps = [p.stat().st_mtime_ns for p in ckpts]
        # resumable: a second run must skip all members untouched
        assert main(argv + ["train"]) == EXIT_OK
        assert [p.stat().st_mtime_ns for p in ckpts] == stamps

        assert main(argv + ["cache"]) == EXIT_OK
        assert (out / "cache_validation.d2sc").exists()
        assert not (out / "cache_test.d2sc").exists()

        assert main(argv + ["prune"]) == EXIT_OK
        assert (out / "trace_00.json").exists()
        assert (out / "trace_01.json").exists()
        records = json.loads((out / "trace_00.json").read_text())
        sizes = [r["size"] for r in records]
        assert sizes[0] == 3 and sizes[-1] == 1

        # test split untouched so far
        cfg = RunConfig.from_yaml(cfg_path)
        assert verify_isolation(cfg)
        test_consumers = {
            line.split("\t")[1]
            for line in (out / "audit.log").read_text().splitlines()
            if line.startswith("test\t")
        }
        assert test_consumers == {"prepare"}

        assert main(argv + ["report"]) == EXIT_OK
        for name in (
            "individual_accuracy.tsv",
            "ensemble_summary.tsv",
            "per_class_tpr.tsv",
            "size_vs_cap.tsv",
            "individual_vs_ensemble.png",
            "size_vs_cap.png",
        ):
            assert (out / name).exists(), name
        assert verify_isolation(cfg)
        summary = (out / "ensemble_summary.tsv").read_text().strip().split("\n")
        assert len(summary) == 1 + 2  # header + one row per repeat
        capsys.readouterr()

    def test_frozen_config_mismatch(self, run_env, data_dir, tmp_path):
        cfg_path, out = run_env
        other = tmp_path / "other.yaml"
        raw = yaml.safe_load(cfg_path.read_text())
        raw["pool_size"] = 4
        other.write_text(yaml.safe_dump(raw))
        assert main(["--config", str(other), "prune"]) == EXIT_CONFIG

    def test_stage_order_enforced(self, data_dir, tmp_path):
        out = tmp_path / "fresh"
        cfg = tmp_path / "fresh.yaml"
        cfg.write_text(
            yaml.safe_dump(
                {"data_dir": str(data_dir), "output_dir": str(out), "pool_size": 2}
            )
        )
        assert main(["--config", str(cfg), "train"]) == EXIT_DATA
        assert main(["--config", str(cfg), "cache"]) == EXIT_DATA
        assert main(["--config", str(cfg), "prune"]) == EXIT_DATA
        assert main(["--config", str(cfg), "report"]) == EXIT_DATA

    def test_missing_data_files(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        out = tmp_path / "out"
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text(
            yaml.safe_dump({"data_dir": str(empty), "output_dir": str(out)})
        )
        code = main(["--config", str(cfg), "prepare"])
        assert code == EXIT_DATA
