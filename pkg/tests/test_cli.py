"""
End-to-end tests of the command-line interface and the runner.
"""

import hashlib
import json

import numpy as np
import pandas as pd
import pytest

from stochmatch import runner
from stochmatch import settings as settings_module
from stochmatch.cli import apply_overrides, build_parser, main
from stochmatch.datasets import triangle_image
from stochmatch.io import load_config, read_manifest, save_image
from stochmatch.runner import points_extent, problem_hash
from stochmatch.settings import get_settings

PROBLEM = {"source": "source.csv", "target": "target.csv", "lambda": 0.5, "kernel_scale": 0.5}
NOISE = {"n_per_axis": 2, "scale": 0.5, "amplitude": 0.05}


@pytest.fixture(autouse=True)
def fresh_settings(monkeypatch):
    """Settings are re-read from the environment for every test."""
    monkeypatch.setattr(settings_module, "settings", None)
    yield
    monkeypatch.setattr(settings_module, "settings", None)


def run_cli(command, config_path, *extra):
    return main([command, "--config", str(config_path), *extra])


def listed(out_dir):
    return {f.path for f in read_manifest(out_dir / "manifest.json").files}


def write_triangles(config_dir):
    corners = ((4.0, 4.0), (18.0, 10.0), (4.0, 18.0))
    save_image(config_dir / "a.pgm", triangle_image((24, 24), corners, sigma=1.0))
    save_image(config_dir / "b.pgm", triangle_image((24, 24), corners, 1.0, (1.0, 0.0)))


IMAGE_PROBLEM = {
    "source_image": "a.pgm",
    "target_image": "b.pgm",
    "lambda": 0.1,
    "kernel_scale": 2.0,
    "n_t": 4,
}

SMALL_RUNS = {
    "match": {
        "problem": {**PROBLEM, "noise": NOISE},
        "optimizer": {"n_s": 10, "temperature": "finite", "avg_window": 5},
    },
    "image-match": {"problem": IMAGE_PROBLEM, "optimizer": {"n_s": 3, "epsilon": 0.01}},
    "sample": {
        "problem": {**PROBLEM, "noise": NOISE},
        "optimizer": {"n_s": 20},
        "sampling": {"n_samples": 4, "n_steps": 10},
    },
    "mean": {
        "problem": PROBLEM,
        "optimizer": {"n_s": 10},
        "observations": {"files": ["target.csv"]},
        "mean": {"kind": "frechet", "frechet": {"max_outer": 2, "outer_epsilon": 0.25}},
    },
    "infer": {
        "problem": {**PROBLEM, "noise": NOISE},
        "optimizer": {"n_s": 10},
        "observations": {"sample": {"n_samples": 6, "n_steps": 10}},
        "inference": {
            "parameters": ["amplitude"],
            "ranges": {"amplitude": [0.5, 1.5]},
            "grid_size": 2,
            "n_samples": 6,
            "n_steps": 10,
        },
    },
    "em": {
        "problem": {**PROBLEM, "noise": NOISE},
        "optimizer": {"epsilon": 0.05},
        "em": {"n_iterations": 2, "samples": 3},
    },
}


class TestParser:
    """Tests for argument parsing."""

    def test_unknown_command_is_usage_error(self, write_config):
        """Test an unknown command exits with status 2."""
        path = write_config({"problem": PROBLEM})
        with pytest.raises(SystemExit) as excinfo:
            main(["frobnicate", "--config", str(path)])
        assert excinfo.value.code == 2

    def test_config_is_required(self):
        """Test --config is mandatory."""
        with pytest.raises(SystemExit) as excinfo:
            build_parser().parse_args(["match"])
        assert excinfo.value.code == 2

    def test_overrides(self, write_config, tmp_path):
        """Test --seed and --out replace the configured values."""
        config = load_config(write_config({"problem": PROBLEM}), "match")
        updated = apply_overrides(config, 7, str(tmp_path / "elsewhere"))
        assert updated.optimizer.seed == 7
        assert updated.output_dir == str(tmp_path / "elsewhere")
        assert apply_overrides(config, None, None) == config


class TestMatchCommand:
    """Tests for `stochmatch match`."""

    def test_deterministic_match(self, write_config, config_dir):
        """Test a noise-free match writes its artifacts and a complete manifest."""
        path = write_config({"problem": PROBLEM, "optimizer": {"n_s": 1000, "epsilon": 0.1}})
        assert run_cli("match", path) == 0

        out = config_dir / "out"
        manifest = read_manifest(out / "manifest.json")
        assert manifest.command == "match"
        assert not manifest.partial
        assert manifest.converged is True
        assert {"diagnostics.csv", "string.csv", "mean_string.csv", "strings.svg"} <= listed(out)
        assert manifest.config["problem"]["lambda"] == 0.5
        assert len(manifest.diagnostics) == len(pd.read_csv(out / "diagnostics.csv"))
        assert list(pd.read_csv(out / "mean_string.csv").columns) == ["t", "i", "qx", "qy"]

    def test_rerun_is_byte_identical(self, write_config, config_dir):
        """Test repeating a run reproduces every artifact byte for byte."""
        document = {
            "problem": {**PROBLEM, "noise": NOISE},
            "optimizer": {"n_s": 30, "ensemble_size": 2, "seed": 5},
        }
        path = write_config(document)
        assert run_cli("match", path) == 0
        out = config_dir / "out"
        first = {name: (out / name).read_bytes() for name in listed(out) | {"manifest.json"}}
        assert run_cli("match", path) == 0
        second = {name: (out / name).read_bytes() for name in first}
        assert first == second

    def test_seed_changes_noisy_results(self, write_config, config_dir):
        """Test --seed selects a different realization."""
        document = {"problem": {**PROBLEM, "noise": NOISE}, "optimizer": {"n_s": 10}}
        path = write_config(document)
        assert run_cli("match", path, "--seed", "1", "--out", str(config_dir / "a")) == 0
        assert run_cli("match", path, "--seed", "2", "--out", str(config_dir / "b")) == 0
        assert read_manifest(config_dir / "a" / "manifest.json").seed == 1
        a = (config_dir / "a" / "string.csv").read_bytes()
        b = (config_dir / "b" / "string.csv").read_bytes()
        assert a != b

    def test_finite_temperature_statistics(self, write_config, config_dir):
        """Test a finite-temperature run writes the history and endpoint statistics."""
        document = {
            "problem": {**PROBLEM, "noise": NOISE},
            "optimizer": {"n_s": 12, "temperature": "finite", "avg_window": 6},
        }
        assert run_cli("match", write_config(document)) == 0
        out = config_dir / "out"
        assert {"history.csv", "statistics.csv"} <= listed(out)
        assert len(pd.read_csv(out / "statistics.csv")) == 20 * 10
        assert read_manifest(out / "manifest.json").converged is None

    def test_no_figures(self, write_config, config_dir):
        """Test figures can be switched off."""
        document = {"problem": PROBLEM, "optimizer": {"n_s": 5}, "figures": False}
        assert run_cli("match", write_config(document)) == 0
        assert "strings.svg" not in listed(config_dir / "out")


class TestFailures:
    """Tests for exit codes and partial manifests."""

    def test_invalid_config(self, write_config):
        """Test a schema violation exits with status 1."""
        path = write_config({"problem": {"source": "source.csv", "kernel_scale": 0.5}})
        assert run_cli("match", path) == 1

    def test_missing_config(self, tmp_path):
        """Test a missing configuration file exits with status 1."""
        assert run_cli("match", tmp_path / "none.json") == 1

    def test_failed_run_writes_partial_manifest(self, write_config, config_dir):
        """Test a failing command still leaves a manifest flagged partial."""
        document = {
            "problem": {
                "source_image": "missing.pgm",
                "target_image": "missing.pgm",
                "lambda": 0.1,
                "kernel_scale": 2.0,
            }
        }
        assert run_cli("image-match", write_config(document)) == 1
        manifest = read_manifest(config_dir / "out" / "manifest.json")
        assert manifest.partial
        assert "file not found" in manifest.error

    def test_missing_landmark_file(self, write_config, config_dir):
        """Test an unreadable landmark file fails the run."""
        document = {"problem": {**PROBLEM, "target": "nowhere.csv"}}
        assert run_cli("match", write_config(document)) == 1
        assert read_manifest(config_dir / "out" / "manifest.json").partial

    def test_unexpected_exception_writes_partial_manifest(
        self, write_config, config_dir, monkeypatch
    ):
        """Test a non-library exception still exits 1 and leaves a partial manifest."""

        def singular(ctx):
            raise np.linalg.LinAlgError("Singular matrix")

        monkeypatch.setitem(runner.COMMANDS, "match", singular)
        assert run_cli("match", write_config({"problem": PROBLEM})) == 1
        manifest = read_manifest(config_dir / "out" / "manifest.json")
        assert manifest.partial
        assert manifest.error == "LinAlgError: Singular matrix"


class TestReproducibility:
    """Tests for byte-identical reruns."""

    @pytest.mark.parametrize("command", sorted(SMALL_RUNS))
    def test_rerun_is_byte_identical(self, command, write_config, config_dir):
        """Test every command reproduces its artifacts and manifest byte for byte."""
        write_triangles(config_dir)
        path = write_config(SMALL_RUNS[command])
        out = config_dir / "out"
        assert run_cli(command, path) == 0
        first = {name: (out / name).read_bytes() for name in listed(out) | {"manifest.json"}}
        assert run_cli(command, path) == 0
        assert listed(out) | {"manifest.json"} == set(first)
        assert {name: (out / name).read_bytes() for name in first} == first


class TestOtherCommands:
    """Tests for image-match, sample, mean, infer and em."""

    def test_image_match(self, write_config, config_dir):
        """Test image matching writes the warped image and velocities."""
        write_triangles(config_dir)
        document = {"problem": IMAGE_PROBLEM, "optimizer": {"n_s": 3, "epsilon": 0.01}}
        assert run_cli("image-match", write_config(document)) == 0
        out = config_dir / "out"
        assert {"diagnostics.csv", "velocity.csv", "warped.pgm", "montage.svg"} <= listed(out)
        assert len(pd.read_csv(out / "velocity.csv")) == 4 * 24 * 24

    def test_warped_image_is_hashed(self, write_config, config_dir):
        """Test the warped PGM is recorded in the manifest with its digest."""
        write_triangles(config_dir)
        document = {"problem": IMAGE_PROBLEM, "optimizer": {"n_s": 2, "epsilon": 0.01}}
        assert run_cli("image-match", write_config(document)) == 0
        out = config_dir / "out"
        records = {f.path: f for f in read_manifest(out / "manifest.json").files}
        payload = (out / "warped.pgm").read_bytes()
        assert payload.startswith(b"P5\n24 24\n255\n")
        assert records["warped.pgm"].sha256 == hashlib.sha256(payload).hexdigest()
        assert records["warped.pgm"].size == len(payload)

    def test_sample(self, write_config, config_dir):
        """Test sampling writes every endpoint and the momentum used."""
        document = {
            "problem": {**PROBLEM, "noise": NOISE},
            "optimizer": {"n_s": 50},
            "sampling": {"n_samples": 5, "n_steps": 10},
        }
        assert run_cli("sample", write_config(document)) == 0
        out = config_dir / "out"
        samples = pd.read_csv(out / "samples.csv")
        assert list(samples.columns) == ["sample", "i", "x", "y"]
        assert len(samples) == 5 * 10
        assert len(pd.read_csv(out / "momentum.csv")) == 10

    def test_mean_string(self, write_config, config_dir):
        """Test the mean string over observation files."""
        document = {
            "problem": PROBLEM,
            "optimizer": {"n_s": 10},
            "observations": {"files": ["target.csv", "target.csv"]},
            "mean": {"kind": "string"},
        }
        assert run_cli("mean", write_config(document)) == 0
        assert {"observations.csv", "mean_string.csv"} <= listed(config_dir / "out")

    def test_frechet_mean(self, write_config, config_dir):
        """Test template estimation records the outer iterations."""
        document = {
            "problem": PROBLEM,
            "optimizer": {"n_s": 10},
            "observations": {"files": ["target.csv"]},
            "mean": {"kind": "frechet", "frechet": {"max_outer": 2, "outer_epsilon": 0.25}},
        }
        assert run_cli("mean", write_config(document)) == 0
        out = config_dir / "out"
        assert len(pd.read_csv(out / "objective.csv")) == 2
        assert len(pd.read_csv(out / "template.csv")) == 10
        assert "mean_evolution.svg" in listed(out)

    def test_infer(self, write_config, config_dir):
        """Test inference writes its candidate table and estimates."""
        document = {
            "problem": {**PROBLEM, "noise": NOISE},
            "optimizer": {"n_s": 20},
            "observations": {"sample": {"n_samples": 10, "n_steps": 10}},
            "inference": {
                "parameters": ["amplitude"],
                "ranges": {"amplitude": [0.5, 1.5]},
                "grid_size": 3,
                "n_samples": 10,
                "n_steps": 10,
            },
        }
        assert run_cli("infer", write_config(document)) == 0
        out = config_dir / "out"
        assert len(pd.read_csv(out / "inference.csv")) == 3
        assert "amplitude" in read_manifest(out / "manifest.json").summary["estimates"]

    def test_em(self, write_config, config_dir):
        """Test the EM command records the effective sample size."""
        document = {
            "problem": {**PROBLEM, "noise": NOISE},
            "optimizer": {"epsilon": 0.05},
            "em": {"n_iterations": 3, "samples": 4},
        }
        assert run_cli("em", write_config(document)) == 0
        frame = pd.read_csv(config_dir / "out" / "diagnostics.csv")
        assert list(frame.columns) == ["iteration", "energy", "residual", "ess"]
        assert len(frame) == 3


class TestRunnerHelpers:
    """Tests for runner utilities and settings."""

    def test_problem_hash_tracks_input_bytes(self, write_config, config_dir):
        """Test the hash changes when an input file changes."""
        config = load_config(write_config({"problem": PROBLEM}), "match")
        before = problem_hash(config)
        with open(config_dir / "target.csv", "a", encoding="utf-8") as handle:
            handle.write("\n")
        assert problem_hash(config) != before

    def test_points_extent_widens_degenerate_sides(self):
        """Test a single point gets a unit box."""
        assert points_extent(np.array([[1.0, 2.0]])) == (0.5, 1.5, 1.5, 2.5)

    def test_settings_from_environment(self, monkeypatch):
        """Test settings honour the STOCHMATCH_ prefix."""
        monkeypatch.setenv("STOCHMATCH_WORKERS", "3")
        monkeypatch.setenv("STOCHMATCH_LOG_LEVEL", "debug")
        settings = get_settings()
        assert settings.workers == 3
        assert settings.log_level == "debug"
        assert get_settings() is settings

    def test_manifest_config_is_json(self, write_config, config_dir):
        """Test the manifest embeds the configuration as plain JSON."""
        path = write_config({"problem": PROBLEM, "optimizer": {"n_s": 3}})
        assert run_cli("match", path) == 0
        document = json.loads((config_dir / "out" / "manifest.json").read_text(encoding="utf-8"))
        assert document["config"]["optimizer"]["n_s"] == 3
        assert len(document["problem_hash"]) == 64
