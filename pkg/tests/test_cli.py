"""Config handling, CLI subcommands, exit codes, and output contracts."""

import json
import subprocess
import sys
from pathlib import Path

import pytest

from ldgd.cli import main
from ldgd.config import load_config
from ldgd.errors import ValidationError


def write_config(path: Path, output_dir: Path, **overrides) -> Path:
    """A compact benchmark config; overrides are per-section dicts."""
    sections = {
        "paths": {
            "dataset": str(output_dir / "dataset.csv"),
            "model_out": str(output_dir / "model.json"),
            "model_in": str(output_dir / "model.json"),
            "output_dir": str(output_dir),
        },
        "model": {"q": 3, "m": 8, "mc_samples_discrete": 8},
        "train": {"max_iters": 80, "learning_rate": 0.02, "seed": 1},
        "decode": {"iterations": 60, "learning_rate": 0.05, "n_samples": 40, "seed": 2},
        "cv": {"k_folds": 3, "seed": 3},
        "features": {"k_features": 6},
        "synth": {
            "n": 48,
            "d": 6,
            "k": 2,
            "q_true": 2,
            "noise_sd": 0.2,
            "class_separation": 3.0,
            "seed": 5,
        },
        "gradcheck": {"seeds": 2},
    }
    for section, values in overrides.items():
        sections.setdefault(section, {}).update(values)
    lines = []
    for section, values in sections.items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {value}" for key, value in values.items())
        lines.append("")
    path.write_text("\n".join(lines), encoding="utf-8")
    return path


@pytest.fixture()
def workspace(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    config = write_config(tmp_path / "run.ini", out)
    return {"config": config, "out": out, "tmp": tmp_path}


class TestConfig:
    def test_defaults_and_roundtrip(self, workspace):
        cfg = load_config(workspace["config"])
        assert cfg.get("model", "q") == 3
        assert cfg.get("train", "adam_beta1") == 0.9  # default filled in
        dumped = workspace["tmp"] / "effective.ini"
        dumped.write_text(cfg.to_ini(), encoding="utf-8")
        cfg2 = load_config(dumped)
        assert cfg.values == cfg2.values

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[train]\nmax_iters = 5\nwarp_speed = 9\n")
        with pytest.raises(ValidationError, match="warp_speed"):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[wormhole]\nx = 1\n")
        with pytest.raises(ValidationError, match="wormhole"):
            load_config(path)

    def test_bad_type_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[train]\nmax_iters = soon\n")
        with pytest.raises(ValidationError, match="max_iters"):
            load_config(path)

    def test_relative_paths_resolve_against_config_dir(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[paths]\ndataset = data/d.csv\n")
        cfg = load_config(path)
        assert cfg.path("dataset") == (tmp_path / "data" / "d.csv").resolve()

    def test_counts_must_be_positive(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[model]\nq = 0\n")
        with pytest.raises(ValidationError, match="q"):
            load_config(path)


class TestExitCodes:
    def test_missing_config_is_validation_error(self, tmp_path):
        assert main(["synth", "--config", str(tmp_path / "nope.ini")]) == 1

    def test_bad_flag_is_validation_error(self, workspace):
        assert main(["synth", "--config", str(workspace["config"]), "--bogus"]) == 1

    def test_unwritable_output_is_io_error(self, workspace):
        assert main([
            "synth", "--config", str(workspace["config"]),
            "--output-dir", "/proc/definitely/not/writable",
        ]) == 3

    def test_corrupted_gradient_is_numerical_failure(self, workspace):
        code = main([
            "gradcheck", "--config", str(workspace["config"]), "--corrupt-gradient"
        ])
        assert code == 2


class TestPipeline:
    def test_full_pipeline(self, workspace, capsys):
        config = str(workspace["config"])
        out = workspace["out"]

        assert main(["synth", "--config", config]) == 0
        assert (out / "dataset.csv").exists()
        assert (out / "dataset.meta.json").exists()
        assert (out / "latents_true.csv").exists()
        meta = json.loads((out / "dataset.meta.json").read_text())
        assert meta["k"] == 2

        assert main(["train", "--config", config]) == 0
        assert (out / "model.json").exists()
        trace_lines = (out / "train_trace.csv").read_text().strip().splitlines()
        assert trace_lines[0].split(",") == [
            "iteration", "ell_disc", "ell_cont", "kl_u_disc", "kl_u_cont", "kl_x", "total",
        ]
        assert len(trace_lines) - 1 == 80
        relevance_lines = (out / "ard_relevance.csv").read_text().strip().splitlines()
        assert relevance_lines[0] == "relevance_continuous,relevance_discrete"
        assert len(relevance_lines) - 1 == 3  # Q rows
        assert all(len(line.split(",")) == 2 for line in relevance_lines[1:])
        assert (out / "train_trace.png").exists()
        assert (out / "ard_relevance.png").exists()
        assert (out / "effective_config.ini").exists()

        assert main(["decode", "--config", config]) == 0
        pred_lines = (out / "predictions.csv").read_text().strip().splitlines()
        assert pred_lines[0] == "trial_id,prob_0,prob_1,predicted"
        assert len(pred_lines) - 1 == 48
        for line in pred_lines[1:]:
            cells = line.split(",")
            assert abs(float(cells[1]) + float(cells[2]) - 1.0) <= 1e-9
        assert "truth" not in pred_lines[0]
        scatter_lines = (out / "latent_scatter.csv").read_text().strip().splitlines()
        assert len(scatter_lines) - 1 == 48
        assert scatter_lines[0].endswith("truth")
        assert (out / "latent_scatter.png").exists()

        assert main(["eval", "--config", config]) == 0
        metrics = dict(
            line.split(",") for line in
            (out / "eval_metrics.csv").read_text().strip().splitlines()[1:]
        )
        assert float(metrics["accuracy"]) >= 0.6

        assert main(["infer", "--config", config]) == 0
        infer_lines = (out / "test_latents.csv").read_text().strip().splitlines()
        assert len(infer_lines[0].split(",")) == 2 * 3  # 2Q columns exactly
        assert len(infer_lines) - 1 == 48

        assert main(["gradcheck", "--config", config]) == 0
        report_lines = (out / "gradcheck_report.csv").read_text().strip().splitlines()
        assert len(report_lines) - 1 == 2 * 13  # seeds x parameter groups

        capsys.readouterr()

    def test_cv_command(self, workspace):
        config = str(workspace["config"])
        out = workspace["out"]
        assert main(["synth", "--config", config]) == 0
        assert main(["cv", "--config", config]) == 0
        fold_lines = (out / "cv_folds.csv").read_text().strip().splitlines()
        assert len(fold_lines) - 1 == 3
        summary = (out / "cv_summary.csv").read_text().strip().splitlines()
        header = summary[0].split(",")
        values = summary[1].split(",")
        row = dict(zip(header, values))
        assert int(row["folds_completed"]) == 3
        assert 0.0 <= float(row["accuracy_mean"]) <= 1.0
        assert (out / "cv_metrics.png").exists()

    def test_leave_one_out_degenerate_config(self, tmp_path):
        out = tmp_path / "out"
        out.mkdir()
        config = write_config(
            tmp_path / "loo.ini", out,
            synth={"n": 12, "d": 4, "k": 2, "q_true": 2, "seed": 9,
                   "noise_sd": 0.2, "class_separation": 3.0},
            cv={"k_folds": 12, "seed": 0},
            model={"q": 2, "m": 4, "mc_samples_discrete": 4},
            train={"max_iters": 20, "seed": 0},
            decode={"iterations": 10, "n_samples": 10, "seed": 0},
            features={"k_features": 4},
        )
        assert main(["synth", "--config", str(config)]) == 0
        assert main(["cv", "--config", str(config)]) == 0
        fold_lines = (out / "cv_folds.csv").read_text().strip().splitlines()
        assert len(fold_lines) - 1 == 12


class TestDeterminism:
    def test_synth_byte_identical(self, workspace):
        config = str(workspace["config"])
        out = workspace["out"]
        assert main(["synth", "--config", config]) == 0
        first = (out / "dataset.csv").read_bytes()
        assert main(["synth", "--config", config]) == 0
        assert (out / "dataset.csv").read_bytes() == first

    def test_train_byte_identical_including_figures(self, workspace):
        config = str(workspace["config"])
        out = workspace["out"]
        assert main(["synth", "--config", config]) == 0
        assert main(["train", "--config", config]) == 0
        snapshots = {
            name: (out / name).read_bytes()
            for name in ("model.json", "train_trace.csv", "ard_relevance.csv",
                         "train_trace.png", "ard_relevance.png")
        }
        assert main(["train", "--config", config]) == 0
        for name, blob in snapshots.items():
            assert (out / name).read_bytes() == blob, f"{name} differs between runs"

    def test_label_shuffle_leaves_predictions_identical(self, workspace):
        config = str(workspace["config"])
        out = workspace["out"]
        assert main(["synth", "--config", config]) == 0
        assert main(["train", "--config", config]) == 0
        assert main(["decode", "--config", config]) == 0
        baseline = (out / "predictions.csv").read_bytes()

        # Shuffle the label column in place; features untouched.
        dataset_path = out / "dataset.csv"
        lines = dataset_path.read_text().strip().splitlines()
        header, rows = lines[0], [line.split(",") for line in lines[1:]]
        labels = [row[1] for row in rows]
        shuffled = list(reversed(labels))
        for row, lab in zip(rows, shuffled):
            row[1] = lab
        dataset_path.write_text(
            "\n".join([header] + [",".join(row) for row in rows]) + "\n"
        )

        assert main(["decode", "--config", config]) == 0
        assert (out / "predictions.csv").read_bytes() == baseline

    def test_seed_override_changes_synth(self, workspace):
        config = str(workspace["config"])
        out = workspace["out"]
        assert main(["synth", "--config", config]) == 0
        first = (out / "dataset.csv").read_bytes()
        assert main(["synth", "--config", config, "--seed", "99"]) == 0
        assert (out / "dataset.csv").read_bytes() != first


def test_console_entry_point(workspace):
    result = subprocess.run(
        [sys.executable, "-m", "ldgd.cli", "synth", "--config", str(workspace["config"])],
        capture_output=True,
        text=True,
    )
    assert result.returncode == 0, result.stderr
    assert "N=48" in result.stdout
