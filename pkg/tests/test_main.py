import json
from pathlib import Path
from typing import Any, Dict, List

import pytest
from typer.testing import CliRunner

from alltok.bench import load_scenes
from alltok.main import EXIT_OPERATIONAL, app
from alltok.manifest import MANIFEST_NAME, RunManifest
from tests.conftest import SMALL_SCENES, TINY_DEPTH_TOKENIZER, TINY_MASK_TOKENIZER, TINY_SOLVER, payload

runner = CliRunner()


def _gen_data(out: Path, n: int = 6, seed: int = 3) -> Dict[str, Any]:
    arguments = ["gen-data", "--out", str(out), "--n", str(n), "--seed", str(seed), "--spec", str(SMALL_SCENES)]
    result = runner.invoke(app, arguments)
    assert result.exit_code == 0, result.output
    return payload(result)


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """Scenes, both tokenizers and a joint solver trained through the command line."""
    root = tmp_path_factory.mktemp("run")
    _gen_data(root / "scenes")
    for task, config in (("depth", TINY_DEPTH_TOKENIZER), ("mask", TINY_MASK_TOKENIZER)):
        result = runner.invoke(
            app,
            [
                "train-tokenizer",
                "--task",
                task,
                "--data",
                str(root / "scenes"),
                "--config",
                str(config),
                "--out",
                str(root / task),
            ],
        )
        assert result.exit_code == 0, result.output
    result = runner.invoke(
        app,
        [
            "train-solver",
            "--tasks",
            "dep,ins",
            "--data",
            str(root / "scenes"),
            "--depth-tokenizer",
            str(root / "depth" / "tokenizer.aitk"),
            "--mask-tokenizer",
            str(root / "mask" / "tokenizer.aitk"),
            "--config",
            str(TINY_SOLVER),
            "--aux-weight",
            "0.2",
            "--out",
            str(root / "solver"),
        ],
    )
    assert result.exit_code == 0, result.output
    return root


def test_gen_data_is_reproducible(tmp_path: Path) -> None:
    first = _gen_data(tmp_path / "first")
    second = _gen_data(tmp_path / "second")
    assert first["content_hash"] == second["content_hash"]
    assert first["n_scenes"] == 6
    assert len(load_scenes(tmp_path / "first")) == 6
    assert _gen_data(tmp_path / "third", seed=4)["content_hash"] != first["content_hash"]
    manifest = RunManifest.load(tmp_path / "first")
    assert manifest.command == "gen-data"
    assert manifest.output_hash == first["content_hash"]


def test_gen_data_with_previews_and_empty_runs(tmp_path: Path) -> None:
    result = runner.invoke(app, ["gen-data", "--out", str(tmp_path / "scenes"), "--n", "2", "--previews", "1"])
    assert result.exit_code == 0, result.output
    assert len(list((tmp_path / "scenes" / "previews").glob("*.pgm"))) == 3
    assert _gen_data(tmp_path / "empty", n=0)["n_scenes"] == 0


def test_invalid_options_exit_with_operational_code(tmp_path: Path) -> None:
    assert runner.invoke(app, ["gen-data", "--out", str(tmp_path), "--n=-1"]).exit_code == EXIT_OPERATIONAL
    assert runner.invoke(app, ["roundtrip", "--suite", "nope"]).exit_code == EXIT_OPERATIONAL
    bad_tasks = ["train-solver", "--tasks", "dep,seg", "--out", str(tmp_path / "solver")]
    assert runner.invoke(app, bad_tasks).exit_code == EXIT_OPERATIONAL
    bad_task = ["train-tokenizer", "--task", "normals", "--out", str(tmp_path / "tokenizer")]
    assert runner.invoke(app, bad_task).exit_code == EXIT_OPERATIONAL


def test_operational_errors(tmp_path: Path) -> None:
    missing_data = ["train-tokenizer", "--task", "depth", "--data", str(tmp_path / "none"), "--out", str(tmp_path)]
    assert runner.invoke(app, missing_data).exit_code == EXIT_OPERATIONAL
    missing_tokenizer = ["train-solver", "--tasks", "ins", "--data", str(tmp_path), "--out", str(tmp_path / "solver")]
    assert runner.invoke(app, missing_tokenizer).exit_code == EXIT_OPERATIONAL
    assert runner.invoke(app, ["eval", "--ckpt", str(tmp_path / "missing.aitk")]).exit_code == EXIT_OPERATIONAL
    assert runner.invoke(app, ["rerun", str(tmp_path)]).exit_code == EXIT_OPERATIONAL


@pytest.mark.parametrize("suite", ["vq", "codec", "interp"])
def test_roundtrip_suites(suite: str, tmp_path: Path) -> None:
    result = runner.invoke(app, ["roundtrip", "--suite", suite, "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    report = payload(result)
    assert report["passed"]
    assert report["suite"] == suite
    assert (tmp_path / MANIFEST_NAME).exists()


def test_rerun_reproduces_gen_data(tmp_path: Path) -> None:
    original = _gen_data(tmp_path / "scenes", n=3)
    result = runner.invoke(app, ["rerun", str(tmp_path / "scenes")])
    assert result.exit_code == 0, result.output
    assert payload(result)["content_hash"] == original["content_hash"]


def test_rerun_reproduces_training_runs(trained_run: Path, tmp_path: Path) -> None:
    scenes = str(trained_run / "scenes")
    runs = {
        "tokenizer": ["train-tokenizer", "--task", "depth", "--data", scenes, "--config", str(TINY_DEPTH_TOKENIZER)],
        "solver": [
            "train-solver",
            "--tasks",
            "dep",
            "--data",
            scenes,
            "--depth-tokenizer",
            str(trained_run / "depth" / "tokenizer.aitk"),
            "--config",
            str(TINY_SOLVER),
        ],
    }
    for name, arguments in runs.items():
        out = tmp_path / name
        first = runner.invoke(app, arguments + ["--out", str(out)])
        assert first.exit_code == 0, first.output
        checkpoint = out / f"{name}.aitk"
        weights, metrics = checkpoint.read_bytes(), (out / "metrics.jsonl").read_text()
        output_hash = RunManifest.load(out).output_hash
        again = runner.invoke(app, ["rerun", str(out)])
        assert again.exit_code == 0, again.output
        assert payload(again) == payload(first)
        assert checkpoint.read_bytes() == weights
        assert (out / "metrics.jsonl").read_text() == metrics
        assert RunManifest.load(out).output_hash == output_hash


def test_tokenizer_runs_write_artifacts(trained_run: Path) -> None:
    for task in ("depth", "mask"):
        directory = trained_run / task
        assert (directory / "tokenizer.aitk").exists()
        rows = (directory / "metrics.jsonl").read_text().splitlines()
        assert len(rows) == RunManifest.load(directory).config["train"]["epochs"]
        assert all(json.loads(row)["loss"] >= 0 for row in rows)


def test_tokenizer_holdout_reports_validation(trained_run: Path, tmp_path: Path) -> None:
    result = runner.invoke(
        app,
        [
            "train-tokenizer",
            "--task",
            "depth",
            "--data",
            str(trained_run / "scenes"),
            "--config",
            str(TINY_DEPTH_TOKENIZER),
            "--epochs",
            "1",
            "--holdout",
            "2",
            "--out",
            str(tmp_path),
        ],
    )
    assert result.exit_code == 0, result.output
    summary = payload(result)
    assert summary["epochs"] == 1
    assert 0.0 <= summary["validation"] <= 1.0


def test_solver_run_records_tokenizers(trained_run: Path) -> None:
    manifest = RunManifest.load(trained_run / "solver")
    assert manifest.command == "train-solver"
    assert manifest.options["tasks"] == ["dep", "ins"]
    assert manifest.input_hash == RunManifest.load(trained_run / "scenes").output_hash
    rows = [json.loads(row) for row in (trained_run / "solver" / "metrics.jsonl").read_text().splitlines()]
    assert [row["epoch"] for row in rows] == [0, 1]
    assert all(set(row["token_loss"]) == {"dep", "ins"} for row in rows)


@pytest.mark.parametrize(
    "arguments",
    [
        ["--task", "dep"],
        ["--task", "dep", "--parallel"],
        ["--task", "dep", "--mode", "soft"],
        ["--task", "ins", "--score-threshold", "0.1"],
    ],
)
def test_eval(arguments: List[str], trained_run: Path, tmp_path: Path) -> None:
    command = ["eval", "--ckpt", str(trained_run / "solver" / "solver.aitk"), "--data", str(trained_run / "scenes")]
    result = runner.invoke(app, command + arguments + ["--holdout", "2", "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    evaluation = payload(result)
    assert evaluation["n_images"] == 2
    assert evaluation == json.loads((tmp_path / "evaluation.json").read_text())
    if arguments[1] == "dep":
        assert evaluation["depth"]["rmse"] >= 0
    else:
        assert 0.0 <= evaluation["masks"]["ap"] <= 1.0


def test_eval_rejects_mismatched_tokenizer(trained_run: Path) -> None:
    command = [
        "eval",
        "--ckpt",
        str(trained_run / "solver" / "solver.aitk"),
        "--task",
        "dep",
        "--tokenizer",
        str(trained_run / "mask" / "tokenizer.aitk"),
        "--data",
        str(trained_run / "scenes"),
    ]
    assert runner.invoke(app, command).exit_code == EXIT_OPERATIONAL


def test_resumed_solver_run_appends_epochs(trained_run: Path, tmp_path: Path) -> None:
    result = runner.invoke(
        app,
        [
            "train-solver",
            "--tasks",
            "dep",
            "--data",
            str(trained_run / "scenes"),
            "--depth-tokenizer",
            str(trained_run / "depth" / "tokenizer.aitk"),
            "--config",
            str(TINY_SOLVER),
            "--epochs",
            "3",
            "--resume",
            str(trained_run / "solver" / "solver.aitk"),
            "--out",
            str(tmp_path),
        ],
    )
    assert result.exit_code == 0, result.output
    assert payload(result)["epochs"] == 1
