from pathlib import Path

import pytest
import yaml
from deepdiff import DeepDiff

from alltok.config import (
    DATA_ROOT_VARIABLE,
    SolverRunConfig,
    TokenizerRunConfig,
    deep_merge,
    default_data_root,
    read_yaml,
)
from tests.conftest import TINY_DEPTH_TOKENIZER, TINY_SOLVER


def test_file_values_reach_the_run_config() -> None:
    data = yaml.safe_load(TINY_DEPTH_TOKENIZER.read_text())
    resolved = TokenizerRunConfig.resolve("depth", TINY_DEPTH_TOKENIZER).model_dump(mode="json")
    for section, values in data.items():
        picked = {key: resolved[section][key] for key in values}
        assert not DeepDiff(values, picked, ignore_order=True)


def test_flags_override_file_over_defaults() -> None:
    resolved = TokenizerRunConfig.resolve(
        "depth", TINY_DEPTH_TOKENIZER, {"train": {"epochs": 7, "seed": None}, "augmentation": {"mask_ratio": None}}
    )
    defaults = TokenizerRunConfig.defaults("depth")
    assert resolved.train.epochs == 7
    assert resolved.train.lr == 0.001
    assert resolved.train.seed == defaults.train.seed
    assert resolved.train.schedule == defaults.train.schedule == "exponential"
    assert resolved.augmentation.mask_ratio == 0.25
    assert resolved.tokenizer.input_range == defaults.tokenizer.input_range


def test_task_always_follows_the_command() -> None:
    assert TokenizerRunConfig.resolve("depth").tokenizer.task == "depth"
    mask = TokenizerRunConfig.resolve("mask")
    assert (mask.tokenizer.task, mask.train.batch_size, mask.train.schedule) == ("mask", 64, "cosine")


def test_solver_run_config() -> None:
    resolved = SolverRunConfig.resolve(TINY_SOLVER, {"loss": {"aux_loss_weight": 0.3}})
    assert resolved.solver.vocabulary.size == 4 + 32 + 3 + 8 + 8
    assert (resolved.train.epochs, resolved.train.schedule) == (2, "linear")
    assert resolved.loss.aux_loss_weight == 0.3
    assert resolved.loss.token_loss_weight == {"ins": 5.0, "dep": 1.0}


def test_deep_merge_keeps_siblings() -> None:
    merged = deep_merge({"a": {"b": 1, "c": 2}, "d": 3}, {"a": {"c": 4}, "e": 5})
    assert not DeepDiff(merged, {"a": {"b": 1, "c": 4}, "d": 3, "e": 5})


def test_read_yaml(tmp_path: Path) -> None:
    assert read_yaml(None) == {}
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert read_yaml(empty) == {}
    listing = tmp_path / "list.yaml"
    listing.write_text("- 1\n- 2\n")
    with pytest.raises(ValueError):
        read_yaml(listing)


def test_data_root_from_environment(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    monkeypatch.delenv(DATA_ROOT_VARIABLE, raising=False)
    assert default_data_root() == Path("data")
    monkeypatch.setenv(DATA_ROOT_VARIABLE, str(tmp_path))
    assert default_data_root() == tmp_path
