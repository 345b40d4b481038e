import json
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
import pytest
from click.testing import Result

from alltok.bench import SceneSpec, SyntheticScene, generate_scenes, save_scene, scene_path
from alltok.config import SolverRunConfig, TokenizerRunConfig
from alltok.sequence import Vocabulary
from alltok.solver import SolverConfig, SolverModel, build_solver
from alltok.tokenizer import TokenizerConfig, TokenizerModel, build_tokenizer

CONFIG_PATH = Path(__file__).parent / "config"
TINY_DEPTH_TOKENIZER = CONFIG_PATH / "tiny_depth_tokenizer.yaml"
TINY_MASK_TOKENIZER = CONFIG_PATH / "tiny_mask_tokenizer.yaml"
TINY_SOLVER = CONFIG_PATH / "tiny_solver.yaml"
SMALL_SCENES = CONFIG_PATH / "small_scenes.yaml"


def payload(result: Result) -> Dict[str, Any]:
    """The JSON document a command printed on stdout."""
    lines = [line for line in result.output.splitlines() if line.startswith("{")]
    assert lines, result.output
    return json.loads(lines[-1])  # type: ignore[no-any-return]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def depth_config() -> TokenizerConfig:
    return TokenizerRunConfig.resolve("depth", TINY_DEPTH_TOKENIZER).tokenizer


@pytest.fixture
def mask_config() -> TokenizerConfig:
    return TokenizerRunConfig.resolve("mask", TINY_MASK_TOKENIZER).tokenizer


@pytest.fixture
def depth_tokenizer(depth_config: TokenizerConfig) -> TokenizerModel:
    return build_tokenizer(depth_config)


@pytest.fixture
def mask_tokenizer(mask_config: TokenizerConfig) -> TokenizerModel:
    return build_tokenizer(mask_config)


@pytest.fixture
def vocabulary() -> Vocabulary:
    return Vocabulary(n_coord_bins=32, n_classes=2, mask_codebook_size=8, depth_codebook_size=8)


@pytest.fixture
def solver_config() -> SolverConfig:
    return SolverRunConfig.resolve(TINY_SOLVER).solver


@pytest.fixture
def solver(solver_config: SolverConfig) -> SolverModel:
    return build_solver(solver_config)


@pytest.fixture
def scene_spec() -> SceneSpec:
    return SceneSpec(max_objects=2, hole_fraction=0.1)


@pytest.fixture
def scenes(scene_spec: SceneSpec) -> List[SyntheticScene]:
    return generate_scenes(scene_spec, 6, seed=3)


@pytest.fixture
def scene_directory(tmp_path: Path, scenes: List[SyntheticScene]) -> Path:
    directory = tmp_path / "scenes"
    for index, scene in enumerate(scenes):
        save_scene(scene, scene_path(directory, index))
    return directory
