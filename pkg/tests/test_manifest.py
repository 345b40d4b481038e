from pathlib import Path

import pytest

from alltok.exceptions import CheckpointFormatError
from alltok.manifest import MANIFEST_NAME, RunManifest, hash_inputs


def test_manifest_round_trip(tmp_path: Path) -> None:
    manifest = RunManifest(command="gen-data", options={"n": 2, "out": "scenes"}, seed=4, outputs=["a.aitk"])
    path = manifest.save(tmp_path)
    assert path.name == MANIFEST_NAME
    assert RunManifest.load(tmp_path) == manifest
    assert RunManifest.load(path) == manifest


def test_broken_manifest(tmp_path: Path) -> None:
    (tmp_path / MANIFEST_NAME).write_text('{"options": {}}')
    with pytest.raises(CheckpointFormatError):
        RunManifest.load(tmp_path)
    (tmp_path / MANIFEST_NAME).write_text("not json")
    with pytest.raises(CheckpointFormatError):
        RunManifest.load(tmp_path)


def test_hash_ignores_location_and_other_files(tmp_path: Path) -> None:
    for name in ("first", "second"):
        directory = tmp_path / name
        directory.mkdir()
        (directory / "scene_00000.aitk").write_bytes(b"payload")
    (tmp_path / "second" / "notes.txt").write_text("ignored")
    assert hash_inputs(tmp_path / "first") == hash_inputs(tmp_path / "second")
    (tmp_path / "second" / "scene_00000.aitk").write_bytes(b"changed")
    assert hash_inputs(tmp_path / "first") != hash_inputs(tmp_path / "second")
