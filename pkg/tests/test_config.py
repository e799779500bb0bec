from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import yaml

from dg3d.config import PRESETS, RunConfig, load_config, parse_document, write_provenance
from dg3d.errors import ConfigError
from dg3d.imageio import write_ppm
from dg3d.util import hash_path


def _write(tmp_path: Path, text: str, name: str = "run.yaml") -> Path:
    path = tmp_path / name
    path.write_text(text)
    return path


def _key(tmp_path: Path, text: str) -> str:
    with pytest.raises(ConfigError) as info:
        load_config(_write(tmp_path, text))
    return info.value.key


def test_empty_document_is_valid() -> None:
    assert parse_document("") == {}
    config, raw = load_config()
    assert raw == ""
    assert config.preset == "head"
    assert config.train.t_min == 300 and config.train.t_max == 800


def test_bad_documents_name_their_key(tmp_path: Path) -> None:
    assert _key(tmp_path, "train:\n  stepz: 3\n") == "train.stepz"
    assert _key(tmp_path, "train:\n  t_min: 900\n  t_max: 400\n") == "train.t_max"
    assert _key(tmp_path, "train:\n  seed: 4\n") == "train.seed"
    assert _key(tmp_path, "generator:\n  resolution: 10\n") == "generator.resolution"
    assert _key(tmp_path, "train:\n  steps: many\n") == "train.steps"
    assert _key(tmp_path, "train:\n  azimuth_span: [10, -10]\n") == "train.azimuth_span"
    assert _key(tmp_path, "preset: tiny\n") == "preset"
    assert _key(tmp_path, "- a\n- b\n") == "config"
    assert _key(tmp_path, "refine:\n  blend: magic\n") == "refine.blend"
    assert _key(tmp_path, "train:\n  mstv_levels: 0\n") == "train.mstv_levels"
    assert _key(tmp_path, "refine:\n  mc_resolution: 4\n") == "refine"


def test_json_documents(tmp_path: Path) -> None:
    config, _ = load_config(_write(tmp_path, '{"prompt": "a clay bust", "train": {"lr": 0.002}}', "run.json"))
    assert config.prompt == "a clay bust"
    assert config.train.lr == 0.002


def test_precedence(tmp_path: Path) -> None:
    path = _write(tmp_path, "preset: smoke\nseed: 5\ntrain:\n  steps: 7\n  cfg_scale: 7.5\n")
    config, raw = load_config(path, {"train.steps": 9, "seed": None, "out": "elsewhere"})
    assert raw == path.read_text()
    assert config.train.steps == 9
    assert config.train.cfg_scale == 7.5
    assert config.seed == 5
    assert config.out == "elsewhere"
    assert config.generator.resolution == 16
    assert config.train_config().seed == 5


def test_nested_types(tmp_path: Path) -> None:
    text = "train:\n  weights:\n    reconstruction: 2\n  elevation_span: [-10, 5]\nrefine:\n  azimuths: [0, 45]\n"
    config, _ = load_config(_write(tmp_path, text))
    assert config.train.weights.reconstruction == 2.0
    assert config.train.elevation_span == (-10.0, 5.0)
    assert config.refine.azimuths == (0.0, 45.0)


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_presets_load(preset: str) -> None:
    config, _ = load_config(None, {"preset": preset})
    assert config.preset == preset
    assert config.schedule().views
    config.priors()
    config.refine_settings()


def test_face_preset_views() -> None:
    config, _ = load_config(None, {"preset": "face"})
    azimuths = sorted(view.camera.azimuth for view in config.schedule().views)
    assert azimuths == [-20.0, 0.0, 20.0]


def test_target_image(tmp_path: Path) -> None:
    image = np.random.default_rng(0).uniform(size=(16, 16, 3))
    write_ppm(tmp_path / "target.ppm", image)
    config, _ = load_config(None, {"preset": "smoke", "prior.target_image": str(tmp_path / "target.ppm")})
    priors = config.priors()
    target = priors.score.target_mean(config.prompt, (16, 16, 3))  # type: ignore[attr-defined]
    np.testing.assert_allclose(target, np.round(image * 255.0) / 255.0, atol=1e-12)
    wrong, _ = load_config(None, {"prior.target_image": str(tmp_path / "target.ppm")})
    with pytest.raises(ConfigError) as info:
        wrong.priors()
    assert info.value.key == "prior.target_image"


def test_provenance(tmp_path: Path) -> None:
    source = _write(tmp_path, "prompt: a bronze statue\n")
    config, raw = load_config(source)
    run_dir = tmp_path / "run"
    write_provenance(config, run_dir, raw, [source])
    assert (run_dir / "config.input.yaml").read_text() == raw
    resolved = yaml.safe_load((run_dir / "config.resolved.yaml").read_text())
    assert resolved["prompt"] == "a bronze statue"
    assert resolved["train"]["azimuth_span"] == [-180.0, 180.0]
    again, _ = load_config(None, {"preset": resolved["preset"], "prompt": resolved["prompt"]})
    assert again == config
    hashes = yaml.safe_load((run_dir / "inputs.yaml").read_text())
    assert hashes == {str(source): f"{hash_path(source):032x}"}


def test_resolved_config_reloads(tmp_path: Path) -> None:
    config, _ = load_config(None, {"preset": "avatar-body", "seed": 3})
    write_provenance(config, tmp_path, "")
    reloaded, _ = load_config(tmp_path / "config.resolved.yaml")
    assert reloaded == config
    assert isinstance(reloaded, RunConfig)
