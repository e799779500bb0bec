"""Run configuration: defaults, presets, user documents, and command-line overrides."""

from __future__ import annotations

import dataclasses
import logging
import typing
from pathlib import Path
from typing import Any, Literal, Mapping, Optional, Sequence

import numpy as np
import yaml

from .errors import ConfigError
from .gan3d import GeneratorConfig
from .imageio import read_ppm
from .meshtex import RefineSchedule, RefineSettings, build_schedule
from .priors import EmbeddingPrior, GaussianScorePrior, NoiseSchedule
from .render import Camera
from .trainer import Priors, TrainConfig
from .util import hash_path

logger = logging.getLogger("dg3d")


@dataclasses.dataclass(frozen=True)
class PriorConfig:
    variance: float = 1.0
    total: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    weighting: Literal["sds", "uniform"] = "sds"
    # PPM whose pixels replace the prompt's synthesized target mean
    target_image: Optional[str] = None
    embedding_dim: int = 32
    embedding_grid: int = 8
    text_mode: Literal["hashed", "synthesized"] = "synthesized"

    def __post_init__(self) -> None:
        if self.variance <= 0:
            raise ValueError(f"variance must be positive, got {self.variance}")


@dataclasses.dataclass(frozen=True)
class RefineConfig:
    k: int = 1
    j: int = 1
    elevation_span: tuple[float, float] = (-15.0, 15.0)
    azimuths: Optional[tuple[float, ...]] = None
    dilation: int = 5
    img2img_strength: float = 0.6
    inpaint_strength: float = 0.4
    all_img2img: bool = False
    blend: Literal["adaptive", "naive"] = "adaptive"
    atlas_resolution: int = 64
    view_resolution: int = 64
    blend_iters: int = 200
    tv_weight: float = 0.01
    mc_resolution: int = 32
    iso_level: Optional[float] = None
    ray_steps: int = 48
    edge_low: float = 0.1
    edge_high: float = 0.2
    # external backend request directories are copied here, relative to the run directory
    keep_backend_dir: Optional[str] = None

    def __post_init__(self) -> None:
        if self.k < 0:
            raise ValueError(f"k must be nonnegative, got {self.k}")
        if self.j < 1:
            raise ValueError(f"j must be at least 1, got {self.j}")
        if self.blend not in ("adaptive", "naive"):
            raise ValueError(f"unknown blend {self.blend!r}")
        if self.edge_low > self.edge_high:
            raise ValueError("edge_low must not exceed edge_high")
        if self.mc_resolution < 8:
            raise ValueError(f"mc_resolution must be at least 8, got {self.mc_resolution}")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    preset: str = "head"
    mode: Literal["adaptation", "editing", "avatar", "refine", "render"] = "adaptation"
    prompt: str = "a portrait in watercolor style"
    seed: int = 0
    out: str = "runs/dg3d"
    backend: str = "procedural"
    # DG3D generator checkpoint to start from; seeded initialization when unset
    checkpoint: Optional[str] = None
    generator: GeneratorConfig = GeneratorConfig()
    train: TrainConfig = TrainConfig()
    prior: PriorConfig = PriorConfig()
    refine: RefineConfig = RefineConfig()

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    def priors(self) -> Priors:
        schedule = NoiseSchedule(
            self.prior.total, self.prior.beta_start, self.prior.beta_end, self.prior.weighting
        )
        targets = {}
        if self.prior.target_image is not None:
            target = read_ppm(Path(self.prior.target_image))
            size = self.train.image_resolution
            if target.shape != (size, size, 3):
                raise ConfigError(
                    "prior.target_image", f"image is {target.shape}, renders are {size}x{size}"
                )
            targets[self.prompt] = target
        embedding = EmbeddingPrior(
            dim=self.prior.embedding_dim,
            seed=self.seed,
            grid=self.prior.embedding_grid,
            text_mode=self.prior.text_mode,
        )
        return Priors(
            self.prompt,
            GaussianScorePrior(schedule, self.prior.variance, targets=targets),
            embedding,
        )

    def refine_settings(self) -> RefineSettings:
        return RefineSettings(
            atlas_resolution=self.refine.atlas_resolution,
            blend_iters=self.refine.blend_iters,
            tv_weight=self.refine.tv_weight,
            edge_low=self.refine.edge_low,
            edge_high=self.refine.edge_high,
            blend=self.refine.blend,
            seed=self.seed,
        )

    def schedule(self) -> RefineSchedule:
        size = self.refine.view_resolution
        camera = Camera(0.0, 0.0, self.train.radius, self.train.fov_y, (size, size))
        return build_schedule(
            self.refine.k,
            self.refine.j,
            self.refine.elevation_span,
            {"img2img": self.refine.img2img_strength, "inpaint": self.refine.inpaint_strength},
            self.refine.dilation,
            camera,
            self.refine.azimuths,
            self.refine.all_img2img,
        )

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = _plain(dataclasses.asdict(self))
        # the run seed lives at the top level
        del data["train"]["seed"]
        return data


PRESETS: Mapping[str, Mapping[str, Any]] = {
    "face": {
        "train": {"azimuth_span": [-45.0, 45.0]},
        "refine": {"azimuths": [-20.0, 0.0, 20.0]},
    },
    "head": {
        "train": {"azimuth_span": [-180.0, 180.0]},
    },
    "avatar-head": {
        "train": {"azimuth_span": [-180.0, 180.0]},
        "refine": {"k": 1, "j": 1},
    },
    "avatar-body": {
        "train": {"azimuth_span": [-180.0, 180.0]},
        "refine": {"k": 2, "j": 3, "elevation_span": [-15.0, 15.0]},
    },
    "smoke": {
        "generator": {"resolution": 16},
        "train": {
            "steps": 50,
            "image_resolution": 16,
            "ray_steps": 12,
            "latent_candidates": 4,
            "mapping_steps": 5,
        },
        "refine": {
            "atlas_resolution": 16,
            "view_resolution": 16,
            "mc_resolution": 16,
            "blend_iters": 20,
            "ray_steps": 12,
            "dilation": 1,
        },
    },
}


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


def _merge(base: dict[str, Any], update: Mapping[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _expand_dotted(overrides: Mapping[str, Any]) -> dict[str, Any]:
    """``{"train.steps": 5}`` -> ``{"train": {"steps": 5}}``; ``None`` values are dropped."""
    out: dict[str, Any] = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        *parents, leaf = dotted.split(".")
        node = out
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return out


def _convert(hint: Any, value: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint) and isinstance(hint, type):
        if not isinstance(value, Mapping):
            raise ConfigError(key, f"expected a mapping, got {value!r}")
        return _build(hint, value, key + ".")
    if origin is typing.Union:
        if value is None:
            return None
        inner = [arg for arg in typing.get_args(hint) if arg is not type(None)]
        return _convert(inner[0], value, key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], item, key) for item in value)
        if len(args) != len(value):
            raise ConfigError(key, f"expected {len(args)} entries, got {len(value)}")
        return tuple(_convert(arg, item, key) for arg, item in zip(args, value))
    if origin is Literal:
        if value not in typing.get_args(hint):
            raise ConfigError(key, f"{value!r} is not one of {list(typing.get_args(hint))}")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return int(value)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls: type, data: Mapping[str, Any], prefix: str = "") -> Any:
    hints = typing.get_type_hints(cls)
    names = {field.name for field in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(prefix + str(key), "unknown key")
    kwargs = {key: _convert(hints[key], value, prefix + key) for key, value in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix.rstrip(".") or "config", str(exc)) from exc


def parse_document(text: str) -> dict[str, Any]:
    """YAML (or JSON) mapping; an empty document is an empty mapping."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"unparsable document: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config", f"top level must be a mapping, got {type(data).__name__}")
    return data


def load_config(
    path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None
) -> tuple[RunConfig, str]:
    """(config, raw document text) from defaults, preset, document, then overrides."""
    raw = ""
    if path is not None:
        try:
            raw = path.read_text()
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    document = parse_document(raw)
    expanded = _expand_dotted(overrides or {})
    if "seed" in document.get("train", {}) or "seed" in expanded.get("train", {}):
        raise ConfigError("train.seed", "set the top-level seed instead")
    preset = expanded.get("preset", document.get("preset", RunConfig.preset))
    if preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = _merge(_merge(dict(PRESETS[preset]), document), expanded)
    merged["preset"] = preset
    config = _build(RunConfig, merged)
    try:
        config.train.validate(
            NoiseSchedule(
                config.prior.total,
                config.prior.beta_start,
                config.prior.beta_end,
                config.prior.weighting,
            )
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("prior", str(exc)) from exc
    if config.generator.resolution % (1 << (config.train.mstv_levels - 1)):
        raise ConfigError(
            "generator.resolution",
            f"{config.generator.resolution} is not divisible by 2^(mstv_levels - 1)",
        )
    return config, raw


def write_provenance(
    config: RunConfig, run_dir: Path, raw_text: str, inputs: Sequence[Path] = ()
) -> None:
    """config.input.yaml, config.resolved.yaml, and content hashes of binary inputs."""
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.input.yaml").write_text(raw_text)
    (run_dir / "config.resolved.yaml").write_text(
        yaml.safe_dump(config.to_dict(), sort_keys=True)
    )
    hashes = {str(path): f"{hash_path(path):032x}" for path in inputs}
    (run_dir / "inputs.yaml").write_text(yaml.safe_dump(hashes, sort_keys=True))
