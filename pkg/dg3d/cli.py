from __future__ import annotations

import contextlib
import logging
import sys
from pathlib import Path
from typing import Any, Generator, Optional

import charmonium.time_block as ch_time_block
import typer
from termcolor import cprint

from .backends import parse_backend
from .config import RunConfig, load_config, write_provenance
from .errors import (
    BackendError,
    CheckpointError,
    ConfigError,
    DegenerateGradientError,
    DegeneratePairError,
    EmptyMeshError,
    InvisibleMeshError,
    NonFiniteError,
)
from .gan3d import GeneratorParams, load_generator
from .gradcheck import format_report, run_gradcheck
from .imageio import read_obj, read_ppm, write_obj, write_ppm
from .losses import Mode
from .meshtex import (
    Mesh,
    TextureAtlas,
    atlas_from_image,
    blend_views,
    cylinder_unwrap,
    extract_mesh,
    progressive_refine,
)
from .render import Camera
from .trainer import preview_triplane, render_preview, train

logger = logging.getLogger("dg3d")

app = typer.Typer(add_completion=False, help="Text-guided finetuning of a toy triplane 3D generator.")

CONFIG = typer.Option(None, "--config", help="YAML or JSON run configuration.")
OUT = typer.Option(None, "--out", help="Output directory (overrides the config).")
SEED = typer.Option(None, "--seed", help="Random seed (overrides the config).")
STEPS = typer.Option(None, "--steps", help="Training steps (overrides the config).")
BACKEND = typer.Option(
    None, "--backend", help="identity, procedural, or external:CMD (overrides the config)."
)
PRESET = typer.Option(None, "--preset", help="face, head, avatar-head, avatar-body, or smoke.")
VERBOSE = typer.Option(False, "--verbose", help="Log every step.")


def _fail(code: int, message: str) -> typer.Exit:
    cprint(message, "red", file=sys.stderr)
    return typer.Exit(code=code)


@contextlib.contextmanager
def exit_codes() -> Generator[None, None, None]:
    """Map failures to exit codes: 2 for input problems, 3 for numeric or backend failures, 4 for empty geometry."""
    try:
        yield
    except (ConfigError, CheckpointError) as exc:
        raise _fail(2, f"error: {exc}") from exc
    except FileNotFoundError as exc:
        raise _fail(2, f"error: missing input {exc.filename}") from exc
    except (BackendError, NonFiniteError, DegeneratePairError, DegenerateGradientError) as exc:
        # BackendError messages already end with the captured backend output
        raise _fail(3, f"error: {exc}") from exc
    except (EmptyMeshError, InvisibleMeshError) as exc:
        raise _fail(4, f"error: {exc}") from exc


def _setup(verbose: bool) -> None:
    logging.basicConfig()
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    ch_time_block.disable_stderr()


def _load(
    config: Optional[Path],
    mode: str,
    out: Optional[Path] = None,
    seed: Optional[int] = None,
    steps: Optional[int] = None,
    backend: Optional[str] = None,
    preset: Optional[str] = None,
) -> tuple[RunConfig, str]:
    overrides: dict[str, Any] = {
        "mode": mode,
        "out": None if out is None else str(out),
        "seed": seed,
        "train.steps": steps,
        "backend": backend,
        "preset": preset,
    }
    return load_config(config, overrides)


def _generator(config: RunConfig) -> tuple[GeneratorParams, list[Path]]:
    if config.checkpoint is None:
        return GeneratorParams.initialize(config.generator), []
    path = Path(config.checkpoint)
    params, _ = load_generator(path)
    return params, [path]


def _run_training(
    mode: Mode,
    config_path: Optional[Path],
    out: Optional[Path],
    seed: Optional[int],
    steps: Optional[int],
    preset: Optional[str],
    verbose: bool,
) -> None:
    _setup(verbose)
    with exit_codes():
        config, raw = _load(config_path, mode, out, seed, steps, None, preset)
        params, inputs = _generator(config)
        if config.prior.target_image is not None:
            inputs.append(Path(config.prior.target_image))
        run_dir = Path(config.out)
        write_provenance(config, run_dir, raw, inputs)
        logger.info("%s run into %s", mode, run_dir)
        with ch_time_block.ctx(mode, print_start=False):
            train(
                mode,
                params,
                config.train_config(),
                config.priors(),
                run_dir,
                progress=sys.stderr.isatty(),
            )


@app.command()
def adapt(
    config: Optional[Path] = CONFIG,
    out: Optional[Path] = OUT,
    seed: Optional[int] = SEED,
    steps: Optional[int] = STEPS,
    preset: Optional[str] = PRESET,
    verbose: bool = VERBOSE,
) -> None:
    """Shift the whole generator toward the prompt's domain."""
    _run_training("adaptation", config, out, seed, steps, preset, verbose)


@app.command()
def edit(
    config: Optional[Path] = CONFIG,
    out: Optional[Path] = OUT,
    seed: Optional[int] = SEED,
    steps: Optional[int] = STEPS,
    preset: Optional[str] = PRESET,
    verbose: bool = VERBOSE,
) -> None:
    """Edit the region the prompt asks for and keep the rest."""
    _run_training("editing", config, out, seed, steps, preset, verbose)


@app.command()
def avatar(
    config: Optional[Path] = CONFIG,
    out: Optional[Path] = OUT,
    seed: Optional[int] = SEED,
    steps: Optional[int] = STEPS,
    preset: Optional[str] = PRESET,
    verbose: bool = VERBOSE,
) -> None:
    """Search a latent for the prompt, then finetune one avatar."""
    _run_training("avatar", config, out, seed, steps, preset, verbose)


def _mesh_and_atlas(source: Path, config: RunConfig) -> tuple[Mesh, TextureAtlas]:
    settings = config.refine_settings()
    schedule = config.schedule()
    if source.suffix.lower() == ".obj":
        try:
            vertices, faces, uv, texture = read_obj(source)
        except ValueError as exc:
            raise ConfigError("source", str(exc)) from exc
        mesh = Mesh(vertices, faces, uv)
        if mesh.uv is None:
            mesh = cylinder_unwrap(mesh)
        if texture is None:
            raise ConfigError("refine", f"{source} names no diffuse texture")
        return mesh, atlas_from_image(read_ppm(Path(texture)), mesh, settings.atlas_resolution)
    params, extra = load_generator(source)
    if "style" not in extra:
        raise CheckpointError(f"{source} stores no style code")
    triplane = preview_triplane(params, extra["style"], extra.get("residual"))
    with ch_time_block.ctx("extract", print_start=False):
        mesh = extract_mesh(params, triplane, config.refine.mc_resolution, config.refine.iso_level)
    if mesh.is_empty:
        raise EmptyMeshError(
            f"density of {source} never crosses the iso level; set refine.iso_level lower"
        )
    mesh = cylinder_unwrap(mesh)
    views = [
        (view.camera, render_preview(params, triplane, view.camera, config.refine.ray_steps))
        for view in schedule.views
    ]
    with ch_time_block.ctx("blend", print_start=False):
        atlas = blend_views(mesh, views, settings)
    return mesh, atlas


@app.command()
def refine(
    source: Path = typer.Argument(..., help="DG3D checkpoint or textured OBJ mesh."),
    config: Optional[Path] = CONFIG,
    out: Optional[Path] = OUT,
    seed: Optional[int] = SEED,
    backend: Optional[str] = BACKEND,
    preset: Optional[str] = PRESET,
    verbose: bool = VERBOSE,
) -> None:
    """Texture a mesh with progressive view-by-view refinement."""
    _setup(verbose)
    with exit_codes():
        if not source.exists():
            raise _fail(2, f"error: missing input {source}")
        run_config, raw = _load(config, "refine", out, seed, None, backend, preset)
        run_dir = Path(run_config.out)
        write_provenance(run_config, run_dir, raw, [source])
        keep = run_config.refine.keep_backend_dir
        translator = parse_backend(
            run_config.backend, keep_dir=None if keep is None else run_dir / keep
        )
        mesh, atlas = _mesh_and_atlas(source, run_config)
        with ch_time_block.ctx("refine", print_start=False):
            result = progressive_refine(
                mesh,
                atlas,
                run_config.schedule(),
                translator,
                run_config.prompt,
                run_config.refine_settings(),
                dump_dir=run_dir,
            )
        write_ppm(run_dir / "texture.ppm", result.final.texels)
        write_obj(run_dir / "mesh.obj", mesh.vertices, mesh.faces, mesh.uv, material="texture")
        logger.info("wrote %s with %d refined views", run_dir / "mesh.obj", len(result.refined))


@app.command()
def render(
    checkpoint: Path = typer.Argument(..., help="DG3D checkpoint written by a training run."),
    azimuth: float = typer.Option(0.0, "--azimuth"),
    elevation: float = typer.Option(0.0, "--elevation"),
    out: Path = typer.Option(Path("render.ppm"), "--out"),
    verbose: bool = VERBOSE,
) -> None:
    """Render a checkpoint at one pose with its stored settings."""
    _setup(verbose)
    with exit_codes():
        params, extra = load_generator(checkpoint)
        if "style" not in extra:
            raise CheckpointError(f"{checkpoint} stores no style code")
        try:
            size = int(extra["render.resolution"])
            steps = int(extra["render.steps"])
            radius = float(extra["render.radius"])
            fov_y = float(extra["render.fov_y"])
        except KeyError as exc:
            raise CheckpointError(f"{checkpoint} lacks render setting {exc}") from exc
        camera = Camera(azimuth, elevation, radius, fov_y, (size, size))
        triplane = preview_triplane(params, extra["style"], extra.get("residual"))
        image = render_preview(params, triplane, camera, steps)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_ppm(out, image.pixels)


@app.command()
def gradcheck(
    points: int = typer.Option(10, "--points"),
    seed: int = typer.Option(0, "--seed"),
    tolerance: float = typer.Option(1e-4, "--tolerance"),
    verbose: bool = VERBOSE,
) -> None:
    """Compare every analytic gradient with central differences."""
    _setup(verbose)
    with ch_time_block.ctx("gradcheck", print_start=False):
        results = run_gradcheck(points, seed, tolerance, progress=sys.stderr.isatty())
    typer.echo(format_report(results, color=sys.stdout.isatty()))
    if not all(result.passed for result in results):
        raise typer.Exit(code=1)
