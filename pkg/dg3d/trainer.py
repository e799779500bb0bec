"""Domain adaptation, local editing, and text-to-avatar finetuning loops."""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import time
import warnings
from pathlib import Path
from typing import Callable, Literal, Mapping, Optional, Sequence, Union

import charmonium.time_block as ch_time_block
import numpy as np
from tqdm import tqdm

from .errors import ConfigError, DegeneratePairError
from .gan3d import (
    GeneratorParams,
    LatentCode,
    LearnableTriplane,
    TriplaneGrid,
    clone_frozen,
    mapping_forward,
    mapping_graph,
    save_generator,
    triplane_forward,
    triplane_graph,
)
from .imageio import write_ppm
from .losses import (
    LossWeights,
    Mode,
    composite_objective,
    diffusion_guided_recon,
    gradient_mask,
    multiscale_tv,
    relative_distance,
    sds_grad,
    sds_surrogate,
    triplane_sq_dist,
)
from .numgrad import (
    Array,
    Node,
    OptimizerState,
    ParamBuffer,
    adam_step,
    backward,
    leaf,
)
from .priors import EmbeddingPrior, NoiseSchedule, ScorePrior, clip_loss, clip_loss_graph
from .render import Camera, ImageBuffer, render, render_graph

logger = logging.getLogger("dg3d")

SNAPSHOT_AZIMUTHS = (0.0, 90.0, 180.0, -90.0)

METRIC_KEYS = ("step", "mode", "loss_sds_gradnorm", "l_dis", "l_diff", "l_mstv", "elapsed_ms")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    steps: int = 10000
    batch: int = 1
    lr: float = 1e-4
    t_min: int = 300
    t_max: int = 800
    cfg_scale: float = 50.0
    azimuth_span: tuple[float, float] = (-180.0, 180.0)
    elevation_span: tuple[float, float] = (-30.0, 30.0)
    weights: LossWeights = LossWeights()
    seed: int = 0
    snapshot_every: int = 0
    image_resolution: int = 64
    ray_steps: int = 48
    fov_y: float = 30.0
    radius: float = 2.7
    mask_ema: bool = False
    learnable_triplane: bool = True
    mstv_levels: int = 3
    latent_candidates: int = 16
    mapping_steps: int = 100
    mapping_lr: float = 1e-3
    # seed of a noise code reused at every step instead of fresh draws
    fixed_latent: Optional[int] = None
    record_timing: bool = False

    def validate(self, schedule: NoiseSchedule) -> None:
        if self.batch != 1:
            raise ConfigError("train.batch", f"only batch 1 is supported, got {self.batch}")
        if not 1 <= self.t_min <= schedule.total:
            raise ConfigError("train.t_min", f"{self.t_min} outside [1, {schedule.total}]")
        if not self.t_min <= self.t_max <= schedule.total:
            raise ConfigError(
                "train.t_max", f"{self.t_max} outside [{self.t_min}, {schedule.total}]"
            )
        if self.steps < 0:
            raise ConfigError("train.steps", f"{self.steps} is negative")
        for key, span in (
            ("train.azimuth_span", self.azimuth_span),
            ("train.elevation_span", self.elevation_span),
        ):
            if span[1] < span[0]:
                raise ConfigError(key, f"empty range {list(span)}")
        if not (-90.0 < self.elevation_span[0] and self.elevation_span[1] < 90.0):
            raise ConfigError("train.elevation_span", "elevations must lie in (-90, 90)")
        if self.latent_candidates < 1:
            raise ConfigError("train.latent_candidates", "need at least one candidate")
        if self.ray_steps < 2:
            raise ConfigError("train.ray_steps", "need at least two samples per ray")
        if self.mstv_levels < 1:
            raise ConfigError(
                "train.mstv_levels", f"need at least one level, got {self.mstv_levels}"
            )

    def camera(self, azimuth: float, elevation: float) -> Camera:
        return Camera(
            azimuth,
            elevation,
            self.radius,
            self.fov_y,
            (self.image_resolution, self.image_resolution),
        )


@dataclasses.dataclass
class Priors:
    prompt: str
    score: ScorePrior
    embedding: EmbeddingPrior = dataclasses.field(default_factory=EmbeddingPrior)


@dataclasses.dataclass
class StepMetrics:
    step: int
    mode: Mode
    loss_sds_gradnorm: float
    l_dis: Optional[float] = None
    l_diff: Optional[float] = None
    l_mstv: Optional[float] = None
    elapsed_ms: Optional[float] = None
    pairwise_triplane_dist: Optional[float] = None

    def record(self) -> dict[str, object]:
        return {key: getattr(self, key) for key in METRIC_KEYS}

    def to_json(self) -> str:
        return json.dumps(self.record())


@dataclasses.dataclass
class PreviousBatch:
    w: Array
    frozen_planes: Array


@dataclasses.dataclass
class TrainState:
    live: GeneratorParams
    frozen: GeneratorParams
    optimizer: OptimizerState
    rng: np.random.Generator
    residual: Optional[LearnableTriplane] = None
    style: Optional[Array] = None
    previous: Optional[PreviousBatch] = None
    mask_history: Optional[Array] = None
    step: int = 0

    def trainable(self) -> list[ParamBuffer]:
        buffers = [buffer for buffer in self.live.buffers() if buffer.trainable]
        if self.residual is not None:
            buffers.append(self.residual.buffer)
        return buffers


def init_state(
    params: GeneratorParams,
    config: TrainConfig,
    mode: Mode,
    style: Optional[Array] = None,
) -> TrainState:
    """Freeze everything but triplane_gen, and clone the frozen reference."""
    params.set_trainable(triplane_gen=True)
    residual = None
    if mode == "avatar":
        if style is None:
            raise ValueError("avatar finetuning needs a style code from latent_search")
        if config.learnable_triplane:
            residual = LearnableTriplane(params.config.channels, params.config.resolution)
    return TrainState(
        live=params,
        frozen=clone_frozen(params),
        optimizer=OptimizerState(lr=config.lr),
        rng=np.random.default_rng(config.seed),
        residual=residual,
        style=None if style is None else style.copy(),
    )


def _uniform(rng: np.random.Generator, span: tuple[float, float]) -> float:
    low, high = span
    return low if high <= low else float(rng.uniform(low, high))


def sample_view(config: TrainConfig, rng: np.random.Generator) -> Camera:
    azimuth = _uniform(rng, config.azimuth_span)
    elevation = _uniform(rng, config.elevation_span)
    return config.camera(azimuth, elevation)


@dataclasses.dataclass(frozen=True)
class ViewDraw:
    camera: Camera
    jitter_seed: int
    t: int
    eps: Array

    def jitter(self) -> np.random.Generator:
        return np.random.default_rng(self.jitter_seed)


def _draw_latent(state: TrainState, config: TrainConfig) -> Array:
    dim = state.live.config.latent_dim
    if config.fixed_latent is not None:
        return np.random.default_rng(config.fixed_latent).standard_normal(dim)
    return state.rng.standard_normal(dim)


def _draw_view(state: TrainState, config: TrainConfig) -> ViewDraw:
    camera = sample_view(config, state.rng)
    jitter_seed = int(state.rng.integers(0, 2**32))
    t = int(state.rng.integers(config.t_min, config.t_max + 1))
    eps = state.rng.standard_normal((config.image_resolution, config.image_resolution, 3))
    return ViewDraw(camera, jitter_seed, t, eps)


def _style(params: GeneratorParams, z: Array) -> Array:
    return mapping_forward(params, LatentCode(z, "noise")).values


def _apply(state: TrainState, loss: Node) -> None:
    buffers = state.trainable()
    backward(loss, buffers)
    adam_step(state.optimizer, buffers)
    state.step += 1


def _elapsed(config: TrainConfig, start: float) -> Optional[float]:
    return (time.perf_counter() - start) * 1000.0 if config.record_timing else None


def _pair_loss(state: TrainState, w: Array, planes: Node) -> tuple[Node, float]:
    assert state.previous is not None
    other = triplane_graph(state.live, state.previous.w)
    frozen_planes = triplane_forward(state.frozen, LatentCode(w, "style")).planes
    loss = relative_distance(planes, other, frozen_planes, state.previous.frozen_planes)
    return loss, float(triplane_sq_dist(planes, other).value)


def adapt_step(state: TrainState, config: TrainConfig, priors: Priors) -> StepMetrics:
    """One step of L_sds + lambda1 * L_dis, pairing with the previous batch's latent."""
    start = time.perf_counter()
    w = _style(state.live, _draw_latent(state, config))
    planes = triplane_graph(state.live, w)
    l_dis: Optional[Node] = None
    pair_dist = None
    if config.weights.relative_distance > 0 and state.previous is not None:
        try:
            l_dis, pair_dist = _pair_loss(state, w, planes)
        except DegeneratePairError as exc:
            warnings.warn(f"step {state.step + 1}: {exc}; resampling the latent once")
            w = _style(state.live, _draw_latent(state, config))
            planes = triplane_graph(state.live, w)
            l_dis, pair_dist = _pair_loss(state, w, planes)
    view = _draw_view(state, config)
    image, _, _ = render_graph(state.live, planes, view.camera, config.ray_steps, view.jitter())
    sds = sds_grad(
        image.value,
        priors.prompt,
        view.t,
        view.eps,
        priors.score.schedule,
        priors.score,
        config.cfg_scale,
    )
    loss = composite_objective(
        "adaptation",
        {"sds": sds_surrogate(image, sds), "dis": 0.0 if l_dis is None else l_dis},
        config.weights,
    )
    _apply(state, loss)
    state.previous = PreviousBatch(
        w, triplane_forward(state.frozen, LatentCode(w, "style")).planes
    )
    return StepMetrics(
        step=state.step,
        mode="adaptation",
        loss_sds_gradnorm=float(np.linalg.norm(sds.grad)),
        l_dis=None if l_dis is None else float(l_dis.value),
        elapsed_ms=_elapsed(config, start),
        pairwise_triplane_dist=pair_dist,
    )


def edit_step(state: TrainState, config: TrainConfig, priors: Priors) -> StepMetrics:
    """One step of L_sds + lambda2 * L_diff; x' comes from the frozen clone at the same z, c and jitter."""
    start = time.perf_counter()
    w = _style(state.live, _draw_latent(state, config))
    planes = triplane_graph(state.live, w)
    view = _draw_view(state, config)
    image, _, _ = render_graph(state.live, planes, view.camera, config.ray_steps, view.jitter())
    frozen_planes = triplane_forward(state.frozen, LatentCode(w, "style")).planes
    x_frozen = render_graph(
        state.frozen, frozen_planes, view.camera, config.ray_steps, view.jitter()
    )[0].value
    sds = sds_grad(
        image.value,
        priors.prompt,
        view.t,
        view.eps,
        priors.score.schedule,
        priors.score,
        config.cfg_scale,
    )
    mask, history = gradient_mask(sds.gamma, state.mask_history if config.mask_ema else None)
    state.mask_history = history if config.mask_ema else None
    l_diff = diffusion_guided_recon(image, x_frozen, sds.gamma, view.t, mask)
    loss = composite_objective(
        "editing", {"sds": sds_surrogate(image, sds), "diff": l_diff}, config.weights
    )
    _apply(state, loss)
    return StepMetrics(
        step=state.step,
        mode="editing",
        loss_sds_gradnorm=float(np.linalg.norm(sds.grad)),
        l_diff=float(l_diff.value),
        elapsed_ms=_elapsed(config, start),
    )


def avatar_step(state: TrainState, config: TrainConfig, priors: Priors) -> StepMetrics:
    """One step of L_sds + lambda3 * L_mstv at the fixed style code, training triplane_gen and T_l."""
    if state.style is None:
        raise ValueError("avatar step needs a style code from latent_search")
    start = time.perf_counter()
    planes = triplane_graph(state.live, state.style, state.residual)
    view = _draw_view(state, config)
    image, _, _ = render_graph(state.live, planes, view.camera, config.ray_steps, view.jitter())
    sds = sds_grad(
        image.value,
        priors.prompt,
        view.t,
        view.eps,
        priors.score.schedule,
        priors.score,
        config.cfg_scale,
    )
    l_mstv: Union[Node, float] = 0.0
    if state.residual is not None:
        l_mstv = multiscale_tv(leaf(state.residual.buffer), config.mstv_levels)
    loss = composite_objective(
        "avatar", {"sds": sds_surrogate(image, sds), "mstv": l_mstv}, config.weights
    )
    _apply(state, loss)
    return StepMetrics(
        step=state.step,
        mode="avatar",
        loss_sds_gradnorm=float(np.linalg.norm(sds.grad)),
        l_mstv=float(l_mstv.value) if isinstance(l_mstv, Node) else l_mstv,
        elapsed_ms=_elapsed(config, start),
    )


STEPS: Mapping[str, Callable[[TrainState, TrainConfig, Priors], StepMetrics]] = {
    "adaptation": adapt_step,
    "editing": edit_step,
    "avatar": avatar_step,
}


def select_candidate(losses: Sequence[float]) -> int:
    """Index of the smallest loss, first on ties.

    >>> select_candidate([0.9, 0.2, 0.5])
    1
    """
    if not losses:
        raise ValueError("need at least one candidate")
    return int(np.argmin(np.asarray(losses)))


def front_camera(config: TrainConfig) -> Camera:
    return config.camera(0.0, 0.0)


def candidate_loss(
    params: GeneratorParams, z: Array, embedding: EmbeddingPrior, prompt: str, config: TrainConfig
) -> float:
    triplane = triplane_forward(params, LatentCode(_style(params, z), "style"))
    image, _ = render(params, triplane, front_camera(config), config.ray_steps)
    return clip_loss(embedding, image, prompt)


@dataclasses.dataclass
class LatentSearchResult:
    index: int
    losses: list[float]
    z: Array
    style: Array
    mapping_losses: list[float]


def latent_search(
    params: GeneratorParams,
    prompt: str,
    config: TrainConfig,
    embedding: EmbeddingPrior,
    rng: np.random.Generator,
) -> LatentSearchResult:
    """Pick the best of k noise codes by clip loss at the front view, then finetune the mapping alone."""
    candidates = rng.standard_normal((config.latent_candidates, params.config.latent_dim))
    losses = [candidate_loss(params, z, embedding, prompt, config) for z in candidates]
    index = select_candidate(losses)
    logger.info("latent search picked candidate %d of %d (loss %.4f)", index, len(losses), losses[index])
    z = candidates[index]
    params.set_trainable(mapping=True)
    buffers = params.mapping.buffers()
    optimizer = OptimizerState(lr=config.mapping_lr)
    camera = front_camera(config)
    mapping_losses = []
    for _ in range(config.mapping_steps):
        planes = triplane_graph(params, mapping_graph(params, z))
        image, _, _ = render_graph(params, planes, camera, config.ray_steps)
        loss = clip_loss_graph(embedding, image, prompt)
        backward(loss, buffers)
        adam_step(optimizer, buffers)
        mapping_losses.append(float(loss.value))
    params.set_trainable()
    return LatentSearchResult(index, losses, z.copy(), _style(params, z), mapping_losses)


def preview_style(state: TrainState, config: TrainConfig) -> Array:
    """The style code shown in snapshots: the avatar's, else a fixed preview latent."""
    if state.style is not None:
        return state.style
    z = np.random.default_rng([config.seed, 1]).standard_normal(state.live.config.latent_dim)
    return _style(state.live, z)


def preview_triplane(
    params: GeneratorParams, style: Array, residual: Optional[Array] = None
) -> TriplaneGrid:
    learnable = None
    if residual is not None:
        learnable = LearnableTriplane(params.config.channels, params.config.resolution)
        learnable.buffer.values = residual.copy()
    return triplane_forward(params, LatentCode(style, "style"), learnable)


def render_preview(
    params: GeneratorParams, triplane: TriplaneGrid, camera: Camera, steps: int
) -> ImageBuffer:
    return render(params, triplane, camera, steps)[0]


def render_settings(config: TrainConfig) -> dict[str, Array]:
    return {
        "render.resolution": np.array(float(config.image_resolution)),
        "render.steps": np.array(float(config.ray_steps)),
        "render.radius": np.array(config.radius),
        "render.fov_y": np.array(config.fov_y),
    }


def snapshot(
    state: TrainState,
    config: TrainConfig,
    directory: Path,
    metrics: Optional[StepMetrics] = None,
) -> list[Path]:
    """Checkpoint, four preview views, and the latest metrics line."""
    directory.mkdir(parents=True, exist_ok=True)
    style = preview_style(state, config)
    extra = {**render_settings(config), "style": style, "step": np.array(float(state.step))}
    residual = None if state.residual is None else state.residual.buffer.values
    if residual is not None:
        extra["residual"] = residual
    checkpoint = directory / "checkpoint.dg3d"
    save_generator(checkpoint, state.live, extra)
    written = [checkpoint]
    triplane = preview_triplane(state.live, style, residual)
    for azimuth in SNAPSHOT_AZIMUTHS:
        image = render_preview(
            state.live, triplane, config.camera(azimuth, 0.0), config.ray_steps
        )
        path = directory / f"view_az{int(azimuth):+04d}.ppm"
        write_ppm(path, image.pixels)
        written.append(path)
    record = metrics.record() if metrics is not None else {"step": state.step}
    path = directory / "metrics.json"
    path.write_text(json.dumps(record) + "\n")
    written.append(path)
    return written


@ch_time_block.decor()
def train(
    mode: Mode,
    params: GeneratorParams,
    config: TrainConfig,
    priors: Priors,
    out_dir: Optional[Path] = None,
    progress: bool = False,
) -> TrainState:
    """Run ``config.steps`` steps of ``mode``, writing metrics.jsonl and snapshots under ``out_dir``."""
    config.validate(priors.score.schedule)
    style = None
    if mode == "avatar":
        with ch_time_block.ctx("latent search", print_start=False):
            style = latent_search(
                params,
                priors.prompt,
                config,
                priors.embedding,
                np.random.default_rng([config.seed, 2]),
            ).style
    state = init_state(params, config, mode, style)
    step = STEPS[mode]
    lines = []
    metrics: Optional[StepMetrics] = None
    for _ in tqdm(range(config.steps), desc=mode, disable=not progress):
        metrics = step(state, config, priors)
        lines.append(metrics.to_json())
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug("%s", lines[-1])
        if out_dir is not None and config.snapshot_every and state.step % config.snapshot_every == 0:
            snapshot(state, config, out_dir / "snapshots" / f"step_{state.step:06d}", metrics)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.jsonl").write_text("".join(line + "\n" for line in lines))
        snapshot(state, config, out_dir / "final", metrics)
    return state


@dataclasses.dataclass
class DistillResult:
    image: Array
    iterates: Array


def distill_image(
    prior: ScorePrior,
    prompt: str,
    shape: tuple[int, int, int],
    steps: int,
    lr: float = 1e-2,
    t_min: int = 300,
    t_max: int = 800,
    cfg_scale: float = 1.0,
    seed: int = 0,
    init: float = 0.5,
    samples: int = 1,
    lr_decay: Literal["constant", "linear"] = "constant",
) -> DistillResult:
    """SDS on a directly parameterized image; the image is its own generator.

    Each step averages ``samples`` draws of (t, eps). With ``lr_decay="linear"``
    the learning rate falls from ``lr`` toward zero over the run.
    """
    if samples < 1:
        raise ValueError(f"need at least one noise draw per step, got {samples}")
    if lr_decay not in ("constant", "linear"):
        raise ValueError(f"unknown lr_decay {lr_decay!r}")
    buffer = ParamBuffer("image", np.full(shape, init))
    optimizer = OptimizerState(lr=lr)
    rng = np.random.default_rng(seed)
    iterates = []
    for step in range(steps):
        draws = [
            sds_grad(
                buffer.values,
                prompt,
                int(rng.integers(t_min, t_max + 1)),
                rng.standard_normal(shape),
                prior.schedule,
                prior,
                cfg_scale,
            )
            for _ in range(samples)
        ]
        grad = np.mean([draw.grad for draw in draws], axis=0)
        sds = dataclasses.replace(draws[0], grad=grad, gamma=np.abs(grad))
        backward(sds_surrogate(leaf(buffer), sds), [buffer])
        if lr_decay == "linear":
            optimizer.lr = lr * (1.0 - step / steps)
        adam_step(optimizer, [buffer])
        iterates.append(buffer.values.copy())
    return DistillResult(buffer.values.copy(), np.array(iterates).reshape(steps, *shape))


def render_spread(
    params: GeneratorParams,
    latents: Array,
    camera: Camera,
    steps: int,
    residual: Optional[Array] = None,
) -> float:
    """Mean pairwise L2 distance between renders of ``latents``."""
    images = [
        render_preview(params, preview_triplane(params, _style(params, z), residual), camera, steps)
        .pixels.reshape(-1)
        for z in latents
    ]
    distances = [
        float(np.linalg.norm(a - b)) for a, b in itertools.combinations(images, 2)
    ]
    return float(np.mean(distances)) if distances else 0.0
