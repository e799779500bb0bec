"""Stand-ins for the pretrained networks: diffusion schedule, noise predictor,
text/image embedding, and the image-translation entry point."""

from __future__ import annotations

import dataclasses
import functools
import logging
import math
from typing import TYPE_CHECKING, Literal, Optional, Protocol, Union

import numpy as np

from .errors import BackendError
from .numgrad import (
    Array,
    Node,
    as_node,
    interpolation_matrix,
    pooling_matrix,
    reshape,
    separable_linear,
    sqrt,
    sum_,
)
from .render import DepthMap, ImageBuffer
from .util import hash_text

if TYPE_CHECKING:
    from .backends import TranslationBackend

logger = logging.getLogger("dg3d")

DEFAULT_STRENGTH = {"img2img": 0.6, "inpaint": 0.4}


@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    total: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    weighting: Literal["sds", "uniform"] = "sds"

    def __post_init__(self) -> None:
        if self.total < 1:
            raise ValueError(f"schedule needs at least one step, got {self.total}")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValueError(f"betas must satisfy 0 < start <= end < 1: {self}")
        if self.weighting not in ("sds", "uniform"):
            raise ValueError(f"unknown weighting {self.weighting!r}")

    @functools.cached_property
    def betas(self) -> Array:
        """beta_t for t = 1..total at index t - 1."""
        return np.linspace(self.beta_start, self.beta_end, self.total)

    @functools.cached_property
    def alpha_bars(self) -> Array:
        """alpha_bar_t for t = 0..total, with alpha_bar_0 = 1."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    def check(self, t: int) -> None:
        if not 0 <= t <= self.total:
            raise ValueError(f"timestep {t} outside [0, {self.total}]")

    def alpha_bar(self, t: int) -> float:
        self.check(t)
        return float(self.alpha_bars[t])

    def weight(self, t: int) -> float:
        """w_t: 1 - alpha_bar_t under "sds", 1 under "uniform"."""
        return 1.0 - self.alpha_bar(t) if self.weighting == "sds" else 1.0


def add_noise(x: Array, t: int, eps: Array, schedule: NoiseSchedule) -> Array:
    """z_t = sqrt(alpha_bar_t) x + sqrt(1 - alpha_bar_t) eps."""
    if x.shape != eps.shape:
        raise ValueError(f"image {x.shape} and noise {eps.shape} differ in shape")
    alpha_bar = schedule.alpha_bar(t)
    return math.sqrt(alpha_bar) * x + math.sqrt(1.0 - alpha_bar) * eps


@dataclasses.dataclass(frozen=True)
class ScoreQuery:
    z_t: Array
    t: int
    prompt: str
    cfg_scale: float = 1.0


def gaussian_noise_prediction(
    z_t: Array, alpha_bar: float, mean: Array, variance: float
) -> Array:
    """Minimum-MSE noise estimate when the clean data follow N(mean, variance I)."""
    if variance <= 0:
        raise ValueError(f"target variance must be positive, got {variance}")
    if mean.shape != z_t.shape:
        raise ValueError(f"target mean {mean.shape} does not match z_t {z_t.shape}")
    denominator = alpha_bar * variance + 1.0 - alpha_bar
    out: Array = math.sqrt(1.0 - alpha_bar) * (z_t - math.sqrt(alpha_bar) * mean) / denominator
    return out


def gaussian_marginal_logpdf(
    z_t: Array, alpha_bar: float, mean: Array, variance: float
) -> float:
    """log p_t(z_t) of the noised Gaussian population."""
    spread = alpha_bar * variance + 1.0 - alpha_bar
    diff = z_t - math.sqrt(alpha_bar) * mean
    return float(
        -0.5 * np.sum(diff**2) / spread - 0.5 * diff.size * math.log(2 * math.pi * spread)
    )


def analytic_score(
    query: ScoreQuery, target_mean: Array, target_var: float, schedule: NoiseSchedule
) -> Array:
    if not 1 <= query.t <= schedule.total:
        raise ValueError(f"timestep {query.t} outside [1, {schedule.total}]")
    return gaussian_noise_prediction(
        query.z_t, schedule.alpha_bar(query.t), target_mean, target_var
    )


def cfg_combine(eps_uncond: Array, eps_cond: Array, scale: float) -> Array:
    """eps_u + s (eps_c - eps_u), written so that s = 0 and s = 1 return an input exactly."""
    out: Array = (1.0 - scale) * eps_uncond + scale * eps_cond
    return out


@dataclasses.dataclass(frozen=True)
class PromptSynthesizer:
    """Deterministic prompt-to-image pattern: seeded low-frequency cosines per token."""

    terms: int = 3
    max_frequency: int = 2

    def synthesize(self, prompt: str, height: int, width: int) -> Array:
        tokens = prompt.lower().split()
        if not tokens:
            return np.full((height, width, 3), 0.5)
        ys = (np.arange(height) + 0.5) / height
        xs = (np.arange(width) + 0.5) / width
        grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
        field = np.zeros((height, width, 3))
        for token in tokens:
            rng = np.random.default_rng(hash_text(token))
            for channel in range(3):
                for _ in range(self.terms):
                    fx, fy = rng.integers(0, self.max_frequency + 1, 2)
                    phase = rng.uniform(0.0, 2.0 * math.pi)
                    amplitude = rng.normal(0.0, 0.6)
                    field[..., channel] += amplitude * np.cos(
                        2.0 * math.pi * (fx * grid_x + fy * grid_y) + phase
                    )
        field /= math.sqrt(len(tokens))
        out: Array = np.clip(0.5 + 0.4 * np.tanh(field), 0.05, 0.95)
        return out


class ScorePrior(Protocol):
    schedule: NoiseSchedule

    def predict_noise(self, query: ScoreQuery) -> Array:
        ...


@dataclasses.dataclass
class GaussianScorePrior:
    """Exact noise predictor for per-prompt Gaussian image populations.

    The conditional mean of a prompt is ``targets[prompt]`` when given, else
    the synthesized pattern; the unconditional mean is the empty prompt's.
    """

    schedule: NoiseSchedule = dataclasses.field(default_factory=NoiseSchedule)
    variance: float = 1.0
    synthesizer: PromptSynthesizer = dataclasses.field(default_factory=PromptSynthesizer)
    targets: dict[str, Array] = dataclasses.field(default_factory=dict)

    def target_mean(self, prompt: str, shape: tuple[int, ...]) -> Array:
        if prompt in self.targets:
            target = self.targets[prompt]
            if target.shape != shape:
                raise ValueError(
                    f"target for {prompt!r} has shape {target.shape}, queried {shape}"
                )
            return target
        return self.synthesizer.synthesize(prompt, shape[0], shape[1])

    def predict_noise(self, query: ScoreQuery) -> Array:
        shape = query.z_t.shape
        cond = analytic_score(
            query, self.target_mean(query.prompt, shape), self.variance, self.schedule
        )
        if query.cfg_scale == 1.0:
            return cond
        uncond = analytic_score(
            query, self.target_mean("", shape), self.variance, self.schedule
        )
        return cfg_combine(uncond, cond, query.cfg_scale)

    def expected_gradient(
        self, x: Array, prompt: str, t_min: int, t_max: int, cfg_scale: float = 1.0
    ) -> Array:
        """E over t ~ U{t_min..t_max} and eps ~ N(0, I) of w_t (eps_hat - eps)."""
        target = cfg_combine(
            self.target_mean("", x.shape), self.target_mean(prompt, x.shape), cfg_scale
        )
        coefficient = 0.0
        for t in range(t_min, t_max + 1):
            alpha_bar = self.schedule.alpha_bar(t)
            spread = alpha_bar * self.variance + 1.0 - alpha_bar
            coefficient += (
                self.schedule.weight(t) * math.sqrt(alpha_bar * (1.0 - alpha_bar)) / spread
            )
        coefficient /= t_max - t_min + 1
        out: Array = coefficient * (x - target)
        return out


def _resize_matrix(size_in: int, size_out: int) -> Array:
    if size_in >= size_out and size_in % size_out == 0:
        return pooling_matrix(size_in, size_out)
    return interpolation_matrix(size_in, size_out)


@dataclasses.dataclass
class EmbeddingPrior:
    """Image and text embeddings on the unit sphere.

    Images are resized to ``grid`` x ``grid``, centered on gray, and sent
    through a seeded random projection. Text is a hashed bag of words, or,
    with ``text_mode="synthesized"``, the image embedding of the prompt's
    synthesized pattern, so that rendered colors can align with a prompt.
    """

    dim: int = 32
    seed: int = 0
    grid: int = 8
    text_mode: Literal["hashed", "synthesized"] = "hashed"
    synthesizer: PromptSynthesizer = dataclasses.field(default_factory=PromptSynthesizer)

    @functools.cached_property
    def projection(self) -> Array:
        rng = np.random.default_rng(self.seed)
        size = self.grid * self.grid * 3
        return rng.normal(0.0, 1.0 / math.sqrt(size), (size, self.dim))

    def image_embed_graph(self, image: Union[Node, Array]) -> Node:
        image = as_node(image)
        height, width = image.shape[0], image.shape[1]
        resized = separable_linear(
            image,
            _resize_matrix(height, self.grid),
            _resize_matrix(width, self.grid),
            axes=(0, 1),
        )
        features = reshape(resized - 0.5, (-1,)) @ self.projection
        norm = sqrt(sum_(features * features))
        if float(norm.value) < 1e-12:
            raise ValueError("image embedding has zero norm")
        return features / norm

    def image_embed(self, image: Array) -> Array:
        return self.image_embed_graph(image).value

    def text_embed(self, prompt: str) -> Array:
        if self.text_mode == "synthesized":
            return self.image_embed(self.synthesizer.synthesize(prompt, self.grid, self.grid))
        vector = np.zeros(self.dim)
        for token in prompt.lower().split():
            vector += np.random.default_rng(hash_text(token)).standard_normal(self.dim)
        norm = float(np.linalg.norm(vector))
        if norm < 1e-12:
            raise ValueError(f"text embedding of {prompt!r} has zero norm")
        out: Array = vector / norm
        return out


def clip_loss_graph(prior: EmbeddingPrior, image: Union[Node, Array], prompt: str) -> Node:
    return 1.0 - sum_(prior.image_embed_graph(image) * prior.text_embed(prompt))


def clip_loss(prior: EmbeddingPrior, image: ImageBuffer, prompt: str) -> float:
    """1 - cosine(image_embed(image), text_embed(prompt)), in [0, 2]."""
    return float(clip_loss_graph(prior, image.pixels, prompt).value)


@dataclasses.dataclass
class TranslationRequest:
    image: ImageBuffer
    edge_control: ImageBuffer
    depth_control: DepthMap
    prompt: str
    strength: float
    seed: int = 0
    mask: Optional[Array] = None
    edge_weight: float = 1.0
    depth_weight: float = 1.0

    @property
    def mode(self) -> Literal["img2img", "inpaint"]:
        return "img2img" if self.mask is None else "inpaint"

    def validate(self) -> None:
        resolution = self.image.resolution
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"strength {self.strength} outside [0, 1]")
        if self.edge_control.resolution != resolution:
            raise ValueError(f"edge control {self.edge_control.resolution} vs image {resolution}")
        if self.depth_control.resolution != resolution:
            raise ValueError(f"depth control {self.depth_control.resolution} vs image {resolution}")
        if self.mask is not None:
            if self.mask.shape != resolution:
                raise ValueError(f"mask {self.mask.shape} vs image {resolution}")
            if self.mask.dtype != np.bool_:
                raise ValueError(f"mask must be boolean, got {self.mask.dtype}")

    def sidecar(self) -> dict[str, object]:
        return {
            "mode": self.mode,
            "prompt": self.prompt,
            "strength": self.strength,
            "seed": self.seed,
            "control_weights": {"edge": self.edge_weight, "depth": self.depth_weight},
        }


def translate(backend: TranslationBackend, request: TranslationRequest) -> ImageBuffer:
    """Run ``backend`` on ``request``; in inpainting mode pixels outside the mask are kept."""
    request.validate()
    reply = backend.run(request)
    if reply.pixels.shape != request.image.pixels.shape:
        raise BackendError(
            f"{backend} replied with shape {reply.pixels.shape}, "
            f"expected {request.image.pixels.shape}",
            backend.last_log(),
        )
    if not np.all(np.isfinite(reply.pixels)):
        raise BackendError(f"{backend} replied with non-finite pixels", backend.last_log())
    if request.mask is None:
        return ImageBuffer(reply.pixels.copy())
    return ImageBuffer(np.where(request.mask[..., None], reply.pixels, request.image.pixels))
