"""Score distillation, relative distance, masked reconstruction, total variation."""

from __future__ import annotations

import dataclasses
import logging
from typing import Literal, Mapping, Optional, Union

import numpy as np

from .errors import DegenerateGradientError, DegeneratePairError, NonFiniteError
from .numgrad import (
    Array,
    Node,
    absolute,
    as_node,
    custom_grad,
    getitem,
    pooling_matrix,
    separable_linear,
    sum_,
)
from .priors import NoiseSchedule, ScorePrior, ScoreQuery, add_noise

logger = logging.getLogger("dg3d")

Mode = Literal["adaptation", "editing", "avatar"]

REQUIRED_PARTS: Mapping[str, tuple[str, str]] = {
    "adaptation": ("sds", "dis"),
    "editing": ("sds", "diff"),
    "avatar": ("sds", "mstv"),
}


@dataclasses.dataclass(frozen=True)
class LossWeights:
    relative_distance: float = 1.0
    reconstruction: float = 10.0
    multiscale_tv: float = 0.1

    def __post_init__(self) -> None:
        for field in dataclasses.fields(self):
            if getattr(self, field.name) < 0:
                raise ValueError(f"loss weight {field.name} must be nonnegative")


@dataclasses.dataclass(frozen=True)
class SdsResult:
    grad: Array
    gamma: Array
    noise_pred: Array
    z_t: Array


def sds_grad(
    x: Array,
    prompt: str,
    t: int,
    eps: Array,
    schedule: NoiseSchedule,
    prior: ScorePrior,
    cfg_scale: float = 1.0,
) -> SdsResult:
    """Single-sample w_t (eps_hat - eps) with respect to the image ``x``."""
    z_t = add_noise(x, t, eps, schedule)
    noise_pred = prior.predict_noise(ScoreQuery(z_t, t, prompt, cfg_scale))
    if not np.all(np.isfinite(noise_pred)):
        raise NonFiniteError(f"score prior returned non-finite noise at t={t}", f"t={t}")
    grad = schedule.weight(t) * (noise_pred - eps)
    return SdsResult(grad, np.abs(grad), noise_pred, z_t)


def sds_surrogate(x: Node, result: SdsResult) -> Node:
    return custom_grad(x, result.grad)


def triplane_sq_dist(a: Union[Node, Array], b: Union[Node, Array]) -> Node:
    diff = as_node(a) - as_node(b)
    return sum_(diff * diff)


def relative_distance(
    t_i: Union[Node, Array],
    t_j: Union[Node, Array],
    frozen_i: Array,
    frozen_j: Array,
) -> Node:
    """| ||T'_i - T'_j||^2 / ||T_i - T_j||^2 - 1 |, differentiable in T_i and T_j only."""
    t_i, t_j = as_node(t_i), as_node(t_j)
    shapes = {t_i.shape, t_j.shape, frozen_i.shape, frozen_j.shape}
    if len(shapes) != 1:
        raise ValueError(f"triplane shapes differ: {shapes}")
    denominator = triplane_sq_dist(t_i, t_j)
    if float(denominator.value) < 1e-12:
        raise DegeneratePairError(
            f"finetuned triplanes coincide (squared distance {float(denominator.value):.3g})"
        )
    numerator = float(np.sum((frozen_i - frozen_j) ** 2))
    return absolute(numerator / denominator - 1.0)


def gradient_mask(gamma: Array, previous: Optional[Array] = None, decay: float = 0.95) -> tuple[Array, Array]:
    """(mask, smoothed h) from |SDS gradient| of shape (H, W, C).

    h is the channel mean of gamma normalized by its maximum; mask = 1 - h,
    so the pixel the prior pushes hardest gets mask 0. Passing the previous
    smoothed h averages it with decay ``decay`` before the mask is formed.
    """
    h = gamma.mean(axis=-1)
    peak = float(h.max())
    if not peak > 0.0:
        raise DegenerateGradientError("SDS gradient is zero everywhere")
    h = h / peak
    if previous is not None:
        h = decay * previous + (1.0 - decay) * h
        h = h / float(h.max())
    return 1.0 - h, h


def diffusion_guided_recon(
    x: Union[Node, Array],
    x_frozen: Array,
    gamma: Array,
    t: int,
    mask: Optional[Array] = None,
) -> Node:
    """t * sum(((x - x') * mask)^2), differentiable in ``x`` only."""
    x = as_node(x)
    if x.shape != x_frozen.shape or x.shape != gamma.shape:
        raise ValueError(
            f"shapes differ: x {x.shape}, x' {x_frozen.shape}, gamma {gamma.shape}"
        )
    if mask is None:
        mask, _ = gradient_mask(gamma)
    masked = (x - x_frozen) * mask[..., None]
    return float(t) * sum_(masked * masked)


def _shifted(x: Array, axis: int, start: Optional[int], stop: Optional[int]) -> tuple[slice, ...]:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return tuple(index)


def _tv2d_adjoint(x: Array, axes: tuple[int, int]) -> Array:
    grad = np.zeros_like(x)
    for axis in axes:
        diff = np.diff(x, axis=axis)
        grad[_shifted(x, axis, None, -1)] -= 2.0 * diff
        grad[_shifted(x, axis, 1, None)] += 2.0 * diff
    out: Array = grad / x.size
    return out


def tv2d(plane: Union[Node, Array], axes: tuple[int, int] = (0, 1)) -> Node:
    """Mean over elements of squared forward differences along the two spatial ``axes``.

    >>> float(tv2d(np.array([[[0.0], [1.0]], [[0.0], [1.0]]])).value)
    0.5
    """
    plane = as_node(plane)
    x = plane.value
    axes = (axes[0] % x.ndim, axes[1] % x.ndim)
    value = sum(float(np.sum(np.diff(x, axis=axis) ** 2)) for axis in axes) / x.size
    return Node(value, [(plane, lambda g: g * _tv2d_adjoint(x, axes))], "tv2d")


def downsample(plane: Union[Node, Array], factor: int) -> Node:
    """2-D box average over the last two axes."""
    plane = as_node(plane)
    rows, cols = plane.shape[-2], plane.shape[-1]
    if rows % factor or cols % factor:
        raise ValueError(f"resolution {rows}x{cols} is not divisible by {factor}")
    return separable_linear(
        plane, pooling_matrix(rows, rows // factor), pooling_matrix(cols, cols // factor)
    )


def multiscale_tv(residual: Union[Node, Array], levels: int) -> Node:
    """Sum over levels and over the three planes of tv2d on 2x2-pooled pyramids."""
    residual = as_node(residual)
    if levels < 1:
        raise ValueError(f"need at least one level, got {levels}")
    resolution = residual.shape[-1]
    if resolution % (1 << (levels - 1)):
        raise ValueError(
            f"triplane resolution {resolution} is not divisible by {1 << (levels - 1)}"
        )
    total: Node = as_node(0.0)
    for level in range(levels):
        pooled = downsample(residual, 1 << level) if level else residual
        for k in range(residual.shape[0]):
            total = total + tv2d(getitem(pooled, k), axes=(-2, -1))
    return total


def composite_objective(
    mode: Mode,
    parts: Mapping[str, Union[Node, float]],
    weights: LossWeights = LossWeights(),
) -> Node:
    """L_sds + lambda * L_mode, where the SDS part is a custom-gradient surrogate."""
    if mode not in REQUIRED_PARTS:
        raise ValueError(f"unknown objective {mode!r}")
    for name in REQUIRED_PARTS[mode]:
        if name not in parts:
            raise KeyError(f"{mode} objective is missing part {name!r}")
    weight = {
        "adaptation": weights.relative_distance,
        "editing": weights.reconstruction,
        "avatar": weights.multiscale_tv,
    }[mode]
    sds, extra = (as_node(parts[name]) for name in REQUIRED_PARTS[mode])
    return sds + weight * extra
