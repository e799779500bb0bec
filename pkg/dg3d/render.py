"""Volume rendering of triplanes: cameras, rays, feature lookup, compositing."""

from __future__ import annotations

import concurrent.futures
import dataclasses
import logging
import math
from typing import Optional, Union

import numpy as np

from .gan3d import MLP, GeneratorParams, TriplaneGrid
from .numgrad import (
    Array,
    Node,
    as_node,
    const,
    cumsum,
    exp,
    getitem,
    grid_sample,
    reshape,
    sigmoid,
    softplus,
    sum_,
)
from .util import thread_count

logger = logging.getLogger("dg3d")

BOUND_RADIUS = math.sqrt(3.0)
_CHUNK_RAYS = 1024
# (column axis, row axis) of each plane in XY, XZ, YZ order
PLANE_AXES = ((0, 1), (0, 2), (1, 2))


def normalize_azimuth(azimuth: float) -> float:
    """Map to [-180, 180).

    >>> normalize_azimuth(180.0), normalize_azimuth(360.0), normalize_azimuth(-190.0)
    (-180.0, 0.0, 170.0)
    """
    return float((azimuth + 180.0) % 360.0 - 180.0)


@dataclasses.dataclass(frozen=True)
class Camera:
    azimuth: float
    elevation: float = 0.0
    radius: float = 2.7
    fov_y: float = 30.0
    resolution: tuple[int, int] = (64, 64)

    def __post_init__(self) -> None:
        object.__setattr__(self, "azimuth", normalize_azimuth(self.azimuth))
        if not abs(self.elevation) < 90.0:
            raise ValueError(f"elevation {self.elevation} must lie in (-90, 90)")
        if self.resolution[0] < 1 or self.resolution[1] < 1:
            raise ValueError(f"resolution {self.resolution} must be at least 1x1")
        if self.radius <= BOUND_RADIUS:
            raise ValueError(f"camera radius {self.radius} is inside the scene bounds")

    @property
    def position(self) -> Array:
        az, el = math.radians(self.azimuth), math.radians(self.elevation)
        return self.radius * np.array(
            [math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)]
        )

    def basis(self) -> tuple[Array, Array, Array]:
        """(right, up, forward) unit vectors; the camera looks at the origin with +Y up."""
        forward = -self.position / np.linalg.norm(self.position)
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        return right, up, forward

    def with_resolution(self, resolution: tuple[int, int]) -> Camera:
        return dataclasses.replace(self, resolution=resolution)

    def __str__(self) -> str:
        return f"Camera az={self.azimuth:g} el={self.elevation:g}"


@dataclasses.dataclass
class ImageBuffer:
    """H x W x C floats; values are clamped to [0, 1] only at export."""

    pixels: Array

    @property
    def resolution(self) -> tuple[int, int]:
        return (int(self.pixels.shape[0]), int(self.pixels.shape[1]))


@dataclasses.dataclass
class DepthMap:
    depth: Array
    coverage: Array

    @property
    def resolution(self) -> tuple[int, int]:
        return (int(self.depth.shape[0]), int(self.depth.shape[1]))


def depth_range(camera: Camera) -> tuple[float, float]:
    return camera.radius - BOUND_RADIUS, camera.radius + BOUND_RADIUS


def depth_to_u16(depth: DepthMap, camera: Camera) -> Array:
    """Linear map of [near, far] to [0, 65535]; background reads 65535."""
    near, far = depth_range(camera)
    scaled = np.clip((depth.depth - near) / (far - near), 0.0, 1.0) * 65535.0
    return np.where(depth.coverage > 0.5, np.round(scaled), 65535.0)


def ray_grid(camera: Camera) -> tuple[Array, Array]:
    """Per-pixel (origins, unit directions), each of shape (H, W, 3)."""
    if not 0.0 < camera.fov_y < 180.0:
        raise ValueError(f"fov_y {camera.fov_y} must lie in (0, 180)")
    height, width = camera.resolution
    right, up, forward = camera.basis()
    tan_half = math.tan(math.radians(camera.fov_y) / 2.0)
    aspect = width / height
    xs = ((np.arange(width) + 0.5) / width * 2.0 - 1.0) * tan_half * aspect
    ys = (1.0 - (np.arange(height) + 0.5) / height * 2.0) * tan_half
    directions = (
        forward[None, None, :]
        + xs[None, :, None] * right[None, None, :]
        + ys[:, None, None] * up[None, None, :]
    )
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.position, directions.shape).copy()
    return origins, directions


def project(camera: Camera, points: Array) -> tuple[Array, Array]:
    """Continuous (row, col) pixel coordinates and view depth of world points."""
    height, width = camera.resolution
    right, up, forward = camera.basis()
    rel = points - camera.position
    depth = rel @ forward
    tan_half = math.tan(math.radians(camera.fov_y) / 2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_ndc = (rel @ right) / (depth * tan_half * width / height)
        y_ndc = (rel @ up) / (depth * tan_half)
    col = (x_ndc + 1.0) * 0.5 * width - 0.5
    row = (1.0 - y_ndc) * 0.5 * height - 0.5
    return np.stack([row, col], axis=-1), depth


def sphere_bounds(origins: Array, directions: Array) -> tuple[Array, Array, Array]:
    """(near, far, hit) of each ray against the sphere enclosing [-1, 1]^3."""
    b = np.sum(origins * directions, axis=-1)
    c = np.sum(origins * origins, axis=-1) - BOUND_RADIUS**2
    disc = b * b - c
    hit = disc > 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    near = np.where(hit, np.maximum(-b - root, 0.0), 0.0)
    far = np.where(hit, -b + root, 0.0)
    return near, far, hit


def sample_depths(
    near: Array, far: Array, steps: int, jitter: Optional[Array]
) -> tuple[Array, Array]:
    """Stratified depths (rays, steps) and their bin widths; ``jitter=None`` takes midpoints."""
    width = (far - near) / steps
    offsets = np.full((near.shape[0], steps), 0.5) if jitter is None else jitter
    t = near[:, None] + (np.arange(steps)[None, :] + offsets) * width[:, None]
    delta = np.broadcast_to(width[:, None], t.shape).copy()
    return t, delta


def sample_triplane(planes: Union[Node, Array], points: Union[Node, Array]) -> Node:
    """Sum of bilinear XY, XZ, YZ samples for (N, 3) points; zero outside [-1, 1]^3."""
    planes, points = as_node(planes), as_node(points)
    inside = np.all(np.abs(points.value) <= 1.0, axis=-1).astype(np.float64)
    features: Optional[Node] = None
    for k, (col_axis, row_axis) in enumerate(PLANE_AXES):
        uv = getitem(points, (slice(None), [col_axis, row_axis]))
        sampled = grid_sample(getitem(planes, k), uv)
        features = sampled if features is None else features + sampled
    assert features is not None
    return features * inside[:, None]


def decode(decoder: MLP, features: Node, inside: Array) -> tuple[Node, Node]:
    """Density (N,) after softplus, masked outside the cube, and color (N, 3) after sigmoid."""
    raw = decoder.graph(features)
    sigma = softplus(getitem(raw, (slice(None), 0))) * inside
    rgb = sigmoid(getitem(raw, (slice(None), slice(1, 4))))
    return sigma, rgb


def composite(
    sigma: Union[Node, Array],
    rgb: Union[Node, Array],
    delta: Array,
    t: Array,
) -> tuple[Node, Node, Node]:
    """Emission-absorption along the last sample axis.

    ``sigma``, ``delta``, ``t`` are (..., S); ``rgb`` is (..., S, C). Returns
    color (..., C), opacity (...), and expected termination depth (...).
    """
    sigma, rgb = as_node(sigma), as_node(rgb)
    axis = sigma.value.ndim - 1
    tau = sigma * delta
    transmittance = exp(-(cumsum(tau, axis) - tau))
    alpha = 1.0 - exp(-tau)
    weights = transmittance * alpha
    shape = weights.shape
    color = sum_(reshape(weights, (*shape, 1)) * rgb, axis)
    opacity = sum_(weights, axis)
    depth = sum_(weights * t, axis)
    return color, opacity, depth


def composite_weights(sigma: Array, delta: Array) -> Array:
    tau = sigma * delta
    transmittance = np.exp(-(np.cumsum(tau, axis=-1) - tau))
    weights: Array = transmittance * (1.0 - np.exp(-tau))
    return weights


def render_rays(
    decoder: MLP,
    planes: Union[Node, Array],
    origins: Array,
    directions: Array,
    steps: int,
    jitter: Optional[Array],
) -> tuple[Node, Node, Node]:
    """Render (P,) rays; returns color (P, 3), opacity (P,), depth (P,)."""
    if steps < 2:
        raise ValueError(f"need at least 2 samples per ray, got {steps}")
    near, far, _ = sphere_bounds(origins, directions)
    t, delta = sample_depths(near, far, steps, jitter)
    points = origins[:, None, :] + t[..., None] * directions[:, None, :]
    flat = points.reshape(-1, 3)
    inside = np.all(np.abs(flat) <= 1.0, axis=-1).astype(np.float64)
    features = sample_triplane(planes, flat)
    sigma, rgb = decode(decoder, features, inside)
    rays = origins.shape[0]
    return composite(
        reshape(sigma, (rays, steps)), reshape(rgb, (rays, steps, 3)), delta, t
    )


def _jitter(
    rng: Optional[np.random.Generator], rays: int, steps: int
) -> Optional[Array]:
    return None if rng is None else rng.uniform(0.0, 1.0, (rays, steps))


def render_graph(
    params: GeneratorParams,
    planes: Union[Node, Array],
    camera: Camera,
    steps: int,
    rng: Optional[np.random.Generator] = None,
) -> tuple[Node, Node, Node]:
    """Differentiable render: image (H, W, 3), coverage (H, W), depth (H, W) nodes."""
    height, width = camera.resolution
    origins, directions = ray_grid(camera)
    rays = height * width
    color, opacity, depth = render_rays(
        params.decoder,
        planes,
        origins.reshape(-1, 3),
        directions.reshape(-1, 3),
        steps,
        _jitter(rng, rays, steps),
    )
    return (
        reshape(color, (height, width, 3)),
        reshape(opacity, (height, width)),
        reshape(depth, (height, width)),
    )


def render(
    params: GeneratorParams,
    triplane: Union[TriplaneGrid, Array],
    camera: Camera,
    steps: int,
    rng: Optional[np.random.Generator] = None,
) -> tuple[ImageBuffer, DepthMap]:
    """Forward-only render, chunked over rays and spread over ``DG3D_THREADS`` threads.

    Without ``rng`` every ray samples bin midpoints.
    """
    planes = triplane.planes if isinstance(triplane, TriplaneGrid) else triplane
    decoder = params.decoder.frozen()
    height, width = camera.resolution
    origins, directions = ray_grid(camera)
    origins, directions = origins.reshape(-1, 3), directions.reshape(-1, 3)
    rays = height * width
    jitter = _jitter(rng, rays, steps)
    planes_node = const(planes)
    starts = list(range(0, rays, _CHUNK_RAYS))

    def work(start: int) -> tuple[Array, Array, Array]:
        stop = min(start + _CHUNK_RAYS, rays)
        color, opacity, depth = render_rays(
            decoder,
            planes_node,
            origins[start:stop],
            directions[start:stop],
            steps,
            None if jitter is None else jitter[start:stop],
        )
        return color.value, opacity.value, depth.value

    with concurrent.futures.ThreadPoolExecutor(max_workers=thread_count()) as pool:
        results = list(pool.map(work, starts))
    color = np.concatenate([result[0] for result in results]).reshape(height, width, 3)
    opacity = np.concatenate([result[1] for result in results]).reshape(height, width)
    depth = np.concatenate([result[2] for result in results]).reshape(height, width)
    return ImageBuffer(color), DepthMap(depth, opacity)


def density_field(params: GeneratorParams, triplane: TriplaneGrid) -> "DensityField":
    return DensityField(params.decoder.frozen(), triplane.planes)


@dataclasses.dataclass
class DensityField:
    """Callable sampler of decoded density at (..., 3) world points."""

    decoder: MLP
    planes: Array

    def __call__(self, points: Array) -> Array:
        flat = points.reshape(-1, 3)
        inside = np.all(np.abs(flat) <= 1.0, axis=-1).astype(np.float64)
        out = np.empty(flat.shape[0])
        for start in range(0, flat.shape[0], 1 << 15):
            chunk = slice(start, start + (1 << 15))
            features = sample_triplane(self.planes, flat[chunk])
            sigma, _ = decode(self.decoder, features, inside[chunk])
            out[chunk] = sigma.value
        return out.reshape(points.shape[:-1])
