"""Explicit mesh extraction, UV unwrapping, texture baking, and progressive texture refinement."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import warnings
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Literal, Optional, Sequence, Union

import charmonium.time_block as ch_time_block
import numpy as np
import numpy.typing as npt
import scipy.ndimage
import scipy.optimize
import skimage.filters
import skimage.measure
import skimage.morphology
import skimage.transform
import trimesh

from .errors import BackendError, EmptyMeshError, InvisibleMeshError, NonFiniteError
from .gan3d import GeneratorParams, TriplaneGrid
from .imageio import write_pgm, write_pgm_u16, write_ppm
from .losses import tv2d
from .numgrad import (
    Array,
    Node,
    ParamBuffer,
    as_node,
    backward,
    leaf,
    reshape,
    sum_,
    weighted_gather,
)
from .priors import DEFAULT_STRENGTH, TranslationRequest, translate
from .render import Camera, DepthMap, ImageBuffer, density_field, depth_to_u16, project

if TYPE_CHECKING:
    from .backends import TranslationBackend

logger = logging.getLogger("dg3d")

IntArray = npt.NDArray[np.int64]
BoolArray = npt.NDArray[np.bool_]
ViewMode = Literal["img2img", "inpaint"]

DEPTH_TOLERANCE = 1e-3
LUMINANCE = np.array([0.299, 0.587, 0.114])


@dataclasses.dataclass
class Mesh:
    vertices: Array
    faces: IntArray
    uv: Optional[Array] = None
    seam: Optional[BoolArray] = None

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if self.uv is not None:
            if self.uv.shape != (len(self.vertices), 2):
                raise ValueError(f"uv of shape {self.uv.shape} for {len(self.vertices)} vertices")
            if self.uv.size and (self.uv.min() < 0.0 or self.uv.max() > 1.0):
                raise ValueError("uv outside [0, 1]^2")

    @staticmethod
    def empty() -> Mesh:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(self.vertices, self.faces, process=False)

    def __str__(self) -> str:
        return f"Mesh {len(self.vertices)} vertices {len(self.faces)} faces"


@dataclasses.dataclass
class TextureAtlas:
    texels: Array
    coverage: Array
    refined_mask: BoolArray

    @staticmethod
    def zeros(resolution: int) -> TextureAtlas:
        if resolution < 2:
            raise ValueError(f"atlas resolution {resolution} must be at least 2")
        return TextureAtlas(
            np.zeros((resolution, resolution, 3)),
            np.zeros((resolution, resolution)),
            np.zeros((resolution, resolution), dtype=bool),
        )

    @property
    def resolution(self) -> int:
        return int(self.texels.shape[0])

    def copy(self) -> TextureAtlas:
        return TextureAtlas(self.texels.copy(), self.coverage.copy(), self.refined_mask.copy())


def default_iso_level(resolution: int) -> float:
    """Density whose opacity over one lattice cell is 0.5."""
    return math.log(2.0) / (2.0 / (resolution - 1))


@ch_time_block.decor()
def marching_cubes(
    field: Callable[[Array], Array], resolution: int = 32, level: Optional[float] = None
) -> Mesh:
    """Isosurface of ``field`` on a resolution^3 lattice over [-1, 1]^3, oriented outward."""
    if resolution < 8:
        raise ValueError(f"lattice resolution {resolution} must be at least 8")
    if level is None:
        level = default_iso_level(resolution)
    axis = np.linspace(-1.0, 1.0, resolution)
    lattice = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    values = np.asarray(field(lattice), dtype=np.float64).reshape((resolution,) * 3)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("density field is not finite on the lattice", "lattice")
    if not values.min() < level < values.max():
        logger.info("level %g not crossed by the field in [%g, %g]", level, values.min(), values.max())
        return Mesh.empty()
    cell = 2.0 / (resolution - 1)
    vertices, faces, _, _ = skimage.measure.marching_cubes(
        values, level, spacing=(cell, cell, cell), allow_degenerate=False
    )
    mesh = trimesh.Trimesh(vertices - 1.0, faces, process=True)
    mesh.update_faces(mesh.nondegenerate_faces())
    mesh.remove_unreferenced_vertices()
    if mesh.is_watertight and mesh.volume < 0:
        mesh.invert()
    return Mesh(np.asarray(mesh.vertices), np.asarray(mesh.faces))


def extract_mesh(
    params: GeneratorParams,
    triplane: TriplaneGrid,
    resolution: int = 32,
    level: Optional[float] = None,
) -> Mesh:
    return marching_cubes(density_field(params, triplane), resolution, level)


def cylinder_unwrap(mesh: Mesh) -> Mesh:
    """u from the angle around +Y, v from height; seam faces get duplicated vertices at u + 1."""
    if mesh.is_empty:
        raise EmptyMeshError("cannot unwrap an empty mesh")
    x, y, z = mesh.vertices.T
    low, high = float(y.min()), float(y.max())
    if high - low <= 0.0:
        raise EmptyMeshError("mesh has zero height; cylinder unwrap is degenerate")
    u = (np.arctan2(x, z) + math.pi) / (2.0 * math.pi)
    v = (y - low) / (high - low)
    vertices = list(mesh.vertices)
    uv = [[float(a), float(b)] for a, b in zip(u, v)]
    seam = [False] * len(vertices)
    shifted: dict[int, int] = {}
    faces = mesh.faces.copy()
    for f, face in enumerate(mesh.faces):
        us = u[face]
        if us.max() - us.min() <= 0.5:
            continue
        for corner, index in enumerate(face):
            if u[index] >= 0.5:
                continue
            if index not in shifted:
                shifted[index] = len(vertices)
                vertices.append(mesh.vertices[index])
                uv.append([min(float(u[index]) + 1.0, 1.0), float(v[index])])
                seam.append(True)
            faces[f, corner] = shifted[index]
    return Mesh(np.array(vertices), faces, np.array(uv), np.array(seam, dtype=bool))


@dataclasses.dataclass
class Footprint:
    """Per-pixel rasterization record; background pixels have zero weights and face -1."""

    index: IntArray
    weights: Array
    face: IntArray
    covered: BoolArray
    view_depth: Array
    distance: Array
    resolution: tuple[int, int]


def _edge(a: Array, b: Array, rows: Array, cols: Array) -> Array:
    out: Array = (b[1] - a[1]) * (rows - a[0]) - (b[0] - a[0]) * (cols - a[1])
    return out


def _scan_triangles(
    screen: Array, depth: Array, faces: IntArray, height: int, width: int
) -> tuple[IntArray, Array, Array]:
    """Z-buffered (face id, perspective-correct barycentrics, view depth) per pixel center.

    ``screen`` holds (row, col) per vertex with pixel centers at integers.
    """
    face_id = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    zbuf = np.full((height, width), np.inf)
    for f, corners in enumerate(faces):
        d = depth[corners]
        if np.any(d <= 1e-9):
            continue
        p = screen[corners]
        if not np.all(np.isfinite(p)):
            continue
        r0 = max(int(math.ceil(p[:, 0].min())), 0)
        r1 = min(int(math.floor(p[:, 0].max())), height - 1)
        c0 = max(int(math.ceil(p[:, 1].min())), 0)
        c1 = min(int(math.floor(p[:, 1].max())), width - 1)
        if r0 > r1 or c0 > c1:
            continue
        area = float(_edge(p[0], p[1], np.array(p[2, 0]), np.array(p[2, 1])))
        if abs(area) < 1e-12:
            continue
        rows, cols = np.mgrid[r0 : r1 + 1, c0 : c1 + 1].astype(np.float64)
        w = np.stack(
            [
                _edge(p[1], p[2], rows, cols),
                _edge(p[2], p[0], rows, cols),
                _edge(p[0], p[1], rows, cols),
            ],
            axis=-1,
        ) / area
        inside = np.all(w >= -1e-9, axis=-1)
        if not inside.any():
            continue
        inv = w / d
        total = inv.sum(axis=-1)
        z = 1.0 / np.where(total > 0, total, np.nan)
        window = zbuf[r0 : r1 + 1, c0 : c1 + 1]
        closer = inside & (z < window)
        window[closer] = z[closer]
        face_id[r0 : r1 + 1, c0 : c1 + 1][closer] = f
        bary[r0 : r1 + 1, c0 : c1 + 1][closer] = inv[closer] / total[closer][:, None]
    return face_id, bary, zbuf


def _texel_footprint(uv: Array, resolution: int) -> tuple[IntArray, Array]:
    """Flat indices and bilinear weights of the 4 texels around each (N, 2) uv."""
    col = np.clip(uv[:, 0], 0.0, 1.0) * (resolution - 1)
    row = (1.0 - np.clip(uv[:, 1], 0.0, 1.0)) * (resolution - 1)
    c0 = np.clip(np.floor(col).astype(np.int64), 0, resolution - 2)
    r0 = np.clip(np.floor(row).astype(np.int64), 0, resolution - 2)
    fc, fr = col - c0, row - r0
    index = np.stack(
        [r0 * resolution + c0, r0 * resolution + c0 + 1, (r0 + 1) * resolution + c0, (r0 + 1) * resolution + c0 + 1],
        axis=-1,
    )
    weights = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=-1)
    return index, weights


def rasterize_footprint(mesh: Mesh, camera: Camera, atlas_resolution: int) -> Footprint:
    if mesh.uv is None:
        raise ValueError("rasterization needs a mesh with uv coordinates")
    height, width = camera.resolution
    screen, depth = project(camera, mesh.vertices)
    face_id, bary, zbuf = _scan_triangles(screen, depth, mesh.faces, height, width)
    covered = face_id >= 0
    corners = mesh.faces[np.maximum(face_id, 0)]
    uv = np.einsum("hwk,hwkc->hwc", bary, mesh.uv[corners])
    points = np.einsum("hwk,hwkc->hwc", bary, mesh.vertices[corners])
    index, weights = _texel_footprint(uv.reshape(-1, 2), atlas_resolution)
    weights = weights * covered.reshape(-1, 1)
    distance = np.where(covered, np.linalg.norm(points - camera.position, axis=-1), 0.0)
    return Footprint(
        index,
        weights,
        face_id,
        covered,
        np.where(covered, zbuf, np.inf),
        distance,
        (height, width),
    )


def fetch(texels: Union[Node, Array], footprint: Footprint) -> Node:
    """Differentiable bilinear atlas lookup through a recorded footprint, (H, W, 3)."""
    texels = as_node(texels)
    resolution = texels.shape[0]
    flat = reshape(texels, (resolution * resolution, texels.shape[-1]))
    colors = weighted_gather(flat, footprint.index, footprint.weights)
    return reshape(colors, (*footprint.resolution, texels.shape[-1]))


def rasterize(
    mesh: Mesh, atlas: TextureAtlas, camera: Camera
) -> tuple[ImageBuffer, DepthMap, Footprint]:
    footprint = rasterize_footprint(mesh, camera, atlas.resolution)
    image = fetch(atlas.texels, footprint).value
    depth = DepthMap(footprint.distance, footprint.covered.astype(np.float64))
    return ImageBuffer(image), depth, footprint


@dataclasses.dataclass
class TexelSurface:
    """Surface point, owning face and validity at every texel center."""

    positions: Array
    face: IntArray
    valid: BoolArray


def texel_surface(mesh: Mesh, resolution: int) -> TexelSurface:
    if mesh.uv is None:
        raise ValueError("texel lookup needs a mesh with uv coordinates")
    screen = np.stack(
        [(1.0 - mesh.uv[:, 1]) * (resolution - 1), mesh.uv[:, 0] * (resolution - 1)], axis=-1
    )
    face_id, bary, _ = _scan_triangles(
        screen, np.ones(len(mesh.vertices)), mesh.faces, resolution, resolution
    )
    valid = face_id >= 0
    corners = mesh.faces[np.maximum(face_id, 0)]
    positions = np.einsum("hwk,hwkc->hwc", bary, mesh.vertices[corners])
    return TexelSurface(np.where(valid[..., None], positions, 0.0), face_id, valid)


@dataclasses.dataclass
class TexelVisibility:
    visible: BoolArray
    rows: Array
    cols: Array
    pixel: tuple[IntArray, IntArray]


def texel_visibility(surface: TexelSurface, footprint: Footprint, camera: Camera) -> TexelVisibility:
    """Texels whose nearest pixel is covered by the same face or lies within the depth tolerance."""
    height, width = footprint.resolution
    shape = surface.valid.shape
    coords, depth = project(camera, surface.positions.reshape(-1, 3))
    coords = np.nan_to_num(coords, nan=-1.0, posinf=-1.0, neginf=-1.0)
    rows, cols = coords[:, 0], coords[:, 1]
    pr, pc = np.round(rows).astype(np.int64), np.round(cols).astype(np.int64)
    inside = (
        surface.valid.reshape(-1) & (depth > 0) & (pr >= 0) & (pr < height) & (pc >= 0) & (pc < width)
    )
    pr, pc = np.clip(pr, 0, height - 1), np.clip(pc, 0, width - 1)
    same_face = footprint.face[pr, pc] == surface.face.reshape(-1)
    near = np.abs(footprint.view_depth[pr, pc] - depth) <= DEPTH_TOLERANCE
    visible = inside & footprint.covered[pr, pc] & (same_face | near)
    return TexelVisibility(
        visible.reshape(shape), rows.reshape(shape), cols.reshape(shape), (pr.reshape(shape), pc.reshape(shape))
    )


def _sample_image(pixels: Array, rows: Array, cols: Array) -> Array:
    return np.stack(
        [
            scipy.ndimage.map_coordinates(pixels[..., ch], [rows, cols], order=1, mode="nearest")
            for ch in range(pixels.shape[-1])
        ],
        axis=-1,
    )


@dataclasses.dataclass
class BlendProblem:
    """sum_views ||rasterize(atlas) - target||^2 / npix + tv_weight * tv2d(atlas)."""

    footprints: list[Footprint]
    targets: list[Array]
    resolution: int
    tv_weight: float

    @staticmethod
    def build(
        mesh: Mesh,
        views: Sequence[tuple[Camera, ImageBuffer]],
        resolution: int,
        tv_weight: float,
    ) -> BlendProblem:
        if not views:
            raise ValueError("adaptive blend needs at least one view")
        footprints = []
        for camera, image in views:
            if image.resolution != camera.resolution:
                raise ValueError(f"target {image.resolution} does not match {camera}")
            footprints.append(rasterize_footprint(mesh, camera, resolution))
        return BlendProblem(footprints, [image.pixels for _, image in views], resolution, tv_weight)

    def footprint_total(self) -> Array:
        total = np.zeros(self.resolution * self.resolution)
        for footprint in self.footprints:
            total += np.bincount(
                footprint.index.reshape(-1),
                weights=footprint.weights.reshape(-1),
                minlength=total.size,
            )
        return total.reshape(self.resolution, self.resolution)

    def graph(self, texels: Union[Node, Array]) -> Node:
        texels = as_node(texels)
        total: Node = Node(0.0)
        for footprint, target in zip(self.footprints, self.targets):
            residual = fetch(texels, footprint) - target
            total = total + sum_(residual * residual) / float(footprint.covered.size)
        if self.tv_weight:
            total = total + self.tv_weight * tv2d(texels, axes=(0, 1))
        return total

    def value_and_grad(self, flat: Array) -> tuple[float, Array]:
        buffer = ParamBuffer("atlas", flat.reshape(self.resolution, self.resolution, 3))
        loss = self.graph(leaf(buffer))
        backward(loss, [buffer])
        return float(loss.value), buffer.grad.reshape(-1)


@ch_time_block.decor()
def adaptive_blend(
    mesh: Mesh,
    views: Sequence[tuple[Camera, ImageBuffer]],
    resolution: int = 64,
    iters: int = 200,
    tv_weight: float = 0.01,
    history: Optional[list[float]] = None,
) -> TextureAtlas:
    """Texture optimized from zeros to reproduce every view, with L-BFGS-B.

    ``history`` receives the objective after every iteration.
    """
    problem = BlendProblem.build(mesh, views, resolution, tv_weight)
    total = problem.footprint_total()
    if not np.any(total > 0):
        raise InvisibleMeshError("mesh is not visible in any blend view")
    texels = np.zeros((resolution, resolution, 3))
    if iters > 0:
        if history is not None:
            history.append(problem.value_and_grad(texels.reshape(-1))[0])

        def record(xk: Array) -> None:
            if history is not None:
                history.append(problem.value_and_grad(xk)[0])

        result = scipy.optimize.minimize(
            problem.value_and_grad,
            texels.reshape(-1),
            jac=True,
            method="L-BFGS-B",
            callback=record,
            options={"maxiter": iters},
        )
        texels = result.x.reshape(resolution, resolution, 3)
        logger.info("adaptive blend: %s after %d iterations", result.message, result.nit)
    return TextureAtlas(
        texels, (total > 0).astype(np.float64), np.zeros((resolution, resolution), dtype=bool)
    )


def atlas_from_image(image: Array, mesh: Mesh, resolution: int) -> TextureAtlas:
    """Atlas holding an existing texture image, covered where the mesh owns texels."""
    texels = skimage.transform.resize(image[..., :3], (resolution, resolution, 3), order=1)
    coverage = texel_surface(mesh, resolution).valid.astype(np.float64)
    return TextureAtlas(texels, coverage, np.zeros((resolution, resolution), dtype=bool))


def backproject_naive(
    mesh: Mesh, views: Sequence[tuple[Camera, ImageBuffer]], resolution: int = 64
) -> TextureAtlas:
    """Per-view last-write texel assignment from the visible views."""
    atlas = TextureAtlas.zeros(resolution)
    surface = texel_surface(mesh, resolution)
    for camera, image in views:
        footprint = rasterize_footprint(mesh, camera, resolution)
        vis = texel_visibility(surface, footprint, camera)
        colors = _sample_image(image.pixels, vis.rows[vis.visible], vis.cols[vis.visible])
        atlas.texels[vis.visible] = colors
        atlas.coverage[vis.visible] = 1.0
    return atlas


def seam_band_tv(texels: Array, band: BoolArray) -> float:
    """Mean squared difference between 4-neighbour texels that both lie in ``band``."""
    total, count = 0.0, 0
    for axis in (0, 1):
        diff = np.diff(texels, axis=axis)
        both = np.logical_and(
            np.take(band, range(band.shape[axis] - 1), axis=axis),
            np.take(band, range(1, band.shape[axis]), axis=axis),
        )
        total += float(np.sum(diff[both] ** 2))
        count += int(both.sum())
    return total / count if count else 0.0


def edge_map(image: ImageBuffer, low: float = 0.1, high: float = 0.2) -> ImageBuffer:
    """Binary (H, W, 1) edges: Sobel magnitude, non-maximum suppression, hysteresis."""
    if low > high:
        raise ValueError(f"low threshold {low} above high threshold {high}")
    pixels = image.pixels
    gray = pixels[..., :3] @ LUMINANCE if pixels.shape[-1] >= 3 else pixels[..., 0]
    grad_row = scipy.ndimage.sobel(gray, axis=0, mode="nearest") / 4.0
    grad_col = scipy.ndimage.sobel(gray, axis=1, mode="nearest") / 4.0
    magnitude = np.hypot(grad_row, grad_col)
    padded = np.pad(magnitude, 1, mode="constant")
    height, width = gray.shape

    def neighbour(dr: int, dc: int) -> Array:
        out: Array = padded[1 + dr : 1 + dr + height, 1 + dc : 1 + dc + width]
        return out

    angle = (np.degrees(np.arctan2(grad_row, grad_col)) + 180.0) % 180.0
    sector = (np.round(angle / 45.0).astype(np.int64)) % 4
    thin = np.zeros_like(magnitude)
    for index, (dr, dc) in enumerate([(0, 1), (1, 1), (1, 0), (1, -1)]):
        keep = (
            (sector == index)
            & (magnitude > neighbour(-dr, -dc))
            & (magnitude >= neighbour(dr, dc))
        )
        thin[keep] = magnitude[keep]
    edges = skimage.filters.apply_hysteresis_threshold(thin, low, high)
    return ImageBuffer(edges.astype(np.float64)[..., None])


def dilate_mask(mask: BoolArray, radius: int) -> BoolArray:
    if radius <= 0:
        return mask.copy()
    out: BoolArray = scipy.ndimage.binary_dilation(mask, structure=skimage.morphology.disk(radius))
    return out


@dataclasses.dataclass(frozen=True)
class ScheduledView:
    camera: Camera
    mode: ViewMode
    strength: float
    azimuth: float


@dataclasses.dataclass(frozen=True)
class RefineSchedule:
    views: tuple[ScheduledView, ...]
    k: int
    j: int
    dilation_radius: int


def _visit_order(azimuths: Sequence[float]) -> list[float]:
    """Front first, then increasing |azimuth| with the positive side before the negative.

    >>> _visit_order([-20.0, 0.0, 20.0])
    [0.0, 20.0, -20.0]
    """
    return sorted(azimuths, key=lambda a: (abs(a), a < 0))


def build_schedule(
    k: int = 1,
    j: int = 1,
    elevation_span: tuple[float, float] = (-15.0, 15.0),
    strengths: Optional[dict[str, float]] = None,
    dilation: int = 5,
    camera: Camera = Camera(0.0),
    azimuths: Optional[Sequence[float]] = None,
    all_img2img: bool = False,
) -> RefineSchedule:
    """2k+2 azimuths by j elevations, azimuth-major, front view first.

    >>> [view.azimuth for view in build_schedule(1, 1).views]
    [0.0, 90.0, -90.0, 180.0]
    """
    if k < 0 or j < 1:
        raise ValueError(f"need k >= 0 and j >= 1, got k={k}, j={j}")
    strengths = {**DEFAULT_STRENGTH, **(strengths or {})}
    if azimuths is None:
        spacing = 360.0 / (2 * k + 2)
        azimuths = [m * spacing for m in range(k + 2)] + [-m * spacing for m in range(1, k + 1)]
    low, high = elevation_span
    center = 0.5 * (low + high)
    elevations = [center] if j == 1 else list(np.linspace(low, high, j))
    elevations = sorted(elevations, key=lambda e: (abs(e - center), e))
    views = []
    for azimuth in _visit_order([float(a) for a in azimuths]):
        for elevation in elevations:
            first = not views
            mode: ViewMode = "img2img" if first or all_img2img else "inpaint"
            views.append(
                ScheduledView(
                    dataclasses.replace(camera, azimuth=azimuth, elevation=float(elevation)),
                    mode,
                    strengths[mode],
                    azimuth,
                )
            )
    return RefineSchedule(tuple(views), k, j, dilation)


def project_refined(
    mesh: Mesh,
    atlas: TextureAtlas,
    camera: Camera,
    refined: ImageBuffer,
    region: BoolArray,
    surface: Optional[TexelSurface] = None,
) -> TextureAtlas:
    """Move visible texels inside ``region`` by the refined-minus-rendered image at their projection."""
    if refined.resolution != camera.resolution:
        raise ValueError(f"refined image {refined.resolution} does not match {camera}")
    surface = surface or texel_surface(mesh, atlas.resolution)
    image, _, footprint = rasterize(mesh, atlas, camera)
    vis = texel_visibility(surface, footprint, camera)
    update = vis.visible & region[vis.pixel]
    out = atlas.copy()
    delta = refined.pixels - image.pixels
    out.texels[update] += _sample_image(delta, vis.rows[update], vis.cols[update])
    out.refined_mask |= update
    out.coverage[update] = 1.0
    return out


@dataclasses.dataclass(frozen=True)
class RefineSettings:
    atlas_resolution: int = 64
    blend_iters: int = 200
    tv_weight: float = 0.01
    edge_low: float = 0.1
    edge_high: float = 0.2
    blend: Literal["adaptive", "naive"] = "adaptive"
    seed: int = 0


@dataclasses.dataclass
class RefineResult:
    final: TextureAtlas
    stages: list[TextureAtlas]
    refined: list[ImageBuffer]
    masks: list[Optional[BoolArray]]


def unrefined_mask(
    atlas: TextureAtlas, vis: TexelVisibility, resolution: tuple[int, int], radius: int
) -> BoolArray:
    """Pixels hit by visible texels that are not refined yet, dilated by a disk of ``radius``."""
    pending = vis.visible & ~atlas.refined_mask
    mask = np.zeros(resolution, dtype=bool)
    mask[vis.pixel[0][pending], vis.pixel[1][pending]] = True
    return dilate_mask(mask, radius)


def blend_views(
    mesh: Mesh, views: Sequence[tuple[Camera, ImageBuffer]], settings: RefineSettings
) -> TextureAtlas:
    if settings.blend == "naive":
        return backproject_naive(mesh, views, settings.atlas_resolution)
    return adaptive_blend(
        mesh, views, settings.atlas_resolution, settings.blend_iters, settings.tv_weight
    )


def _dump_partial(directory: Path, atlas: TextureAtlas, request: TranslationRequest) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    write_ppm(directory / "atlas.ppm", atlas.texels)
    write_pgm(directory / "refined_mask.pgm", atlas.refined_mask.astype(np.float64))
    write_ppm(directory / "image.ppm", request.image.pixels)
    write_ppm(directory / "edge.ppm", request.edge_control.pixels)
    if request.mask is not None:
        write_pgm(directory / "mask.pgm", request.mask.astype(np.float64))
    (directory / "request.json").write_text(json.dumps(request.sidecar(), indent=2))


@ch_time_block.decor()
def progressive_refine(
    mesh: Mesh,
    atlas0: TextureAtlas,
    schedule: RefineSchedule,
    backend: TranslationBackend,
    prompt: str,
    settings: RefineSettings = RefineSettings(),
    dump_dir: Optional[Path] = None,
) -> RefineResult:
    """Render, translate, and project each scheduled view in turn, then re-blend the refined views."""
    surface = texel_surface(mesh, atlas0.resolution)
    atlas = atlas0.copy()
    stages = [atlas.copy()]
    refined_views: list[ImageBuffer] = []
    masks: list[Optional[BoolArray]] = []
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)
        write_ppm(dump_dir / "U_0.ppm", atlas.texels)
    for i, view in enumerate(schedule.views):
        camera = view.camera
        image, depth, footprint = rasterize(mesh, atlas, camera)
        edges = edge_map(image, settings.edge_low, settings.edge_high)
        vis = texel_visibility(surface, footprint, camera)
        mask = None
        region = np.ones(camera.resolution, dtype=bool)
        if view.mode == "inpaint":
            mask = unrefined_mask(atlas, vis, camera.resolution, schedule.dilation_radius)
            if not mask.any():
                warnings.warn(f"view {i} ({camera}) has nothing left to refine")
            region = mask
        request = TranslationRequest(
            image, edges, depth, prompt, view.strength, seed=settings.seed + i, mask=mask
        )
        try:
            refined = translate(backend, request)
        except BackendError:
            if dump_dir is not None:
                _dump_partial(dump_dir / "partial", atlas, request)
            raise
        atlas = project_refined(mesh, atlas, camera, refined, region, surface)
        stages.append(atlas.copy())
        refined_views.append(refined)
        masks.append(mask)
        if dump_dir is not None:
            prefix = dump_dir / f"view_{i:02d}"
            write_ppm(prefix.with_name(prefix.name + "_render.ppm"), image.pixels)
            write_ppm(prefix.with_name(prefix.name + "_refined.ppm"), refined.pixels)
            write_ppm(prefix.with_name(prefix.name + "_edge.ppm"), edges.pixels)
            write_pgm_u16(prefix.with_name(prefix.name + "_depth.pgm"), depth_to_u16(depth, camera))
            if mask is not None:
                write_pgm(prefix.with_name(prefix.name + "_mask.pgm"), mask.astype(np.float64))
            write_ppm(dump_dir / f"U_{i + 1}.ppm", atlas.texels)
    final = blend_views(
        mesh,
        [(view.camera, image) for view, image in zip(schedule.views, refined_views)],
        settings,
    )
    final.coverage = np.maximum(final.coverage, atlas.refined_mask.astype(np.float64))
    final.refined_mask = atlas.refined_mask.copy()
    if dump_dir is not None:
        write_ppm(dump_dir / "final.ppm", final.texels)
    return RefineResult(final, stages, refined_views, masks)
