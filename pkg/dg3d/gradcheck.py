"""Finite-difference checks of every differentiable operation, on tiny inputs."""

from __future__ import annotations

import dataclasses
import logging
from typing import Callable

import charmonium.time_block as ch_time_block
import numpy as np
from termcolor import colored
from tqdm import tqdm

from .gan3d import GeneratorConfig, GeneratorParams, mapping_graph, triplane_graph
from .losses import (
    diffusion_guided_recon,
    multiscale_tv,
    relative_distance,
    sds_grad,
    sds_surrogate,
    tv2d,
)
from .meshtex import BlendProblem, Mesh, fetch, rasterize_footprint
from .numgrad import FdReport, Node, ParamBuffer, backward, fd_report, leaf, sum_
from .priors import EmbeddingPrior, GaussianScorePrior, clip_loss_graph
from .render import Camera, ImageBuffer, composite, decode, render_graph, sample_triplane

logger = logging.getLogger("dg3d")

Setup = Callable[[np.random.Generator], tuple[Callable[[ParamBuffer], Node], ParamBuffer]]


@dataclasses.dataclass
class CheckResult:
    name: str
    max_error: float
    worst_point: int
    worst_index: tuple[int, ...]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def __str__(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return (
            f"{status} {self.name:<28} max rel err {self.max_error:.2e}"
            f" at point {self.worst_point} {list(self.worst_index)}"
        )


def _tiny_generator(rng: np.random.Generator) -> GeneratorParams:
    config = GeneratorConfig(
        latent_dim=3,
        channels=2,
        resolution=4,
        gen_resolution=2,
        hidden=4,
        decoder_hidden=4,
        seed=int(rng.integers(0, 2**31)),
    )
    params = GeneratorParams.initialize(config)
    params.set_trainable()
    return params


def _quad(rng: np.random.Generator) -> Mesh:
    half = 0.8 + 0.1 * rng.uniform()
    vertices = np.array([[-half, -half, 0.0], [half, -half, 0.0], [half, half, 0.0], [-half, half, 0.0]])
    uv = (vertices[:, :2] + half) / (2 * half)
    return Mesh(vertices, np.array([[0, 1, 2], [0, 2, 3]]), uv)


def _weighted(node: Node, rng: np.random.Generator) -> Node:
    return sum_(node * rng.uniform(0.5, 1.5, node.shape))


def _triplane_sample(rng: np.random.Generator) -> tuple[Callable[[ParamBuffer], Node], ParamBuffer]:
    planes = ParamBuffer("planes", rng.standard_normal((3, 2, 4, 4)))
    points = rng.uniform(-0.9, 0.9, (5, 3))
    coefficients = rng.uniform(0.5, 1.5, (5, 2))
    return lambda b: sum_(sample_triplane(leaf(b), points) * coefficients), planes


def _decoder(rng: np.random.Generator) -> tuple[Callable[[ParamBuffer], Node], ParamBuffer]:
    params = _tiny_generator(rng)
    weight = params.decoder.layers[0].weight
    weight.trainable = True
    features = Node(rng.standard_normal((6, 2)))
    inside = np.ones(6)
    coefficients = rng.uniform(0.5, 1.5, (6, 3))

    def op(_: ParamBuffer) -> Node:
        sigma, rgb = decode(params.decoder, features, inside)
        return sum_(sigma) + sum_(rgb * coefficients)

    return op, weight


def _composite(rng: np.random.Generator) -> tuple[Callable[[ParamBuffer], Node], ParamBuffer]:
    sigma = ParamBuffer("sigma", rng.uniform(0.1, 2.0, (2, 6)))
    rgb = rng.uniform(0.0, 1.0, (2, 6, 3))
    delta = np.full((2, 6), 0.3)
    t = np.cumsum(delta, axis=-1)

    def op(b: ParamBuffer) -> Node:
        color, opacity, depth = composite(leaf(b), rgb, delta, t)
        return _weighted(color, np.random.default_rng(1)) + sum_(opacity) + 0.1 * sum_(depth)

    return op, sigma


def _render(rng: np.random.Generator) -> tuple[Callable[[ParamBuffer], Node], ParamBuffer]:
    params = _tiny_generator(rng)
    planes = ParamBuffer("planes", 0.5 * rng.standard_normal((3, 2, 4, 4)))
    camera = Camera(float(rng.uniform(-180, 180)), float(rng.uniform(-30, 30)), resolution=(3, 3))
    seed = int(rng.integers(0, 2**31))

    def op(b: ParamBuffer) -> Node:
        image, opacity, _ = render_graph(params, leaf(b), camera, 4)
        return _weighted(image, np.random.default_rng(seed)) + sum_(opacity)

    return op, planes


def _triplane_generator(rng: np.random.Generator) -> tuple[Callable[[ParamBuffer], Node], ParamBuffer]:
    params = _tiny_generator(rng)
    weight = params.triplane_gen.layers[0].weight
    weight.trainable = True
    w = rng.standard_normal(3)
    coefficients = rng.uniform(0.5, 1.5, (3, 2, 4, 4))
    return lambda _: sum_(triplane_graph(params, w) * coefficients), weight


def _mapping(rng: np.random.Generator) -> tuple[Callable[[ParamBuffer], Node], ParamBuffer]:
    params = _tiny_generator(rng)
    weight = params.mapping.layers[0].weight
    weight.trainable = True
    z = rng.standard_normal(3)
    coefficients = rng.uniform(0.5, 1.5, 3)
    return lambda _: sum_(mapping_graph(params, z) * coefficients), weight


def _rasterize(rng: np.random.Generator) -> tuple[Callable[[ParamBuffer], Node], ParamBuffer]:
    footprint = rasterize_footprint(_quad(rng), Camera(0.0, resolution=(4, 4)), 4)
    texels = ParamBuffer("texels", rng.uniform(0.0, 1.0, (4, 4, 3)))
    coefficients = rng.uniform(0.5, 1.5, (4, 4, 3))
    return lambda b: sum_(fetch(leaf(b), footprint) * coefficients), texels


def _relative_distance(rng: np.random.Generator) -> tuple[Callable[[ParamBuffer], Node], ParamBuffer]:
    t_i = ParamBuffer("t_i", rng.standard_normal((3, 1, 2, 2)))
    t_j = rng.standard_normal((3, 1, 2, 2))
    frozen_i = rng.standard_normal((3, 1, 2, 2))
    frozen_j = frozen_i + 3.0 * rng.standard_normal((3, 1, 2, 2))
    return lambda b: relative_distance(leaf(b), t_j, frozen_i, frozen_j), t_i


def _reconstruction(rng: np.random.Generator) -> tuple[Callable[[ParamBuffer], Node], ParamBuffer]:
    x = ParamBuffer("x", rng.uniform(0.0, 1.0, (2, 2, 3)))
    x_frozen = rng.uniform(0.0, 1.0, (2, 2, 3))
    gamma = rng.uniform(0.1, 1.0, (2, 2, 3))
    t = int(rng.integers(300, 801))
    return lambda b: diffusion_guided_recon(leaf(b), x_frozen, gamma, t), x


def _tv2d(rng: np.random.Generator) -> tuple[Callable[[ParamBuffer], Node], ParamBuffer]:
    plane = ParamBuffer("plane", rng.standard_normal((4, 4, 3)))
    return lambda b: tv2d(leaf(b)), plane


def _multiscale_tv(rng: np.random.Generator) -> tuple[Callable[[ParamBuffer], Node], ParamBuffer]:
    residual = ParamBuffer("residual", rng.standard_normal((3, 2, 4, 4)))
    return lambda b: multiscale_tv(leaf(b), 2), residual


def _clip_loss(rng: np.random.Generator) -> tuple[Callable[[ParamBuffer], Node], ParamBuffer]:
    image = ParamBuffer("image", rng.uniform(0.0, 1.0, (8, 8, 3)))
    prior = EmbeddingPrior(dim=8, seed=int(rng.integers(0, 2**31)), grid=4)
    return lambda b: clip_loss_graph(prior, leaf(b), "a smiling face"), image


def _blend_objective(rng: np.random.Generator) -> tuple[Callable[[ParamBuffer], Node], ParamBuffer]:
    camera = Camera(0.0, resolution=(4, 4))
    target = ImageBuffer(rng.uniform(0.0, 1.0, (4, 4, 3)))
    problem = BlendProblem.build(_quad(rng), [(camera, target)], 4, 0.1)
    texels = ParamBuffer("texels", rng.uniform(0.0, 1.0, (4, 4, 3)))
    return lambda b: problem.graph(leaf(b)), texels


ROSTER: dict[str, Setup] = {
    "triplane sampling": _triplane_sample,
    "decoder": _decoder,
    "compositing": _composite,
    "volume render": _render,
    "triplane generator": _triplane_generator,
    "mapping network": _mapping,
    "rasterization": _rasterize,
    "relative distance": _relative_distance,
    "diffusion-guided recon": _reconstruction,
    "tv2d": _tv2d,
    "multiscale tv": _multiscale_tv,
    "clip loss": _clip_loss,
    "adaptive blend objective": _blend_objective,
}


def _sds_surrogate_report(rng: np.random.Generator, h: float) -> FdReport:
    """The surrogate must deposit exactly w_t (eps_hat - eps): compare with differences of <g, x>."""
    x = ParamBuffer("x", rng.uniform(0.0, 1.0, (4, 4, 3)))
    prior = GaussianScorePrior()
    t = int(rng.integers(300, 801))
    result = sds_grad(x.values, "a smiling face", t, rng.standard_normal(x.shape), prior.schedule, prior)
    backward(sds_surrogate(leaf(x), result), [x])
    analytic = x.grad.copy()
    numeric = fd_report(lambda b: sum_(leaf(b) * result.grad), x, h).numeric
    errors = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    worst = int(np.argmax(errors))
    return FdReport(
        float(errors.reshape(-1)[worst]),
        tuple(int(c) for c in np.unravel_index(worst, x.shape)),
        analytic,
        numeric,
    )


def check_op(
    name: str, points: int = 10, seed: int = 0, tolerance: float = 1e-4, h: float = 1e-5
) -> CheckResult:
    rng = np.random.default_rng(seed)
    best = CheckResult(name, 0.0, 0, (), tolerance)
    for point in range(points):
        if name == "sds surrogate":
            report = _sds_surrogate_report(rng, h)
        else:
            op, buffer = ROSTER[name](rng)
            report = fd_report(op, buffer, h)
        if report.max_error >= best.max_error:
            best = CheckResult(name, report.max_error, point, report.worst_index, tolerance)
    return best


def roster_names() -> list[str]:
    return [*ROSTER, "sds surrogate"]


@ch_time_block.decor()
def run_gradcheck(
    points: int = 10, seed: int = 0, tolerance: float = 1e-4, progress: bool = False
) -> list[CheckResult]:
    results = []
    for name in tqdm(roster_names(), desc="gradcheck", disable=not progress):
        result = check_op(name, points, seed, tolerance)
        if not result.passed:
            logger.warning("%s", result)
        results.append(result)
    return results


def format_report(results: list[CheckResult], color: bool = True) -> str:
    lines = []
    for result in results:
        text = str(result)
        lines.append(colored(text, "green" if result.passed else "red") if color else text)
    failed = sum(not result.passed for result in results)
    lines.append(f"{len(results) - failed}/{len(results)} passed")
    return "\n".join(lines)
