from __future__ import annotations

import math

import numpy as np
import pytest

from dg3d.errors import DegenerateGradientError, DegeneratePairError, NonFiniteError
from dg3d.losses import (
    LossWeights,
    composite_objective,
    diffusion_guided_recon,
    gradient_mask,
    multiscale_tv,
    relative_distance,
    sds_grad,
    sds_surrogate,
    tv2d,
)
from dg3d.numgrad import ParamBuffer, backward, fd_check, leaf
from dg3d.priors import GaussianScorePrior, NoiseSchedule, ScoreQuery


class _FixedPrior:
    def __init__(self, value: float, schedule: NoiseSchedule) -> None:
        self.value = value
        self.schedule = schedule

    def predict_noise(self, query: ScoreQuery) -> np.ndarray:
        return np.full(query.z_t.shape, self.value)


def test_sds_scalar_example() -> None:
    schedule = NoiseSchedule(weighting="uniform")
    result = sds_grad(np.zeros(1), "p", 10, np.array([0.2]), schedule, _FixedPrior(0.7, schedule))
    assert abs(float(result.grad[0]) - 0.5) < 1e-12
    assert abs(float(result.gamma[0]) - 0.5) < 1e-12


def test_sds_vanishes_when_noise_is_predicted() -> None:
    schedule = NoiseSchedule()
    eps = np.random.default_rng(0).standard_normal((3, 3, 3))

    class Oracle:
        def __init__(self) -> None:
            self.schedule = schedule

        def predict_noise(self, query: ScoreQuery) -> np.ndarray:
            return eps

    assert np.all(sds_grad(np.zeros_like(eps), "p", 400, eps, schedule, Oracle()).grad == 0.0)


def test_sds_zero_at_target_mean() -> None:
    mean = np.random.default_rng(1).uniform(0.0, 1.0, (4, 4, 3))
    prior = GaussianScorePrior(targets={"p": mean})
    result = sds_grad(mean, "p", 300, np.zeros_like(mean), prior.schedule, prior)
    assert np.all(result.grad == 0.0)


def test_sds_rejects_non_finite_prior() -> None:
    schedule = NoiseSchedule()
    with pytest.raises(NonFiniteError):
        sds_grad(np.zeros(2), "p", 5, np.zeros(2), schedule, _FixedPrior(math.nan, schedule))


def test_sds_matches_its_expectation() -> None:
    rng = np.random.default_rng(2)
    mean = rng.uniform(0.2, 0.8, (4, 4, 3))
    prior = GaussianScorePrior(targets={"p": mean})
    x = mean + 2.0
    total = np.zeros_like(x)
    draws = 10_000
    for _ in range(draws):
        t = int(rng.integers(300, 801))
        total += sds_grad(x, "p", t, rng.standard_normal(x.shape), prior.schedule, prior).grad
    expected = prior.expected_gradient(x, "p", 300, 800)
    error = np.linalg.norm(total / draws - expected) / np.linalg.norm(expected)
    assert error <= 0.02


def test_sds_surrogate_routes_gradient() -> None:
    image = ParamBuffer("image", np.zeros((2, 2, 3)))
    schedule = NoiseSchedule()
    result = sds_grad(image.values, "p", 200, np.ones((2, 2, 3)), schedule, _FixedPrior(0.0, schedule))
    surrogate = sds_surrogate(leaf(image), result)
    assert float(surrogate.value) == 0.0
    backward(surrogate)
    assert image.grad.tolist() == result.grad.tolist()


def _planes(seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((3, 2, 4, 4))


def test_relative_distance_examples() -> None:
    a, b = _planes(0), _planes(1)
    assert float(relative_distance(a, b, a, b).value) == 0.0
    zeros = np.zeros((3, 1, 2, 2))
    far, near = zeros.copy(), zeros.copy()
    far[0, 0, 0, 0] = 2.0
    near[0, 0, 0, 0] = math.sqrt(2.0)
    assert abs(float(relative_distance(zeros, near, zeros, far).value) - 1.0) < 1e-12


def test_relative_distance_symmetry_and_isometry() -> None:
    a, b, fa, fb = _planes(2), _planes(3), _planes(4), _planes(5)
    value = float(relative_distance(a, b, fa, fb).value)
    assert value >= 0.0
    assert abs(float(relative_distance(b, a, fb, fa).value) - value) < 1e-12
    shift = _planes(6)
    flipped = float(relative_distance(a[..., ::-1] + shift, b[..., ::-1] + shift, fa, fb).value)
    assert abs(flipped - value) < 1e-12


def test_relative_distance_degenerate_pair() -> None:
    a = _planes(7)
    with pytest.raises(DegeneratePairError):
        relative_distance(a, a.copy(), _planes(8), _planes(9))
    with pytest.raises(ValueError):
        relative_distance(a, _planes(8)[:, :1], a, a)


def test_relative_distance_gradient() -> None:
    fa, fb, b = _planes(10), _planes(11), _planes(12)
    point = ParamBuffer("triplane", _planes(13))
    assert fd_check(lambda p: relative_distance(leaf(p), b, fa, fb), point) <= 1e-4


def test_gradient_mask_properties() -> None:
    gamma = np.abs(np.random.default_rng(14).standard_normal((6, 5, 3)))
    mask, h = gradient_mask(gamma)
    assert mask.min() == 0.0
    assert mask.max() <= 1.0 and mask.min() >= 0.0
    peak = np.unravel_index(np.argmax(gamma.mean(axis=-1)), mask.shape)
    assert mask[peak] == 0.0
    smoothed, _ = gradient_mask(gamma[::-1], previous=h, decay=0.5)
    assert smoothed.min() == 0.0 and smoothed.max() <= 1.0
    with pytest.raises(DegenerateGradientError):
        gradient_mask(np.zeros((2, 2, 3)))


def test_recon_examples() -> None:
    x = np.array([[[0.0], [1.0]]])
    gamma = np.array([[[1.0], [0.5]]])
    assert abs(float(diffusion_guided_recon(x, np.zeros_like(x), gamma, 500).value) - 125.0) < 1e-9
    rng = np.random.default_rng(15)
    image, other = rng.uniform(size=(4, 4, 3)), rng.uniform(size=(4, 4, 3))
    assert float(diffusion_guided_recon(image, other, np.ones((4, 4, 3)), 700).value) == 0.0
    assert float(diffusion_guided_recon(image, image, rng.uniform(size=(4, 4, 3)), 700).value) == 0.0
    with pytest.raises(DegenerateGradientError):
        diffusion_guided_recon(image, other, np.zeros((4, 4, 3)), 700)
    with pytest.raises(ValueError):
        diffusion_guided_recon(image, other[:2], np.ones((4, 4, 3)), 700)


def test_recon_gradient() -> None:
    rng = np.random.default_rng(16)
    frozen, gamma = rng.uniform(size=(4, 4, 3)), rng.uniform(0.1, 1.0, (4, 4, 3))
    point = ParamBuffer("image", rng.uniform(size=(4, 4, 3)))
    assert fd_check(lambda p: diffusion_guided_recon(leaf(p), frozen, gamma, 50), point) <= 1e-4


def test_tv2d_examples() -> None:
    assert float(tv2d(np.full((4, 4, 2), 3.0)).value) == 0.0
    plane = np.array([[[0.0], [1.0]], [[0.0], [1.0]]])
    assert float(tv2d(plane).value) == 0.5
    rough = np.random.default_rng(17).standard_normal((5, 5, 2))
    assert abs(float(tv2d(3.0 * rough).value) - 9.0 * float(tv2d(rough).value)) < 1e-9


def test_tv2d_gradient() -> None:
    point = ParamBuffer("plane", np.random.default_rng(18).standard_normal((2, 5, 4)))
    assert fd_check(lambda p: tv2d(leaf(p), axes=(-2, -1)), point) <= 1e-4


def test_multiscale_tv_examples() -> None:
    assert float(multiscale_tv(np.zeros((3, 2, 8, 8)), 3).value) == 0.0
    constant = np.ones((3, 2, 8, 8)) * np.arange(6.0).reshape(3, 2, 1, 1)
    assert float(multiscale_tv(constant, 3).value) == 0.0
    residual = np.zeros((3, 1, 2, 2))
    residual[0, 0] = [[0.0, 1.0], [0.0, 1.0]]
    assert float(multiscale_tv(residual, 2).value) == 0.5
    single = np.random.default_rng(19).standard_normal((3, 2, 4, 4))
    expected = sum(float(tv2d(single[k], axes=(-2, -1)).value) for k in range(3))
    assert abs(float(multiscale_tv(single, 1).value) - expected) < 1e-12


def test_multiscale_tv_errors() -> None:
    with pytest.raises(ValueError):
        multiscale_tv(np.zeros((3, 1, 6, 6)), 3)
    with pytest.raises(ValueError):
        multiscale_tv(np.zeros((3, 1, 4, 4)), 0)


def test_multiscale_tv_gradient() -> None:
    point = ParamBuffer("residual", np.random.default_rng(20).standard_normal((3, 2, 8, 8)))
    assert fd_check(lambda p: multiscale_tv(leaf(p), 3), point) <= 1e-4


def test_composite_avatar_example() -> None:
    loss = composite_objective("avatar", {"sds": 0.0, "mstv": 0.5}, LossWeights(multiscale_tv=0.1))
    assert abs(float(loss.value) - 0.05) < 1e-15


def test_composite_without_regularizer_is_pure_sds() -> None:
    a, fa, fb = _planes(21), _planes(22), _planes(23)
    point = ParamBuffer("triplane", _planes(24))
    sds = np.random.default_rng(25).standard_normal(point.shape)

    class Result:
        grad = sds

    parts = {
        "sds": sds_surrogate(leaf(point), Result()),  # type: ignore[arg-type]
        "dis": relative_distance(leaf(point), a, fa, fb),
    }
    backward(composite_objective("adaptation", parts, LossWeights(relative_distance=0.0)))
    assert point.grad.tolist() == sds.tolist()


def test_composite_editing_at_frozen_image_is_sds() -> None:
    image = np.random.default_rng(26).uniform(size=(4, 4, 3))
    parts = {
        "sds": 0.25,
        "diff": diffusion_guided_recon(image, image, np.ones((4, 4, 3)) + image, 600),
    }
    assert float(composite_objective("editing", parts, LossWeights(reconstruction=123.0)).value) == 0.25


def test_composite_errors() -> None:
    with pytest.raises(KeyError) as info:
        composite_objective("editing", {"sds": 0.0})
    assert "diff" in str(info.value)
    with pytest.raises(ValueError):
        composite_objective("distill", {"sds": 0.0})  # type: ignore[arg-type]
    with pytest.raises(ValueError):
        LossWeights(reconstruction=-1.0)
