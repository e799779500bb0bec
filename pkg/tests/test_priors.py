from __future__ import annotations

import math

import numpy as np
import pytest

from dg3d.backends import IdentityBackend, TranslationBackend
from dg3d.errors import BackendError
from dg3d.priors import (
    DEFAULT_STRENGTH,
    EmbeddingPrior,
    GaussianScorePrior,
    NoiseSchedule,
    PromptSynthesizer,
    ScoreQuery,
    TranslationRequest,
    add_noise,
    analytic_score,
    cfg_combine,
    clip_loss,
    gaussian_marginal_logpdf,
    gaussian_noise_prediction,
    translate,
)
from dg3d.render import DepthMap, ImageBuffer


def _request(image: np.ndarray, mask: np.ndarray | None = None, strength: float = 0.6) -> TranslationRequest:
    height, width = image.shape[:2]
    return TranslationRequest(
        ImageBuffer(image),
        ImageBuffer(np.zeros((height, width, 3))),
        DepthMap(np.full((height, width), 2.0), np.ones((height, width))),
        "a smiling face",
        strength,
        mask=mask,
    )


def test_schedule_shape() -> None:
    schedule = NoiseSchedule()
    assert schedule.alpha_bars.shape == (1001,)
    assert schedule.alpha_bar(0) == 1.0
    assert np.all(np.diff(schedule.alpha_bars) < 0.0)
    assert schedule.weight(0) == 0.0
    assert NoiseSchedule(weighting="uniform").weight(500) == 1.0
    with pytest.raises(ValueError):
        schedule.alpha_bar(1001)
    with pytest.raises(ValueError):
        NoiseSchedule(beta_start=0.05, beta_end=0.01)


def test_add_noise_formula() -> None:
    quarter = NoiseSchedule(total=1, beta_start=0.75, beta_end=0.75)
    assert abs(quarter.alpha_bar(1) - 0.25) < 1e-15
    assert add_noise(np.ones(3), 1, np.zeros(3), quarter).tolist() == [0.5, 0.5, 0.5]
    schedule = NoiseSchedule()
    x = np.random.default_rng(0).standard_normal((4, 4, 3))
    eps = np.random.default_rng(1).standard_normal((4, 4, 3))
    assert add_noise(x, 0, eps, schedule).tolist() == x.tolist()
    assert np.all(add_noise(np.zeros(5), 700, np.zeros(5), schedule) == 0.0)
    with pytest.raises(ValueError):
        add_noise(x, 10, eps[:2], schedule)


def test_true_noise_recovers_image() -> None:
    schedule = NoiseSchedule()
    rng = np.random.default_rng(2)
    x, eps = rng.standard_normal((6, 6, 3)), rng.standard_normal((6, 6, 3))
    alpha_bar = schedule.alpha_bar(500)
    z_t = add_noise(x, 500, eps, schedule)
    recovered = (z_t - math.sqrt(1.0 - alpha_bar) * eps) / math.sqrt(alpha_bar)
    np.testing.assert_allclose(recovered, x, rtol=0, atol=1e-12)


def test_noise_prediction_examples() -> None:
    mean = np.full(3, 0.4)
    assert np.all(gaussian_noise_prediction(math.sqrt(0.3) * mean, 0.3, mean, 2.0) == 0.0)
    z = np.array([0.2, -1.0])
    assert gaussian_noise_prediction(z, 0.0, np.zeros(2), 1.0).tolist() == z.tolist()
    value = gaussian_noise_prediction(np.array([1.0]), 0.5, np.zeros(1), 1.0)
    assert abs(float(value[0]) - math.sqrt(0.5)) < 1e-12
    with pytest.raises(ValueError):
        gaussian_noise_prediction(z, 0.5, np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        gaussian_noise_prediction(z, 0.5, np.zeros(3), 1.0)


def test_noise_prediction_is_scaled_score() -> None:
    schedule = NoiseSchedule()
    rng = np.random.default_rng(3)
    mean = rng.uniform(0.0, 1.0, (2, 2, 3))
    variance, h = 0.5, 1e-5
    for t in rng.integers(1, 1001, 5):
        alpha_bar = schedule.alpha_bar(int(t))
        z_t = rng.standard_normal(mean.shape)
        grad = np.zeros_like(z_t)
        for index in np.ndindex(z_t.shape):
            plus, minus = z_t.copy(), z_t.copy()
            plus[index] += h
            minus[index] -= h
            grad[index] = (
                gaussian_marginal_logpdf(plus, alpha_bar, mean, variance)
                - gaussian_marginal_logpdf(minus, alpha_bar, mean, variance)
            ) / (2 * h)
        eps_hat = analytic_score(ScoreQuery(z_t, int(t), "x"), mean, variance, schedule)
        expected = -math.sqrt(1.0 - alpha_bar) * grad
        error = np.abs(eps_hat - expected) / np.maximum(1.0, np.abs(expected))
        assert error.max() <= 1e-4


def test_analytic_score_needs_positive_timestep() -> None:
    with pytest.raises(ValueError):
        analytic_score(ScoreQuery(np.zeros(2), 0, "x"), np.zeros(2), 1.0, NoiseSchedule())


def test_cfg_anchors() -> None:
    rng = np.random.default_rng(4)
    uncond, cond = rng.standard_normal(5), rng.standard_normal(5)
    assert cfg_combine(uncond, cond, 1.0).tolist() == cond.tolist()
    assert cfg_combine(uncond, cond, 0.0).tolist() == uncond.tolist()
    assert abs(float(cfg_combine(np.zeros(1), np.full(1, 0.1), 50.0)[0]) - 5.0) < 1e-12
    mid = cfg_combine(uncond, cond, 3.0)
    np.testing.assert_allclose(
        mid, 0.5 * (cfg_combine(uncond, cond, 2.0) + cfg_combine(uncond, cond, 4.0)), atol=1e-12
    )


def test_synthesizer() -> None:
    synthesizer = PromptSynthesizer()
    pattern = synthesizer.synthesize("a smiling face", 12, 10)
    assert pattern.shape == (12, 10, 3)
    assert pattern.min() >= 0.05 and pattern.max() <= 0.95
    assert pattern.tobytes() == synthesizer.synthesize("A  smiling face", 12, 10).tobytes()
    assert not np.array_equal(pattern, synthesizer.synthesize("a frowning face", 12, 10))
    assert np.all(synthesizer.synthesize("", 3, 3) == 0.5)


def test_prior_is_zero_at_conditional_mean() -> None:
    prior = GaussianScorePrior()
    schedule = prior.schedule
    mean = prior.target_mean("a smiling face", (8, 8, 3))
    z_t = math.sqrt(schedule.alpha_bar(400)) * mean
    assert np.all(prior.predict_noise(ScoreQuery(z_t, 400, "a smiling face")) == 0.0)
    guided = prior.predict_noise(ScoreQuery(z_t, 400, "a smiling face", cfg_scale=7.5))
    assert np.abs(guided).max() > 0.0


def test_prior_uses_explicit_targets() -> None:
    target = np.full((4, 4, 3), 0.25)
    prior = GaussianScorePrior(targets={"gray": target})
    assert prior.target_mean("gray", (4, 4, 3)) is target
    with pytest.raises(ValueError):
        prior.target_mean("gray", (8, 8, 3))
    assert np.all(prior.expected_gradient(target, "gray", 20, 980) == 0.0)


def test_embeddings_are_unit_and_deterministic() -> None:
    image = np.random.default_rng(5).uniform(0.0, 1.0, (16, 16, 3))
    first, second = EmbeddingPrior(dim=12, seed=7), EmbeddingPrior(dim=12, seed=7)
    assert first.image_embed(image).tobytes() == second.image_embed(image).tobytes()
    assert abs(float(np.linalg.norm(first.image_embed(image))) - 1.0) < 1e-12
    assert first.text_embed("a smiling face").tobytes() == second.text_embed("a smiling face").tobytes()
    assert abs(float(np.linalg.norm(first.text_embed("two words"))) - 1.0) < 1e-12


def test_embedding_zero_norm() -> None:
    prior = EmbeddingPrior()
    with pytest.raises(ValueError):
        prior.image_embed(np.full((8, 8, 3), 0.5))
    with pytest.raises(ValueError):
        prior.text_embed("   ")


def test_clip_loss_range() -> None:
    prior = EmbeddingPrior(dim=16, grid=4, text_mode="synthesized")
    pattern = prior.synthesizer.synthesize("a smiling face", 4, 4)
    assert abs(clip_loss(prior, ImageBuffer(pattern), "a smiling face")) < 1e-12
    assert abs(clip_loss(prior, ImageBuffer(1.0 - pattern), "a smiling face") - 2.0) < 1e-12
    other = np.random.default_rng(6).uniform(0.0, 1.0, (8, 8, 3))
    assert 0.0 <= clip_loss(EmbeddingPrior(), ImageBuffer(other), "a smiling face") <= 2.0


def test_request_validation() -> None:
    image = np.zeros((4, 4, 3))
    with pytest.raises(ValueError):
        _request(image, strength=1.5).validate()
    with pytest.raises(ValueError):
        _request(image, mask=np.ones((3, 4), dtype=bool)).validate()
    with pytest.raises(ValueError):
        _request(image, mask=np.ones((4, 4))).validate()
    request = _request(image, mask=np.ones((4, 4), dtype=bool), strength=DEFAULT_STRENGTH["inpaint"])
    request.validate()
    assert request.sidecar() == {
        "mode": "inpaint",
        "prompt": "a smiling face",
        "strength": 0.4,
        "seed": 0,
        "control_weights": {"edge": 1.0, "depth": 1.0},
    }
    assert _request(image).mode == "img2img"


def test_translate_identity() -> None:
    image = np.random.default_rng(7).uniform(0.0, 1.0, (5, 6, 3))
    assert translate(IdentityBackend(), _request(image)).pixels.tobytes() == image.tobytes()


class _Shrinking(TranslationBackend):
    def run(self, request: TranslationRequest) -> ImageBuffer:
        return ImageBuffer(request.image.pixels[:-1])


class _Inverting(TranslationBackend):
    def run(self, request: TranslationRequest) -> ImageBuffer:
        return ImageBuffer(1.0 - request.image.pixels)


def test_translate_rejects_wrong_shape() -> None:
    with pytest.raises(BackendError):
        translate(_Shrinking(), _request(np.zeros((4, 4, 3))))


def test_translate_keeps_unmasked_pixels() -> None:
    image = np.random.default_rng(8).uniform(0.0, 1.0, (6, 6, 3))
    mask = np.zeros((6, 6), dtype=bool)
    mask[2:4, 1:5] = True
    out = translate(_Inverting(), _request(image, mask=mask)).pixels
    assert out[~mask].tobytes() == image[~mask].tobytes()
    np.testing.assert_allclose(out[mask], 1.0 - image[mask], atol=0)
