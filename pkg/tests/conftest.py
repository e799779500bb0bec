from __future__ import annotations

import numpy as np
import pytest

from dg3d.gan3d import GeneratorConfig, GeneratorParams
from dg3d.meshtex import Mesh
from dg3d.priors import EmbeddingPrior, GaussianScorePrior
from dg3d.trainer import Priors, TrainConfig

PROMPT = "a smiling face"


@pytest.fixture
def tiny_config() -> GeneratorConfig:
    return GeneratorConfig(
        latent_dim=4,
        channels=3,
        resolution=8,
        gen_resolution=4,
        hidden=8,
        decoder_hidden=8,
        seed=3,
    )


@pytest.fixture
def tiny_params(tiny_config: GeneratorConfig) -> GeneratorParams:
    return GeneratorParams.initialize(tiny_config)


@pytest.fixture
def train_config() -> TrainConfig:
    return TrainConfig(
        steps=3,
        image_resolution=8,
        ray_steps=4,
        latent_candidates=3,
        mapping_steps=2,
        azimuth_span=(-45.0, 45.0),
    )


@pytest.fixture
def priors() -> Priors:
    return Priors(PROMPT, GaussianScorePrior(), EmbeddingPrior(dim=8, seed=1, grid=4))


def make_quad(
    half_width: float = 0.5, half_height: float = 0.5, z: float = 0.0
) -> Mesh:
    """Two triangles facing +Z with uv spanning the whole atlas."""
    vertices = np.array(
        [
            [-half_width, -half_height, z],
            [half_width, -half_height, z],
            [half_width, half_height, z],
            [-half_width, half_height, z],
        ]
    )
    uv = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    return Mesh(vertices, np.array([[0, 1, 2], [0, 2, 3]]), uv)


@pytest.fixture
def quad() -> Mesh:
    return make_quad()
