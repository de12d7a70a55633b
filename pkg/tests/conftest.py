import numpy as np
import pytest

from attrifact.model import Layer, Model, validate_model

FIXTURES = __file__.rsplit("/", 1)[0] + "/fixtures"


def random_model(rng, classes=4, in_ch=2, size=8):
    """Small random conv/pool/linear chain used across the suite."""
    c1, c2 = 4, 5
    side = size // 4
    layers = [
        Layer("conv2d", weight=rng.standard_normal((c1, in_ch, 3, 3)) * 0.5,
              bias=rng.standard_normal(c1) * 0.1, stride=1, padding=1),
        Layer("relu"),
        Layer("maxpool2d", kernel=2, stride=2),
        Layer("conv2d", weight=rng.standard_normal((c2, c1, 3, 3)) * 0.4,
              bias=rng.standard_normal(c2) * 0.1, stride=1, padding=1),
        Layer("relu"),
        Layer("avgpool2d", kernel=2, stride=2),
        Layer("flatten"),
        Layer("linear", weight=rng.standard_normal((8, c2 * side * side)) * 0.4,
              bias=rng.standard_normal(8) * 0.1),
        Layer("relu"),
        Layer("linear", weight=rng.standard_normal((classes, 8)) * 0.5,
              bias=rng.standard_normal(classes) * 0.1),
    ]
    model = Model(layers=layers, class_count=classes, input_shape=(in_ch, size, size),
                  mean=np.full(in_ch, 0.5), std=np.full(in_ch, 0.5))
    return validate_model(model)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def small_model(rng):
    return random_model(rng)


@pytest.fixture
def small_image(rng):
    return rng.random((2, 8, 8))
