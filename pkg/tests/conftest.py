import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_float_image(rng, channels=3, height=16, width=16, dtype=np.float32):
    from curvetone.imaging import FloatImage

    return FloatImage(rng.random((channels, height, width)).astype(dtype))


def random_quantized_image(rng, channels=3, height=16, width=16):
    from curvetone.imaging import QuantizedImage

    return QuantizedImage(rng.integers(0, 256, size=(channels, height, width), dtype=np.uint8), 8)
