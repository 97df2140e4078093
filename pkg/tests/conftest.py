import numpy as np
import pytest

from tanhwarp.geometry import SimilarityTransform


def random_transform(rng) -> SimilarityTransform:
    return SimilarityTransform(
        scale=float(rng.uniform(0.005, 3.0)),
        rotation=float(rng.uniform(-np.pi, np.pi)),
        translation=rng.uniform(-50.0, 50.0, 2),
    )


def smooth_image(rng, h, w, channels=3):
    """Low-frequency random image in [0, 1]: bilinear blow-up of a tiny grid."""
    from tanhwarp.sampler import bilinear_gather

    grid = rng.uniform(0.1, 0.9, (6, 6, channels)).astype(np.float32)
    gx, gy = np.meshgrid((np.arange(w) + 0.5) / w * 5 + 0.5, (np.arange(h) + 0.5) / h * 5 + 0.5)
    return bilinear_gather(grid, gx, gy, policy="replicate").astype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
