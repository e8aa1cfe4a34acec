import numpy as np
import pytest

from s5p_ssr.sensor import BandSpec, HyperCube


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_spec():
    """A small synthetic-band spec used throughout the unit tests."""
    return BandSpec(
        band_id="SYN",
        channels=3,
        snr_linear=900.0,
        mu=1.0,
        blur_sigma_along=1.5,
        blur_sigma_cross=1.0,
        scale=4,
        lr_patch=16,
    )


def random_cube(rng, channels=3, h=32, w=32, band_id="SYN", space="raw", positive=True):
    data = rng.random((channels, h, w)) if positive else rng.standard_normal((channels, h, w))
    return HyperCube(data.astype(np.float64), band_id=band_id, space=space)
