"""Self-supervised super-resolution for Sentinel-5P hyperspectral radiance bands."""

__version__ = "0.1.0"

from .sensor import (  # noqa: F401
    BandSpec,
    BlurKernel,
    DegradationOperator,
    HyperCube,
    add_noise,
    degrade,
    load_band_specs,
    make_blur_kernel,
    noise_sigma_from_metadata,
)
