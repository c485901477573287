"""Anti-editing concept erasure on a desk-scale conditional diffusion model."""

__version__ = "0.1.0"
