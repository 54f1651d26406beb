"""Image-conditional diffusion for geometry estimation at toy scale."""

__version__ = "0.1.0"
