"""Flow-guided latent diffusion video super-resolution, testable end to end on
synthetic video with exact ground-truth motion."""

__version__ = "0.1.0"
