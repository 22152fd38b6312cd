"""Blendshape-rigged Gaussian head avatars with a differentiable software
splatting renderer and audio-driven expression diffusion."""

__version__ = "0.1.0"
