"""Gradient-driven test-case generation on a desk-scale latent diffusion stack.

The package is organised around a small reverse-mode autodiff core
(:mod:`hynea.tensor`), a frozen generative backbone (:mod:`hynea.backbone`)
steered by a trainable control branch (:mod:`hynea.hypernet`), three toy
systems under test (:mod:`hynea.suts`), the per-instance adaptation loop
(:mod:`hynea.genloop`), an evaluation metric suite (:mod:`hynea.metrics`)
and a latent-drift simulator (:mod:`hynea.driftlab`).
"""

from hynea.tensor import Tensor, Tape

__all__ = ["Tensor", "Tape"]
__version__ = "0.1.0"
