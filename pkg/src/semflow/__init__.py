"""Differentiable dense matching: correlation volumes, kernel soft argmax,
flow fields, mask-supervised losses, and self-supervised training on
synthetic affine pairs."""

from . import checks, diffops, fileio, grid, matching, tape
from .matching import MatchParams
from .tape import Tape, Variable, backward, stop_gradient

__all__ = [
    "checks", "diffops", "fileio", "grid", "matching", "tape",
    "MatchParams", "Tape", "Variable", "backward", "stop_gradient",
]

__version__ = "0.1.0"
