"""Convolutional sequence-to-sequence model with asymmetric
position-sensitive encoder/decoder stacks, trained end-to-end on synthetic
transduction tasks."""

__version__ = "0.1.0"

from posenet.tensor import Graph, ShapeError, Tensor

__all__ = ["Graph", "ShapeError", "Tensor", "__version__"]
