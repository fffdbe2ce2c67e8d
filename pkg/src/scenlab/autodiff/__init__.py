"""Dense tensors with reverse-mode differentiation."""

from src.scenlab.autodiff.tensor import Graph, Node, Tensor, backward

__all__ = ["Graph", "Node", "Tensor", "backward"]
