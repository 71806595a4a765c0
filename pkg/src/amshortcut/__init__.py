"""Few-step generative modelling of amorphous materials with shortcut diffusion."""

from .geometry import Cell, NeighborGraph, build_neighbor_graph, min_image_displacement, wrap_into_cell
from .material import ElementVocabulary, MaterialSample, PropertySet

__all__ = [
    "Cell",
    "ElementVocabulary",
    "MaterialSample",
    "NeighborGraph",
    "PropertySet",
    "build_neighbor_graph",
    "min_image_displacement",
    "wrap_into_cell",
]
