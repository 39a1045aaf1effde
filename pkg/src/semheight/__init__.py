"""Semantic height-map fusion simulator.

Compares per-frame (view-based) semantic labelling fused into a height map
against one-off sliding-window (map-based) labelling of the reconstruction.
"""

__version__ = "0.1.0"
