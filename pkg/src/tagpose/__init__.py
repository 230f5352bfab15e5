"""Dual-branch alignment-graph robot pose estimation at desk scale."""

__version__ = "0.1.0"
