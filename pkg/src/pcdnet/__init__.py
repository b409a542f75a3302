"""Pose-conditioned dendritic heatmap landmark localization."""

__version__ = "0.1.0"
