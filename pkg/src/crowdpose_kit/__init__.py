"""Crowded-scene pose estimation data toolkit.

Deterministic building blocks for occlusion-aware pose datasets: canonical
annotations and parsers, segmentation cutouts, occlusion augmentation,
CrowdIndex statistics, dual-branch heatmap targets and loss kernels,
OKS/AP evaluation by crowding level, and a synthetic crowd-scene generator
with exact occlusion ground truth.
"""

__version__ = "0.1.0"
