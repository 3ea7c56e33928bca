"""CrowdIndex computation and crowding-level statistics.

For an image with N persons, person i contributes the ratio of foreign
labeled keypoints inside its box to its own labeled keypoints inside its
box; the image index is the mean ratio clamped to 1. Images partition into
easy [0, 0.1), medium [0.1, 0.8) and hard [0.8, 1.0] levels.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .annotations import Dataset, ImageRecord, Visibility
from .errors import UndefinedMetricError

LEVEL_EASY = "easy"
LEVEL_MEDIUM = "medium"
LEVEL_HARD = "hard"
LEVELS = (LEVEL_EASY, LEVEL_MEDIUM, LEVEL_HARD)

COUNT_LABELED = "labeled"        # visible + occluded + self-occluded
COUNT_VISIBLE_ONLY = "visible_only"


def _counts(person, count_mode):
    if count_mode == COUNT_VISIBLE_ONLY:
        return tuple(k for k in person.pose.keypoints if k.vis is Visibility.VISIBLE)
    return tuple(k for k in person.pose.keypoints if k.vis is not Visibility.UNLABELED)


def crowd_index(record: ImageRecord, count_mode: str = COUNT_LABELED) -> float:
    """CrowdIndex of one image: min(mean_i(N_a_i / N_b_i), 1.0).

    N_b_i counts person i's own labeled keypoints inside (or on the
    boundary of) its box; N_a_i counts labeled keypoints of every other
    person inside that box. Persons with N_b_i = 0 contribute ratio 0 and
    raise a warning instead of failing.
    """
    n = len(record.persons)
    if n == 0:
        raise UndefinedMetricError(f"CrowdIndex undefined for image {record.id!r} "
                                   f"with zero persons")
    counted = [_counts(p, count_mode) for p in record.persons]
    owners = np.repeat(np.arange(n), [len(kps) for kps in counted])
    points = np.array([(k.x, k.y) for kps in counted for k in kps],
                      dtype=np.float64).reshape(-1, 2)
    boxes = np.array([(p.bbox.x, p.bbox.y, p.bbox.w, p.bbox.h)
                      for p in record.persons], dtype=np.float64)
    return crowd_index_arrays(boxes, points, owners, image_id=record.id)


def crowd_index_arrays(boxes: np.ndarray, points: np.ndarray, owners: np.ndarray,
                       image_id: str = "?") -> float:
    """Array-core CrowdIndex: boxes (N, 4) as x/y/w/h, labeled keypoint
    coordinates (T, 2) with an owner index per point.

    The in-box test is a pure comparison, so the vectorized count matches a
    scalar point-in-box loop bit for bit; the ratio sum uses fsum, making
    the result independent of person order.
    """
    n = len(boxes)
    ratios = []
    for i in range(n):
        bx, by, bw, bh = boxes[i]
        inside = ((points[:, 0] >= bx) & (points[:, 0] <= bx + bw) &
                  (points[:, 1] >= by) & (points[:, 1] <= by + bh))
        n_b = int(np.count_nonzero(inside & (owners == i)))
        if n_b == 0:
            warnings.warn(f"person {i} in image {image_id!r} has no own keypoints "
                          f"inside its bbox; contributes ratio 0", stacklevel=2)
            continue
        n_a = int(np.count_nonzero(inside & (owners != i)))
        ratios.append(n_a / n_b)
    return min(math.fsum(ratios) / n, 1.0)


def partition(c: float) -> str:
    """Crowding level for a CrowdIndex value in [0, 1]."""
    if not 0.0 <= c <= 1.0:
        raise UndefinedMetricError(f"CrowdIndex {c} outside [0, 1]")
    if c < 0.1:
        return LEVEL_EASY
    if c < 0.8:
        return LEVEL_MEDIUM
    return LEVEL_HARD


@dataclass
class CrowdIndexStats:
    per_image: list[tuple[str, float]] = field(default_factory=list)
    histogram: list[int] = field(default_factory=list)
    levels: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "per_image": [{"id": i, "crowd_index": c} for i, c in self.per_image],
            "histogram": self.histogram,
            "levels": self.levels,
        }


def histogram_bin(c: float, bins: int) -> int:
    """Bin index for C in [0, 1]; last bin is closed at 1.0."""
    return min(int(c * bins), bins - 1)


def dataset_histogram(dataset: Dataset, bins: int,
                      count_mode: str = COUNT_LABELED) -> CrowdIndexStats:
    """Per-image CrowdIndex, a fixed-width histogram over [0, 1], and level counts."""
    if bins < 1:
        raise UndefinedMetricError(f"need at least 1 bin, got {bins}")
    stats = CrowdIndexStats(histogram=[0] * bins,
                            levels={level: 0 for level in LEVELS})
    for img in dataset.images:
        c = crowd_index(img, count_mode)
        stats.per_image.append((img.id, c))
        stats.histogram[histogram_bin(c, bins)] += 1
        stats.levels[partition(c)] += 1
    return stats
