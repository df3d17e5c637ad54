"""Rotation accuracy, median error, ADD and ADD-S."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from .rotcore import check_rotation, geodesic_distance
from .shapecore import PointCloud

PI_6 = math.pi / 6.0


@dataclass(frozen=True, eq=False)
class PosePair:
    pred_r: np.ndarray
    gt_r: np.ndarray
    pred_t: np.ndarray | None = None
    gt_t: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "pred_r", check_rotation(self.pred_r))
        object.__setattr__(self, "gt_r", check_rotation(self.gt_r))
        if (self.pred_t is None) != (self.gt_t is None):
            raise ValueError("translations must be present in both poses or in neither")
        if self.pred_t is not None:
            object.__setattr__(self, "pred_t", np.asarray(self.pred_t, dtype=float).reshape(3))
            object.__setattr__(self, "gt_t", np.asarray(self.gt_t, dtype=float).reshape(3))

    @property
    def has_translation(self):
        return self.pred_t is not None

    def rotation_error(self):
        return geodesic_distance(self.pred_r, self.gt_r)


def _nonempty(pairs):
    pairs = list(pairs)
    if not pairs:
        raise ValueError("metric needs at least one pose pair")
    return pairs


def accuracy_from_errors(errors_rad, threshold=PI_6):
    errors = np.asarray(errors_rad, dtype=float)
    if errors.size == 0:
        raise ValueError("metric needs at least one error value")
    return float(np.count_nonzero(errors < threshold)) / errors.size


def median_degrees(errors_rad):
    errors = np.asarray(errors_rad, dtype=float)
    if errors.size == 0:
        raise ValueError("metric needs at least one error value")
    # np.median averages the two central values for even counts
    return math.degrees(float(np.median(errors)))


def acc_pi_6(pairs):
    return accuracy_from_errors([p.rotation_error() for p in _nonempty(pairs)])


def med_err(pairs):
    return median_degrees([p.rotation_error() for p in _nonempty(pairs)])


def _points(points):
    p = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=float)
    p = p.reshape(-1, 3)
    if len(p) == 0:
        raise ValueError("point set must be non-empty")
    return p


def _rotated(pair, pts):
    if not pair.has_translation:
        raise ValueError("ADD metrics need translations on both poses")
    return pts @ pair.gt_r.T, pts @ pair.pred_r.T


def _dist(a, b):
    return np.sqrt(((a - b) ** 2).sum(axis=-1))


def _mean_about(values, ref):
    # Averaging deviations from a shared reference: a constant input
    # returns exactly that constant, and elementwise-smaller inputs can
    # never produce a larger mean.
    return ref + math.fsum((values - ref).tolist()) / len(values)


def _correspondence_distances(pair, points):
    rgt, rest = _rotated(pair, _points(points))
    # rotation and translation differences are formed separately so a
    # pure translation error v yields exactly |v| at every point
    rel = (rgt - rest) + (pair.gt_t - pair.pred_t)
    return rgt + pair.gt_t, rest + pair.pred_t, np.sqrt((rel ** 2).sum(axis=-1))


def add(pair: PosePair, points) -> float:
    _, _, d = _correspondence_distances(pair, points)
    return float(_mean_about(d, d.min()))


def add_s(pair: PosePair, points, chunk=256) -> float:
    """Closest-point variant, exact O(m^2) search in row chunks."""
    gt, est, d = _correspondence_distances(pair, points)
    nearest = np.empty(len(gt))
    for i in range(0, len(gt), chunk):
        nearest[i:i + chunk] = _dist(gt[i:i + chunk, None, :], est[None, :, :]).min(axis=1)
    # the corresponding point is always a candidate
    nearest = np.minimum(nearest, d)
    return float(_mean_about(nearest, d.min()))


def add_accuracy(pairs, points, diameters, symmetric=None, frac=0.1):
    """Fraction of pairs whose ADD (ADD-S when symmetric) is below frac * diameter.

    ``points``, ``diameters`` and ``symmetric`` are per-pair sequences.
    """
    pairs = _nonempty(pairs)
    if symmetric is None:
        symmetric = [False] * len(pairs)
    if not len(pairs) == len(points) == len(diameters) == len(symmetric):
        raise ValueError("pairs, points, diameters and symmetric flags differ in length")
    hits = 0
    for pair, pts, d, sym in zip(pairs, points, diameters, symmetric):
        if not d > 0:
            raise ValueError("model diameter must be positive")
        dist = add_s(pair, pts) if sym else add(pair, pts)
        hits += dist < frac * d
    return hits / len(pairs)
