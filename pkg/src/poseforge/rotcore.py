"""Euler-angle / rotation-matrix algebra, angle binning and geodesic error.

Convention (shared with the renderer): world up is +Y, the camera looks
along -Z of its own frame, and the world-to-camera rotation is

    R = R_z(inp) @ R_x(ele) @ R_y(-azi)

with right-handed elementary rotations.  Positive elevation places the
camera above the horizontal plane; azimuth turns the camera about +Y
starting from +Z toward +X.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PI = math.pi
HALF_PI = 0.5 * math.pi
TWO_PI = 2.0 * math.pi

ANGLES = ("azi", "ele", "inp")


def wrap_angle(x):
    """Map angles into [-pi, pi); wrap(pi) == -pi."""
    y = np.mod(np.asarray(x, dtype=float) + PI, TWO_PI) - PI
    # np.mod may round up to exactly 2*pi for tiny negative inputs
    y = np.where(y >= PI, y - TWO_PI, y)
    if np.ndim(y) == 0:
        return float(y)
    return y


@dataclass(frozen=True)
class EulerPose:
    """Camera orientation relative to the shape frame, in radians."""

    azi: float
    ele: float
    inp: float

    def __post_init__(self):
        for name in ANGLES:
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "azi", wrap_angle(self.azi))
        object.__setattr__(self, "inp", wrap_angle(self.inp))
        if not -HALF_PI - 1e-12 <= self.ele <= HALF_PI + 1e-12:
            raise ValueError(f"elevation {self.ele} outside [-pi/2, pi/2]")
        object.__setattr__(self, "ele", min(max(self.ele, -HALF_PI), HALF_PI))

    @classmethod
    def from_degrees(cls, azi, ele, inp):
        return cls(math.radians(azi), math.radians(ele), math.radians(inp))

    def degrees(self):
        return (math.degrees(self.azi), math.degrees(self.ele), math.degrees(self.inp))

    def as_array(self):
        return np.array([self.azi, self.ele, self.inp])

    def to_json(self):
        azi, ele, inp = self.degrees()
        return {"azi_deg": azi, "ele_deg": ele, "inp_deg": inp}

    @classmethod
    def from_json(cls, d):
        return cls.from_degrees(d["azi_deg"], d["ele_deg"], d["inp_deg"])


def rot_x(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle(axis, angle):
    """Rodrigues' formula."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def check_rotation(r, tol=1e-6):
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got shape {r.shape}")
    err = np.abs(r.T @ r - np.eye(3)).max()
    if not np.isfinite(err) or err > tol or abs(np.linalg.det(r) - 1.0) > tol:
        raise ValueError(f"matrix is not a rotation (orthonormality error {err:.3g})")
    return r


def euler_to_matrix(pose: EulerPose) -> np.ndarray:
    return rot_z(pose.inp) @ rot_x(pose.ele) @ rot_y(-pose.azi)


def matrix_to_euler(r) -> EulerPose:
    """Inverse of :func:`euler_to_matrix`.

    At gimbal lock (|ele| = pi/2) the in-plane angle is set to zero and the
    azimuth absorbs the coupled rotation.
    """
    r = check_rotation(r)
    # third row is the camera's backward axis in world coordinates
    ce = math.hypot(r[2, 0], r[2, 2])
    ele = math.atan2(r[2, 1], ce)
    if ce < 1e-9:
        ele = math.copysign(HALF_PI, r[2, 1])
        azi = math.atan2(-r[0, 2], r[0, 0])
        return EulerPose(azi, ele, 0.0)
    azi = math.atan2(r[2, 0], r[2, 2])
    inp = math.atan2(-r[0, 1], r[1, 1])
    return EulerPose(azi, ele, inp)


def geodesic_distance(r1, r2) -> float:
    """Rotation angle of r1^T r2, in [0, pi].

    Uses atan2(sin, cos) instead of arccos(cos) so that small and
    near-pi angles keep full precision.
    """
    d = np.asarray(r1, dtype=float).T @ np.asarray(r2, dtype=float)
    cos = min(max((np.trace(d) - 1.0) * 0.5, -1.0), 1.0)
    sin = 0.5 * math.sqrt(
        (d[2, 1] - d[1, 2]) ** 2 + (d[0, 2] - d[2, 0]) ** 2 + (d[1, 0] - d[0, 1]) ** 2
    )
    return math.atan2(sin, cos)


def geodesic_distance_batch(r1, r2):
    """Vectorized :func:`geodesic_distance` over leading axes."""
    d = np.swapaxes(np.asarray(r1), -1, -2) @ np.asarray(r2)
    cos = np.clip((np.trace(d, axis1=-2, axis2=-1) - 1.0) * 0.5, -1.0, 1.0)
    sin = 0.5 * np.sqrt(
        (d[..., 2, 1] - d[..., 1, 2]) ** 2
        + (d[..., 0, 2] - d[..., 2, 0]) ** 2
        + (d[..., 1, 0] - d[..., 0, 1]) ** 2
    )
    return np.arctan2(sin, cos)


def shift_azimuth(pose: EulerPose, alpha: float) -> EulerPose:
    """Azimuth seen by a fixed camera once the shape is rotated by R_y(alpha)."""
    return EulerPose(wrap_angle(pose.azi - alpha), pose.ele, pose.inp)


# ---------------------------------------------------------------- binning


@dataclass(frozen=True)
class AngleBinning:
    bins_azi: int = 24
    bins_ele: int = 12
    bins_inp: int = 24

    def __post_init__(self):
        for name in ("bins_azi", "bins_ele", "bins_inp"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v}")
            object.__setattr__(self, name, int(v))

    @property
    def counts(self):
        return (self.bins_azi, self.bins_ele, self.bins_inp)

    @property
    def total(self):
        return self.bins_azi + self.bins_ele + self.bins_inp

    @staticmethod
    def range_of(angle):
        if angle == "ele":
            return (-HALF_PI, HALF_PI)
        return (-PI, PI)

    def width(self, angle):
        lo, hi = self.range_of(angle)
        return (hi - lo) / dict(zip(ANGLES, self.counts))[angle]

    def center(self, angle, label):
        lo, _ = self.range_of(angle)
        return lo + (label + 0.5) * self.width(angle)

    def to_json(self):
        return {"azi": self.bins_azi, "ele": self.bins_ele, "inp": self.bins_inp}


@dataclass(frozen=True)
class BinnedPose:
    """Per-angle bin label and within-bin offset in [-1, 1]."""

    label: tuple
    offset: tuple


def encode_angle(values, lo, hi, n_bins):
    """Bin labels and offsets for an array of angles on [lo, hi)."""
    values = np.asarray(values, dtype=float)
    # position in bin units; computed once so edges and centers come out exact
    u = (values - lo) * n_bins / (hi - lo)
    label = np.floor(u).astype(np.int64)
    # the closed upper end of elevation folds into the last bin
    label = np.clip(label, 0, n_bins - 1)
    offset = np.clip(2.0 * (u - label) - 1.0, -1.0, 1.0)
    return label, offset


def decode_angle(label, offset, lo, hi, n_bins):
    label = np.asarray(label)
    frac = (np.asarray(offset, dtype=float) + 1.0) * 0.5
    return lo + (label + frac) * ((hi - lo) / n_bins)


def encode_bins(pose: EulerPose, binning: AngleBinning) -> BinnedPose:
    labels, offsets = [], []
    for name, n in zip(ANGLES, binning.counts):
        lo, hi = binning.range_of(name)
        lab, off = encode_angle(getattr(pose, name), lo, hi, n)
        labels.append(int(lab))
        offsets.append(float(off))
    return BinnedPose(tuple(labels), tuple(offsets))


def decode_bins(binned: BinnedPose, binning: AngleBinning) -> EulerPose:
    vals = []
    for i, (name, n) in enumerate(zip(ANGLES, binning.counts)):
        lab = binned.label[i]
        if not 0 <= lab < n:
            raise ValueError(f"{name} label {lab} outside [0, {n})")
        lo, hi = binning.range_of(name)
        vals.append(float(decode_angle(lab, binned.offset[i], lo, hi, n)))
    azi, ele, inp = vals
    return EulerPose(wrap_angle(azi), min(max(ele, -HALF_PI), HALF_PI), wrap_angle(inp))


def encode_batch(poses, binning: AngleBinning):
    """Vectorized encoding of an (N, 3) array of radians.

    Returns (labels, offsets), each (N, 3).
    """
    poses = np.asarray(poses, dtype=float).reshape(-1, 3)
    labels = np.empty(poses.shape, dtype=np.int64)
    offsets = np.empty(poses.shape)
    for j, (name, n) in enumerate(zip(ANGLES, binning.counts)):
        lo, hi = binning.range_of(name)
        labels[:, j], offsets[:, j] = encode_angle(poses[:, j], lo, hi, n)
    return labels, offsets
