"""Hemisphere camera placement and a small z-buffered software rasterizer.

Images are rendered with perspective projection, flat per-face normals
and a headlight (light direction along the camera's optical axis).  The world-to-camera
rotation comes from :func:`poseforge.rotcore.euler_to_matrix`, so a
rendered view and a pose label always share one convention.
"""
from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .rotcore import EulerPose, euler_to_matrix
from .shapecore import TriangleMesh, max_norm

IMG_MAGIC = b"PFSIMG\x00\x01"


@dataclass(frozen=True)
class RenderConfig:
    size: int = 64
    fov_deg: float = 50.0
    distance: float = 2.5
    background: tuple = (0.0, 0.0, 0.0)
    albedo: tuple = (0.8, 0.8, 0.8)
    ambient: float = 0.15
    depth: bool = False
    normal: bool = False

    def __post_init__(self):
        if self.size < 8:
            raise ValueError("image size must be at least 8 pixels")
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError("field of view must lie in (0, 180) degrees")
        if not self.distance > 1.0:
            raise ValueError("camera distance must exceed 1 (unit-normalized shapes)")
        object.__setattr__(self, "background", tuple(float(c) for c in self.background))
        object.__setattr__(self, "albedo", tuple(float(c) for c in self.albedo))

    @property
    def channels(self):
        return 3 + int(self.depth) + 3 * int(self.normal)

    @property
    def far(self):
        return self.distance + 2.0


@dataclass(frozen=True)
class Camera:
    azimuth: float
    elevation: float
    distance: float = 2.5
    fov: float = math.radians(50.0)

    def __post_init__(self):
        if not self.distance > 1.0:
            raise ValueError("camera distance must exceed 1")
        if not 0.0 < self.fov < math.pi:
            raise ValueError("camera fov must lie in (0, pi)")
        if not -math.pi / 2 - 1e-12 <= self.elevation <= math.pi / 2 + 1e-12:
            raise ValueError("camera elevation outside [-pi/2, pi/2]")

    def rotation(self, inplane=0.0):
        return euler_to_matrix(EulerPose(self.azimuth, self.elevation, inplane))


@dataclass(eq=False)
class Image:
    """Float32 channels in [0, 1]; ``mask`` marks covered pixels."""

    rgb: np.ndarray
    mask: np.ndarray
    depth: np.ndarray | None = None
    normal: np.ndarray | None = None

    @property
    def size(self):
        return self.rgb.shape[0]

    def to_array(self):
        """(C, H, W) float32 stack: rgb, then depth, then normal."""
        chans = [self.rgb.transpose(2, 0, 1)]
        if self.depth is not None:
            chans.append(self.depth[None])
        if self.normal is not None:
            chans.append(self.normal.transpose(2, 0, 1))
        return np.ascontiguousarray(np.concatenate(chans, axis=0), dtype=np.float32)


@dataclass(eq=False)
class ViewSet:
    images: list
    layout: tuple = field(default=(1, (math.radians(30.0),)))

    def __len__(self):
        return len(self.images)

    def to_array(self):
        return np.stack([im.to_array() for im in self.images])


def place_cameras(n_azi, elevations, distance=2.5, fov=math.radians(50.0)):
    """Cameras on the upper hemisphere, elevation-major then azimuth-ascending."""
    elevations = list(elevations)
    if n_azi < 1:
        raise ValueError("n_azi must be at least 1")
    if not elevations:
        raise ValueError("elevation list must not be empty")
    for e in elevations:
        if not 0.0 <= e <= math.pi / 2 + 1e-12:
            raise ValueError(f"shape-view elevation {e} outside [0, pi/2]")
    step = 2.0 * math.pi / n_azi
    return [Camera(k * step, e, distance, fov) for e in elevations for k in range(n_azi)]


def _focal(size, fov):
    return 0.5 * size / math.tan(0.5 * fov)


def rasterize(mesh: TriangleMesh, rotation, distance, fov, size, ambient=0.15):
    """Core z-buffer pass.

    Returns (face index map with -1 for background, view depth, camera-space
    normals facing the camera, per-face shading).
    """
    face_id = np.full((size, size), -1, dtype=np.int64)
    zbuf = np.full((size, size), np.inf)
    if len(mesh.faces) == 0:
        return face_id, zbuf, np.zeros((0, 3)), np.zeros(0)
    cam = mesh.vertices @ np.asarray(rotation).T
    cam[:, 2] -= distance
    zv = -cam[:, 2]  # positive depth along the viewing direction
    f = _focal(size, fov)
    px = 0.5 * size + f * cam[:, 0] / zv
    py = 0.5 * size - f * cam[:, 1] / zv

    tri = cam[mesh.faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    nlen = np.linalg.norm(n, axis=1)
    nlen[nlen == 0] = 1.0
    n = n / nlen[:, None]
    centroid = tri.mean(axis=1)
    to_cam = -centroid / np.linalg.norm(centroid, axis=1)[:, None]
    facing = np.einsum("ij,ij->i", n, to_cam)
    n = np.where(facing[:, None] < 0, -n, n)
    # directional headlight along the optical axis: coplanar triangles shade
    # identically, so the image does not depend on how quads were split
    shade = ambient + (1.0 - ambient) * np.abs(n[:, 2])

    centers = np.arange(size) + 0.5
    for fi, (a, b, c) in enumerate(mesh.faces):
        x0, x1, x2 = px[a], px[b], px[c]
        y0, y1, y2 = py[a], py[b], py[c]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        j0 = max(int(math.floor(min(x0, x1, x2) - 0.5)), 0)
        j1 = min(int(math.ceil(max(x0, x1, x2) - 0.5)), size - 1)
        i0 = max(int(math.floor(min(y0, y1, y2) - 0.5)), 0)
        i1 = min(int(math.ceil(max(y0, y1, y2) - 0.5)), size - 1)
        if j0 > j1 or i0 > i1:
            continue
        X = centers[j0:j1 + 1][None, :]
        Y = centers[i0:i1 + 1][:, None]
        w0 = ((x1 - X) * (y2 - Y) - (x2 - X) * (y1 - Y)) / area
        w1 = ((x2 - X) * (y0 - Y) - (x0 - X) * (y2 - Y)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        # perspective-correct depth: 1/z is affine in screen space
        inv_z = w0 / zv[a] + w1 / zv[b] + w2 / zv[c]
        z = 1.0 / inv_z
        zb = zbuf[i0:i1 + 1, j0:j1 + 1]
        win = inside & (z < zb)
        zb[win] = z[win]
        face_id[i0:i1 + 1, j0:j1 + 1][win] = fi
    return face_id, zbuf, n, shade


def render_view(mesh: TriangleMesh, camera: Camera, inplane=0.0, config=RenderConfig(),
                background=None, albedo=None) -> Image:
    """Render one view; ``background`` may be an (H, W, 3) image to composite over."""
    if max_norm(mesh) > 1.0 + 1e-6:
        raise ValueError("mesh is not normalized (max vertex norm exceeds 1)")
    size = config.size
    face_id, zbuf, normals, shade = rasterize(
        mesh, camera.rotation(inplane), camera.distance, camera.fov, size, config.ambient
    )
    mask = face_id >= 0
    if background is None:
        rgb = np.empty((size, size, 3), dtype=np.float32)
        rgb[...] = np.asarray(config.background, dtype=np.float32)
    else:
        rgb = np.array(background, dtype=np.float32, copy=True)
        if rgb.shape != (size, size, 3):
            raise ValueError(f"background shape {rgb.shape} does not match image size {size}")
    alb = np.asarray(config.albedo if albedo is None else albedo, dtype=np.float64)
    if mask.any():
        ids = face_id[mask]
        rgb[mask] = (shade[ids][:, None] * alb[None, :]).astype(np.float32)
    depth = normal = None
    if config.depth:
        depth = np.ones((size, size), dtype=np.float32)
        depth[mask] = (zbuf[mask] / config.far).astype(np.float32)
    if config.normal:
        normal = np.full((size, size, 3), 0.5, dtype=np.float32)
        if mask.any():
            normal[mask] = (0.5 * (normals[face_id[mask]] + 1.0)).astype(np.float32)
    return Image(rgb, mask, depth, normal)


def render_view_set(mesh: TriangleMesh, layout, config=RenderConfig(), threads=1) -> ViewSet:
    """Canonical views for the multi-view encoder; in-plane fixed to 0."""
    n_azi, elevations = layout
    cams = place_cameras(n_azi, elevations, config.distance, math.radians(config.fov_deg))
    if threads > 1 and len(cams) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            images = list(pool.map(lambda c: render_view(mesh, c, 0.0, config), cams))
    else:
        images = [render_view(mesh, c, 0.0, config) for c in cams]
    return ViewSet(images, (n_azi, tuple(elevations)))


def camera_for(pose: EulerPose, config: RenderConfig) -> Camera:
    return Camera(pose.azi, pose.ele, config.distance, math.radians(config.fov_deg))


# ------------------------------------------------------------ file formats


def to_uint8(rgb):
    return np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)


def write_png(rgb, path):
    PILImage.fromarray(to_uint8(rgb), mode="RGB").save(path, format="PNG", optimize=False)


def read_png(path):
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_tensor(array, path):
    """Raw float32 tensor, (H, W, C) order, with the PFSIMG header."""
    a = np.asarray(array, dtype="<f4")
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError("image tensor must be 2-D or 3-D")
    with open(path, "wb") as fh:
        fh.write(IMG_MAGIC)
        fh.write(struct.pack("<III", *a.shape))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_tensor(path):
    data = Path(path).read_bytes()
    if data[:8] != IMG_MAGIC:
        raise ValueError(f"{path}: not an image tensor file (bad magic)")
    h, w, c = struct.unpack("<III", data[8:20])
    body = data[20:]
    if len(body) != 4 * h * w * c:
        raise ValueError(f"{path}: payload size does not match header {h}x{w}x{c}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float32)


def image_hwc(image: Image):
    return image.to_array().transpose(1, 2, 0)


def write_view_set(views: ViewSet, directory, png=True):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, im in enumerate(views.images):
        p = directory / f"view_{k:03d}.pfsimg"
        write_tensor(image_hwc(im), p)
        if png:
            write_png(im.rgb, directory / f"view_{k:03d}.png")
        paths.append(p)
    return paths


def read_view_set_array(directory, count):
    """(K, C, H, W) float32 array of stored views."""
    directory = Path(directory)
    return np.stack([
        read_tensor(directory / f"view_{k:03d}.pfsimg").transpose(2, 0, 1) for k in range(count)
    ])
