"""Procedural shapes, synthetic query images and training-time augmentation."""
from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates, zoom

from .render import (
    RenderConfig,
    camera_for,
    image_hwc,
    render_view,
    render_view_set,
    write_png,
    write_tensor,
    write_view_set,
)
from .rotcore import EulerPose, rot_y, shift_azimuth, wrap_angle
from .shapecore import (
    PointCloud,
    TriangleMesh,
    diameter,
    normalize,
    rotate_about_up,
    sample_surface,
    save_obj,
    write_point_cloud,
)

FAMILIES = ("cuboid", "l_shape", "cylinder", "composite")
BACKGROUNDS = ("black", "solid", "gradient", "noise", "mixed")
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------- meshes

_BOX_FACES = np.array([
    (0, 2, 1), (1, 2, 3),  # -x
    (4, 5, 6), (5, 7, 6),  # +x
    (0, 1, 4), (1, 5, 4),  # -y
    (2, 6, 3), (3, 6, 7),  # +y
    (0, 4, 2), (2, 4, 6),  # -z
    (1, 3, 5), (3, 7, 5),  # +z
])


def box(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                  for z in (lo[2], hi[2])])
    return v, _BOX_FACES.copy()


def merge(parts):
    verts, faces, base = [], [], 0
    for v, f in parts:
        verts.append(v)
        faces.append(f + base)
        base += len(v)
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces))


def prism(n_sides, radius, y0, y1, phase=0.0):
    ang = phase + 2.0 * math.pi * np.arange(n_sides) / n_sides
    ring = np.stack([radius * np.sin(ang), np.zeros(n_sides), radius * np.cos(ang)], axis=1)
    bottom = ring + [0.0, y0, 0.0]
    top = ring + [0.0, y1, 0.0]
    v = np.concatenate([bottom, top, [[0.0, y0, 0.0], [0.0, y1, 0.0]]])
    cb, ct = 2 * n_sides, 2 * n_sides + 1
    faces = []
    for i in range(n_sides):
        j = (i + 1) % n_sides
        faces += [(i, j, n_sides + i), (j, n_sides + j, n_sides + i), (cb, j, i),
                  (ct, n_sides + i, n_sides + j)]
    return v, np.array(faces)


def _marker(rng, hx, top, hz, scale):
    """Small block sitting on the +x/+z corner of the top face."""
    s = scale * rng.uniform(0.25, 0.35)
    return box([hx - s, top, hz - s], [hx, top + s, hz])


def make_shape(family, rng) -> TriangleMesh:
    if family == "cuboid":
        sx, sy, sz = rng.uniform(0.5, 1.5, size=3)
        body = box([-sx / 2, -sy / 2, -sz / 2], [sx / 2, sy / 2, sz / 2])
        parts = [body, _marker(rng, sx / 2, sy / 2, sz / 2, min(sx, sz))]
    elif family == "l_shape":
        lx, lz = rng.uniform(1.0, 1.6, size=2)
        tx, tz = rng.uniform(0.3, 0.5, size=2)
        h = rng.uniform(0.3, 0.8)
        arm_x = box([-lx / 2, -h / 2, -lz / 2], [lx / 2, h / 2, -lz / 2 + tz])
        arm_z = box([-lx / 2, -h / 2, -lz / 2 + tz], [-lx / 2 + tx, h / 2, lz / 2])
        parts = [arm_x, arm_z, _marker(rng, lx / 2, h / 2, -lz / 2 + tz, min(tx, tz) * 2)]
    elif family == "cylinder":
        n = int(rng.integers(8, 13))
        r = rng.uniform(0.4, 0.7)
        h = rng.uniform(0.6, 1.4)
        s = r * 0.5
        parts = [prism(n, r, -h / 2, h / 2, phase=rng.uniform(0, math.pi)),
                 box([r * 0.3, h / 2, r * 0.3], [r * 0.3 + s, h / 2 + s, r * 0.3 + s])]
    elif family == "composite":
        sx, sy, sz = rng.uniform(0.8, 1.4), rng.uniform(0.2, 0.5), rng.uniform(0.6, 1.2)
        base = box([-sx / 2, -sy, -sz / 2], [sx / 2, 0.0, sz / 2])
        ux, uz = sx * rng.uniform(0.3, 0.5), sz * rng.uniform(0.3, 0.5)
        uy = rng.uniform(0.3, 0.7)
        cx = rng.uniform(-sx / 2 + ux / 2, 0.0)
        upper = box([cx - ux / 2, 0.0, -sz / 2], [cx + ux / 2, uy, -sz / 2 + uz])
        parts = [base, upper, _marker(rng, sx / 2, 0.0, sz / 2, min(sx, sz) * 0.8)]
    else:
        raise ValueError(f"unknown shape family {family!r}; choose from {FAMILIES}")
    return normalize(merge(parts))


def make_procedural_shapes(n, family, seed):
    if n < 1:
        raise ValueError("shape count must be at least 1")
    fam_index = FAMILIES.index(family) if family in FAMILIES else -1
    if fam_index < 0:
        raise ValueError(f"unknown shape family {family!r}; choose from {FAMILIES}")
    return [make_shape(family, np.random.default_rng([seed, fam_index, i])) for i in range(n)]


def _set_matches(a, b, tol):
    from scipy.spatial import cKDTree

    d, _ = cKDTree(b).query(a, k=1)
    return bool(np.all(d <= tol))


def up_axis_symmetries(mesh: TriangleMesh, step_deg=1.0, tol=1e-6):
    """Nontrivial rotations about +Y (degrees) mapping the vertex set to itself."""
    v = mesh.vertices
    hits = []
    for k in range(1, int(round(360 / step_deg))):
        a = math.radians(k * step_deg)
        if _set_matches(v @ rot_y(a).T, v, tol):
            hits.append(k * step_deg)
    return hits


def is_chiral(mesh: TriangleMesh, step_deg=1.0, tol=1e-6):
    """True when no mirror across a vertical plane through +Y maps the shape to itself."""
    v = mesh.vertices
    flip = v * [-1.0, 1.0, 1.0]
    for k in range(int(round(360 / step_deg))):
        if _set_matches(flip @ rot_y(math.radians(k * step_deg)).T, v, tol):
            return False
    return True


# ------------------------------------------------------------ backgrounds


def make_background(mode, size, rng):
    if mode == "mixed":
        mode = ("solid", "gradient", "noise")[int(rng.integers(3))]
    if mode == "black":
        return np.zeros((size, size, 3), dtype=np.float32)
    if mode == "solid":
        return np.broadcast_to(rng.uniform(0, 1, 3), (size, size, 3)).astype(np.float32)
    if mode == "gradient":
        c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        a = rng.uniform(0, 2 * math.pi)
        yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
        t = (math.cos(a) * xx + math.sin(a) * yy)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
        return (c0 + t[..., None] * (c1 - c0)).astype(np.float32)
    if mode == "noise":
        cells = int(rng.integers(3, 9))
        grid = rng.uniform(0, 1, (cells, cells, 3))
        img = zoom(grid, (size / cells, size / cells, 1), order=1)[:size, :size]
        return np.clip(img, 0, 1).astype(np.float32)
    raise ValueError(f"unknown background mode {mode!r}; choose from {BACKGROUNDS}")


# ---------------------------------------------------------------- dataset


@dataclass(frozen=True)
class DatagenConfig:
    views_per_shape: int = 20
    azi_range_deg: tuple = (-180.0, 180.0)
    ele_range_deg: tuple = (0.0, 60.0)
    inp_range_deg: tuple = (-15.0, 15.0)
    background: str = "mixed"
    image_size: int = 64
    view_size: int = 64
    n_points: int = 2500
    view_n_azi: int = 6
    view_elevations_deg: tuple = (0.0, 30.0)
    split_mode: str = "random"
    split_fractions: tuple = (0.8, 0.1, 0.1)
    holdout_families: tuple = ("l_shape",)
    novel_val_fraction: float = 0.0
    write_png: bool = True

    def __post_init__(self):
        for name in ("azi_range_deg", "ele_range_deg", "inp_range_deg", "view_elevations_deg",
                     "split_fractions", "holdout_families"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.views_per_shape < 1:
            raise ValueError("views_per_shape must be at least 1")
        if self.split_mode not in ("random", "novel-shape"):
            raise ValueError("split_mode must be 'random' or 'novel-shape'")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}")
        lo, hi = self.ele_range_deg
        if not -90.0 <= lo <= hi <= 90.0:
            raise ValueError("elevation range must lie within [-90, 90] degrees")


def config_sha256(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def draw_pose(cfg: DatagenConfig, rng) -> EulerPose:
    lo, hi = cfg.azi_range_deg
    azi = rng.uniform(math.radians(lo), math.radians(hi))
    ele = rng.uniform(*np.radians(cfg.ele_range_deg))
    inp = rng.uniform(*np.radians(cfg.inp_range_deg))
    return EulerPose(wrap_angle(azi), float(ele), wrap_angle(inp))


def assign_splits(shape_families, cfg: DatagenConfig, seed):
    """Split label per (shape index, view index)."""
    n_shapes = len(shape_families)
    k = cfg.views_per_shape
    rng = np.random.default_rng([seed, 7919])
    splits = {}
    if cfg.split_mode == "random":
        order = rng.permutation(n_shapes * k)
        f_train, f_val, _ = cfg.split_fractions
        n_train = int(round(f_train * len(order)))
        n_val = int(round(f_val * len(order)))
        for rank, flat in enumerate(order):
            s = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
            splits[divmod(int(flat), k)] = s
        return splits
    held = [i for i, f in enumerate(shape_families) if f in cfg.holdout_families]
    kept = [i for i, f in enumerate(shape_families) if f not in cfg.holdout_families]
    n_val = int(round(cfg.novel_val_fraction * len(kept)))
    val_shapes = set(rng.permutation(kept)[:n_val].tolist()) if n_val else set()
    for i in range(n_shapes):
        s = "test" if i in held else ("val" if i in val_shapes else "train")
        for j in range(k):
            splits[(i, j)] = s
    return splits


def render_sample(mesh, pose, cfg: DatagenConfig, render_cfg: RenderConfig, rng):
    rc = RenderConfig(**{**asdict(render_cfg), "size": cfg.image_size})
    bg = make_background(cfg.background, cfg.image_size, rng)
    albedo = tuple(rng.uniform(0.35, 1.0, 3).tolist())
    return render_view(mesh, camera_for(pose, rc), pose.inp, rc, background=bg, albedo=albedo)


def _threads():
    try:
        return max(1, int(os.environ.get("POSEFORGE_THREADS", "1")))
    except ValueError:
        return 1


def generate_dataset(shapes, out_dir, cfg=DatagenConfig(), render_cfg=RenderConfig(), seed=0,
                     config_record=None):
    """Render the synthetic set and write assets plus ``manifest.json``.

    ``shapes`` is a list of (shape_id, family, TriangleMesh).  The manifest
    is written last, atomically.
    """
    if not shapes:
        raise ValueError("shape list must not be empty")
    out = Path(out_dir)
    for sub in ("shapes", "views", "images"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    record = config_record if config_record is not None else {
        "datagen": asdict(cfg), "render": asdict(render_cfg)}
    splits = assign_splits([f for _, f, _ in shapes], cfg, seed)
    layout = (cfg.view_n_azi, tuple(math.radians(e) for e in cfg.view_elevations_deg))
    view_cfg = RenderConfig(**{**asdict(render_cfg), "size": cfg.view_size})

    def do_shape(si):
        sid, family, mesh = shapes[si]
        mesh = normalize(mesh)
        save_obj(mesh, out / "shapes" / f"{sid}.obj")
        cloud = sample_surface(mesh, cfg.n_points, seed=int(np.random.SeedSequence(
            [seed, si, 1]).generate_state(1)[0]))
        write_point_cloud(cloud, out / "shapes" / f"{sid}.pfspc")
        views = render_view_set(mesh, layout, view_cfg)
        write_view_set(views, out / "views" / sid, png=cfg.write_png)
        entry = {
            "id": sid,
            "family": family,
            "mesh": f"shapes/{sid}.obj",
            "points": f"shapes/{sid}.pfspc",
            "views": f"views/{sid}",
            "n_views": len(views),
            "diameter": diameter(mesh.vertices),
            "symmetric": bool(up_axis_symmetries(mesh, step_deg=5.0)),
            "chiral": is_chiral(mesh, step_deg=5.0),
        }
        samples = []
        for j in range(cfg.views_per_shape):
            rng = np.random.default_rng([seed, si, j, 2])
            pose = draw_pose(cfg, rng)
            im = render_sample(mesh, pose, cfg, render_cfg, rng)
            name = f"{sid}_{j:03d}"
            write_tensor(image_hwc(im), out / "images" / f"{name}.pfsimg")
            if cfg.write_png:
                write_png(im.rgb, out / "images" / f"{name}.png")
            samples.append({
                "id": name,
                "shape_id": sid,
                "image": f"images/{name}.pfsimg",
                "split": splits[(si, j)],
                "t": [0.0, 0.0, -render_cfg.distance],
                **pose.to_json(),
            })
        return entry, samples

    threads = _threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(do_shape, range(len(shapes))))
    else:
        results = [do_shape(i) for i in range(len(shapes))]
    manifest = {
        "format": 1,
        "seed": seed,
        "config": record,
        "config_sha256": config_sha256(record),
        "shapes": [r[0] for r in results],
        "samples": [s for r in results for s in r[1]],
    }
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, out / "manifest.json")
    return manifest


def load_manifest(data_dir, expected=None):
    """Read and validate a manifest.

    ``expected`` optionally maps config sections to the values the caller
    is running with; any difference marks the manifest as stale.
    """
    data_dir = Path(data_dir)
    path = data_dir / "manifest.json"
    if not path.is_file():
        raise ManifestError(f"no manifest at {path}")
    manifest = json.loads(path.read_text())
    if config_sha256(manifest["config"]) != manifest["config_sha256"]:
        raise ManifestError("manifest config hash does not match its recorded config")
    if expected:
        for key, value in expected.items():
            if manifest["config"].get(key) != value:
                raise ManifestError(f"stale manifest: config section {key!r} differs")
    ids = {s["id"] for s in manifest["shapes"]}
    for s in manifest["shapes"]:
        for key in ("mesh", "points"):
            if not (data_dir / s[key]).is_file():
                raise ManifestError(f"missing asset {s[key]}")
    for s in manifest["samples"]:
        if s["shape_id"] not in ids:
            raise ManifestError(f"sample {s['id']} references unknown shape {s['shape_id']}")
        if not (data_dir / s["image"]).is_file():
            raise ManifestError(f"missing asset {s['image']}")
        EulerPose.from_json(s)
    return manifest


# ------------------------------------------------------------ augmentation


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    crop_prob: float = 0.5
    color_prob: float = 0.5
    crop_max_frac: float = 0.1
    gain_range: tuple = (0.8, 1.2)
    brightness_range: tuple = (-0.1, 0.1)
    shape_azi_range_deg: tuple = (-45.0, 45.0)
    # off: flipped images keep the original shape, which is label noise for chiral shapes
    flip_mirrors_shape: bool = False

    def __post_init__(self):
        for name in ("gain_range", "brightness_range", "shape_azi_range_deg"):
            object.__setattr__(self, name, tuple(getattr(self, name)))


def hflip(image, pose: EulerPose):
    """Mirror a (C, H, W) image left-right; labels map to (-azi, ele, -inp)."""
    out = image[..., ::-1].copy()
    if out.shape[0] in (6, 7):
        # normal channels close the stack; mirroring negates the x component
        out[-3] = 1.0 - out[-3]
    return out, EulerPose(wrap_angle(-pose.azi), pose.ele, wrap_angle(-pose.inp))


def mirror_x(shape):
    """Reflect a mesh or point cloud through the x = 0 plane."""
    if isinstance(shape, TriangleMesh):
        # reversed winding keeps the faces outward after the reflection
        return TriangleMesh(shape.vertices * [-1.0, 1.0, 1.0], shape.faces[:, ::-1])
    if isinstance(shape, PointCloud):
        return PointCloud(shape.points * [-1.0, 1.0, 1.0])
    raise TypeError(f"cannot mirror {type(shape).__name__}")


def crop_jitter(image, rng, max_frac=0.1):
    """Re-crop with each corner moved by up to ``max_frac`` of the size, resize back."""
    c, h, w = image.shape
    dx = rng.uniform(-max_frac, max_frac, 2) * w
    dy = rng.uniform(-max_frac, max_frac, 2) * h
    x0, x1 = dx[0], w + dx[1]
    y0, y1 = dy[0], h + dy[1]
    xs = x0 + (np.arange(w) + 0.5) * (x1 - x0) / w - 0.5
    ys = y0 + (np.arange(h) + 0.5) * (y1 - y0) / h - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty_like(image)
    for k in range(c):
        out[k] = map_coordinates(image[k], [yy, xx], order=1, mode="nearest")
    return out


def color_jitter(image, rng, gain_range=(0.8, 1.2), brightness_range=(-0.1, 0.1)):
    out = image.copy()
    gain = rng.uniform(*gain_range, size=3).astype(image.dtype)
    bright = rng.uniform(*brightness_range)
    out[:3] = np.clip(out[:3] * gain[:, None, None] + bright, 0.0, 1.0)
    return out


def augment(image, pose: EulerPose, shape, rng, cfg=AugmentConfig()):
    """Training augmentation for one sample.

    Flip, crop jitter and color jitter fire independently with their
    probabilities.  An angle alpha is always drawn from
    ``shape_azi_range_deg``; the label becomes ``shift_azimuth(pose, alpha)``
    and the shape input is rotated by R_y(-alpha), which is the rotation
    under which the unchanged image shows that shifted azimuth.
    Returns (image, shape, pose).
    """
    image = np.asarray(image)
    if rng.random() < cfg.flip_prob:
        image, pose = hflip(image, pose)
        if cfg.flip_mirrors_shape:
            shape = mirror_x(shape)
    if rng.random() < cfg.crop_prob:
        image = crop_jitter(image, rng, cfg.crop_max_frac)
    if rng.random() < cfg.color_prob:
        image = color_jitter(image, rng, cfg.gain_range, cfg.brightness_range)
    lo, hi = np.radians(cfg.shape_azi_range_deg)
    alpha = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    if alpha != 0.0:
        shape = rotate_about_up(shape, -alpha)
        pose = shift_azimuth(pose, alpha)
    return image, shape, pose
