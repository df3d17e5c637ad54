"""Triangle meshes and point clouds: OBJ parsing, normalization, sampling."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import cdist

from .rotcore import rot_y

PC_MAGIC = b"PFSPC\x00\x00\x01"


class ObjParseError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh vertices must be finite")
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise ValueError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("faces must have three distinct vertex indices")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def triangles(self):
        """(F, 3, 3) array of triangle corner coordinates."""
        return self.vertices[self.faces]

    def face_areas(self):
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (N, 3)

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", p)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class ShapeMeta:
    diameter: float
    centroid: tuple


# ------------------------------------------------------------------ OBJ


def _parse_index(token, n_vertices, lineno, col):
    head = token.split("/")[0]
    try:
        idx = int(head)
    except ValueError:
        raise ObjParseError(f"line {lineno}, column {col}: bad face index {token!r}") from None
    if idx > 0:
        idx -= 1
    elif idx < 0:
        idx += n_vertices
    else:
        raise ObjParseError(f"line {lineno}, column {col}: face index 0 is invalid")
    if not 0 <= idx < n_vertices:
        raise ObjParseError(
            f"line {lineno}, column {col}: face index {head} out of range "
            f"({n_vertices} vertices defined)"
        )
    return idx


def parse_obj(text: str) -> TriangleMesh:
    vertices, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise ObjParseError(f"line {lineno}, column 1: vertex needs 3 coordinates")
            try:
                vertices.append([float(x) for x in parts[1:4]])
            except ValueError:
                raise ObjParseError(f"line {lineno}, column 3: bad vertex coordinate") from None
        elif tag == "f":
            if len(parts) < 4:
                raise ObjParseError(f"line {lineno}, column 1: face needs at least 3 vertices")
            col = len(tag) + 2
            idx = []
            for tok in parts[1:]:
                idx.append(_parse_index(tok, len(vertices), lineno, col))
                col += len(tok) + 1
            # fan triangulation from the first corner
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
        # vt, vn, usemtl, mtllib, o, g, s, l ... are ignored
    return TriangleMesh(np.array(vertices, dtype=float).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))


def load_obj(path) -> TriangleMesh:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such OBJ file: {path}")
    return parse_obj(path.read_text())


def save_obj(mesh: TriangleMesh, path):
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------ geometry


def normalize(mesh: TriangleMesh) -> TriangleMesh:
    """Center the vertex centroid and scale to unit max vertex norm."""
    if len(mesh.vertices) == 0:
        raise ValueError("cannot normalize an empty mesh")
    v = mesh.vertices - mesh.vertices.mean(axis=0)
    r = np.linalg.norm(v, axis=1).max()
    if r == 0.0:
        raise ValueError("degenerate mesh: all vertices coincide")
    return TriangleMesh(v / r, mesh.faces)


def sample_surface(mesh: TriangleMesh, n: int, seed: int, return_faces=False):
    if n < 1:
        raise ValueError("sample count must be at least 1")
    areas = mesh.face_areas() if len(mesh.faces) else np.zeros(0)
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    fold = u + v > 1.0
    u[fold] = 1.0 - u[fold]
    v[fold] = 1.0 - v[fold]
    t = mesh.triangles()[face]
    pts = t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])
    cloud = PointCloud(pts)
    if return_faces:
        return cloud, face
    return cloud


def diameter(points) -> float:
    """Exact maximum pairwise distance.

    The farthest pair always lies on the convex hull, so the quadratic
    search runs over hull vertices only.
    """
    if isinstance(points, TriangleMesh):
        p = points.vertices
    elif isinstance(points, PointCloud):
        p = points.points
    else:
        p = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(p) < 2:
        return 0.0
    if len(p) > 64:
        try:
            p = p[ConvexHull(p).vertices]
        except QhullError:
            pass  # flat or degenerate sets: fall back to all points
    return float(cdist(p, p).max())


def shape_meta(mesh: TriangleMesh) -> ShapeMeta:
    return ShapeMeta(diameter(mesh.vertices), tuple(mesh.vertices.mean(axis=0).tolist()))


def rotate_about_up(shape, alpha: float):
    """Rotate a mesh or point cloud by R_y(alpha); connectivity preserved."""
    r = rot_y(alpha)
    if isinstance(shape, TriangleMesh):
        return TriangleMesh(shape.vertices @ r.T, shape.faces)
    if isinstance(shape, PointCloud):
        return PointCloud(shape.points @ r.T)
    raise TypeError(f"cannot rotate {type(shape).__name__}")


def max_norm(mesh: TriangleMesh) -> float:
    if len(mesh.vertices) == 0:
        return 0.0
    return float(np.linalg.norm(mesh.vertices, axis=1).max())


# ------------------------------------------------------ point-cloud file


def write_point_cloud(cloud: PointCloud, path):
    pts = np.ascontiguousarray(cloud.points, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(PC_MAGIC)
        fh.write(struct.pack("<Q", len(pts)))
        fh.write(pts.tobytes())


def read_point_cloud(path) -> PointCloud:
    data = Path(path).read_bytes()
    if data[:8] != PC_MAGIC:
        raise ValueError(f"{path}: not a point-cloud file (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    body = data[16:]
    if len(body) != 12 * n:
        raise ValueError(f"{path}: expected {n} points, payload has {len(body)} bytes")
    return PointCloud(np.frombuffer(body, dtype="<f4").reshape(n, 3).astype(np.float64))
