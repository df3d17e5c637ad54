import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poseforge.datagen import make_procedural_shapes
from poseforge.render import (
    Camera,
    RenderConfig,
    camera_for,
    place_cameras,
    read_png,
    read_tensor,
    read_view_set_array,
    render_view,
    render_view_set,
    write_png,
    write_tensor,
    write_view_set,
)
from poseforge.rotcore import EulerPose
from poseforge.shapecore import TriangleMesh, normalize, rotate_about_up

from .conftest import box_mesh, cube_mesh

CFG = RenderConfig()


def cam(azi, ele=0.3, cfg=CFG):
    return camera_for(EulerPose(azi, ele, 0.0), cfg)


class TestConfig:
    def test_defaults(self):
        assert (CFG.size, CFG.fov_deg, CFG.distance) == (64, 50.0, 2.5)
        assert CFG.channels == 3 and not CFG.depth and not CFG.normal
        assert RenderConfig(depth=True, normal=True).channels == 7

    @pytest.mark.parametrize("kw", [{"size": 4}, {"fov_deg": 0}, {"fov_deg": 180},
                                    {"distance": 1.0}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            RenderConfig(**kw)

    def test_camera_invariants(self):
        with pytest.raises(ValueError):
            Camera(0, 0, distance=0.5)
        with pytest.raises(ValueError):
            Camera(0, 0, fov=math.pi)


class TestPlaceCameras:
    def test_six_by_two(self):
        cams = place_cameras(6, [0.0, math.radians(30)])
        assert len(cams) == 12
        np.testing.assert_allclose([math.degrees(c.azimuth) for c in cams[:6]],
                                   [0, 60, 120, 180, 240, 300])
        assert [c.elevation for c in cams] == [0.0] * 6 + [math.radians(30)] * 6

    def test_single(self):
        (c,) = place_cameras(1, [math.radians(30)])
        assert c.azimuth == 0.0 and c.elevation == math.radians(30)

    def test_count(self):
        assert len(place_cameras(4, np.radians([0, 30, 60]))) == 12

    @pytest.mark.parametrize("n,els", [(0, [0.0]), (3, []), (3, [-0.1]), (3, [2.0])])
    def test_errors(self, n, els):
        with pytest.raises(ValueError):
            place_cameras(n, els)


class TestRenderView:
    def test_empty_mesh_is_background(self):
        cfg = RenderConfig(background=(0.2, 0.4, 0.6))
        im = render_view(TriangleMesh.empty(), cam(0.0), 0.0, cfg)
        assert not im.mask.any()
        np.testing.assert_array_equal(im.rgb, np.broadcast_to(
            np.float32([0.2, 0.4, 0.6]), im.rgb.shape))

    def test_background_purity(self, asym_mesh, rng):
        bg = rng.uniform(0, 1, (64, 64, 3)).astype(np.float32)
        im = render_view(asym_mesh, cam(0.7), 0.2, CFG, background=bg)
        assert im.mask.any() and not im.mask.all()
        np.testing.assert_array_equal(im.rgb[~im.mask], bg[~im.mask])

    def test_cube_coverage_matches_projection(self):
        im = render_view(cube_mesh(), Camera(0.0, 0.0), 0.0, CFG)
        f = 0.5 * CFG.size / math.tan(math.radians(CFG.fov_deg) / 2)
        side = 2 * f * 0.5 / (CFG.distance - 0.5)  # front face at depth rho - 1/2
        expected = (side / CFG.size) ** 2
        assert abs(im.mask.mean() - expected) / expected < 0.02

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError, match="normalized"):
            render_view(cube_mesh(-1, 1), cam(0.0), 0.0, CFG)

    def test_deterministic(self, asym_mesh):
        a = render_view(asym_mesh, cam(1.0), 0.3, RenderConfig(depth=True, normal=True))
        b = render_view(asym_mesh, cam(1.0), 0.3, RenderConfig(depth=True, normal=True))
        np.testing.assert_array_equal(a.to_array(), b.to_array())

    def test_values_in_unit_range(self, asym_mesh):
        im = render_view(asym_mesh, cam(2.0), -0.2, RenderConfig(depth=True, normal=True))
        arr = im.to_array()
        assert arr.shape == (7, 64, 64)
        assert np.isfinite(arr).all() and arr.min() >= 0 and arr.max() <= 1

    def test_equivariance(self, rng):
        shapes = [m for fam in ("cuboid", "l_shape", "composite")
                  for m in make_procedural_shapes(2, fam, seed=11)]
        for _ in range(20):
            mesh = shapes[int(rng.integers(len(shapes)))]
            a, alpha = rng.uniform(-math.pi, math.pi), rng.uniform(-math.pi, math.pi)
            ele = rng.uniform(-0.5, 1.2)
            lhs = render_view(rotate_about_up(mesh, alpha), cam(a, ele), 0.0, CFG).rgb
            rhs = render_view(mesh, cam(a - alpha, ele), 0.0, CFG).rgb
            assert np.abs(lhs - rhs).mean(axis=(0, 1)).max() < 1e-3

    def test_inplane_rotates_image(self, asym_mesh):
        # a quarter turn in-plane is a 90 degree image rotation on this square grid
        a = render_view(asym_mesh, cam(0.4), 0.0, CFG).rgb
        b = render_view(asym_mesh, cam(0.4), math.pi / 2, CFG).rgb
        diff = min(np.abs(np.rot90(a, k) - b).mean() for k in (1, 3))
        assert diff < 1e-3

    def test_flip_mirror_on_symmetric_box(self, rng):
        box = normalize(box_mesh([-0.6, -0.3, -0.4], [0.6, 0.3, 0.4]))
        for _ in range(10):
            p = EulerPose(rng.uniform(-3, 3), rng.uniform(-1, 1.2), rng.uniform(-0.5, 0.5))
            q = EulerPose(-p.azi, p.ele, -p.inp)
            a = render_view(box, camera_for(p, CFG), p.inp, CFG).rgb
            b = render_view(box, camera_for(q, CFG), q.inp, CFG).rgb
            assert np.abs(a[:, ::-1] - b).mean() < 1e-3

    def test_depth_monotone_in_distance(self, asym_mesh):
        mins = []
        for d in (1.8, 2.5, 3.5, 5.0, 8.0):
            cfg = RenderConfig(distance=d, depth=True, fov_deg=70)
            im = render_view(asym_mesh, camera_for(EulerPose(0.5, 0.3, 0), cfg), 0.0, cfg)
            mins.append(im.depth[im.mask].min())
        assert all(b > a for a, b in zip(mins, mins[1:]))

    def test_normal_channel(self):
        cfg = RenderConfig(normal=True)
        im = render_view(cube_mesh(), Camera(0.0, 0.0), 0.0, cfg)
        # face-on front face: camera-space normal (0, 0, 1) -> (0.5, 0.5, 1)
        centre = im.normal[32, 32]
        np.testing.assert_allclose(centre, [0.5, 0.5, 1.0], atol=1e-6)
        np.testing.assert_array_equal(im.normal[~im.mask], 0.5)

    def test_positive_elevation_sees_top(self):
        # a box that is wide and thin in y; from above the top face is visible
        slab = normalize(box_mesh([-1, -0.05, -1], [1, 0.05, 1]))
        hi = render_view(slab, cam(0.0, math.radians(60)), 0.0, CFG).mask.mean()
        lo = render_view(slab, cam(0.0, 0.0), 0.0, CFG).mask.mean()
        assert hi > 3 * lo


class TestViewSet:
    def test_six_by_two(self, asym_mesh):
        vs = render_view_set(asym_mesh, (6, (0.0, math.radians(30))), RenderConfig(size=32))
        assert len(vs) == 12 and vs.to_array().shape == (12, 3, 32, 32)

    def test_one_by_one(self, asym_mesh):
        assert len(render_view_set(asym_mesh, (1, (0.5,)), RenderConfig(size=16))) == 1

    def test_order_and_threads(self, asym_mesh):
        cfg = RenderConfig(size=32)
        layout = (4, (0.0, 0.6))
        serial = render_view_set(asym_mesh, layout, cfg).to_array()
        threaded = render_view_set(asym_mesh, layout, cfg, threads=3).to_array()
        np.testing.assert_array_equal(serial, threaded)
        for k, c in enumerate(place_cameras(4, [0.0, 0.6])):
            np.testing.assert_array_equal(
                serial[k], render_view(asym_mesh, c, 0.0, cfg).to_array())

    def test_serialized_twice_identical(self, asym_mesh, tmp_path):
        vs = render_view_set(asym_mesh, (3, (0.2,)), RenderConfig(size=16))
        write_view_set(vs, tmp_path / "a")
        write_view_set(vs, tmp_path / "b")
        for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        np.testing.assert_array_equal(read_view_set_array(tmp_path / "a", 3), vs.to_array())


class TestFiles:
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4))
    def test_tensor_round_trip(self, h, w, c):
        import tempfile
        from pathlib import Path

        a = np.random.default_rng(h * 100 + w * 10 + c).uniform(size=(h, w, c)).astype(np.float32)
        with tempfile.TemporaryDirectory() as d:
            p = Path(d) / "t.pfsimg"
            write_tensor(a, p)
            raw = p.read_bytes()
            assert raw[:8] == b"PFSIMG\x00\x01"
            assert np.frombuffer(raw[8:20], "<u4").tolist() == [h, w, c]
            np.testing.assert_array_equal(read_tensor(p), a)

    def test_tensor_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"garbage!" + bytes(12))
        with pytest.raises(ValueError):
            read_tensor(tmp_path / "x")

    def test_png_round_trip_and_determinism(self, tmp_path, asym_mesh):
        rgb = render_view(asym_mesh, cam(0.3), 0.0, CFG).rgb
        write_png(rgb, tmp_path / "a.png")
        write_png(rgb, tmp_path / "b.png")
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
        assert np.abs(read_png(tmp_path / "a.png") - rgb).max() <= 0.5 / 255 + 1e-7
