import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poseforge.metrics import (
    PosePair,
    acc_pi_6,
    accuracy_from_errors,
    add,
    add_accuracy,
    add_s,
    med_err,
)
from poseforge.rotcore import axis_angle, rot_y

from .conftest import random_rotation


def injected(errors_deg, rng):
    pairs = []
    for e in errors_deg:
        gt = random_rotation(rng)
        pairs.append(PosePair(gt @ axis_angle(rng.normal(size=3), math.radians(e)), gt))
    return pairs


def ring(n=12, radius=0.8, y=0.1):
    a = 2 * math.pi * np.arange(n) / n
    return np.stack([radius * np.sin(a), np.full(n, y), radius * np.cos(a)], axis=1)


def direct_add(pair, pts):
    total = 0.0
    for x in pts:
        total += np.linalg.norm((pair.gt_r @ x + pair.gt_t) - (pair.pred_r @ x + pair.pred_t))
    return total / len(pts)


def direct_add_s(pair, pts):
    total = 0.0
    for x1 in pts:
        g = pair.gt_r @ x1 + pair.gt_t
        total += min(np.linalg.norm(g - (pair.pred_r @ x2 + pair.pred_t)) for x2 in pts)
    return total / len(pts)


class TestRotationMetrics:
    def test_identical(self, rng):
        pairs = injected([0, 0, 0], rng)
        assert acc_pi_6(pairs) == 1.0
        assert med_err(pairs) == pytest.approx(0.0, abs=1e-6)

    def test_boundary_is_incorrect(self):
        assert accuracy_from_errors([math.pi / 6] * 4) == 0.0
        assert accuracy_from_errors([math.nextafter(math.pi / 6, 0)] * 4) == 1.0

    def test_injected_set(self, rng):
        pairs = injected([10, 20, 40, 50], rng)
        assert acc_pi_6(pairs) == 0.5
        assert med_err(pairs) == pytest.approx(30.0, abs=1e-9)

    def test_median_odd_and_even(self, rng):
        assert med_err(injected([10, 20, 30], rng)) == pytest.approx(20.0, abs=1e-9)
        assert med_err(injected([10, 30], rng)) == pytest.approx(20.0, abs=1e-9)

    def test_permutation_invariant(self, rng):
        pairs = injected(rng.uniform(0, 180, 15), rng)
        perm = [pairs[i] for i in rng.permutation(15)]
        assert acc_pi_6(perm) == acc_pi_6(pairs)
        assert med_err(perm) == med_err(pairs)

    def test_empty(self):
        with pytest.raises(ValueError):
            acc_pi_6([])
        with pytest.raises(ValueError):
            med_err([])


class TestAdd:
    def test_identical_zero(self, rng):
        r, t = random_rotation(rng), rng.normal(size=3)
        pts = rng.normal(size=(50, 3))
        pair = PosePair(r, r, t, t)
        assert add(pair, pts) == 0.0 and add_s(pair, pts) == 0.0

    @given(st.tuples(*[st.floats(-100, 100)] * 3), st.integers(0, 2**31))
    def test_pure_translation_exact(self, v, seed):
        r = np.random.default_rng(seed)
        rot = random_rotation(r)
        t = r.normal(size=3)
        pts = r.normal(size=(int(r.integers(1, 60)), 3))
        pair = PosePair(rot, rot, t + np.array(v), t)
        want = float(np.sqrt(((t + np.array(v) - t) ** 2).sum()))
        assert add(pair, pts) == want

    def test_matches_direct_recomputation(self, rng):
        pts = rng.normal(size=(200, 3))
        pair = PosePair(random_rotation(rng), random_rotation(rng), rng.normal(size=3),
                        rng.normal(size=3))
        assert abs(add(pair, pts) - direct_add(pair, pts)) < 1e-12
        assert abs(add_s(pair, pts[:60]) - direct_add_s(pair, pts[:60])) < 1e-12

    def test_add_s_never_exceeds_add(self, rng):
        for _ in range(300):
            pts = rng.normal(size=(int(rng.integers(1, 40)), 3)) * rng.uniform(0.01, 10)
            pair = PosePair(random_rotation(rng), random_rotation(rng),
                            rng.normal(size=3), rng.normal(size=3))
            assert add_s(pair, pts) <= add(pair, pts)

    def test_symmetric_ring(self):
        pts = ring()
        pair = PosePair(rot_y(math.radians(30)), np.eye(3), [0, 0, 0], [0, 0, 0])
        assert add_s(pair, pts) <= 1e-9
        assert add(pair, pts) > 0.1

    def test_common_rigid_motion_invariance(self, rng):
        pts = rng.normal(size=(80, 3))
        for _ in range(10):
            r1, r2 = random_rotation(rng), random_rotation(rng)
            t1, t2 = rng.normal(size=3), rng.normal(size=3)
            q, u = random_rotation(rng), rng.normal(size=3) * 3
            a = PosePair(r1, r2, t1, t2)
            b = PosePair(q @ r1, q @ r2, q @ t1 + u, q @ t2 + u)
            assert abs(add(a, pts) - add(b, pts)) < 1e-9
            assert abs(add_s(a, pts) - add_s(b, pts)) < 1e-9

    def test_chunking_does_not_matter(self, rng):
        pts = rng.normal(size=(300, 3))
        pair = PosePair(random_rotation(rng), random_rotation(rng), np.zeros(3), np.zeros(3))
        assert add_s(pair, pts, chunk=7) == add_s(pair, pts, chunk=1000)

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            add(PosePair(np.eye(3), np.eye(3)), rng.normal(size=(5, 3)))
        with pytest.raises(ValueError):
            PosePair(np.eye(3), np.eye(3), np.zeros(3), None)
        with pytest.raises(ValueError):
            add(PosePair(np.eye(3), np.eye(3), np.zeros(3), np.zeros(3)), np.zeros((0, 3)))


class TestAddAccuracy:
    def _translated(self, offsets):
        return [PosePair(np.eye(3), np.eye(3), [o, 0.0, 0.0], [0.0, 0.0, 0.0]) for o in offsets]

    def test_identical(self, rng):
        pts = rng.normal(size=(30, 3))
        pairs = self._translated([0.0, 0.0])
        assert add_accuracy(pairs, [pts, pts], [2.0, 2.0]) == 1.0

    def test_boundary_strict(self, rng):
        pts = rng.normal(size=(30, 3))
        d = 2.0
        pairs = self._translated([0.1 * d, 0.1 * d])
        assert add_accuracy(pairs, [pts, pts], [d, d]) == 0.0

    def test_half(self, rng):
        pts = rng.normal(size=(30, 3))
        d = 1.5
        pairs = self._translated([0.05 * d, 0.2 * d])
        assert add_accuracy(pairs, [pts, pts], [d, d]) == 0.5

    def test_symmetric_flag_uses_add_s(self):
        pts = ring()
        pair = PosePair(rot_y(math.radians(30)), np.eye(3), [0, 0, 0], [0, 0, 0])
        assert add_accuracy([pair], [pts], [1.6], [False]) == 0.0
        assert add_accuracy([pair], [pts], [1.6], [True]) == 1.0

    def test_zero_diameter(self, rng):
        with pytest.raises(ValueError):
            add_accuracy(self._translated([0.0]), [rng.normal(size=(3, 3))], [0.0])
