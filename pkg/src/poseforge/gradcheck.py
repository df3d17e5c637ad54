"""Central finite-difference checks for every autodiff primitive and the toy network."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import PoseNetwork, PoseNetworkConfig
from .rotcore import encode_batch

EPS = 1e-6
TOLERANCE = 1e-4
# Denominator floor.  Central differences at EPS are quantized in steps of
# ulp(f) / (2 * EPS), about 4.4e-10 for losses near 4, so relative error is
# only meaningful well above that; smaller gradients must agree to
# TOLERANCE * FLOOR absolutely.
FLOOR = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_coords: int
    seconds: float

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE


def relative_error(analytic, numeric):
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)


def check(name, fn, leaves, rng, max_coords=64, eps=EPS):
    """Compare backward() against central differences of scalar ``fn()``.

    ``leaves`` are Tensors/Parameters whose ``data`` is perturbed in place.
    At most ``max_coords`` coordinates per leaf are probed.
    """
    t0 = time.perf_counter()
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.data)
    out = fn()
    ad.backward(out)
    analytic = [leaf.grad.copy() for leaf in leaves]
    worst, count = 0.0, 0
    for leaf, grad in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = fn().item()
            flat[c] = orig - eps
            down = fn().item()
            flat[c] = orig
            numeric = (up - down) / (2 * eps)
            worst = max(worst, float(relative_error(grad.reshape(-1)[c], numeric)))
            count += 1
    return CheckResult(name, worst, count, time.perf_counter() - t0)


def _leaf(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _weights(rng, shape):
    return rng.standard_normal(shape)


def _scalarize(t, w):
    return ad.mean(t * Tensor(w)) if t.ndim else t


def primitive_checks(rng):
    """(name, fn, leaves) triples, one per primitive, on <= 64-element inputs."""
    cases = []

    def add_case(name, build, leaves):
        cases.append((name, build, leaves))

    a, b = _leaf(rng, (4, 5)), _leaf(rng, (5, 3))
    w = _weights(rng, (4, 3))
    add_case("matmul", lambda: _scalarize(ad.matmul(a, b), w), [a, b])

    x, wt, bs = _leaf(rng, (4, 6)), _leaf(rng, (5, 6)), _leaf(rng, (5,))
    w2 = _weights(rng, (4, 5))
    add_case("linear", lambda: _scalarize(ad.linear(x, wt, bs), w2), [x, wt, bs])

    xc, kc = _leaf(rng, (2, 2, 5, 5)), _leaf(rng, (3, 2, 3, 3))
    bc = _leaf(rng, (3,))
    w3 = _weights(rng, (2, 3, 3, 3))
    add_case("conv2d(stride=2,pad=1)",
             lambda: _scalarize(ad.conv2d(xc, kc, bc, stride=2, pad=1), w3), [xc, kc, bc])
    xi = _leaf(rng, (1, 1, 4, 4))
    ki = _leaf(rng, (2, 1, 3, 3))
    w4 = _weights(rng, (1, 2, 2, 2))
    add_case("conv2d(stride=1,pad=0)", lambda: _scalarize(ad.conv2d(xi, ki), w4), [xi, ki])

    xb, g, be = _leaf(rng, (6, 4)), _leaf(rng, (4,), 0.5, 1.5), _leaf(rng, (4,))
    w5 = _weights(rng, (6, 4))

    def bn_train():
        rm, rv = np.zeros(4), np.ones(4)
        return _scalarize(ad.batchnorm(xb, g, be, rm, rv, True), w5)

    add_case("batchnorm(train,1d)", bn_train, [xb, g, be])
    rm_e, rv_e = rng.uniform(-0.2, 0.2, 4), rng.uniform(0.5, 1.5, 4)
    add_case("batchnorm(eval,1d)",
             lambda: _scalarize(ad.batchnorm(xb, g, be, rm_e, rv_e, False), w5), [xb, g, be])
    x2, g2, b2 = _leaf(rng, (3, 2, 3, 3)), _leaf(rng, (2,), 0.5, 1.5), _leaf(rng, (2,))
    w6 = _weights(rng, (3, 2, 3, 3))

    def bn_train2d():
        return _scalarize(ad.batchnorm(x2, g2, b2, np.zeros(2), np.ones(2), True), w6)

    add_case("batchnorm(train,2d)", bn_train2d, [x2, g2, b2])

    xr = _leaf(rng, (5, 6))
    w7 = _weights(rng, (5, 6))
    add_case("relu", lambda: _scalarize(ad.relu(xr), w7), [xr])
    add_case("tanh", lambda: _scalarize(ad.tanh(xr), w7), [xr])
    add_case("softmax", lambda: _scalarize(ad.softmax(xr), w7), [xr])

    xm = _leaf(rng, (2, 7, 4))
    w8 = _weights(rng, (2, 4))
    add_case("global_max_pool", lambda: _scalarize(ad.global_max_pool(xm, axis=1)[0], w8), [xm])
    xp = _leaf(rng, (1, 2, 4, 4))
    w9 = _weights(rng, (1, 2, 2, 2))
    add_case("max_pool2d", lambda: _scalarize(ad.max_pool2d(xp, 2), w9), [xp])
    add_case("global_avg_pool2d", lambda: _scalarize(ad.global_avg_pool2d(xp), w9[0, :, 0, :1].T),
             [xp])

    c1, c2 = _leaf(rng, (3, 2)), _leaf(rng, (3, 4))
    w10 = _weights(rng, (3, 6))
    add_case("concat", lambda: _scalarize(ad.concat([c1, c2], axis=1), w10), [c1, c2])
    add_case("mean", lambda: ad.mean(ad.mean(c2, axis=0) * Tensor(w10[0, :4])), [c2])
    add_case("sum", lambda: ad.mean(ad.sum_(c2, axis=1) * Tensor(w10[:, 0])), [c2])
    add_case("reshape/transpose",
             lambda: _scalarize(ad.transpose(ad.reshape(c2, (3, 2, 2)), (2, 0, 1)),
                                w10.reshape(-1)[:12].reshape(2, 3, 2)), [c2])
    add_case("getitem", lambda: _scalarize(c2[:, 1:3], w10[:, :2]), [c2])
    idx = rng.integers(0, 4, size=3)
    add_case("take_last", lambda: _scalarize(ad.take_last(c2, idx), w10[:, 0]), [c2])
    add_case("add/sub/mul broadcast",
             lambda: _scalarize((c2 * c1[:, :1] + c1[:, 1:]) - c2 * c2, w10[:, :4]), [c1, c2])

    probs = _leaf(rng, (4, 5), 0.05, 1.0)
    tgt = rng.integers(0, 5, size=4)
    add_case("cross_entropy", lambda: ad.mean(ad.cross_entropy(probs, tgt)), [probs])
    res = _leaf(rng, (12,), -3.0, 3.0)
    add_case("huber", lambda: ad.mean(ad.huber(res, 1.0) * Tensor(np.abs(w10.reshape(-1)[:12]))),
             [res])
    return cases


def toy_network_config(mode):
    return PoseNetworkConfig(
        image_size=8, image_widths=(3, 4), shape_mode=mode, point_widths=(4, 6), n_points=5,
        view_widths=(2, 3), view_n_azi=2, view_elevations_deg=(30.0,), view_size=4,
        head_hidden=(8, 6, 5), bins_azi=4, bins_ele=3, bins_inp=4, dtype="float64")


def network_check(mode, rng, coords_per_param=6):
    from .trainloop import pose_loss

    cfg = toy_network_config(mode)
    net = PoseNetwork(cfg, seed=int(rng.integers(1 << 31)))
    net.train()
    batch = 3
    images = rng.uniform(0, 1, (batch, 3, cfg.image_size, cfg.image_size))
    if mode == "pc":
        shapes = rng.uniform(-1, 1, (batch, cfg.n_points, 3))
    else:
        shapes = rng.uniform(0, 1, (batch, cfg.n_views, 3, cfg.view_size, cfg.view_size))
    poses = np.stack([rng.uniform(-np.pi, np.pi, batch), rng.uniform(0, 1.2, batch),
                      rng.uniform(-0.5, 0.5, batch)], axis=1)
    labels, offsets = encode_batch(poses, cfg.binning)

    def fn():
        probs, offs = net(images, shapes)
        return pose_loss(probs, offs, labels, offsets)

    params = net.parameters()
    result = check(f"pose network ({mode}) + loss", fn, params, rng, max_coords=coords_per_param)
    net.zero_grad()
    return result


def run_suite(seed=0, log=None):
    """Run every check; returns the list of CheckResult."""
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, leaves in primitive_checks(rng):
        results.append(check(name, fn, leaves, rng))
        if log:
            log(results[-1])
    for mode in ("pc", "mv"):
        results.append(network_check(mode, rng))
        if log:
            log(results[-1])
    return results
