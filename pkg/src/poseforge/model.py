"""Image encoder, shape encoders and the classification-and-regression head."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNorm, Conv2d, Linear, Module, Tensor
from .rotcore import ANGLES, AngleBinning, EulerPose, decode_bins, BinnedPose

SHAPE_MODES = ("pc", "mv")


@dataclass(frozen=True)
class PoseNetworkConfig:
    image_size: int = 64
    image_channels: int = 3
    image_widths: tuple = (16, 32, 64, 128)
    shape_mode: str = "mv"
    point_widths: tuple = (64, 128, 256)
    n_points: int = 2500
    view_widths: tuple = (16, 32, 64, 128)
    view_n_azi: int = 6
    view_elevations_deg: tuple = (0.0, 30.0)
    view_size: int = 64
    view_channels: int = 3
    head_hidden: tuple = (800, 400, 200)
    bins_azi: int = 24
    bins_ele: int = 12
    bins_inp: int = 24
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("image_widths", "point_widths", "view_widths", "head_hidden",
                     "view_elevations_deg"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.shape_mode not in SHAPE_MODES:
            raise ValueError(f"shape_mode must be one of {SHAPE_MODES}, got {self.shape_mode!r}")
        if not self.image_widths or not self.head_hidden:
            raise ValueError("encoder widths and head sizes must be non-empty")
        if self.shape_mode == "pc" and not self.point_widths:
            raise ValueError("point encoder widths must be non-empty")
        if self.shape_mode == "mv" and not self.view_widths:
            raise ValueError("view encoder widths must be non-empty")
        down = 2 ** len(self.image_widths)
        if self.image_size % down:
            raise ValueError(f"image_size {self.image_size} not divisible by {down}")
        if self.shape_mode == "mv" and self.view_size % (2 ** len(self.view_widths)):
            raise ValueError(f"view_size {self.view_size} not divisible by encoder stride")
        AngleBinning(self.bins_azi, self.bins_ele, self.bins_inp)
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def binning(self):
        return AngleBinning(self.bins_azi, self.bins_ele, self.bins_inp)

    @property
    def n_views(self):
        return self.view_n_azi * len(self.view_elevations_deg)

    @property
    def view_layout(self):
        return (self.view_n_azi, tuple(math.radians(e) for e in self.view_elevations_deg))

    @property
    def image_dim(self):
        return self.image_widths[-1]

    @property
    def shape_dim(self):
        if self.shape_mode == "pc":
            return self.point_widths[-1]
        return self.n_views * self.view_widths[-1]

    @property
    def head_input_dim(self):
        return self.image_dim + self.shape_dim

    @property
    def head_output_dim(self):
        return 2 * self.binning.total

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        return cls(**d)


@dataclass
class PosePrediction:
    """Per-angle bin probabilities and in-bin offsets for one sample."""

    probabilities: tuple
    offsets: tuple


class ConvEncoder(Module):
    """Stride-2 conv-bn-relu blocks followed by global average pooling."""

    def __init__(self, c_in, widths, rng, dtype):
        super().__init__()
        self.blocks = []
        prev = c_in
        for i, w in enumerate(widths):
            conv = self.add(f"conv{i}", Conv2d(prev, w, 3, rng, stride=2, dtype=dtype))
            bn = self.add(f"bn{i}", BatchNorm(w, dtype=dtype))
            self.blocks.append((conv, bn))
            prev = w

    def __call__(self, x):
        for conv, bn in self.blocks:
            x = ad.relu(bn(conv(x)))
        return ad.global_avg_pool2d(x)


class PointEncoder(Module):
    """Shared per-point MLP and a global max pool over the points."""

    def __init__(self, widths, rng, dtype):
        super().__init__()
        self.layers = []
        prev = 3
        for i, w in enumerate(widths):
            fc = self.add(f"fc{i}", Linear(prev, w, rng, dtype=dtype, bias=False))
            bn = self.add(f"bn{i}", BatchNorm(w, dtype=dtype))
            self.layers.append((fc, bn))
            prev = w

    def __call__(self, pts):
        b, n, _ = pts.shape
        x = ad.reshape(pts, (b * n, 3))
        for fc, bn in self.layers:
            x = ad.relu(bn(fc(x)))
        x = ad.reshape(x, (b, n, x.shape[1]))
        pooled, _ = ad.global_max_pool(x, axis=1)
        return pooled


class ViewEncoder(Module):
    """One CNN applied to every view with shared weights; features concatenated."""

    def __init__(self, c_in, widths, rng, dtype):
        super().__init__()
        self.cnn = self.add("cnn", ConvEncoder(c_in, widths, rng, dtype))

    def __call__(self, views):
        b, k = views.shape[:2]
        x = ad.reshape(views, (b * k,) + tuple(views.shape[2:]))
        feat = self.cnn(x)
        return ad.reshape(feat, (b, k * feat.shape[1]))


class PoseNetwork(Module):
    def __init__(self, config: PoseNetworkConfig, seed=0):
        super().__init__()
        self.config = config
        dtype = np.dtype(config.dtype)
        self.np_dtype = dtype
        rng = np.random.default_rng(seed)
        self.image_encoder = self.add(
            "image", ConvEncoder(config.image_channels, config.image_widths, rng, dtype))
        if config.shape_mode == "pc":
            self.shape_encoder = self.add("points", PointEncoder(config.point_widths, rng, dtype))
        else:
            self.shape_encoder = self.add(
                "views", ViewEncoder(config.view_channels, config.view_widths, rng, dtype))
        self.head = []
        prev = config.head_input_dim
        for i, h in enumerate(config.head_hidden):
            # batchnorm follows, so a bias would be redundant
            fc = self.add(f"head_fc{i}", Linear(prev, h, rng, dtype=dtype, bias=False))
            bn = self.add(f"head_bn{i}", BatchNorm(h, dtype=dtype))
            self.head.append((fc, bn))
            prev = h
        self.out = self.add("head_out", Linear(prev, config.head_output_dim, rng, dtype=dtype))
        # small output init keeps initial softmax near uniform
        self.out.weight.data *= 0.1

    def features(self, images, shapes):
        img = self.image_encoder(images)
        shp = self.shape_encoder(shapes)
        return ad.concat([img, shp], axis=1)

    def __call__(self, images, shapes):
        """Return (probabilities, offsets): lists of per-angle (B, L) tensors."""
        images = self._as_input(images, 4, "image")
        shapes = self._as_input(shapes, 3 if self.config.shape_mode == "pc" else 5, "shape")
        self._check_inputs(images, shapes)
        x = self.features(images, shapes)
        for fc, bn in self.head:
            x = ad.relu(bn(fc(x)))
        out = self.out(x)
        total = self.config.binning.total
        probs, offs = [], []
        start = 0
        for n in self.config.binning.counts:
            probs.append(ad.softmax(out[:, start:start + n]))
            offs.append(ad.tanh(out[:, total + start:total + start + n]))
            start += n
        return probs, offs

    def _as_input(self, x, ndim, what):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.np_dtype))
        elif x.dtype != self.np_dtype:
            x = Tensor(x.data.astype(self.np_dtype))
        if x.ndim != ndim:
            raise ad.ShapeError(
                f"{what} input must be {ndim}-D for shape mode {self.config.shape_mode!r}, "
                f"got shape {x.shape}")
        return x

    def _check_inputs(self, images, shapes):
        c = self.config
        if images.shape[1:] != (c.image_channels, c.image_size, c.image_size):
            raise ad.ShapeError(
                f"image batch {images.shape} does not match "
                f"({c.image_channels}, {c.image_size}, {c.image_size})")
        if c.shape_mode == "pc":
            if shapes.shape[2] != 3:
                raise ad.ShapeError(f"point cloud batch must be (B, N, 3), got {shapes.shape}")
        elif shapes.shape[1:] != (c.n_views, c.view_channels, c.view_size, c.view_size):
            raise ad.ShapeError(
                f"view batch {shapes.shape} does not match "
                f"({c.n_views}, {c.view_channels}, {c.view_size}, {c.view_size})")
        if images.shape[0] != shapes.shape[0]:
            raise ad.ShapeError("image and shape batches differ in size")


def build_network(config: PoseNetworkConfig, seed=0) -> PoseNetwork:
    return PoseNetwork(config, seed)


def predict_batch(net: PoseNetwork, images, shapes):
    """Eval-mode forward; returns a list of :class:`PosePrediction`."""
    was_training = net.training
    net.eval()
    try:
        probs, offs = net(images, shapes)
    finally:
        net.train(was_training)
    n = probs[0].shape[0]
    return [
        PosePrediction(tuple(p.data[i].copy() for p in probs),
                       tuple(o.data[i].copy() for o in offs))
        for i in range(n)
    ]


def predict(net: PoseNetwork, image, shape) -> PosePrediction:
    """Single-sample prediction; ``image`` (C, H, W), ``shape`` (N, 3) or (K, C, H, W)."""
    image = np.asarray(image)[None]
    shape = np.asarray(shape)[None]
    # eval-mode batchnorm is per-sample, so a batch of one is fine
    return predict_batch(net, image, shape)[0]


def decode_prediction(pred: PosePrediction, binning: AngleBinning) -> EulerPose:
    labels, offsets = [], []
    for p, o, n in zip(pred.probabilities, pred.offsets, binning.counts):
        if len(p) != n:
            raise ValueError(f"prediction has {len(p)} bins, binning expects {n}")
        k = int(np.argmax(p))  # first maximum wins ties
        labels.append(k)
        offsets.append(float(o[k]))
    return decode_bins(BinnedPose(tuple(labels), tuple(offsets)), binning)


def decode_batch(probs, offsets, binning: AngleBinning):
    """Vectorized decode: per-angle (B, L) arrays -> (B, 3) radians."""
    from .rotcore import decode_angle, wrap_angle

    out = []
    for name, p, o, n in zip(ANGLES, probs, offsets, binning.counts):
        p = np.asarray(p)
        k = np.argmax(p, axis=1)
        off = np.asarray(o)[np.arange(len(k)), k]
        lo, hi = binning.range_of(name)
        a = decode_angle(k, off, lo, hi, n)
        a = np.clip(a, lo, hi) if name == "ele" else wrap_angle(a)
        out.append(np.asarray(a, dtype=float))
    return np.stack(out, axis=1)
