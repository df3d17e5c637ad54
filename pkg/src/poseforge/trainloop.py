"""Pose loss, training schedule, and evaluation."""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datagen import AugmentConfig, augment, config_sha256, load_manifest
from .metrics import accuracy_from_errors, add, add_s, median_degrees, PosePair
from .model import PoseNetwork, PoseNetworkConfig, decode_batch
from .render import RenderConfig, read_tensor, read_view_set_array, render_view_set
from .rotcore import AngleBinning, EulerPose, encode_batch, euler_to_matrix, \
    geodesic_distance_batch
from .shapecore import PointCloud, load_obj, read_point_cloud


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    schedule: tuple = ((1e-4, 100), (1e-5, 100))
    seed: int = 0
    checkpoint_every: int = 1
    augment: bool = True
    record_wall_time: bool = True
    eval_batch_size: int = 32

    def __post_init__(self):
        sched = tuple((float(lr), int(n)) for lr, n in self.schedule)
        object.__setattr__(self, "schedule", sched)
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2 (train-mode batchnorm)")
        if not sched or any(lr <= 0 or n < 0 for lr, n in sched):
            raise ValueError("schedule needs positive learning rates and epoch counts")

    @property
    def epochs(self):
        return sum(n for _, n in self.schedule)

    def lr_at(self, epoch):
        """Learning rate for a 1-based epoch index."""
        edge = 0
        for lr, n in self.schedule:
            edge += n
            if epoch <= edge:
                return lr
        return self.schedule[-1][0]


DESK_SCHEDULE = ((1e-3, 30), (1e-4, 30))


# ------------------------------------------------------------------- loss


def pose_loss(probs, offsets, labels, target_offsets, delta=1.0):
    """Batch-mean of sum over angles of cross-entropy + Huber on the gt-bin offset.

    ``probs``/``offsets`` are per-angle (B, L) tensors; ``labels`` and
    ``target_offsets`` are (B, 3) arrays.
    """
    labels = np.asarray(labels)
    target_offsets = np.asarray(target_offsets)
    if len(probs) != 3 or labels.shape != (probs[0].shape[0], 3):
        raise ValueError("prediction and target disagree on batch size or angle count")
    terms = []
    for j in range(3):
        p, o = probs[j], offsets[j]
        if np.any(labels[:, j] >= p.shape[1]):
            raise ValueError("binning mismatch: label exceeds predicted bin count")
        ce = ad.cross_entropy(p, labels[:, j])
        picked = ad.take_last(o, labels[:, j])
        tgt = Tensor(target_offsets[:, j].astype(o.dtype))
        terms.append(ce + ad.huber(picked - tgt, delta))
    total = terms[0] + terms[1] + terms[2]
    return ad.mean(total)


def pose_loss_single(pred, target, binning: AngleBinning, delta=1.0):
    """Loss for one PosePrediction against one BinnedPose (plain float)."""
    if tuple(len(p) for p in pred.probabilities) != binning.counts:
        raise ValueError("binning mismatch between prediction and target")
    probs = [Tensor(np.asarray(p, dtype=float)[None]) for p in pred.probabilities]
    offs = [Tensor(np.asarray(o, dtype=float)[None]) for o in pred.offsets]
    return pose_loss(probs, offs, np.array([target.label]), np.array([target.offset]),
                     delta).item()


# ------------------------------------------------------------------- data


class PoseData:
    """In-memory view of a dataset directory, shaped for one network config."""

    def __init__(self, data_dir, net_config: PoseNetworkConfig, expected=None):
        self.root = Path(data_dir)
        self.manifest = load_manifest(self.root, expected)
        self.net_config = net_config
        self.samples = sorted(self.manifest["samples"], key=lambda s: s["id"])
        self.shapes = {s["id"]: s for s in self.manifest["shapes"]}
        self.images = np.stack([
            read_tensor(self.root / s["image"]).transpose(2, 0, 1)[:net_config.image_channels]
            for s in self.samples
        ]).astype(np.float32)
        if self.images.shape[2] != net_config.image_size:
            raise TrainError(
                f"dataset images are {self.images.shape[2]} px, network expects "
                f"{net_config.image_size}")
        self.poses = np.array([EulerPose.from_json(s).as_array() for s in self.samples])
        self._meshes, self._points, self._views = {}, {}, {}
        gen = self.manifest["config"].get("datagen", {})
        rend = self.manifest["config"].get("render", {})
        self.render_config = RenderConfig(**{**rend, "size": gen.get("view_size", 64)})
        if net_config.shape_mode == "mv":
            layout = (gen.get("view_n_azi"), tuple(gen.get("view_elevations_deg", ())))
            want = (net_config.view_n_azi, net_config.view_elevations_deg)
            if layout != want or gen.get("view_size") != net_config.view_size:
                raise TrainError(f"dataset view layout {layout} does not match network {want}")

    def __len__(self):
        return len(self.samples)

    def indices(self, split):
        return [i for i, s in enumerate(self.samples) if s["split"] == split]

    def mesh(self, shape_id):
        if shape_id not in self._meshes:
            self._meshes[shape_id] = load_obj(self.root / self.shapes[shape_id]["mesh"])
        return self._meshes[shape_id]

    def points(self, shape_id):
        if shape_id not in self._points:
            pc = read_point_cloud(self.root / self.shapes[shape_id]["points"])
            n = self.net_config.n_points
            if len(pc) < n:
                raise TrainError(f"shape {shape_id} stores {len(pc)} points, need {n}")
            # stored points are i.i.d. samples, so any prefix is a uniform sample
            self._points[shape_id] = pc.points[:n]
        return self._points[shape_id]

    def views(self, shape_id):
        if shape_id not in self._views:
            meta = self.shapes[shape_id]
            arr = read_view_set_array(self.root / meta["views"], meta["n_views"])
            self._views[shape_id] = arr[:, :self.net_config.view_channels].astype(np.float32)
        return self._views[shape_id]

    def shape_input(self, shape_id):
        if self.net_config.shape_mode == "pc":
            return self.points(shape_id).astype(np.float32)
        return self.views(shape_id)

    def render_views(self, mesh):
        c = self.net_config
        vs = render_view_set(mesh, c.view_layout, self.render_config)
        return vs.to_array()[:, :c.view_channels]


def _augmented_sample(data: PoseData, i, rng, aug_cfg):
    s = data.samples[i]
    pose = EulerPose(*data.poses[i])
    mode = data.net_config.shape_mode
    shape = PointCloud(data.points(s["shape_id"])) if mode == "pc" else data.mesh(s["shape_id"])
    image, shape, pose = augment(data.images[i], pose, shape, rng, aug_cfg)
    if mode == "pc":
        shp = shape.points.astype(np.float32)
    else:
        shp = data.render_views(shape)
    return image, shp, pose.as_array()


def make_batch(data: PoseData, idx, epoch, seed, augment_on, aug_cfg=AugmentConfig()):
    """Stack a batch; augmentation streams derive from (seed, epoch, sample index)."""
    images, shapes, poses = [], [], []
    for i in idx:
        if augment_on:
            rng = np.random.default_rng([seed, epoch, int(i), 3])
            im, shp, pose = _augmented_sample(data, i, rng, aug_cfg)
        else:
            im = data.images[i]
            shp = data.shape_input(data.samples[i]["shape_id"])
            pose = data.poses[i]
        images.append(im)
        shapes.append(shp)
        poses.append(pose)
    return np.stack(images), np.stack(shapes), np.stack(poses)


def epoch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch, 11]).permutation(n)


def epoch_batches(train_idx, batch_size, seed, epoch):
    order = np.asarray(train_idx)[epoch_order(len(train_idx), seed, epoch)]
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    # a trailing single sample cannot pass train-mode batchnorm
    return [b for b in batches if len(b) >= 2]


def _threads():
    import os

    try:
        return max(1, int(os.environ.get("POSEFORGE_THREADS", "1")))
    except ValueError:
        return 1


def _prefetched(batches, build, depth=2):
    """Yield build(b) for each batch, filled ahead by worker threads in order."""
    threads = _threads()
    if threads <= 1:
        for b in batches:
            yield b, build(b)
        return
    with ThreadPoolExecutor(max_workers=min(threads, depth)) as pool:
        pending = []
        it = iter(batches)
        for b in it:
            pending.append((b, pool.submit(build, b)))
            if len(pending) >= depth:
                break
        while pending:
            b, fut = pending.pop(0)
            result = fut.result()
            nxt = next(it, None)
            if nxt is not None:
                pending.append((nxt, pool.submit(build, nxt)))
            yield b, result


def train_step(net: PoseNetwork, images, shapes, poses, lr):
    binning = net.config.binning
    labels, offsets = encode_batch(poses, binning)
    net.train()
    probs, offs = net(images, shapes)
    loss = pose_loss(probs, offs, labels, offsets)
    ad.backward(loss)
    ad.adam_step(net.parameters(), lr)
    return loss.item()


def _checkpoint_extra(net, cfg, epoch, data, best, global_hash):
    return {
        "network": net.config.to_json(),
        "train": asdict(cfg),
        "epoch": epoch,
        "data_config_sha256": data.manifest["config_sha256"],
        "config_sha256": global_hash,
        "render": asdict(data.render_config),
        "best": best,
    }


def train(cfg: TrainConfig, data: PoseData, net: PoseNetwork, out_dir, resume=None,
          aug_cfg=AugmentConfig(), config_hash=None, on_epoch=None):
    """Run the schedule; writes last.ckpt, best.ckpt and train_log.jsonl under ``out_dir``.

    Returns the list of epoch log records.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_idx = data.indices("train")
    if not train_idx:
        raise TrainError("training split is empty")
    val_idx = data.indices("val")
    config_hash = config_hash or config_sha256({"train": asdict(cfg),
                                                "network": net.config.to_json()})
    start_epoch, best = 1, None
    log_path = out / "train_log.jsonl"
    records = []
    if resume is not None:
        manifest, arrays = ad.read_checkpoint(resume)
        extra = manifest["extra"]
        if extra.get("network") != json.loads(json.dumps(net.config.to_json())):
            raise TrainError("checkpoint network config differs from the requested network")
        if extra.get("data_config_sha256") != data.manifest["config_sha256"]:
            raise TrainError("checkpoint was trained on a different dataset config")
        ad.load_into(net, manifest, arrays)
        start_epoch = int(extra["epoch"]) + 1
        best = extra.get("best")
        if log_path.is_file():
            records = [json.loads(line) for line in log_path.read_text().splitlines() if line]
            records = [r for r in records if r["epoch"] < start_epoch]
    with open(log_path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")

    for epoch in range(start_epoch, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        losses = []
        batches = epoch_batches(train_idx, cfg.batch_size, cfg.seed, epoch)

        def build(b, epoch=epoch):
            return make_batch(data, b, epoch, cfg.seed, cfg.augment, aug_cfg)

        for _, (images, shapes, poses) in _prefetched(batches, build):
            losses.append(train_step(net, images, shapes, poses, lr))
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        val_acc = val_med = None
        if val_idx:
            rep = evaluate(net, data, "val", batch_size=cfg.eval_batch_size)
            val_acc = rep["aggregate"]["acc_pi6"]
            val_med = rep["aggregate"]["mederr_deg"]
        wall = int(round((time.perf_counter() - t0) * 1000)) if cfg.record_wall_time else 0
        rec = {"epoch": epoch, "lr": lr, "mean_loss": mean_loss, "val_acc_pi6": val_acc,
               "val_mederr": val_med, "wall_ms": wall, "config_sha256": config_hash}
        records.append(rec)
        with open(log_path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        improved = False
        if val_acc is not None:
            key = (val_acc, -val_med)
            if best is None or key > (best["val_acc_pi6"], -best["val_mederr"]):
                best = {"epoch": epoch, "val_acc_pi6": val_acc, "val_mederr": val_med}
                improved = True
        extra = _checkpoint_extra(net, cfg, epoch, data, best, config_hash)
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            ad.save_checkpoint(out / "last.ckpt", net, extra)
        if improved or (not val_idx and epoch == cfg.epochs):
            ad.save_checkpoint(out / "best.ckpt", net, extra)
        if on_epoch is not None:
            on_epoch(rec)
    return records


def load_network(ckpt_path):
    manifest, arrays = ad.read_checkpoint(ckpt_path)
    net_cfg = PoseNetworkConfig.from_json(manifest["extra"]["network"])
    net = PoseNetwork(net_cfg, seed=0)
    ad.load_into(net, manifest, arrays)
    net.eval()
    return net, manifest["extra"]


# ------------------------------------------------------------- evaluation


def predict_poses(net: PoseNetwork, data: PoseData, idx, batch_size=32):
    """(len(idx), 3) radians predicted in eval mode, batches in index order."""
    net.eval()
    out = []
    for k in range(0, len(idx), batch_size):
        b = idx[k:k + batch_size]
        images = data.images[b]
        shapes = np.stack([data.shape_input(data.samples[i]["shape_id"]) for i in b])
        probs, offs = net(images, shapes)
        out.append(decode_batch([p.data for p in probs], [o.data for o in offs],
                                net.config.binning))
    return np.concatenate(out) if out else np.zeros((0, 3))


def rotations(poses):
    return np.stack([euler_to_matrix(EulerPose(*p)) for p in np.asarray(poses).reshape(-1, 3)])


def build_report(data_samples, split, pred_poses, gt_poses, config_hash=None, adds=None):
    """Assemble an EvalReport dict from aligned sample/prediction/label arrays."""
    errors = geodesic_distance_batch(rotations(pred_poses), rotations(gt_poses))
    per = []
    for s, e, p in zip(data_samples, errors, pred_poses):
        pe = EulerPose(*p)
        row = {"sample_id": s["id"], "shape_id": s["shape_id"], "err_deg": math.degrees(e),
               "pred": pe.to_json(), "gt": {k: s[k] for k in ("azi_deg", "ele_deg", "inp_deg")}}
        per.append(row)
    aggregate = {
        "count": len(per),
        "acc_pi6": accuracy_from_errors(errors),
        "mederr_deg": median_degrees(errors),
    }
    if adds is not None:
        for row, (d_add, d_adds, diam, sym) in zip(per, adds):
            row.update({"add": d_add, "add_s": d_adds, "diameter": diam, "symmetric": sym})
        aggregate["add_0.1d"] = sum(a < 0.1 * d for a, _, d, _ in adds) / len(adds)
        aggregate["add_s_0.1d"] = sum(s < 0.1 * d for _, s, d, _ in adds) / len(adds)
        aggregate["add_auto_0.1d"] = sum(
            (s if sym else a) < 0.1 * d for a, s, d, sym in adds) / len(adds)
    report = {"split": split, "per_sample": per, "aggregate": aggregate,
              "counts": {split: len(per)}}
    if config_hash is not None:
        report["config_sha256"] = config_hash
    return report


def aggregate_from_per_sample(per_sample):
    """Recompute the rotation aggregates from a report's per-sample list."""
    errors = np.radians([r["err_deg"] for r in per_sample])
    return {"count": len(per_sample), "acc_pi6": accuracy_from_errors(errors),
            "mederr_deg": median_degrees(errors)}


def evaluate(net: PoseNetwork, data: PoseData, split, batch_size=32, config_hash=None):
    idx = data.indices(split)
    if not idx:
        raise TrainError(f"split {split!r} is empty")
    was = net.training
    try:
        pred = predict_poses(net, data, idx, batch_size)
    finally:
        net.train(was)
    return build_report([data.samples[i] for i in idx], split, pred, data.poses[idx],
                        config_hash)


def evaluate_pose_file(pose_entries, data_dir, split, config_hash=None):
    """EvalReport for externally supplied poses (JSON records in degrees).

    ADD/ADD-S are added when every entry carries a translation ``t``.
    """
    root = Path(data_dir)
    manifest = load_manifest(root)
    by_id = {e["sample_id"]: e for e in pose_entries}
    samples = sorted((s for s in manifest["samples"] if s["split"] == split),
                     key=lambda s: s["id"])
    if not samples:
        raise TrainError(f"split {split!r} is empty")
    missing = [s["id"] for s in samples if s["id"] not in by_id]
    if missing:
        raise TrainError(f"pose file lacks {len(missing)} samples, e.g. {missing[0]}")
    pred = np.array([EulerPose.from_json(by_id[s["id"]]).as_array() for s in samples])
    gt = np.array([EulerPose.from_json(s).as_array() for s in samples])
    adds = None
    if all("t" in by_id[s["id"]] for s in samples):
        shapes = {s["id"]: s for s in manifest["shapes"]}
        clouds = {}
        adds = []
        pr, gr = rotations(pred), rotations(gt)
        for s, rp, rg in zip(samples, pr, gr):
            meta = shapes[s["shape_id"]]
            if meta["id"] not in clouds:
                clouds[meta["id"]] = read_point_cloud(root / meta["points"])
            if "t" not in s:
                raise TrainError(f"sample {s['id']} has no ground-truth translation")
            pair = PosePair(rp, rg, by_id[s["id"]]["t"], s["t"])
            pts = clouds[meta["id"]]
            adds.append((add(pair, pts), add_s(pair, pts), meta["diameter"],
                         bool(meta.get("symmetric", False))))
    return build_report(samples, split, pred, gt, config_hash, adds)
