"""Command-line entry point: ``poseforge <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 numerical
failure.  Errors go to stderr as one JSON line ``{"code": ..., "message": ...}``.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import config as gc
from .autodiff import CheckpointError, NumericalError, ShapeError
from .datagen import FAMILIES, ManifestError, generate_dataset, make_procedural_shapes
from .render import read_png, read_tensor, render_view_set, write_view_set
from .shapecore import ObjParseError, load_obj, normalize, sample_surface, write_point_cloud

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, f"{self.prog}: {message}")


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _csv(text, cast=str):
    try:
        return [cast(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise CliError(EXIT_USAGE, f"cannot parse list {text!r}") from None


def _resolve(args, extra=None):
    overrides = [gc.parse_assignment(s) for s in (args.set or [])]
    if extra:
        overrides.append(extra)
    cfg = gc.resolve(args.preset, args.config, overrides)
    return cfg, gc.sha256(cfg)


def _config_flags(p):
    p.add_argument("--config", metavar="PATH", help="JSON config file layered over the preset")
    p.add_argument("--preset", default="default", choices=sorted(gc.PRESETS),
                   help="named starting point: default, desk or toy (default: default)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable; value parsed as JSON)")


# ---------------------------------------------------------------- commands


def cmd_config(args):
    cfg, h = _resolve(args)
    _emit({"config": cfg, "config_sha256": h})


def _shape_plan(args):
    if args.family_counts:
        plan = []
        for item in _csv(args.family_counts):
            fam, _, n = item.partition("=")
            try:
                plan.append((fam, int(n)))
            except ValueError:
                raise CliError(EXIT_USAGE, f"bad family count {item!r}") from None
        return plan
    if args.shapes is None:
        raise CliError(EXIT_USAGE, "gen-data needs --shapes or --family-counts")
    fams = _csv(args.families) if args.families else list(FAMILIES)
    counts = {f: 0 for f in fams}
    for i in range(args.shapes):
        counts[fams[i % len(fams)]] += 1
    return [(f, n) for f, n in counts.items() if n]


def cmd_gen_data(args):
    extra = {"datagen": {}}
    if args.views_per_shape is not None:
        extra["datagen"]["views_per_shape"] = args.views_per_shape
    if args.split_mode is not None:
        extra["datagen"]["split_mode"] = args.split_mode
    if args.holdout_families is not None:
        extra["datagen"]["holdout_families"] = _csv(args.holdout_families)
    if args.background is not None:
        extra["datagen"]["background"] = args.background
    cfg, h = _resolve(args, extra)
    shapes = []
    for fam, n in _shape_plan(args):
        if fam not in FAMILIES:
            raise CliError(EXIT_DATA, f"unknown shape family {fam!r}; choose from {FAMILIES}")
        for i, mesh in enumerate(make_procedural_shapes(n, fam, args.seed)):
            shapes.append((f"{fam}_{i:03d}", fam, mesh))
    manifest = generate_dataset(shapes, args.out, gc.datagen_config(cfg), gc.render_config(cfg),
                                seed=args.seed, config_record=cfg)
    counts = {}
    for s in manifest["samples"]:
        counts[s["split"]] = counts.get(s["split"], 0) + 1
    _emit({"out": str(args.out), "shapes": len(shapes), "samples": len(manifest["samples"]),
           "splits": counts, "config_sha256": manifest["config_sha256"]})


def cmd_render_views(args):
    extra = {"render": {}}
    if args.size is not None:
        extra["render"]["size"] = args.size
    cfg, h = _resolve(args, extra)
    elevations = _csv(args.elevations, float)
    if args.n_azi < 1 or not elevations:
        raise CliError(EXIT_USAGE, "--n-azi must be >= 1 and --elevations non-empty")
    mesh = normalize(load_obj(args.mesh))
    layout = (args.n_azi, tuple(math.radians(e) for e in elevations))
    views = render_view_set(mesh, layout, gc.render_config(cfg))
    write_view_set(views, args.out, png=True)
    info = {"views": len(views), "n_azi": args.n_azi, "elevations_deg": elevations,
            "size": gc.render_config(cfg).size, "config_sha256": h}
    _write_json(Path(args.out) / "views.json", info)
    _emit({"out": str(args.out), **info})


def cmd_sample_points(args):
    cfg, h = _resolve(args)
    if args.n < 1:
        raise CliError(EXIT_USAGE, "--n must be positive")
    mesh = normalize(load_obj(args.mesh))
    cloud = sample_surface(mesh, args.n, seed=args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_point_cloud(cloud, args.out)
    _emit({"out": str(args.out), "points": args.n, "seed": args.seed, "config_sha256": h})


def cmd_train(args):
    from .model import build_network
    from .trainloop import PoseData, train

    extra = {"training": {"mode": args.mode}} if args.mode else None
    cfg, h = _resolve(args, extra)
    tcfg = gc.train_config(cfg)
    ncfg = gc.network_config(cfg)
    data = PoseData(args.data, ncfg)
    net = build_network(ncfg, seed=tcfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {"config": cfg, "config_sha256": h})
    records = train(tcfg, data, net, out, resume=args.resume, aug_cfg=gc.augment_config(cfg),
                    config_hash=h)
    last = records[-1] if records else {}
    _emit({"out": str(out), "epochs": len(records), "final_loss": last.get("mean_loss"),
           "config_sha256": h})


def _report_config_hash(extra):
    return extra.get("config_sha256")


def cmd_eval(args):
    from .trainloop import PoseData, evaluate, evaluate_pose_file, load_network

    if (args.ckpt is None) == (args.poses is None):
        raise CliError(EXIT_USAGE, "eval needs exactly one of --ckpt or --poses")
    if args.ckpt is not None:
        net, extra = load_network(args.ckpt)
        data = PoseData(args.data, net.config)
        report = evaluate(net, data, args.split, config_hash=_report_config_hash(extra))
    else:
        cfg, h = _resolve(args)
        try:
            entries = json.loads(Path(args.poses).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_DATA, f"cannot read pose file: {exc}") from None
        if isinstance(entries, dict):
            entries = entries.get("poses", [])
        report = evaluate_pose_file(entries, args.data, args.split, config_hash=h)
    _write_json(args.report, report)
    _emit({"report": str(args.report), **report["aggregate"],
           "config_sha256": report.get("config_sha256")})


def _load_image(path, size, channels):
    path = Path(path)
    if path.suffix.lower() == ".png":
        img = read_png(path)
    else:
        img = read_tensor(path)
    if img.shape[0] != size or img.shape[1] != size:
        raise CliError(EXIT_DATA, f"image is {img.shape[1]}x{img.shape[0]}, network expects "
                                  f"{size}x{size}")
    if img.shape[2] < channels:
        raise CliError(EXIT_DATA, f"image has {img.shape[2]} channels, need {channels}")
    return img[:, :, :channels].transpose(2, 0, 1).astype(np.float32)


def cmd_predict(args):
    from .model import decode_prediction, predict
    from .render import RenderConfig
    from .trainloop import load_network

    net, extra = load_network(args.ckpt)
    c = net.config
    image = _load_image(args.image, c.image_size, c.image_channels)
    mesh = normalize(load_obj(args.mesh))
    if c.shape_mode == "pc":
        shape = sample_surface(mesh, c.n_points, seed=args.seed).points.astype(np.float32)
    else:
        rcfg = extra.get("render")
        rc = RenderConfig(**{**(rcfg or {}), "size": c.view_size})
        shape = render_view_set(mesh, c.view_layout, rc).to_array()[:, :c.view_channels]
    pred = predict(net, image, shape)
    pose = decode_prediction(pred, c.binning)
    _emit({**pose.to_json(), "config_sha256": _report_config_hash(extra)})


def cmd_gradcheck(args):
    from . import gradcheck

    lines = []

    def log(r):
        lines.append(r)
        sys.stderr.write(f"{'PASS' if r.passed else 'FAIL'} {r.name}: max rel err "
                         f"{r.max_rel_error:.2e} over {r.n_coords} coords\n")

    results = gradcheck.run_suite(args.seed, log=log)
    ok = all(r.passed for r in results)
    _emit({"passed": ok, "checks": len(results),
           "max_rel_error": max(r.max_rel_error for r in results),
           "tolerance": gradcheck.TOLERANCE, "eps": gradcheck.EPS,
           "seconds": round(sum(r.seconds for r in results), 3)})
    if not ok:
        failed = [r.name for r in results if not r.passed]
        raise CliError(EXIT_NUMERIC, f"gradient check failed: {', '.join(failed)}")


def cmd_plot(args):
    from .plot import plot_report

    try:
        report = json.loads(Path(args.report).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_DATA, f"cannot read report: {exc}") from None
    if "per_sample" not in report:
        raise CliError(EXIT_DATA, "report has no per_sample list")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    plot_report(report, args.out)
    _emit({"out": str(args.out), "samples": len(report["per_sample"]),
           "config_sha256": report.get("config_sha256")})


# ---------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="poseforge", description="Category-agnostic pose estimation toolkit.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("config", help="print the resolved configuration")
    _config_flags(s)
    s.set_defaults(func=cmd_config)

    s = sub.add_parser("gen-data", help="generate a synthetic dataset")
    s.add_argument("--out", required=True, metavar="DIR", help="output directory")
    s.add_argument("--shapes", type=int, metavar="N", help="number of procedural shapes")
    s.add_argument("--views-per-shape", type=int, metavar="K",
                   help="query images per shape (default 20)")
    s.add_argument("--seed", type=int, default=0, metavar="S", help="master seed (default 0)")
    s.add_argument("--split-mode", choices=("random", "novel-shape"),
                   help="split samples at random or hold out whole shape families")
    s.add_argument("--families", metavar="LIST",
                   help=f"comma list of families cycled over --shapes (default all: "
                        f"{','.join(FAMILIES)})")
    s.add_argument("--family-counts", metavar="F=N,...",
                   help="explicit shape count per family, e.g. cuboid=8,l_shape=4")
    s.add_argument("--holdout-families", metavar="LIST",
                   help="families reserved for the test split in novel-shape mode")
    s.add_argument("--background", metavar="MODE",
                   help="black, solid, gradient, noise or mixed")
    _config_flags(s)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("render-views", help="render a canonical multi-view set of one mesh")
    s.add_argument("--mesh", required=True, metavar="PATH", help="OBJ file (normalized first)")
    s.add_argument("--n-azi", type=int, required=True, metavar="A", help="azimuths per ring")
    s.add_argument("--elevations", required=True, metavar="LIST",
                   help="comma list of ring elevations in degrees, e.g. 0,30")
    s.add_argument("--out", required=True, metavar="DIR", help="output directory")
    s.add_argument("--size", type=int, metavar="PX", help="image size in pixels")
    _config_flags(s)
    s.set_defaults(func=cmd_render_views)

    s = sub.add_parser("sample-points", help="sample a point cloud from a mesh surface")
    s.add_argument("--mesh", required=True, metavar="PATH", help="OBJ file (normalized first)")
    s.add_argument("--n", type=int, required=True, metavar="N", help="number of points")
    s.add_argument("--seed", type=int, default=0, metavar="S", help="sampling seed (default 0)")
    s.add_argument("--out", required=True, metavar="PATH", help="output .pfspc file")
    _config_flags(s)
    s.set_defaults(func=cmd_sample_points)

    s = sub.add_parser("train", help="train a pose network")
    s.add_argument("--data", required=True, metavar="DIR", help="dataset directory")
    s.add_argument("--mode", choices=("pc", "mv"), help="shape encoder: point cloud or views")
    s.add_argument("--out", required=True, metavar="DIR", help="output directory")
    s.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    _config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint or a pose file")
    s.add_argument("--ckpt", metavar="PATH", help="checkpoint to evaluate")
    s.add_argument("--poses", metavar="PATH",
                   help="JSON list of {sample_id, azi_deg, ele_deg, inp_deg[, t]} instead")
    s.add_argument("--data", required=True, metavar="DIR", help="dataset directory")
    s.add_argument("--split", default="test", choices=("train", "val", "test"),
                   help="split to evaluate (default test)")
    s.add_argument("--report", required=True, metavar="PATH", help="output report JSON")
    _config_flags(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="predict the pose of one image")
    s.add_argument("--ckpt", required=True, metavar="PATH", help="checkpoint")
    s.add_argument("--image", required=True, metavar="PATH", help=".png or .pfsimg image")
    s.add_argument("--mesh", required=True, metavar="PATH", help="OBJ model of the object")
    s.add_argument("--seed", type=int, default=0, metavar="S",
                   help="point sampling seed in pc mode (default 0)")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    s.add_argument("--seed", type=int, default=0, metavar="S", help="suite seed (default 0)")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("plot", help="plot an evaluation report as SVG")
    s.add_argument("--report", required=True, metavar="PATH", help="report JSON from eval")
    s.add_argument("--out", required=True, metavar="PATH", help="output .svg file")
    s.set_defaults(func=cmd_plot)
    return p


def _classify(exc):
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, (NumericalError, FloatingPointError)):
        return EXIT_NUMERIC
    from .trainloop import TrainError

    data_errors = (gc.ConfigError, ManifestError, ObjParseError, CheckpointError, ShapeError,
                   TrainError, FileNotFoundError, IsADirectoryError, PermissionError,
                   ValueError, KeyError)
    if isinstance(exc, data_errors):
        return EXIT_DATA
    return None


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            raise CliError(EXIT_USAGE, "missing subcommand")
        args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = _classify(exc)
        if code is None:
            raise
        msg = str(exc) if not isinstance(exc, KeyError) else f"missing key {exc}"
        sys.stderr.write(json.dumps({"code": code, "message": msg}) + "\n")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
