"""Command-line entry point: ``semsat <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# reports

def write_report(path: Path, items: Dict[str, object]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, v in items.items():
        if isinstance(v, (bool, np.bool_)):
            v = int(v)
        lines.append(f"{k}={v:.10g}" if isinstance(v, (float, np.floating)) else f"{k}={v}")
    path.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


def read_report(path) -> Dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    from .dataset import export_dataset
    from .synth import generate_scene
    if args.views < 2:
        raise UsageError("--views must be at least 2")
    scene = generate_scene(args.seed, args.preset, n_dates=max(args.views, 10), grid=args.grid)
    ds = export_dataset(scene, args.views, args.out, n_test=args.test, size=args.size,
                        depth_fraction=args.depth_fraction)
    write_report(Path(args.out) / "synth_report.txt", {
        "preset": args.preset, "seed": args.seed, "train_frames": len(ds.train_names),
        "test_frames": len(ds.test_names), "size": args.size})
    return EXIT_OK


TRAIN_FLAGS = {
    # flag dest -> config path
    "iters": ("iterations",), "batch": ("batch_size",), "samples": ("n_samples",), "lr": ("lr",),
    "lr_decay": ("lr_decay",), "seed": ("seed",), "checkpoint_every": ("checkpoint_every",),
    "log_every": ("log_every",), "semantic_activation": ("field", "semantic_activation"),
    "density_scale": ("field", "density_scale"),
}
RUN_KEYS = ("data", "out", "preset")


def build_train_config(args):
    from .trainer import TrainConfig
    raw: Dict[str, object] = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
    run = {k: raw.pop(k) for k in RUN_KEYS if k in raw}
    preset = args.preset or run.get("preset", "desk")
    if preset not in ("desk", "full"):
        raise UsageError(f"unknown preset '{preset}'")
    base = TrainConfig.desk() if preset == "desk" else TrainConfig()
    merged = base.to_dict()
    try:
        _merge(merged, raw)
    except KeyError as exc:
        raise UsageError(f"unknown config key {exc}") from None
    for dest, path in TRAIN_FLAGS.items():
        val = getattr(args, dest, None)
        if val is not None:
            _set(merged, path, val)
    if args.no_transient_reg:
        merged["schedule"]["use_transient_reg"] = False
    if args.no_depth:
        merged["schedule"]["use_depth"] = False
    if args.no_solar:
        merged["schedule"]["use_solar"] = False
    try:
        cfg = TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    data = args.data or run.get("data")
    out = args.out or run.get("out")
    if not data or not out:
        raise UsageError("--data and --out are required (flag or config file)")
    return cfg, data, out


def _merge(base: dict, over: dict, prefix: str = "") -> None:
    for k, v in over.items():
        if k not in base:
            raise KeyError(prefix + k)
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"config key {prefix + k} must be an object")
            _merge(base[k], v, prefix + k + ".")
        else:
            base[k] = v


def _set(d: dict, path, value) -> None:
    for p in path[:-1]:
        d = d[p]
    d[path[-1]] = value


def cmd_train(args) -> int:
    from .dataset import load_dataset
    from .trainer import train
    cfg, data, out = build_train_config(args)
    ds = load_dataset(data)
    t0 = time.perf_counter()
    result = train(ds, cfg, out, resume=args.resume, stop_at=args.stop_at, evaluate=not args.no_eval)
    items: Dict[str, object] = {"iterations": result.checkpoint.iteration,
                                "config_hash": result.checkpoint.config_hash.hex(),
                                "wall_seconds": time.perf_counter() - t0}
    if result.final_metrics:
        items.update(result.final_metrics)
    write_report(Path(out) / "train_report.txt", items)
    if result.records:
        from .losses import TERM_NAMES
        from .plotting import loss_curves
        loss_curves(Path(out) / "loss_curves.png", result.records, TERM_NAMES)
    return EXIT_OK


def _novel_view(spec: str):
    from .synth import sun_direction, view_direction
    try:
        off, az, sel, saz = (float(x) for x in spec.split(","))
    except ValueError:
        raise UsageError("--novel expects 'off_nadir,azimuth,sun_elevation,sun_azimuth' in degrees") from None
    return view_direction(off, az), sun_direction(sel, saz)


def cmd_render(args) -> int:
    from .camera import affine_rpc
    from .dataset import load_dataset
    from .plotting import save_modality
    from .trainer import MODALITIES, Checkpoint, render_view
    modalities = MODALITIES if args.modality == ["all"] else args.modality
    for m in modalities:
        if m not in MODALITIES:
            raise UsageError(f"unknown modality '{m}'")
    ckpt = Checkpoint.load(args.ckpt)
    ds = load_dataset(args.data)
    if (args.frame is None) == (args.novel is None):
        raise UsageError("give exactly one of --frame or --novel")
    if args.frame is not None:
        if args.frame not in ds.frames:
            raise UsageError(f"no frame '{args.frame}' in {args.data}")
        f = ds.frames[args.frame]
        camera, sun, (h, w) = f.camera, f.sun_dir, f.shape
        embed = f.embed_index if f.embed_index is not None else 0
        stem = args.frame
    else:
        vdir, sun = _novel_view(args.novel)
        h = w = args.size
        camera, embed, stem = affine_rpc(vdir, h, w), 0, "novel"
    out = Path(args.out)
    written = []
    for m in modalities:
        img = render_view(ckpt, camera, sun, m, h, w, ds.alt_range, ds.bounds, ds.colormap, embed)
        written += save_modality(out / f"{stem}_{m}.png", m, img, ds.colormap)
    for p in written:
        print(p)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataset import load_dataset
    from .evaluation import evaluate_psnr, evaluate_semantics, render_split, transient_uncertainty
    from .plotting import accuracy_figure
    from .trainer import Checkpoint
    metrics = {"accuracy", "transient", "psnr"} if args.metric == "all" else {args.metric}
    if "transient" in metrics and args.split != "train":
        if args.metric == "transient":
            raise UsageError("the transient metric is defined on the train split only")
        metrics.discard("transient")
    ckpt = Checkpoint.load(args.ckpt)
    ds = load_dataset(args.data)
    n = args.samples or ckpt.config.n_samples
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items: Dict[str, object] = {"split": args.split}
    renders = render_split(ckpt.params, ds, args.split, n) if metrics & {"accuracy", "psnr"} else None
    rows = {name: {} for name in (ds.train_names if args.split == "train" else ds.test_names)}
    if "accuracy" in metrics:
        rep = evaluate_semantics(ckpt.params, ds, args.split, args.target, n, renders)
        items["mean_accuracy"] = rep.mean
        for k, v in rep.per_frame.items():
            items[f"accuracy[{k}]"] = v
            rows[k]["accuracy"] = v
        accuracy_figure(out / "accuracy.png", {f"{args.split} ({args.target})": rep.per_frame})
    if "psnr" in metrics:
        ps = evaluate_psnr(ckpt.params, ds, args.split, "static", n, renders)
        items["mean_psnr_static"] = float(np.mean(list(ps.values())))
        for k, v in ps.items():
            rows[k]["psnr_static"] = v
    if "transient" in metrics:
        items["transient_uncertainty"] = transient_uncertainty(ckpt.params, ds, n)
    write_report(out / "report.txt", items)
    cols = sorted({c for r in rows.values() for c in r})
    with open(out / "per_frame.tsv", "w") as fh:
        fh.write("\t".join(["frame"] + cols) + "\n")
        for name, r in rows.items():
            fh.write("\t".join([name] + [f"{r.get(c, float('nan')):.6f}" for c in cols]) + "\n")
    return EXIT_OK


def cmd_corrupt(args) -> int:
    from .dataset import load_dataset
    from .evaluation import CorruptionConfig, corrupt_dataset, semantic_accuracy
    try:
        cfg = CorruptionConfig(args.loss, args.blur_radius, args.rescale, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    clean = load_dataset(args.labels)
    corrupted = corrupt_dataset(args.labels, args.out, cfg)
    accs = [semantic_accuracy(corrupted.frames[n].labels, clean.frames[n].labels) for n in clean.train_names]
    write_report(Path(args.out) / "corruption_report.txt", {
        "target_loss": args.loss, "seed": args.seed, "mean_accuracy": float(np.mean(accs)),
        "min_accuracy": float(np.min(accs)), "max_accuracy": float(np.max(accs))})
    return EXIT_OK


def cmd_fuse(args) -> int:
    from .dataset import load_dataset
    from .evaluation import fuse_labels
    from .plotting import accuracy_figure, label_panels
    from .trainer import Checkpoint
    ckpt = Checkpoint.load(args.ckpt)
    corrupted, clean = load_dataset(args.data), load_dataset(args.clean)
    rep = fuse_labels(ckpt.params, corrupted, clean, args.samples or ckpt.config.n_samples)
    out = Path(args.out)
    items: Dict[str, object] = {"corrupted_accuracy": rep.corrupted.mean, "fused_accuracy": rep.fused.mean,
                                "delta": rep.delta}
    for k in rep.fused.per_frame:
        items[f"corrupted[{k}]"] = rep.corrupted.per_frame[k]
        items[f"fused[{k}]"] = rep.fused.per_frame[k]
    write_report(out / "report.txt", items)
    with open(out / "per_frame.tsv", "w") as fh:
        fh.write("frame\tcorrupted\tfused\n")
        for k in rep.fused.per_frame:
            fh.write(f"{k}\t{rep.corrupted.per_frame[k]:.6f}\t{rep.fused.per_frame[k]:.6f}\n")
    accuracy_figure(out / "accuracy.png", {"corrupted": rep.corrupted.per_frame, "fused": rep.fused.per_frame})
    first = clean.train_names[0]
    from .trainer import render_frame
    f = corrupted.frames[first]
    r = render_frame(ckpt.params, f.camera, f.sun_dir, *f.shape, corrupted.alt_range, corrupted.bounds,
                     ckpt.config.n_samples, f.embed_index or 0)
    label_panels(out / f"{first}_labels.png", {"clean": clean.frames[first].labels, "corrupted": f.labels,
                                                "fused": r.sem_class.reshape(f.shape)}, clean.colormap)
    return EXIT_OK


def cmd_check(args) -> int:
    from . import checks
    results = []
    if args.suite in ("schedule", "determinism"):
        if args.suite == "schedule":
            if not args.run:
                raise UsageError("--run is required for the schedule check")
            run = Path(args.run[0])
            cfg = json.loads((run / "config.json").read_text())
            m = checks.schedule_conformance(checks.read_records(run / "metrics.jsonl"), cfg["iterations"],
                                            cfg["schedule"]["depth_supervision_fraction"])
            results.append(checks.CheckResult("schedule", checks.schedule_ok(m), m))
        else:
            if not args.run or len(args.run) != 2:
                raise UsageError("--run needs two run directories for the determinism check")
            a, b = (Path(p) for p in args.run)
            same_log = (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
            fa = json.loads((a / "final_metrics.json").read_text())
            fb = json.loads((b / "final_metrics.json").read_text())
            diff = max(abs(fa[k] - fb[k]) for k in ("train_accuracy", "test_accuracy"))
            same_ckpt = (a / "checkpoint.ssck").read_bytes() == (b / "checkpoint.ssck").read_bytes()
            results.append(checks.CheckResult("determinism", same_log and diff <= 1e-6,
                                              {"log_identical": same_log, "accuracy_diff": diff,
                                               "checkpoint_identical": same_ckpt}))
    else:
        names = checks.PROPERTY_SUITES if args.suite == "all" else [args.suite]
        for name in names:
            results.append(checks.run_property_suite(name, seed=args.seed))
    for r in results:
        print(r.line())
    if args.report:
        items: Dict[str, object] = {"passed": int(all(r.passed for r in results))}
        for r in results:
            items[f"{r.name}.passed"] = int(r.passed)
            items[f"{r.name}.seconds"] = r.seconds
            for k, v in r.measured.items():
                items[f"{r.name}.{k}"] = v
        write_report(Path(args.report), items)
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def cmd_manifest(args) -> int:
    from .manifests import builtin_manifests, load_manifest, run_manifest
    if args.action == "list":
        for name, path in builtin_manifests().items():
            print(f"{name}\t{path}")
        return EXIT_OK
    known = builtin_manifests()
    paths = [known.get(m, m) for m in args.manifests] if args.manifests else list(known.values())
    ok = True
    for p in paths:
        rep = run_manifest(load_manifest(p), args.work)
        print(rep.line())
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    from .checks import PROPERTY_SUITES
    from .synth import PRESETS
    from .trainer import MODALITIES
    p = argparse.ArgumentParser(prog="semsat", description="Semantic satellite radiance fields on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every training record")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-date dataset")
    s.add_argument("--preset", choices=PRESETS, default="town")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--views", type=int, default=10)
    s.add_argument("--test", type=int, default=None, help="number of test frames (default 20%%)")
    s.add_argument("--size", type=int, default=48)
    s.add_argument("--grid", type=int, default=48)
    s.add_argument("--depth-fraction", type=float, default=0.2)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", help="train a field on a dataset")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--config", help="JSON config; flags override its keys")
    t.add_argument("--preset", choices=("desk", "full"))
    t.add_argument("--iters", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--samples", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-decay", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--log-every", type=int)
    t.add_argument("--semantic-activation", choices=("sigmoid", "none"))
    t.add_argument("--density-scale", type=float)
    t.add_argument("--no-transient-reg", action="store_true")
    t.add_argument("--no-depth", action="store_true")
    t.add_argument("--no-solar", action="store_true")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-at", type=int, help="stop after this many iterations")
    t.add_argument("--no-eval", action="store_true", help="skip final metrics")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render modalities of a frame or a novel view")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--frame")
    r.add_argument("--novel", help="off_nadir,azimuth,sun_elevation,sun_azimuth in degrees")
    r.add_argument("--size", type=int, default=48)
    r.add_argument("--modality", nargs="+", default=["all"], help=f"any of {', '.join(MODALITIES)} or all")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="semantic accuracy, PSNR and transient uncertainty")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--metric", choices=("accuracy", "transient", "psnr", "all"), default="all")
    e.add_argument("--target", choices=("static", "labels"), default="static",
                   help="score against transient-free labels or the stored labels")
    e.add_argument("--samples", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("corrupt", help="corrupt training labels with coherent blobs")
    c.add_argument("--labels", required=True, help="dataset whose training labels are corrupted")
    c.add_argument("--loss", type=float, required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--blur-radius", type=int, default=2)
    c.add_argument("--rescale", type=int, default=4)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_corrupt)

    f = sub.add_parser("fuse", help="score rendered training labels against clean labels")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--data", required=True, help="corrupted dataset the checkpoint was trained on")
    f.add_argument("--clean", required=True)
    f.add_argument("--samples", type=int)
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_fuse)

    k = sub.add_parser("check", help="property suites and training-log inspections")
    k.add_argument("--suite", choices=PROPERTY_SUITES + ("all", "schedule", "determinism"), default="all")
    k.add_argument("--run", nargs="+", help="run directories for schedule/determinism")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--report")
    k.set_defaults(fn=cmd_check)

    m = sub.add_parser("manifest", help="run experiment manifests")
    m.add_argument("action", choices=("list", "run"))
    m.add_argument("manifests", nargs="*", help="names or paths (default: all built-in)")
    m.add_argument("--work", default="work")
    m.set_defaults(fn=cmd_manifest)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"semsat {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, FloatingPointError, KeyError, IndexError) as exc:
        print(f"semsat {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
