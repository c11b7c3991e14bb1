"""Command-line entry point: ``sarogs <subcommand> ...``.

Every subcommand prints one JSON object per line on stdout.  Commands that
produce a report (``train``, ``eval``, ``segment``, ``gradcheck``) also write
matplotlib figures into a report directory.  Exit status: 0 on success, 1 on
a usage error, 2 on a runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(obj):
    print(json.dumps(obj, sort_keys=True), flush=True)


def apply_threads():
    """Honor SARO_THREADS for torch and numba worker pools."""
    raw = os.environ.get("SARO_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SARO_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"SARO_THREADS must be a positive integer, got {raw!r}")
    import numba
    import torch

    torch.set_num_threads(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n


# ---------------------------------------------------------------- config files

def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [_parse_value(p) for p in text.split(",")]
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    return text


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, ``[section]`` lines prefix keys."""
    out, section = {}, ""
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        out[f"{section}.{key}" if section else key] = _parse_value(value)
    return out


def split_config(cfg: dict):
    """Route keys to schedule or model settings (``model.<name>`` for the latter)."""
    from .model import ModelConfig
    from .optimizer import ScheduleConfig

    sched_fields = {f.name for f in dataclasses.fields(ScheduleConfig)}
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)} - {"extra"}
    sched, model = {}, {}
    for key, value in cfg.items():
        if key.startswith("model."):
            name = key[6:]
            if name not in model_fields:
                raise UsageError(f"unknown config key {key!r}")
            model[name] = value
        elif key.removeprefix("schedule.") in sched_fields:
            sched[key.removeprefix("schedule.")] = value
        else:
            raise UsageError(f"unknown config key {key!r}")
    return sched, model


# ---------------------------------------------------------------- subcommands

def cmd_gen(args):
    from .scene_io import dataset_digest, generate_teacher_scene, lifespan_coverage

    ds, teacher = generate_teacher_scene(args.seed, args.primitives, args.frames, args.cameras,
                                         args.resolution, out_dir=args.out,
                                         image_format=args.format)
    short = float((lifespan_coverage(teacher.tau, teacher.sigma) < 0.3).mean())
    _emit({"command": "gen", "out": str(args.out), "frames": len(ds.frames),
           "test_frames": len(ds.split("test")), "primitives": len(teacher.tau),
           "short_lived_fraction": short, "sha256": dataset_digest(args.out)})


def cmd_train(args):
    from .model import ModelConfig
    from .optimizer import TrainingAborted, profile, train
    from .plotting import training_curves
    from .scene_io import load_dataset, save_checkpoint

    sched, model_kw = split_config(read_config(args.config)) if args.config else ({}, {})
    if args.iters is not None:
        sched.pop("iterations", None)
    try:
        cfg = profile(args.profile, iterations=args.iters, **sched)
        mcfg = ModelConfig(**model_kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"--config: {exc}") from None
    ds = load_dataset(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = args.log or out.with_suffix(".metrics.jsonl")
    meta = {"seed": args.seed, "profile": args.profile, "schedule": cfg.to_dict()}
    try:
        res = train(ds, cfg, seed=args.seed, model_config=mcfg, log_path=log_path)
    except TrainingAborted as exc:
        save_checkpoint(out, exc.model, {**meta, "iteration": exc.iteration, "aborted": True})
        raise RuntimeError(f"{exc}; last finite parameters saved to {out}") from None
    save_checkpoint(out, res.model, {**meta, "iteration": cfg.iterations},
                    res.state.rng.bit_generator.state)
    report = Path(args.report_dir) if args.report_dir else out.parent / (out.stem + "_report")
    fig = training_curves(res.log, report / "training.png") if res.log else None
    last = res.log[-1] if res.log else {}
    _emit({"command": "train", "checkpoint": str(out), "iterations": cfg.iterations,
           "primitives": len(res.model.cloud), "seconds": round(res.seconds, 3),
           "final": last, "metrics_log": str(log_path), "figure": str(fig) if fig else None})


def _load_frames(path):
    """A frame list is a manifest file (or a directory holding one); images are optional."""
    from .scene_io import MANIFEST_NAME, load_dataset

    path = Path(path)
    root = path if path.is_dir() else path.parent
    if not path.is_dir() and path.name != MANIFEST_NAME:
        import shutil
        import tempfile

        tmp = Path(tempfile.mkdtemp())
        shutil.copy(path, tmp / MANIFEST_NAME)
        ds = load_dataset(tmp, load_images=False)
        ds.root = root
        return ds
    return load_dataset(root, load_images=False)


def cmd_render(args):
    import numpy as np
    import torch

    from .projection import BakedCloud, bake, render, render_from_baked, subset
    from .scene_io import load_checkpoint, write_image

    ck = load_checkpoint(args.ckpt)
    model = ck.model
    ds = _load_frames(args.frame_list)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    baked = None
    if args.baked:
        if "features" in ck.arrays and "lifespan" in ck.arrays:
            raw = subset(model.cloud, slice(None))
            baked = BakedCloud(raw, ck.arrays["features"], ck.arrays["lifespan"], model.version,
                               model.k)
        else:
            baked = bake(model)
    written = []
    with torch.no_grad():
        for i, fr in enumerate(ds.frames):
            cam = ds.camera(fr)
            if baked is not None:
                res = render_from_baked(baked, model, fr.time, cam, ds.background)
            else:
                res = render(model, cam, fr.time, ds.background)
            name = out / f"frame_{i:05d}.png"
            write_image(name, res.image.numpy())
            written.append(str(name))
            if args.depth:
                d = res.depth.double().numpy()
                np.save(out / f"depth_{i:05d}.npy", d.astype(np.float32))
                hi = d.max() if d.max() > 0 else 1.0
                write_image(out / f"depth_{i:05d}.png", np.repeat((d / hi)[..., None], 3, -1))
            _emit({"frame": i, "time": fr.time, "image": str(name), "blended": res.blended})
    _emit({"command": "render", "frames": len(written), "baked": bool(args.baked), "out": str(out)})


def cmd_bake(args):
    from .projection import bake
    from .scene_io import load_checkpoint, save_checkpoint

    ck = load_checkpoint(args.ckpt)
    b = bake(ck.model)
    save_checkpoint(args.out, ck.model, {**ck.meta, "baked": True}, ck.rng_state,
                    {"features": b.features, "lifespan": b.lifespan})
    _emit({"command": "bake", "checkpoint": str(args.out), "primitives": len(ck.model.cloud)})


def cmd_segment(args):
    from .analysis import segment_by_lifespan, segmentation_accuracy, sub_model, teacher_labels
    from .plotting import lifespan_histogram
    from .scene_io import TEACHER_NAME, load_checkpoint, load_teacher, save_checkpoint

    if args.lifespan_thresh is not None and args.lifespan_thresh <= 0:
        raise UsageError("--lifespan-thresh must be > 0")
    ck = load_checkpoint(args.ckpt)
    seg = segment_by_lifespan(ck.model, args.lifespan_thresh)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": "segment", **seg.to_json()}
    for name, mask in (("static", seg.static), ("dynamic", seg.dynamic)):
        if mask.any():
            path = out / f"{name}.saro"
            save_checkpoint(path, sub_model(ck.model, mask), {**ck.meta, "segment": name})
            record[f"{name}_checkpoint"] = str(path)
    labels = None
    if args.data and (Path(args.data) / TEACHER_NAME).exists():
        labels = teacher_labels(ck.model, load_teacher(args.data))
        record["accuracy"] = segmentation_accuracy(seg, labels)
    record["figure"] = str(lifespan_histogram(seg.lifespan, out / "lifespans.png", seg.threshold, labels))
    (out / "segmentation.json").write_text(json.dumps(record, indent=1))
    _emit(record)


def cmd_eval(args):
    from .analysis import evaluate
    from .plotting import frame_comparison
    from .scene_io import load_checkpoint, load_dataset

    ck = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    rep = evaluate(ck.model, ds, args.split, baked=args.baked, keep_images=True)
    images = rep.pop("_images")
    per_frame = rep.pop("per_frame")
    for row in per_frame:
        _emit({"frame": row})
    report = Path(args.report_dir) if args.report_dir else Path(args.ckpt).parent / (Path(args.ckpt).stem + "_report")
    rows = [(f"t={fr.time:.2f}", img.numpy(), fr.image.numpy()) for fr, img in images]
    fig = frame_comparison(rows, report / f"eval_{args.split}.png")
    _emit({"command": "eval", **rep, "figure": str(fig)})


def cmd_gradcheck(args):
    from .gradients import run_suite
    from .plotting import gradcheck_summary

    reports = run_suite(full=args.full)
    for r in reports:
        print(r.to_json(), flush=True)
    ok = all(r.passed for r in reports)
    record = {"command": "gradcheck", "passed": ok, "checks": len(reports),
              "failed": [r.op for r in reports if not r.passed]}
    if args.report_dir:
        record["figure"] = str(gradcheck_summary(reports, Path(args.report_dir) / "gradcheck.png"))
    _emit(record)
    if not ok:
        raise RuntimeError(f"gradient checks failed: {record['failed']}")


# ---------------------------------------------------------------- parser

def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sarogs", description="Desk-scale 4D Gaussian splatting with lifespans.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="render a synthetic teacher scene")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--primitives", type=_positive_int, default=300)
    g.add_argument("--frames", type=_positive_int, default=20)
    g.add_argument("--cameras", type=_positive_int, default=8)
    g.add_argument("--resolution", type=_positive_int, default=48)
    g.add_argument("--format", choices=("png", "pfm"), default="png")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="fit a model to a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--iters", type=_positive_int, default=None,
                   help="iteration count; phase boundaries of the profile scale with it")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--profile", choices=("dnerf", "multiview"), default="dnerf")
    t.add_argument("--config", help="key = value overrides (model.* for model settings)")
    t.add_argument("--log", help="metrics JSON-lines path (default: next to the checkpoint)")
    t.add_argument("--report-dir", help="figure directory (default: <ckpt stem>_report)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render frames listed in a manifest")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--frame-list", required=True, help="manifest JSON (or dataset directory)")
    r.add_argument("--out", required=True)
    r.add_argument("--baked", action="store_true", help="render through the baked path")
    r.add_argument("--depth", action="store_true", help="also write depth maps")
    r.set_defaults(func=cmd_render)

    b = sub.add_parser("bake", help="precompute per-primitive features and lifespans")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bake)

    s = sub.add_parser("segment", help="split primitives into static and dynamic by lifespan")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--lifespan-thresh", type=float, default=None,
                   help="sigma* (default: Otsu threshold on log lifespans)")
    s.add_argument("--out", required=True)
    s.add_argument("--data", help="teacher dataset, to score against its labels")
    s.set_defaults(func=cmd_segment)

    e = sub.add_parser("eval", help="image metrics over a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--baked", action="store_true")
    e.add_argument("--report-dir")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference checks of every backward pass")
    c.add_argument("--full", action="store_true", help="probe every coordinate")
    c.add_argument("--report-dir")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        apply_threads()
        args.func(args)
    except UsageError as exc:
        print(f"sarogs {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"sarogs {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
