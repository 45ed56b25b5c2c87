"""Command line entry point: ``stereopose <command> [options]``.

Every command writes ``<out-dir>/<command>.manifest.json`` with the full
argument echo, seeds, input/output digests, tool version and stage timings.
Exit status is 0 on success, 2 on usage errors and 1 on runtime failures.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import fcntl
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import IoFailure, StereoPoseError
from .fitter import FitConfig, fit_sequence, write_fit_csv, write_timing_log
from .geometry import CameraRig
from .instruments import load_model_set, make_instrument_set, model_set_digest, save_model_set
from .metrics import mpvpe
from .report import render_report
from .synth import (MotionConfig, NoiseConfig, PoseSampler, generate_dataset, generate_sequence,
                    read_dataset, read_header, read_sequence, resolve_workers)
from .tracker import TrackerConfig, run_tracker, write_track_csv
from .transformer import (ModelConfig, TrainHyper, decode_poses, evaluate_mpvpe,
                          load_checkpoint, predict, tokenize_records, train)
from .transformer.ablation import is_strictly_decreasing, run_ablation

COMMANDS = ("synth", "train", "eval", "fit", "track", "ablate", "compare-fit", "report")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Collects manifest fields while a command executes."""

    def __init__(self, args):
        self.args = args
        self.out_dir = Path(args.out_dir)
        self.inputs, self.outputs, self.timings = {}, {}, {}
        self.stage = "setup"
        self.extra = {}

    def path(self, name) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.out_dir / p

    def input(self, path):
        self.inputs[str(path)] = sha256_file(path)
        return path

    def output(self, path):
        self.outputs[str(path)] = None
        return path

    @contextlib.contextmanager
    def timed(self, stage):
        self.stage = stage
        t0 = time.perf_counter()
        yield
        self.timings[stage] = round(time.perf_counter() - t0, 6)

    def manifest(self, status, error=None) -> dict:
        config = {k: v for k, v in vars(self.args).items() if k != "func"}
        outputs = {p: (sha256_file(p) if Path(p).exists() else None) for p in self.outputs}
        doc = {"command": self.args.command, "config": config, "seed": self.args.seed,
               "inputs": self.inputs, "outputs": outputs, "version": __version__,
               "timings": self.timings, "status": status}
        if error is not None:
            doc["failed_stage"] = self.stage
            doc["error"] = error
        doc.update(self.extra)
        return doc


def _models_for(header, args):
    """Model set from ``--models-file`` or regenerated from the file header, digest-checked."""
    if getattr(args, "models_file", None):
        models = load_model_set(args.models_file)
    else:
        seed = header.get("model_seed")
        if seed is None:
            raise IoFailure("file header has no model_seed; pass --models-file")
        models = make_instrument_set(seed, header["classes"])
    if model_set_digest(models) != header.get("models_digest"):
        raise IoFailure("model set does not match the digest recorded in the input file")
    return models


def _model_config(args, class_count) -> ModelConfig:
    return ModelConfig(layers=args.layers, hidden_dim=args.hidden, heads=args.heads,
                       modality=args.modality, keypoint_onehot=not args.no_onehot,
                       rotation_mode=args.rotation, class_count=class_count)


# ---------------------------------------------------------------- commands

def cmd_synth(args, run: Run):
    rig = CameraRig()
    model_seed = args.seed if args.model_seed is None else args.model_seed
    with run.timed("models"):
        models = make_instrument_set(model_seed, args.models)
    noise = None if args.clean else NoiseConfig(args.kp_sigma, args.dropout, args.misclass)
    out = run.output(run.path(args.out))
    models_path = run.output(Path(str(out) + ".models.json"))
    save_model_set(models, models_path, model_seed)
    if args.sequence is None:
        with run.timed("generate"):
            generate_dataset(models, rig, PoseSampler(seed=args.seed), args.n, noise, out,
                             workers=args.threads, model_seed=model_seed)
        return
    mode = "spline" if args.sequence == "occlusion" else args.sequence
    windows = []
    if args.sequence == "occlusion":
        lo = args.frames // 3
        windows = [(0, lo, lo + 9, 0.3)]
    with run.timed("generate"):
        generate_sequence(models, rig, args.frames, args.objects, MotionConfig(mode=mode, seed=args.seed),
                          noise, windows, seed=args.seed, path=out, model_seed=model_seed)


def cmd_train(args, run: Run):
    header = read_header(run.input(args.data))
    models = _models_for(header, args)
    config = _model_config(args, len(models))
    hyper = TrainHyper(lr=args.lr, batch=args.batch, epochs=args.epochs, seed=args.seed,
                       schedule=args.schedule)
    ckpt = run.output(run.path(args.out))
    log = run.output(Path(str(ckpt) + ".loss.csv"))
    with run.timed("train"):
        train(args.data, config, models, hyper, rig=CameraRig.from_dict(header["rig"]),
              log_path=log, checkpoint_path=ckpt)


def cmd_eval(args, run: Run):
    header = read_header(run.input(args.data))
    run.input(args.ckpt)
    models = _models_for(header, args)
    params, config, _ = load_checkpoint(args.ckpt)
    with run.timed("eval"):
        report, _ = evaluate_mpvpe(params, config, args.data, models,
                                   CameraRig.from_dict(header["rig"]))
    out = run.output(run.path(args.out))
    out.write_text(report.to_csv())
    run.extra["mpvpe_mm"] = report.aggregate


def _fit_config(args) -> FitConfig:
    return FitConfig(init_iters=args.init_iters, track_iters=args.track_iters,
                     early_stop_px=args.early_stop_px, lr=args.fit_lr, restarts=args.restarts,
                     seed=args.seed)


def cmd_fit(args, run: Run):
    header, dets = read_sequence(run.input(args.seq))
    models = _models_for(header, args)
    with run.timed("fit"):
        rows = fit_sequence(dets, models, CameraRig.from_dict(header["rig"]), _fit_config(args))
    out = run.output(run.path(args.out))
    write_fit_csv(rows, out)
    timing = Path(str(out) + ".timing.csv")
    write_timing_log(rows, timing)


def cmd_track(args, run: Run):
    header, dets = read_sequence(run.input(args.seq))
    config = TrackerConfig(class_count=header["classes"])
    with run.timed("track"):
        tracked = run_tracker(dets, config, CameraRig.from_dict(header["rig"]))
    write_track_csv(tracked, run.output(run.path(args.out)))


def cmd_ablate(args, run: Run):
    header, records = read_dataset(run.input(args.data))
    models = _models_for(header, args)
    base = _model_config(args, len(models))
    hyper = TrainHyper(lr=args.lr, batch=args.batch, epochs=args.epochs, seed=args.seed,
                       schedule=args.schedule)
    with run.timed("ablate"):
        rows = run_ablation(records, models, CameraRig.from_dict(header["rig"]), hyper, base,
                            holdout=args.holdout, workers=resolve_workers(args.threads))
    out = run.output(run.path(args.out))
    mono = rows[0].mpvpe_mm
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "config", "mpvpe_mm", "ratio_to_mono", "final_loss"])
        for i, r in enumerate(rows, 1):
            w.writerow([i, r.name, f"{r.mpvpe_mm:.6f}", f"{r.mpvpe_mm / mono:.6f}",
                        f"{r.final_loss:.6f}"])
    run.extra["strictly_decreasing"] = is_strictly_decreasing(rows)
    run.extra["train_seconds"] = {r.name: round(r.train_seconds, 3) for r in rows}


def cmd_compare_fit(args, run: Run):
    header, dets = read_sequence(run.input(args.seq))
    models = _models_for(header, args)
    rig = CameraRig.from_dict(header["rig"])
    by_class = {m.class_id: m for m in models}
    if args.ckpt:
        params, config, _ = load_checkpoint(run.input(args.ckpt))
    else:
        with run.timed("train"):
            sampler = PoseSampler(seed=args.seed)
            records_path = run.path("compare_train.ds")
            generate_dataset(models, rig, sampler, args.train_n, NoiseConfig(), records_path,
                             workers=args.threads, model_seed=header.get("model_seed"))
            config = _model_config(args, len(models))
            hyper = TrainHyper(lr=args.lr, batch=args.batch, epochs=args.epochs, seed=args.seed,
                       schedule=args.schedule)
            params = train(records_path, config, models, hyper, rig=rig).params

    records = [d.record for d in dets]
    frames = {}
    for i, d in enumerate(dets):
        frames.setdefault(d.frame_index, []).append(i)
    # the network has no temporal state, so a whole sequence can go through in one batch
    with run.timed("transformer"):
        t0 = time.perf_counter()
        _, vec = predict(params, config, tokenize_records(records, config, rig))
        poses = decode_poses(vec, config)
        t_net = time.perf_counter() - t0
    # streaming variant: one call per frame, as a live system would run it
    with run.timed("transformer_per_frame"):
        for f in sorted(frames):
            idx = frames[f]
            decode_poses(predict(params, config,
                                 tokenize_records([records[i] for i in idx], config, rig))[1],
                         config)
    # error against ground truth uses the true class model
    err_net = [mpvpe(p, r.pose, by_class[r.class_id]) for p, r in zip(poses, records)]

    with run.timed("optimization"):
        t0 = time.perf_counter()
        fits = fit_sequence(dets, models, rig, _fit_config(args))
        t_fit = time.perf_counter() - t0
    gt = {(d.frame_index, d.track_gt_id): d.record for d in dets}
    err_fit = [mpvpe(r.pose, gt[(r.frame, r.track_id)].pose,
                     by_class[gt[(r.frame, r.track_id)].class_id]) for r in fits]

    out = run.output(run.path(args.out))
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "poses", "error_mm", "poses_per_sec"])
        w.writerow(["transformer", len(err_net), f"{np.mean(err_net):.6f}",
                    f"{len(err_net) / t_net:.3f}"])
        w.writerow(["optimization", len(err_fit), f"{np.mean(err_fit):.6f}",
                    f"{len(err_fit) / t_fit:.3f}"])


def cmd_report(args, run: Run):
    for p in args.inputs:
        run.input(p)
    with run.timed("render"):
        for p in render_report(args.inputs, run.out_dir):
            run.output(p)


# ---------------------------------------------------------------- parser

def _add_model_args(p):
    d = ModelConfig()
    p.add_argument("--layers", type=int, default=d.layers)
    p.add_argument("--hidden", type=int, default=d.hidden_dim)
    p.add_argument("--heads", type=int, default=d.heads)
    p.add_argument("--modality", choices=("mono", "stereo"), default=d.modality)
    p.add_argument("--no-onehot", action="store_true", help="drop the keypoint index one-hot")
    p.add_argument("--rotation", choices=("sixd", "axis_angle3"), default=d.rotation_mode)


def _add_train_args(p, epochs=30):
    h = TrainHyper()
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch", type=int, default=h.batch)
    p.add_argument("--lr", type=float, default=h.lr)
    p.add_argument("--schedule", choices=("cosine", "constant"), default=h.schedule,
                   help="step size decay over the run")


def _add_fit_args(p):
    f = FitConfig()
    p.add_argument("--init-iters", type=int, default=f.init_iters)
    p.add_argument("--track-iters", type=int, default=f.track_iters)
    p.add_argument("--early-stop-px", type=float, default=f.early_stop_px)
    p.add_argument("--fit-lr", type=float, default=f.lr)
    p.add_argument("--restarts", type=int, default=f.restarts)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None,
                        help="worker processes (default: STEREOPOSE_THREADS or 1)")
    common.add_argument("--out-dir", default=".")
    common.add_argument("--models-file", default=None,
                        help="model set JSON (default: regenerate from the input header)")

    parser = argparse.ArgumentParser(prog="stereopose", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a dataset or a sequence")
    p.add_argument("--models", type=int, default=13, help="number of instrument classes")
    p.add_argument("--model-seed", type=int, default=None, help="default: --seed")
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--out", default="dataset.ds")
    p.add_argument("--sequence", choices=("spline", "static", "crossing", "occlusion"), default=None)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--clean", action="store_true", help="no observation noise")
    n = NoiseConfig()
    p.add_argument("--kp-sigma", type=float, default=n.keypoint_sigma)
    p.add_argument("--dropout", type=float, default=n.dropout_prob)
    p.add_argument("--misclass", type=float, default=n.misclass_prob)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train the pose transformer")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="model.ckpt")
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="MPVPE of a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default="eval.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fit", parents=[common], help="optimization fitting of a sequence")
    p.add_argument("--seq", required=True)
    p.add_argument("--out", default="fit.csv")
    _add_fit_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("track", parents=[common], help="track and smooth a sequence")
    p.add_argument("--seq", required=True)
    p.add_argument("--out", default="track.csv")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("ablate", parents=[common], help="modality ablation ranked by MPVPE")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="ablation.csv")
    p.add_argument("--holdout", type=float, default=0.1)
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("compare-fit", parents=[common],
                       help="transformer inference against optimization fitting")
    p.add_argument("--seq", required=True)
    p.add_argument("--ckpt", default=None, help="default: train one first")
    p.add_argument("--train-n", type=int, default=20000)
    p.add_argument("--out", default="compare.csv")
    _add_model_args(p)
    _add_train_args(p)
    _add_fit_args(p)
    p.set_defaults(func=cmd_compare_fit)

    p = sub.add_parser("report", parents=[common], help="render CSV results to SVG and markdown")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


@contextlib.contextmanager
def _locked(out_dir: Path):
    fh = open(out_dir / ".stereopose.lock", "w")
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError as exc:
            raise IoFailure(f"output directory {out_dir} is locked by another run") from exc
        yield
    finally:
        fh.close()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads is None:
        args.threads = resolve_workers(None)
    run = Run(args)
    try:
        run.out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"stereopose: cannot create {run.out_dir}: {exc}", file=sys.stderr)
        return 1
    manifest_path = run.out_dir / f"{args.command}.manifest.json"
    try:
        with _locked(run.out_dir):
            try:
                args.func(args, run)
            except (StereoPoseError, OSError, ValueError, KeyError) as exc:
                manifest_path.write_text(json.dumps(run.manifest("failed", str(exc)), indent=2,
                                                    sort_keys=True))
                print(f"stereopose {args.command}: {exc}", file=sys.stderr)
                return 1
            manifest_path.write_text(json.dumps(run.manifest("ok"), indent=2, sort_keys=True))
    except IoFailure as exc:
        print(f"stereopose: {exc}", file=sys.stderr)
        return 1
    return 0


def entry_point():
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
