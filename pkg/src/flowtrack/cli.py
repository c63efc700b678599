"""Command-line interface.

Subcommands: synth, bg, label, refine, extract, track, eval, run, ablate.
Exit codes: 0 success, 1 configuration/argument error, 2 stage failure.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, frame_io, viz
from . import instances as inst_mod
from . import tracker as trk_mod
from .background import estimate_background, foreground_mask
from .flow import GatedFramePair, dense_flow, label_sequence
from .instances import RotatedBox, binarize_and_extract, instance_record, load_instances
from .pipeline import (ConfigError, PipelineConfig, StageError, ablate, config_from_dict,
                       load_config, run)
from .refine import refine_labels, stage1_predictor
from .synth import generate, standard_suites, write_truth_jsonl
from .tracker import SortTracker, TrackerConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    p = _Parser(prog="flowtrack", description=__doc__)
    p.add_argument("--version", action="version", version=f"flowtrack {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    sp.add_argument("--suite", default="S1", choices=sorted(standard_suites()))
    sp.add_argument("--frames", type=int, default=60)
    sp.add_argument("--seed", type=int, default=None, help="override the suite's frozen seed")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("bg", help="estimate the background and write foreground masks")
    sp.add_argument("--frames", required=True)
    sp.add_argument("--n", type=int, default=10)
    sp.add_argument("--window", type=int, default=11)
    sp.add_argument("--c", type=float, default=2.0)
    sp.add_argument("--sigma", type=float, default=None)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("label", help="stage-1 pseudo-labels (bg subtraction + flow gating)")
    sp.add_argument("--frames", required=True)
    sp.add_argument("--mag-th", type=float, default=0.5)
    sp.add_argument("--no-bg-gate", action="store_true",
                    help="ablation: flow on raw frames, no background gating")
    sp.add_argument("--n", type=int, default=10)
    sp.add_argument("--window", type=int, default=11)
    sp.add_argument("--c", type=float, default=2.0)
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--flow-viz", default=None, help="directory for HSV flow renderings")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("refine", help="iterative MVA + CRF refinement of labels")
    sp.add_argument("--frames", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--alpha", type=float, default=0.7)
    sp.add_argument("--beta", type=float, default=1.0)
    sp.add_argument("--eps", type=float, default=1e-3)
    sp.add_argument("--max-rounds", type=int, default=10)
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("extract", help="masks -> instances JSONL (components, NMS, boxes)")
    sp.add_argument("--masks", required=True)
    sp.add_argument("--score-th", type=float, default=0.1)
    sp.add_argument("--bin-th", type=float, default=0.5)
    sp.add_argument("--nms-sigma", type=float, default=0.5)
    sp.add_argument("--min-area", type=int, default=25)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("track", help="SORT tracking over an instances JSONL")
    sp.add_argument("--instances", required=True)
    sp.add_argument("--max-age", type=int, default=3)
    sp.add_argument("--min-hits", type=int, default=3)
    sp.add_argument("--iou-th", type=float, default=0.3)
    sp.add_argument("--overlay", default=None, help="directory for overlay PNGs")
    sp.add_argument("--overlay-frames", default=None, help="frame dir for overlay backgrounds")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("eval", help="COCO-style AP/AR of predictions vs ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--mode", choices=["mask", "box"], default="mask")
    sp.add_argument("--report", required=True)

    sp = sub.add_parser("run", help="full pipeline: bg -> label -> refine -> extract -> track")
    sp.add_argument("--config", default=None)
    sp.add_argument("--frames", default=None)
    sp.add_argument("--out", default=None)
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--overlay", action="store_true", default=None)
    sp.add_argument("--no-bg-gate", action="store_true", default=None)
    sp.add_argument("--no-refine", action="store_true", default=None)

    sp = sub.add_parser("ablate", help="run config variants and tabulate eval metrics")
    sp.add_argument("--config", default=None)
    sp.add_argument("--frames", default=None)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--variants", default=None,
                    help="JSON file: [{'name':..., 'overrides':{...}}]; default full vs no-bg-gate")
    sp.add_argument("--out", required=True)

    return p


def _load_run_config(args):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.frames is not None:
        cfg.io.frames_dir = args.frames
    if args.out is not None:
        cfg.io.out_dir = args.out
    if args.workers is not None:
        cfg.workers = args.workers
    if args.seed is not None:
        cfg.seed = args.seed
    if args.overlay:
        cfg.overlay = True
    if getattr(args, "no_bg_gate", None):
        cfg.flow.bg_gate = False
    if getattr(args, "no_refine", None):
        cfg.refine.enabled = False
    return cfg


def _cmd_synth(args):
    suites = standard_suites()
    spec = suites[args.suite]
    if args.seed is not None:
        from dataclasses import replace
        spec = replace(spec, seed=args.seed)
    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "truth_masks").mkdir(parents=True, exist_ok=True)
    frames, truth = generate(spec, args.frames)
    for i, f in enumerate(frames):
        frame_io.write_pgm(f, out / "frames" / f"frame_{i:04d}.pgm")
        frame_io.write_mask(truth.union_mask(i), out / "truth_masks" / f"truth_{i:04d}.pgm")
    write_truth_jsonl(truth, out / "truth.jsonl")
    print(f"wrote {len(frames)} frames + truth to {out}")
    return 0


def _cmd_bg(args):
    frames = [frame_io.to_gray(f) for f in frame_io.load_sequence(args.frames)]
    bg = estimate_background(frames, args.n)
    from .background import ThresholdParams
    p = ThresholdParams(window=args.window, c_offset=args.c, gaussian_sigma=args.sigma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frame_io.write_pgm(bg.median_image, out / "background.pgm")
    for i, f in enumerate(frames):
        frame_io.write_mask(foreground_mask(f, bg, p), out / f"fg_{i:04d}.pgm")
    print(f"background from {bg.n_frames_used} frames; {len(frames)} masks -> {out}")
    return 0


def _cmd_label(args):
    frames = [frame_io.to_gray(f) for f in frame_io.load_sequence(args.frames)]
    bg = estimate_background(frames, args.n)
    from .background import ThresholdParams
    p = ThresholdParams(window=args.window, c_offset=args.c)
    labels = label_sequence(frames, bg, p, args.mag_th, bg_gate=not args.no_bg_gate,
                            workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(labels):
        frame_io.write_mask(m, out / f"label_{i:04d}.pgm")
    if args.flow_viz:
        viz_dir = Path(args.flow_viz)
        viz_dir.mkdir(parents=True, exist_ok=True)
        full = np.ones_like(frames[0], dtype=np.uint8)
        for i in range(1, len(frames)):
            if args.no_bg_gate:
                pair = GatedFramePair(frames[i - 1], frames[i], full, full)
            else:
                m0 = foreground_mask(frames[i - 1], bg, p)
                m1 = foreground_mask(frames[i], bg, p)
                pair = GatedFramePair((frames[i - 1] * m0).astype(np.uint8),
                                      (frames[i] * m1).astype(np.uint8), m0, m1)
            fl = dense_flow(pair)
            viz.save_png(viz.flow_to_rgb(fl), viz_dir / f"flow_{i:04d}.png")
    print(f"{len(labels)} labels -> {out}")
    return 0


def _cmd_refine(args):
    frames = [frame_io.to_gray(f) for f in frame_io.load_sequence(args.frames)]
    label_files = sorted(Path(args.labels).glob("*.pgm"))
    if len(label_files) != len(frames):
        raise ConfigError(f"{len(frames)} frames but {len(label_files)} label masks")
    labels = [frame_io.read_mask(p) for p in label_files]
    predictor = stage1_predictor(labels)
    refined, log = refine_labels(frames, [lab.astype(np.float64) for lab in labels], predictor,
                                 alpha=args.alpha, stability_eps=args.eps,
                                 max_rounds=args.max_rounds, beta=args.beta,
                                 workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(refined):
        frame_io.write_mask(m, out / f"refined_{i:04d}.pgm")
    with open(out / "refine_log.csv", "w") as f:
        f.write("round,mean_l_beta,mean_delta_mva\n")
        for row in log:
            f.write(f"{row['round']},{row['mean_l_beta']:.6f},{row['mean_delta_mva']:.6e}\n")
    print(f"{len(refined)} refined masks in {len(log)} rounds -> {out}")
    return 0


def _cmd_extract(args):
    mask_files = sorted(Path(args.masks).glob("*.pgm"))
    if not mask_files:
        raise ConfigError(f"no .pgm masks in {args.masks}")
    records = []
    for i, mf in enumerate(mask_files):
        soft = frame_io.read_mask(mf).astype(np.float64)
        for inst, rbox in binarize_and_extract(soft, score_th=args.score_th,
                                               bin_th=args.bin_th, sigma=args.nms_sigma,
                                               min_area=args.min_area):
            records.append(instance_record(i, inst, rbox))
    inst_mod.dump_instances(args.out, records)
    print(f"{len(records)} instances -> {args.out}")
    return 0


def _cmd_track(args):
    by_frame = load_instances(args.instances)
    tracker = SortTracker(TrackerConfig(max_age=args.max_age, min_hits=args.min_hits,
                                        iou_threshold=args.iou_th))
    overlay_frames = None
    if args.overlay:
        if not args.overlay_frames:
            raise ConfigError("--overlay requires --overlay-frames")
        overlay_frames = [frame_io.to_gray(f) for f in frame_io.load_sequence(args.overlay_frames)]
        Path(args.overlay).mkdir(parents=True, exist_ok=True)
    rows = []
    trails = {}
    last = max(by_frame) if by_frame else -1
    for i in range(last + 1):
        dets = []
        for rec in by_frame.get(i, []):
            inst = inst_mod.Instance(mask=None, bbox=tuple(rec["bbox"]),
                                     score=float(rec["score"]), area=int(rec["area"]))
            r = rec.get("rbox")
            rbox = RotatedBox(cx=r[0], cy=r[1], w=r[2], h=r[3], angle=r[4]) if r else None
            dets.append((inst, rbox))
        reported = tracker.step(dets, i)
        for tid, box, rbox in reported:
            score = next((t.last_score for t in tracker.tracks if t.id == tid), 1.0)
            rows.append(trk_mod.trajectory_row(i, tid, box, rbox, score))
            trails.setdefault(tid, []).append((box[0] + box[2] / 2.0, box[1] + box[3] / 2.0))
        if overlay_frames is not None and i < len(overlay_frames):
            img = viz.draw_tracks(overlay_frames[i], reported,
                                  {tid: trails[tid] for tid, _, _ in reported})
            viz.save_png(img, Path(args.overlay) / f"overlay_{i:04d}.png")
    trk_mod.write_trajectories(args.out, rows)
    print(f"{len(rows)} track rows -> {args.out}")
    return 0


def _cmd_eval(args):
    from .evaluation import evaluate, write_report
    report = evaluate(args.pred, args.gt, mode=args.mode)
    write_report(report, args.report)
    fields = {k: v for k, v in report.to_dict().items() if k != "per_threshold"}
    print(json.dumps(fields, indent=2))
    return 0


def _cmd_run(args):
    cfg = _load_run_config(args)
    manifest = run(cfg)
    print(f"processed {manifest.frames} frames at {manifest.fps:.2f} fps -> {cfg.io.out_dir}")
    return 0


def _cmd_ablate(args):
    cfg = _load_run_config(argparse.Namespace(config=args.config, frames=args.frames,
                                              out=None, workers=None, seed=None,
                                              overlay=None))
    if args.variants:
        with open(args.variants) as f:
            variants = json.load(f)
    else:
        variants = [
            {"name": "full", "overrides": {}},
            {"name": "no_bg_gate", "overrides": {"flow": {"bg_gate": False}}},
        ]
    rows = ablate(cfg, variants, gt_path=args.gt)
    with open(args.out, "w", newline="") as f:
        csv.writer(f).writerows(rows)
    print(f"{len(rows) - 1} variants -> {args.out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth, "bg": _cmd_bg, "label": _cmd_label, "refine": _cmd_refine,
    "extract": _cmd_extract, "track": _cmd_track, "eval": _cmd_eval,
    "run": _cmd_run, "ablate": _cmd_ablate,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except frame_io.FrameIOError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
