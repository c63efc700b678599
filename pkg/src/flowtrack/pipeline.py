"""End-to-end pipeline orchestration: config, staged execution, manifest.

Stages: bg (median background) -> label (stage-1 pseudo-labels) ->
refine (MVA + CRF) -> extract (instances + rotated boxes) -> track (SORT).
Every stage writes its artifacts under the output directory; a manifest
with the effective config, per-stage wall-clock times and throughput is
written atomically at the end. Identical configs and inputs produce
byte-identical artifacts (the manifest's timings excepted).
"""

import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, frame_io, instances as inst_mod, kernels, tracker as trk_mod, viz
from .background import ThresholdParams, estimate_background
from .flow import DEFAULT_FLOW_OPTS, label_sequence
from .refine import CrfParams, refine_labels, stage1_predictor
from .tracker import SortTracker, TrackerConfig


class ConfigError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, frame_index=None, cause=None):
        self.stage = stage
        self.frame_index = frame_index
        self.cause = cause
        at = f" at frame {frame_index}" if frame_index is not None else ""
        super().__init__(f"stage '{stage}' failed{at}: {cause}")


@dataclass
class IoConfig:
    frames_dir: str | None = None
    out_dir: str = "out"
    pattern: str = "*"
    gt_file: str | None = None


@dataclass
class BackgroundConfig:
    n_frames: int = 10
    window: int = 11
    c_offset: float = 2.0
    gaussian_sigma: float | None = None

    def threshold_params(self):
        return ThresholdParams(window=self.window, c_offset=self.c_offset,
                               gaussian_sigma=self.gaussian_sigma)


@dataclass
class FlowConfig:
    mag_threshold: float = 0.5
    bg_gate: bool = True
    levels: int = 3
    win_size: int = 15
    iterations: int = 3
    poly_n: int = 7
    poly_sigma: float = 1.5

    def opts(self):
        return {k: getattr(self, k) for k in DEFAULT_FLOW_OPTS}


@dataclass
class RefineConfig:
    enabled: bool = True
    alpha: float = 0.7
    beta: float = 1.0
    stability_eps: float = 1e-3
    max_rounds: int = 10
    spatial_sigma: float = 3.0
    bilateral_sigma_xy: float = 30.0
    bilateral_sigma_rgb: float = 13.0
    weight_spatial: float = 3.0
    weight_bilateral: float = 5.0
    n_iterations: int = 5
    window_radius: int = 5

    def crf_params(self):
        return CrfParams(
            spatial_sigma=self.spatial_sigma,
            bilateral_sigma_xy=self.bilateral_sigma_xy,
            bilateral_sigma_rgb=self.bilateral_sigma_rgb,
            pairwise_weights=(self.weight_spatial, self.weight_bilateral),
            n_iterations=self.n_iterations,
            window_radius=self.window_radius,
        )


@dataclass
class InstancesConfig:
    score_threshold: float = 0.1
    bin_threshold: float = 0.5
    nms_sigma: float = 0.5
    min_area: int = 25


@dataclass
class TrackConfig:
    max_age: int = 3
    min_hits: int = 3
    iou_threshold: float = 0.3
    process_noise_scale: float = 1.0
    measurement_noise_scale: float = 1.0

    def tracker_config(self):
        return TrackerConfig(max_age=self.max_age, min_hits=self.min_hits,
                             iou_threshold=self.iou_threshold,
                             process_noise_scale=self.process_noise_scale,
                             measurement_noise_scale=self.measurement_noise_scale)


@dataclass
class PipelineConfig:
    io: IoConfig = field(default_factory=IoConfig)
    background: BackgroundConfig = field(default_factory=BackgroundConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    instances: InstancesConfig = field(default_factory=InstancesConfig)
    tracker: TrackConfig = field(default_factory=TrackConfig)
    workers: int | None = None
    seed: int = 0
    overlay: bool = False

    def to_dict(self):
        return asdict(self)


_SECTIONS = {
    "io": IoConfig, "background": BackgroundConfig, "flow": FlowConfig,
    "refine": RefineConfig, "instances": InstancesConfig, "tracker": TrackConfig,
}
_SCALARS = {"workers", "seed", "overlay"}


def config_from_dict(data):
    """Build a PipelineConfig, rejecting unknown keys and bad ranges."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = PipelineConfig()
    for key, value in data.items():
        if key in _SCALARS:
            setattr(cfg, key, value)
            continue
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config section {key!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"config section {key!r} must be an object")
        section = getattr(cfg, key)
        known = set(section.__dataclass_fields__)
        for k, v in value.items():
            if k not in known:
                raise ConfigError(f"unknown key {key}.{k}")
            setattr(section, k, v)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    try:
        cfg.background.threshold_params()
        cfg.refine.crf_params()
        cfg.tracker.tracker_config()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if cfg.background.n_frames < 1:
        raise ConfigError("background.n_frames must be >= 1")
    if cfg.flow.mag_threshold < 0:
        raise ConfigError("flow.mag_threshold must be >= 0")
    if not 0 <= cfg.instances.bin_threshold < 1:
        raise ConfigError("instances.bin_threshold must be in [0, 1)")
    if cfg.instances.min_area < 0:
        raise ConfigError("instances.min_area must be >= 0")
    if not 0 < cfg.refine.alpha < 1 and cfg.refine.alpha not in (0.0, 1.0):
        raise ConfigError("refine.alpha must be in [0, 1]")
    if cfg.refine.max_rounds < 1:
        raise ConfigError("refine.max_rounds must be >= 1")
    if cfg.workers is not None and cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    return cfg


def load_config(path):
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot load config {path}: {e}") from e
    return config_from_dict(data)


def effective_workers(cfg):
    return cfg.workers if cfg.workers else (os.cpu_count() or 1)


@dataclass
class RunManifest:
    config: dict
    stage_ms: dict
    frames: int
    fps: float
    artifacts: dict
    version: str = __version__

    def to_dict(self):
        return asdict(self)


def write_manifest(manifest, path):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        json.dump(manifest.to_dict(), f, indent=2)
        f.write("\n")
    os.replace(tmp, path)


def _timed(stage_ms, name):
    class _Timer:
        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, exc_type, exc, tb):
            stage_ms[name] = (time.perf_counter() - self.t0) * 1000.0
            return False

    return _Timer()


def run(cfg, frames=None):
    """Execute the full pipeline. Frames may be passed in-memory; otherwise
    they are loaded from cfg.io.frames_dir. Returns the RunManifest."""
    out = Path(cfg.io.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage_ms = {}
    artifacts = {}
    workers = effective_workers(cfg)
    kernels.warmup()  # JIT compilation happens outside the measured window
    total0 = time.perf_counter()

    if frames is None:
        if not cfg.io.frames_dir:
            raise ConfigError("io.frames_dir is required")
        try:
            frames = frame_io.load_sequence(cfg.io.frames_dir, cfg.io.pattern)
        except frame_io.FrameIOError as e:
            raise StageError("load", cause=e) from e
    gray = [frame_io.to_gray(f) for f in frames]
    n = len(gray)

    # --- bg ---
    try:
        with _timed(stage_ms, "bg"):
            bg = estimate_background(gray, cfg.background.n_frames)
            frame_io.write_pgm(bg.median_image, out / "background.pgm")
            artifacts["background"] = str(out / "background.pgm")
    except StageError:
        raise
    except Exception as e:
        raise StageError("bg", cause=e) from e

    # --- label ---
    thresh = cfg.background.threshold_params()
    try:
        with _timed(stage_ms, "label"):
            labels = label_sequence(gray, bg, thresh, cfg.flow.mag_threshold,
                                    bg_gate=cfg.flow.bg_gate, flow_opts=cfg.flow.opts(),
                                    workers=workers)
            label_dir = out / "labels"
            label_dir.mkdir(exist_ok=True)
            for i, m in enumerate(labels):
                frame_io.write_mask(m, label_dir / f"label_{i:04d}.pgm")
            artifacts["labels"] = str(label_dir)
    except StageError:
        raise
    except Exception as e:
        raise StageError("label", cause=e) from e

    # --- refine ---
    try:
        with _timed(stage_ms, "refine"):
            refined_dir = out / "refined"
            refined_dir.mkdir(exist_ok=True)
            if cfg.refine.enabled:
                predictor = stage1_predictor(labels)
                refined, rounds_log = refine_labels(
                    gray, [lab.astype(np.float64) for lab in labels], predictor,
                    alpha=cfg.refine.alpha, crf_params=cfg.refine.crf_params(),
                    stability_eps=cfg.refine.stability_eps, max_rounds=cfg.refine.max_rounds,
                    beta=cfg.refine.beta, workers=workers)
                with open(out / "refine_log.csv", "w") as f:
                    f.write("round,mean_l_beta,mean_delta_mva\n")
                    for row in rounds_log:
                        f.write(f"{row['round']},{row['mean_l_beta']:.6f},{row['mean_delta_mva']:.6e}\n")
                artifacts["refine_log"] = str(out / "refine_log.csv")
            else:
                refined = labels  # pass-through: byte-identical to stage-1 output
            for i, m in enumerate(refined):
                frame_io.write_mask(m, refined_dir / f"refined_{i:04d}.pgm")
            artifacts["refined"] = str(refined_dir)
    except StageError:
        raise
    except Exception as e:
        raise StageError("refine", cause=e) from e

    # --- extract ---
    try:
        with _timed(stage_ms, "extract"):
            per_frame_dets = []
            records = []
            for i, m in enumerate(refined):
                dets = inst_mod.binarize_and_extract(
                    m.astype(np.float64),
                    score_th=cfg.instances.score_threshold,
                    bin_th=cfg.instances.bin_threshold,
                    sigma=cfg.instances.nms_sigma,
                    min_area=cfg.instances.min_area)
                per_frame_dets.append(dets)
                for inst, rbox in dets:
                    records.append(inst_mod.instance_record(i, inst, rbox))
            inst_mod.dump_instances(out / "instances.jsonl", records)
            artifacts["instances"] = str(out / "instances.jsonl")
    except StageError:
        raise
    except Exception as e:
        frame_idx = len(per_frame_dets) if "per_frame_dets" in locals() else None
        raise StageError("extract", frame_index=frame_idx, cause=e) from e

    # --- track ---
    try:
        with _timed(stage_ms, "track"):
            tracker = SortTracker(cfg.tracker.tracker_config())
            rows = []
            trails = {}
            overlay_dir = None
            if cfg.overlay:
                overlay_dir = out / "overlays"
                overlay_dir.mkdir(exist_ok=True)
            for i in range(n):
                reported = tracker.step(per_frame_dets[i], i)
                for tid, box, rbox in reported:
                    score = next((t.last_score for t in tracker.tracks if t.id == tid), 1.0)
                    rows.append(trk_mod.trajectory_row(i, tid, box, rbox, score))
                    trails.setdefault(tid, []).append((box[0] + box[2] / 2.0, box[1] + box[3] / 2.0))
                if overlay_dir is not None:
                    img = viz.draw_tracks(gray[i], reported,
                                          {tid: trails[tid] for tid, _, _ in reported})
                    viz.save_png(img, overlay_dir / f"overlay_{i:04d}.png")
            trk_mod.write_trajectories(out / "trajectories.csv", rows)
            artifacts["trajectories"] = str(out / "trajectories.csv")
            if overlay_dir is not None:
                artifacts["overlays"] = str(overlay_dir)
    except StageError:
        raise
    except Exception as e:
        raise StageError("track", frame_index=i if "i" in locals() else None, cause=e) from e

    total = time.perf_counter() - total0
    manifest = RunManifest(
        config=cfg.to_dict(),
        stage_ms=stage_ms,
        frames=n,
        fps=n / total if total > 0 else float("inf"),
        artifacts=artifacts,
    )
    write_manifest(manifest, out / "manifest.json")
    return manifest


def _deep_merge(base, override):
    out = json.loads(json.dumps(base))
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


ABLATION_COLUMNS = ["variant", "ap_mean", "ap50", "ap75", "ap_large", "ar_mean", "ar_large"]


def ablate(cfg, variants, frames=None, gt_path=None):
    """Run config variants and evaluate each against ground truth.

    variants: list of {"name": str, "overrides": nested-config-dict}.
    Returns CSV-ready rows (header included).
    """
    from .evaluation import evaluate

    gt_path = gt_path or cfg.io.gt_file
    base = cfg.to_dict()
    rows = [ABLATION_COLUMNS]
    for var in variants:
        name = var["name"]
        merged = _deep_merge(base, var.get("overrides", {}))
        vcfg = config_from_dict(merged)
        vcfg.io.out_dir = str(Path(cfg.io.out_dir) / f"variant_{name}")
        run(vcfg, frames=frames)
        if gt_path is None:
            raise ConfigError("ablate requires io.gt_file for evaluation")
        report = evaluate(Path(vcfg.io.out_dir) / "instances.jsonl", gt_path, mode="mask")
        fmt = lambda v: "" if v is None else f"{v:.4f}"
        rows.append([name, fmt(report.ap_mean), fmt(report.ap50), fmt(report.ap75),
                     fmt(report.ap_large), fmt(report.ar_mean), fmt(report.ar_large)])
    return rows
