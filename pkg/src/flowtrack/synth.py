"""Deterministic synthetic scenes with exact ground truth.

Scenes are rendered on a low-frequency value-noise background plate
(mimicking turbid-water illumination gradients, which is what adaptive
thresholding is for). Objects are ellipses or capsules oriented along
their velocity, moving with elastic reflection at the borders, optionally
wiggling sinusoidally. Truth (masks, boxes, ids, velocities) is captured
before additive Gaussian noise is applied, so identical specs produce
bit-identical sequences.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SceneSpec:
    width: int = 256
    height: int = 256
    n_objects: int = 1
    shapes: tuple = ("capsule",)  # cycled over objects: "ellipse" | "capsule"
    length_range: tuple = (36.0, 48.0)  # long-axis extent, px
    thickness_range: tuple = (8.0, 10.0)  # short-axis extent, px
    speed_range: tuple = (2.5, 3.5)  # px/frame
    orientation: str = "perpendicular"  # long axis vs velocity: "velocity" | "perpendicular" | "fixed"
    wiggle_amplitude: float = 0.0  # sinusoidal lateral offset, px
    intensity_range: tuple = (190.0, 240.0)
    n_distractors: int = 0
    distractor_appears_at: int = 12  # frame at which static distractors pop in
    background_level: tuple = (70.0, 130.0)  # value-noise plate range
    noise_sigma: float = 3.0
    crossing: bool = False  # force 2 objects onto intersecting paths
    seed: int = 0

    def validate(self, n_frames):
        if self.width < 16 or self.height < 16:
            raise ValueError("canvas too small")
        if n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.length_range[1] >= min(self.width, self.height) / 2:
            raise ValueError("objects larger than canvas")
        if self.crossing and self.n_objects != 2:
            raise ValueError("crossing scenes need exactly 2 objects")


@dataclass
class TruthObject:
    id: int
    center: tuple  # (cx, cy) float
    velocity: tuple  # (vx, vy) px/frame
    amodal_mask: np.ndarray  # uint8 0/1, ignoring occlusion
    visible_mask: np.ndarray  # uint8 0/1, after painter's order
    bbox: tuple  # (x, y, w, h) of the visible mask, cell convention
    area: int  # visible pixel count


@dataclass
class SynthTruth:
    width: int
    height: int
    objects: list  # per frame: list[TruthObject]
    distractors: list = field(default_factory=list)  # [{'center','radius','frame'}]

    def union_mask(self, frame_idx):
        m = np.zeros((self.height, self.width), dtype=np.uint8)
        for ob in self.objects[frame_idx]:
            m |= ob.visible_mask
        return m


def _value_noise_plate(h, w, lo, hi, rng):
    grid = rng.random((9, 9))
    ys = np.linspace(0, 8, h)
    xs = np.linspace(0, 8, w)
    y0 = np.minimum(ys.astype(int), 7)
    x0 = np.minimum(xs.astype(int), 7)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[np.ix_(y0, x0)]
    g01 = grid[np.ix_(y0, x0 + 1)]
    g10 = grid[np.ix_(y0 + 1, x0)]
    g11 = grid[np.ix_(y0 + 1, x0 + 1)]
    plate = (g00 * (1 - fx) + g01 * fx) * (1 - fy) + (g10 * (1 - fx) + g11 * fx) * fy
    return lo + plate * (hi - lo)


def _object_mask(shape, cx, cy, length, thickness, theta, h, w):
    """Rasterize an ellipse or capsule centered at (cx, cy), long axis along theta."""
    yy, xx = np.mgrid[0:h, 0:w]
    dx = xx - cx
    dy = yy - cy
    ct, st = math.cos(theta), math.sin(theta)
    lon = dx * ct + dy * st  # along the long axis
    lat = -dx * st + dy * ct
    a = length / 2.0
    b = thickness / 2.0
    if shape == "ellipse":
        return (((lon / a) ** 2 + (lat / b) ** 2) <= 1.0).astype(np.uint8)
    if shape == "capsule":
        body = (np.abs(lon) <= a - b) & (np.abs(lat) <= b)
        caps = (np.abs(lon) - (a - b)) ** 2 + lat ** 2 <= b * b
        return (body | (caps & (np.abs(lon) > a - b))).astype(np.uint8)
    raise ValueError(f"unknown shape {shape!r}")


def generate(spec, n_frames):
    """Render a scene. Returns (frames: list of HxW uint8, truth: SynthTruth)."""
    spec.validate(n_frames)
    h, w = spec.height, spec.width
    rng = np.random.default_rng(spec.seed)

    plate = _value_noise_plate(h, w, *spec.background_level, rng)

    # per-object static parameters
    objs = []
    margin = spec.length_range[1] / 2 + 2
    for i in range(spec.n_objects):
        length = rng.uniform(*spec.length_range)
        thickness = rng.uniform(*spec.thickness_range)
        speed = rng.uniform(*spec.speed_range)
        heading = rng.uniform(0, 2 * math.pi)
        cx = rng.uniform(margin, w - margin)
        cy = rng.uniform(margin, h - margin)
        intensity = rng.uniform(*spec.intensity_range)
        objs.append({
            "id": i + 1,
            "shape": spec.shapes[i % len(spec.shapes)],
            "length": length,
            "thickness": thickness,
            "pos": np.array([cx, cy]),
            "vel": np.array([speed * math.cos(heading), speed * math.sin(heading)]),
            "intensity": intensity,
            "phase": rng.uniform(0, 2 * math.pi),
            "fixed_theta": rng.uniform(0, math.pi),
        })

    if spec.crossing:
        # perpendicular paths through a common point, offset by a few frames:
        # the center paths intersect while the masks only graze in passing
        speed = rng.uniform(*spec.speed_range)
        delta = rng.uniform(3.5, 5.0)
        t_meet = n_frames // 2
        cxp, cyp = w / 2.0, h * 0.55
        objs[0]["pos"] = np.array([cxp - speed * t_meet, cyp])
        objs[0]["vel"] = np.array([speed, 0.0])
        objs[1]["pos"] = np.array([cxp, cyp - speed * (t_meet + delta)])
        objs[1]["vel"] = np.array([0.0, speed])

    distractors = []
    for _ in range(spec.n_distractors):
        # small enough that adaptive thresholding keeps them solid
        distractors.append({
            "center": (rng.uniform(margin, w - margin), rng.uniform(margin, h - margin)),
            "radius": rng.uniform(4.0, 5.5),
            "frame": spec.distractor_appears_at,
            "intensity": rng.uniform(*spec.intensity_range),
        })

    # precompute trajectories (positions before wiggle) with elastic reflection
    traj = {o["id"]: [] for o in objs}
    for o in objs:
        pos = o["pos"].copy()
        vel = o["vel"].copy()
        for t in range(n_frames):
            traj[o["id"]].append((pos.copy(), vel.copy()))
            pos = pos + vel
            for ax, lim in ((0, w), (1, h)):
                if pos[ax] < margin:
                    pos[ax] = 2 * margin - pos[ax]
                    vel[ax] = -vel[ax]
                elif pos[ax] > lim - margin:
                    pos[ax] = 2 * (lim - margin) - pos[ax]
                    vel[ax] = -vel[ax]

    noise_rng = np.random.default_rng(spec.seed + 0x9E3779B9)
    frames = []
    truth = SynthTruth(width=w, height=h, objects=[], distractors=[])
    for d in distractors:
        truth.distractors.append({"center": d["center"], "radius": d["radius"], "frame": d["frame"]})

    for t in range(n_frames):
        clean = plate.copy()
        for d in distractors:
            if t >= d["frame"]:
                yy, xx = np.mgrid[0:h, 0:w]
                dm = ((xx - d["center"][0]) ** 2 + (yy - d["center"][1]) ** 2) <= d["radius"] ** 2
                clean[dm] = d["intensity"]

        frame_objs = []
        for o in objs:
            pos, vel = traj[o["id"]][t]
            heading = math.atan2(vel[1], vel[0])
            if spec.orientation == "velocity":
                theta = heading
            elif spec.orientation == "perpendicular":
                theta = heading + math.pi / 2
            else:
                theta = o["fixed_theta"]
            if spec.wiggle_amplitude > 0:
                off = spec.wiggle_amplitude * math.sin(0.35 * t + o["phase"])
                pos = pos + off * np.array([-math.sin(heading), math.cos(heading)])
            m = _object_mask(o["shape"], pos[0], pos[1], o["length"], o["thickness"], theta, h, w)
            frame_objs.append((o, pos, vel, m))

        # painter's order by id: later ids overwrite earlier ones
        for o, pos, vel, m in frame_objs:
            clean[m.astype(bool)] = o["intensity"]

        per_frame = []
        for i, (o, pos, vel, m) in enumerate(frame_objs):
            visible = m.copy()
            for j in range(i + 1, len(frame_objs)):
                visible[frame_objs[j][3].astype(bool)] = 0
            ys, xs = np.nonzero(visible)
            if len(xs):
                bbox = (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
            else:
                bbox = (0, 0, 0, 0)
            per_frame.append(TruthObject(
                id=o["id"],
                center=(float(pos[0]), float(pos[1])),
                velocity=(float(vel[0]), float(vel[1])),
                amodal_mask=m,
                visible_mask=visible,
                bbox=bbox,
                area=int(visible.sum()),
            ))
        truth.objects.append(per_frame)

        noisy = clean + noise_rng.normal(0.0, spec.noise_sigma, (h, w))
        frames.append(np.clip(np.rint(noisy), 0, 255).astype(np.uint8))

    return frames, truth


def paths_intersect(truth, radius=12.0):
    """True if any two objects' center paths come within `radius` at some frame."""
    for per_frame in truth.objects:
        for i in range(len(per_frame)):
            for j in range(i + 1, len(per_frame)):
                a, b = per_frame[i].center, per_frame[j].center
                if math.hypot(a[0] - b[0], a[1] - b[1]) <= radius:
                    return True
    return False


def standard_suites():
    """Frozen scene registry: S1 single mover, S2 two movers, S3 mover plus
    static distractor, S4 crossing pair, S5 dense five with partial occlusion."""
    return {
        "S1": SceneSpec(n_objects=1, seed=101),
        "S2": SceneSpec(n_objects=2, seed=202),
        "S3": SceneSpec(n_objects=1, n_distractors=1, seed=307),
        "S4": SceneSpec(n_objects=2, crossing=True, seed=404, speed_range=(2.6, 3.0)),
        "S5": SceneSpec(n_objects=5, wiggle_amplitude=1.5, seed=505,
                        speed_range=(2.0, 3.5)),
    }


def write_truth_jsonl(truth, path):
    """One JSON line per frame, masks in the alternating-run RLE convention."""
    from .instances import rle_encode

    with open(path, "w") as f:
        for i, per_frame in enumerate(truth.objects):
            rec = {
                "frame": i,
                "size": [truth.height, truth.width],
                "objects": [
                    {
                        "id": ob.id,
                        "bbox": list(ob.bbox),
                        "area": ob.area,
                        "rle": rle_encode(ob.visible_mask),
                    }
                    for ob in per_frame if ob.area > 0
                ],
            }
            f.write(json.dumps(rec) + "\n")
