"""Instance extraction: connected components, Matrix NMS, rotated boxes, RLE.

Instances carry full-frame masks (only their own component set), a tight
axis-aligned bbox in cell convention (x, y, w, h with w = max-min+1), and a
score. Rotated boxes use the pixel-center extent convention: an n-pixel run
has extent n-1, so a degenerate single-pixel mask is a zero-size box.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import kernels


# ---------------------------------------------------------------------------
# run-length encoding: row-major, alternating background/foreground run
# lengths, starting with background; runs sum to h*w
# ---------------------------------------------------------------------------

def rle_encode(mask):
    flat = np.asarray(mask, dtype=np.uint8).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(starts).tolist()
    if flat[0] == 1:  # leading background run of length 0
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs, shape):
    h, w = shape
    total = sum(runs)
    if total != h * w:
        raise ValueError(f"RLE runs sum to {total}, expected {h * w}")
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    val = 0
    for r in runs:
        if val:
            flat[pos:pos + r] = 1
        pos += r
        val ^= 1
    return flat.reshape(h, w)


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------

@dataclass
class Instance:
    mask: np.ndarray  # full-frame uint8 0/1, single component (or detection)
    bbox: tuple  # (x, y, w, h), cell convention
    score: float
    area: int


@dataclass(frozen=True)
class RotatedBox:
    cx: float
    cy: float
    w: float  # normalized so w >= h
    h: float
    angle: float  # degrees in [0, 180), direction of the w side

    def corners(self):
        a = math.radians(self.angle)
        ux, uy = math.cos(a), math.sin(a)
        vx, vy = -uy, ux
        hw, hh = self.w / 2.0, self.h / 2.0
        return [
            (self.cx + sx * hw * ux + sy * hh * vx, self.cy + sx * hw * uy + sy * hh * vy)
            for sx, sy in ((-1, -1), (1, -1), (1, 1), (-1, 1))
        ]


def mask_bbox(mask):
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return (0, 0, 0, 0)
    return (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))


def connected_components(mask, min_area=0, connectivity=4):
    """Split a mask into per-component Instances (score 1.0).

    Components below min_area are dropped; output is ordered by decreasing
    area, ties broken by raster order of the top-left pixel.
    """
    if connectivity != 4:
        raise ValueError("only 4-connectivity is supported")
    mask = np.asarray(mask, dtype=np.uint8)
    labels, n = kernels.label_components(mask)
    out = []
    for lab in range(1, n + 1):
        comp = (labels == lab).astype(np.uint8)
        area = int(comp.sum())
        if area < min_area:
            continue
        first = int(np.flatnonzero(comp.ravel())[0])
        out.append((area, first, Instance(mask=comp, bbox=mask_bbox(comp), score=1.0, area=area)))
    out.sort(key=lambda t: (-t[0], t[1]))
    return [inst for _, _, inst in out]


def mask_iou_matrix(instances):
    n = len(instances)
    if n == 0:
        return np.zeros((0, 0))
    flat = np.stack([inst.mask.ravel().astype(np.float64) for inst in instances])
    inter = flat @ flat.T
    areas = flat.sum(axis=1)
    union = areas[:, None] + areas[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def matrix_nms(instances, sigma=0.5, score_threshold=0.05):
    """Gaussian Matrix NMS (the one-shot parallel formulation).

    Each instance's score is decayed by
        min over higher-scored i of exp(-(iou_ij^2 - iou_max_i^2) / sigma)
    where iou_max_i is instance i's own largest IoU with anything scored
    above it. Instances whose decayed score drops below score_threshold are
    removed; survivors are returned sorted by decayed score.
    """
    if not instances:
        return []
    order = sorted(range(len(instances)), key=lambda i: (-instances[i].score, i))
    insts = [instances[i] for i in order]
    iou = mask_iou_matrix(insts)
    n = len(insts)
    scores = np.array([inst.score for inst in insts])
    upper = np.triu(iou, k=1)  # upper[i, j] = iou between i and lower-scored j
    # iou_cmax[i]: i's own largest overlap with anything scored above it
    iou_cmax = np.zeros(n)
    for j in range(1, n):
        iou_cmax[j] = upper[:j, j].max()
    # decay of j = min over suppressors i of the compensated Gaussian kernel
    decay = np.ones(n)
    for j in range(1, n):
        decay[j] = np.exp(-(upper[:j, j] ** 2 - iou_cmax[:j] ** 2) / sigma).min()
    new_scores = scores * decay
    survivors = [
        Instance(mask=inst.mask, bbox=inst.bbox, score=float(s), area=inst.area)
        for inst, s in zip(insts, new_scores)
        if s >= score_threshold
    ]
    survivors.sort(key=lambda inst: -inst.score)
    return survivors


# ---------------------------------------------------------------------------
# minimum-area rotated rectangle (convex hull + rotating calipers)
# ---------------------------------------------------------------------------

def convex_hull(points):
    """Monotone-chain convex hull; returns vertices in counter-clockwise order."""
    pts = sorted(set(map(tuple, points)))
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def min_area_rect(mask):
    """Smallest-area rotated rectangle enclosing all foreground pixel centers.

    The optimum has a side collinear with a hull edge, so only hull-edge
    directions are examined. Degenerate masks (single pixel, collinear
    pixels) give zero-extent boxes.
    """
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ValueError("min_area_rect of an empty mask")
    if len(xs) == 1:
        return RotatedBox(cx=float(xs[0]), cy=float(ys[0]), w=0.0, h=0.0, angle=0.0)
    hull = convex_hull(np.stack([xs, ys], axis=1))
    hp = np.asarray(hull, dtype=np.float64)
    if len(hull) <= 2:
        # collinear points: box along the segment
        d = hp[-1] - hp[0] if len(hull) == 2 else np.array([1.0, 0.0])
        length = float(np.hypot(*d))
        ang = math.degrees(math.atan2(d[1], d[0])) % 180.0
        c = hp.mean(axis=0)
        return RotatedBox(cx=float(c[0]), cy=float(c[1]), w=length, h=0.0, angle=ang)

    best = None
    n = len(hp)
    for i in range(n):
        e = hp[(i + 1) % n] - hp[i]
        norm = np.hypot(*e)
        if norm == 0:
            continue
        ux, uy = e / norm
        # project hull onto the edge frame
        pu = hp[:, 0] * ux + hp[:, 1] * uy
        pv = -hp[:, 0] * uy + hp[:, 1] * ux
        du = pu.max() - pu.min()
        dv = pv.max() - pv.min()
        area = du * dv
        if best is None or area < best[0] - 1e-12:
            cu = (pu.max() + pu.min()) / 2.0
            cv = (pv.max() + pv.min()) / 2.0
            cx = cu * ux - cv * uy
            cy = cu * uy + cv * ux
            best = (area, du, dv, cx, cy, math.atan2(uy, ux))
    _, du, dv, cx, cy, theta = best
    if du >= dv:
        w, h = du, dv
        ang = math.degrees(theta) % 180.0
    else:
        w, h = dv, du
        ang = math.degrees(theta + math.pi / 2.0) % 180.0
    return RotatedBox(cx=float(cx), cy=float(cy), w=float(w), h=float(h), angle=float(ang))


def binarize_and_extract(soft, score_th=0.1, bin_th=0.5, sigma=0.5, min_area=25):
    """Soft mask -> thresholded components -> Matrix NMS -> rotated boxes."""
    binary = (np.asarray(soft, dtype=np.float64) > bin_th).astype(np.uint8)
    comps = connected_components(binary, min_area=min_area)
    kept = matrix_nms(comps, sigma=sigma, score_threshold=score_th)
    return [(inst, min_area_rect(inst.mask)) for inst in kept]


# ---------------------------------------------------------------------------
# JSONL instance dump (one record per instance)
# ---------------------------------------------------------------------------

def instance_record(frame_idx, inst, rbox):
    return {
        "frame": int(frame_idx),
        "score": float(inst.score),
        "area": int(inst.area),
        "bbox": [int(v) for v in inst.bbox],
        "rbox": [float(rbox.cx), float(rbox.cy), float(rbox.w), float(rbox.h), float(rbox.angle)],
        "mask_rle": rle_encode(inst.mask),
    }


def dump_instances(path, records):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def load_instances(path):
    """Read an instance JSONL dump, grouped by frame index."""
    by_frame = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            by_frame.setdefault(int(rec["frame"]), []).append(rec)
    return by_frame
