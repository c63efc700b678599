"""COCO-style single-category detection/segmentation evaluation.

AP is the 101-point interpolated precision-recall integral; the headline
number averages AP over the 10 IoU thresholds .50:.05:.95 (the tables'
"M" superscript denotes this 10-threshold mean, not a medium-area band).
AP50/AP75 fix the threshold. The "large" stratum keeps ground truth with
area > 96^2 pixels (area = mask pixel count); out-of-band ground truth is
ignored, and predictions matching ignored ground truth are dropped from
the precision-recall curve rather than counted as false positives.
At most 100 highest-scoring predictions per frame are evaluated.
"""

import json
from dataclasses import dataclass

import numpy as np

from .instances import rle_decode
from .tracker import iou as box_iou

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2).tolist())
LARGE_AREA = 96 * 96
MAX_DETECTIONS = 100


def mask_iou(a, b):
    """IoU of two binary masks; 1 if both empty, 0 if exactly one is empty."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask dimension mismatch {a.shape} vs {b.shape}")
    ab = a != 0
    bb = b != 0
    inter = int(np.count_nonzero(ab & bb))
    union = int(np.count_nonzero(ab | bb))
    if union == 0:
        return 1.0
    return inter / union


def match_detections(preds, gts, iou_fn, threshold, gt_ignore=None):
    """Greedy COCO matching for one frame.

    preds: list of (score, obj); gts: list of obj. Predictions are visited
    in descending score order (ties by input order) and each takes the
    highest-IoU still-unmatched ground truth with IoU >= threshold,
    preferring non-ignored ground truth.

    Returns (flags, n_unmatched_gt) where flags[i] is 'tp', 'fp', or
    'ignore' for the i-th prediction in the *input* order.
    """
    gt_ignore = gt_ignore or [False] * len(gts)
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][0], i))
    taken = [False] * len(gts)
    flags = ["fp"] * len(preds)
    for pi in order:
        _, pobj = preds[pi]
        best_j, best_iou, best_ignored = -1, threshold, True
        for j, gobj in enumerate(gts):
            if taken[j]:
                continue
            ov = iou_fn(pobj, gobj)
            if ov < threshold:
                continue
            # a regular GT beats any ignored GT; otherwise take the best IoU
            if best_j >= 0 and not best_ignored and gt_ignore[j]:
                continue
            if best_j >= 0 and (gt_ignore[j] == best_ignored) and ov <= best_iou:
                continue
            best_j, best_iou, best_ignored = j, ov, gt_ignore[j]
        if best_j >= 0:
            taken[best_j] = True
            flags[pi] = "ignore" if gt_ignore[best_j] else "tp"
    n_unmatched = sum(1 for j, t in enumerate(taken) if not t and not gt_ignore[j])
    return flags, n_unmatched


def average_precision(flags, scores, n_gt):
    """101-point interpolated AP from per-prediction TP flags and scores.

    flags: sequence of booleans (True = TP); returns None when n_gt == 0
    (undefined, excluded from averages).
    """
    if n_gt == 0:
        return None
    if len(flags) == 0:
        return 0.0
    order = sorted(range(len(flags)), key=lambda i: (-scores[i], i))
    tp = np.cumsum([1 if flags[i] else 0 for i in order])
    fp = np.cumsum([0 if flags[i] else 1 for i in order])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    # monotone-decreasing precision envelope, sampled at 101 recall points
    env = np.maximum.accumulate(precision[::-1])[::-1]
    out = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        idx = np.searchsorted(recall, r, side="left")
        out += env[idx] if idx < len(env) else 0.0
    return out / 101.0


@dataclass
class EvalReport:
    ap_mean: float | None
    ap50: float | None
    ap75: float | None
    ap_large: float | None
    ar_mean: float | None
    ar_large: float | None
    per_threshold: dict  # {'thresholds': [...], 'ap': [...], 'ar': [...], 'ap_large': [...], 'ar_large': [...]}
    n_frames: int
    n_gt: int

    def to_dict(self):
        return {
            "ap_mean": self.ap_mean, "ap50": self.ap50, "ap75": self.ap75,
            "ap_large": self.ap_large, "ar_mean": self.ar_mean, "ar_large": self.ar_large,
            "per_threshold": self.per_threshold,
            "n_frames": self.n_frames, "n_gt": self.n_gt,
        }


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate_frames(preds_by_frame, gts_by_frame, mode="mask"):
    """Evaluate in-memory detections.

    preds_by_frame: {frame: [(score, box, mask), ...]}
    gts_by_frame:   {frame: [(box, mask, area), ...]}  (mask may be None in box mode)
    """
    if mode not in ("box", "mask"):
        raise ValueError(f"mode must be 'box' or 'mask', got {mode!r}")
    extra = set(preds_by_frame) - set(gts_by_frame)
    if extra:
        raise ValueError(f"predictions reference frames missing from ground truth: {sorted(extra)[:5]}")

    if mode == "box":
        iou_fn = lambda p, g: box_iou(p[0], g[0])
        pred_area = lambda p: p[0][2] * p[0][3]
    else:
        iou_fn = lambda p, g: mask_iou(p[1], g[1])
        pred_area = lambda p: int(np.count_nonzero(p[1]))

    frames = sorted(gts_by_frame)
    # cap detections per frame by score
    capped = {}
    for fr in frames:
        ps = list(preds_by_frame.get(fr, []))
        ps.sort(key=lambda t: -t[0])
        capped[fr] = ps[:MAX_DETECTIONS]

    n_gt_total = sum(len(gts_by_frame[fr]) for fr in frames)
    ap_list, ar_list, apl_list, arl_list = [], [], [], []
    for th in IOU_THRESHOLDS:
        for stratum in ("all", "large"):
            all_flags, all_scores = [], []
            n_gt = 0
            n_matched = 0
            for fr in frames:
                gts = gts_by_frame[fr]
                if stratum == "large":
                    ignore = [g[2] <= LARGE_AREA for g in gts]
                else:
                    ignore = [False] * len(gts)
                preds = [(s, (box, mask)) for s, box, mask in capped[fr]]
                gt_objs = [(g[0], g[1]) for g in gts]
                flags, unmatched = match_detections(preds, gt_objs, iou_fn, th, ignore)
                kept_gt = sum(1 for ig in ignore if not ig)
                n_gt += kept_gt
                n_matched += kept_gt - unmatched
                for (s, pobj), fl in zip(preds, flags):
                    if fl == "ignore":
                        continue
                    if stratum == "large" and fl == "fp" and not (pred_area(pobj) > LARGE_AREA):
                        continue  # out-of-band unmatched prediction: not counted
                    all_flags.append(fl == "tp")
                    all_scores.append(s)
            ap = average_precision(all_flags, all_scores, n_gt)
            ar = (n_matched / n_gt) if n_gt > 0 else None
            if stratum == "all":
                ap_list.append(ap)
                ar_list.append(ar)
            else:
                apl_list.append(ap)
                arl_list.append(ar)

    idx50 = IOU_THRESHOLDS.index(0.50)
    idx75 = IOU_THRESHOLDS.index(0.75)
    return EvalReport(
        ap_mean=_mean_or_none(ap_list),
        ap50=ap_list[idx50],
        ap75=ap_list[idx75],
        ap_large=_mean_or_none(apl_list),
        ar_mean=_mean_or_none(ar_list),
        ar_large=_mean_or_none(arl_list),
        per_threshold={
            "thresholds": list(IOU_THRESHOLDS),
            "ap": ap_list, "ar": ar_list,
            "ap_large": apl_list, "ar_large": arl_list,
        },
        n_frames=len(frames),
        n_gt=n_gt_total,
    )


# ---------------------------------------------------------------------------
# file-based entry points
# ---------------------------------------------------------------------------

def read_gt_jsonl(path):
    """Ground-truth JSONL: one record per frame with RLE-encoded objects."""
    gts = {}
    sizes = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            fr = int(rec["frame"])
            h, w = rec["size"]
            sizes[fr] = (h, w)
            objs = []
            for ob in rec.get("objects", []):
                mask = rle_decode(ob["rle"], (h, w))
                area = int(ob.get("area", int(mask.sum())))
                objs.append((tuple(ob["bbox"]), mask, area))
            gts[fr] = objs
    return gts, sizes


def read_pred_jsonl(path, sizes):
    """Prediction JSONL: one record per instance (see instances module)."""
    preds = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            fr = int(rec["frame"])
            if fr not in sizes:
                raise ValueError(f"prediction for frame {fr} absent from ground truth")
            mask = rle_decode(rec["mask_rle"], sizes[fr]) if "mask_rle" in rec else None
            preds.setdefault(fr, []).append((float(rec["score"]), tuple(rec["bbox"]), mask))
    return preds


def evaluate(pred_path, gt_path, mode="mask"):
    gts, sizes = read_gt_jsonl(gt_path)
    preds = read_pred_jsonl(pred_path, sizes)
    return evaluate_frames(preds, gts, mode=mode)


def write_report(report, path):
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=2)
        f.write("\n")


def convert_coco(coco_path, out_path):
    """Convert a COCO instance-annotation JSON to the GT JSONL format.

    Frames are numbered by lexicographic file_name order. Polygon
    segmentations are rasterized; uncompressed RLE (column-major counts)
    is decoded; compressed RLE strings are not supported.
    """
    from PIL import Image, ImageDraw

    with open(coco_path) as f:
        coco = json.load(f)
    images = sorted(coco["images"], key=lambda im: im["file_name"])
    frame_of = {im["id"]: i for i, im in enumerate(images)}
    size_of = {im["id"]: (im["height"], im["width"]) for im in images}
    anns_by_img = {}
    for ann in coco.get("annotations", []):
        anns_by_img.setdefault(ann["image_id"], []).append(ann)

    from .instances import rle_encode

    with open(out_path, "w") as f:
        for im in images:
            h, w = size_of[im["id"]]
            objs = []
            for ann in anns_by_img.get(im["id"], []):
                seg = ann.get("segmentation")
                if isinstance(seg, list):  # polygons
                    canvas = Image.new("L", (w, h), 0)
                    draw = ImageDraw.Draw(canvas)
                    for poly in seg:
                        draw.polygon([tuple(poly[i:i + 2]) for i in range(0, len(poly), 2)], fill=1)
                    mask = np.asarray(canvas, dtype=np.uint8)
                elif isinstance(seg, dict) and isinstance(seg.get("counts"), list):
                    # COCO uncompressed RLE is column-major, starting with 0s
                    flat = np.zeros(h * w, dtype=np.uint8)
                    pos, val = 0, 0
                    for run in seg["counts"]:
                        if val:
                            flat[pos:pos + run] = 1
                        pos += run
                        val ^= 1
                    mask = flat.reshape(w, h).T
                else:
                    raise ValueError("unsupported segmentation format (compressed RLE?)")
                x, y, bw, bh = ann["bbox"]
                objs.append({
                    "id": int(ann["id"]),
                    "bbox": [int(round(x)), int(round(y)), int(round(bw)), int(round(bh))],
                    "area": int(ann.get("area", int(mask.sum()))),
                    "rle": rle_encode(mask),
                })
            f.write(json.dumps({"frame": frame_of[im["id"]], "size": [h, w], "objects": objs}) + "\n")
