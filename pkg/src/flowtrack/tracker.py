"""SORT online tracking: constant-velocity Kalman filter, IoU-cost Hungarian
association, track lifecycle.

State per target is the 7-vector [h, v, s, r, dh, dv, ds]: box center
(h horizontal, v vertical), scale s = area, aspect ratio r = w/h (modeled
without a velocity term), and the velocities of h, v, s. Noise matrices
follow the original SORT reference structure: damped process noise on the
velocity block, inflated measurement noise on scale and aspect.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

# constant-velocity transition and measurement matrices
F = np.eye(7)
F[0, 4] = F[1, 5] = F[2, 6] = 1.0
H = np.zeros((4, 7))
H[0, 0] = H[1, 1] = H[2, 2] = H[3, 3] = 1.0


def make_q(scale=1.0):
    q = np.eye(7)
    q[4:, 4:] *= 0.01
    q[6, 6] *= 0.01
    return q * scale


def make_r(scale=1.0):
    r = np.eye(4)
    r[2:, 2:] *= 10.0
    return r * scale


def initial_p():
    p = np.eye(7) * 10.0
    p[4:, 4:] *= 1000.0  # velocities start unobserved
    return p


@dataclass
class KalmanState:
    x: np.ndarray  # (7,)
    P: np.ndarray  # (7, 7)


@dataclass(frozen=True)
class TrackerConfig:
    max_age: int = 3
    min_hits: int = 3
    iou_threshold: float = 0.3
    process_noise_scale: float = 1.0
    measurement_noise_scale: float = 1.0

    def __post_init__(self):
        if self.max_age < 1 or self.min_hits < 1:
            raise ValueError("max_age and min_hits must be >= 1")
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must be in [0, 1]")


def box_to_z(box):
    """(x, y, w, h) -> measurement [cx, cy, s=area, r=aspect]."""
    x, y, w, h = (float(v) for v in box)
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate detection box {box}")
    return np.array([x + w / 2.0, y + h / 2.0, w * h, w / h])


def x_to_box(x):
    """State mean -> (x, y, w, h)."""
    s = max(float(x[2]), 1e-9)
    r = max(float(x[3]), 1e-9)
    w = np.sqrt(s * r)
    h = s / w
    return (float(x[0]) - w / 2.0, float(x[1]) - h / 2.0, w, h)


def state_from_box(box):
    x = np.zeros(7)
    x[:4] = box_to_z(box)
    return KalmanState(x=x, P=initial_p())


def kalman_predict(state, q=None):
    """x' = F x, P' = F P F' + Q; scale clamped positive afterwards."""
    if q is None:
        q = make_q()
    x = state.x.copy()
    if x[2] + x[6] <= 0:  # do not let scale velocity push area negative
        x[6] = 0.0
    x = F @ x
    x[2] = max(x[2], 1.0)
    p = F @ state.P @ F.T + q
    p = 0.5 * (p + p.T)
    return KalmanState(x=x, P=p)


def kalman_update(state, box, r=None):
    """Textbook measurement update with z = [cx, cy, area, aspect]."""
    if r is None:
        r = make_r()
    z = box_to_z(box)
    y = z - H @ state.x
    s = H @ state.P @ H.T + r
    k = state.P @ H.T @ np.linalg.inv(s)
    x = state.x + k @ y
    x[2] = max(x[2], 1e-6)
    x[3] = max(x[3], 1e-6)
    ikh = np.eye(7) - k @ H
    # Joseph form keeps P symmetric positive semidefinite
    p = ikh @ state.P @ ikh.T + k @ r @ k.T
    p = 0.5 * (p + p.T)
    return KalmanState(x=x, P=p)


def iou(a, b):
    """IoU of two (x, y, w, h) boxes; 0 when the union is empty."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(boxes_a, boxes_b):
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix = np.maximum(
        0.0,
        np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2])
        - np.maximum(a[:, None, 0], b[None, :, 0]),
    )
    iy = np.maximum(
        0.0,
        np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3])
        - np.maximum(a[:, None, 1], b[None, :, 1]),
    )
    inter = ix * iy
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def hungarian(cost):
    """Minimum-cost one-to-one assignment; returns min(m, n) (row, col) pairs."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist()))


@dataclass
class Track:
    id: int
    state: KalmanState
    hits: int = 0  # current consecutive-match streak
    age: int = 0
    time_since_update: int = 0
    history: list = field(default_factory=list)  # (frame, cx, cy, w, h)
    last_rbox: object = None
    last_score: float = 1.0

    def box(self):
        return x_to_box(self.state.x)


class SortTracker:
    """Frame-by-frame SORT. Drive one instance per video, sequentially."""

    def __init__(self, config=None):
        self.config = config or TrackerConfig()
        self._q = make_q(self.config.process_noise_scale)
        self._r = make_r(self.config.measurement_noise_scale)
        self.tracks = []
        self.frame_count = 0
        self._next_id = 1

    def step(self, detections, frame_index):
        """Advance one frame.

        detections: list of (Instance, RotatedBox) from the instances
        module, or bare (x, y, w, h) boxes. Returns the reported tracks as
        (track_id, box, rbox) tuples.
        """
        self.frame_count += 1
        det_boxes, det_rboxes, det_scores = [], [], []
        for det in detections:
            if isinstance(det, tuple) and len(det) == 2:
                inst, rbox = det
                det_boxes.append(inst.bbox)
                det_rboxes.append(rbox)
                det_scores.append(inst.score)
            else:
                det_boxes.append(tuple(det))
                det_rboxes.append(None)
                det_scores.append(1.0)

        for trk in self.tracks:
            if trk.time_since_update > 0:
                trk.hits = 0  # consecutive-match streak broken
            trk.state = kalman_predict(trk.state, self._q)
            trk.age += 1
            trk.time_since_update += 1

        matches, unmatched_dets = self._associate(det_boxes)

        for d, t in matches:
            trk = self.tracks[t]
            trk.state = kalman_update(trk.state, det_boxes[d], self._r)
            trk.hits += 1
            trk.time_since_update = 0
            trk.last_rbox = det_rboxes[d]
            trk.last_score = det_scores[d]

        for d in unmatched_dets:
            trk = Track(id=self._next_id, state=state_from_box(det_boxes[d]))
            trk.hits = 1
            trk.last_rbox = det_rboxes[d]
            trk.last_score = det_scores[d]
            self.tracks.append(trk)
            self._next_id += 1

        self.tracks = [t for t in self.tracks if t.time_since_update <= self.config.max_age]

        reported = []
        for trk in self.tracks:
            if trk.time_since_update != 0:
                continue
            if trk.hits >= self.config.min_hits or self.frame_count <= self.config.min_hits:
                box = trk.box()
                trk.history.append((frame_index, box[0] + box[2] / 2.0, box[1] + box[3] / 2.0, box[2], box[3]))
                reported.append((trk.id, box, trk.last_rbox))
        return reported

    def _associate(self, det_boxes):
        if not self.tracks or not det_boxes:
            return [], list(range(len(det_boxes)))
        trk_boxes = [t.box() for t in self.tracks]
        ious = iou_matrix(det_boxes, trk_boxes)
        pairs = hungarian(1.0 - ious)
        matches = [(d, t) for d, t in pairs if ious[d, t] >= self.config.iou_threshold]
        matched_d = {d for d, _ in matches}
        unmatched = [d for d in range(len(det_boxes)) if d not in matched_d]
        return matches, unmatched


TRAJECTORY_HEADER = ["frame", "track_id", "cx", "cy", "w", "h", "angle", "score"]


def trajectory_row(frame_index, track_id, box, rbox, score):
    cx = box[0] + box[2] / 2.0
    cy = box[1] + box[3] / 2.0
    angle = rbox.angle if rbox is not None else 0.0
    return [frame_index, track_id, f"{cx:.3f}", f"{cy:.3f}", f"{box[2]:.3f}", f"{box[3]:.3f}",
            f"{angle:.2f}", f"{score:.4f}"]


def write_trajectories(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRAJECTORY_HEADER)
        w.writerows(rows)
