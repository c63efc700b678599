"""Iterative pseudo-label refinement: moving-average recurrence with CRF
sharpening and an F-beta image-level loss, run until the labels stabilize.

The recurrence per frame and round k is
    mva_k = (1 - alpha) * CRF(prediction) + alpha * mva_{k-1}
with a pluggable predictor; the default blends the (cached) stage-1 output
with the current moving average at equal weights.

The CRF is a two-label dense CRF solved by mean-field iteration with
Gaussian spatial and bilateral (position + color) pairwise kernels.
Messages are truncated to a square window and normalized per kernel, so a
message is the kernel-weighted average of neighbor probabilities; setting
both pairwise weights to zero makes the operation an exact identity.
"""

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .background import sep_correlate


@dataclass(frozen=True)
class CrfParams:
    spatial_sigma: float = 3.0
    bilateral_sigma_xy: float = 30.0
    bilateral_sigma_rgb: float = 13.0
    pairwise_weights: tuple = (3.0, 5.0)  # (spatial, bilateral)
    n_iterations: int = 5
    window_radius: int = 5

    def __post_init__(self):
        if self.spatial_sigma <= 0 or self.bilateral_sigma_xy <= 0 or self.bilateral_sigma_rgb <= 0:
            raise ValueError("CRF sigmas must be positive")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if self.window_radius < 1:
            raise ValueError("window_radius must be >= 1")

    def disabled(self):
        return replace(self, pairwise_weights=(0.0, 0.0))


CRF_DISABLED = CrfParams(pairwise_weights=(0.0, 0.0))

# label-noise floor for the unary potentials: hard 0/1 pseudo-labels clip to
# [0.05, 0.95], keeping unary log-odds (+-2.94) below the maximum pairwise
# message (w_sp + w_bi = 8 at the defaults) so coherent neighborhoods can
# overturn isolated wrong labels
_UNARY_CLIP = 0.05


def _as_image_3d(image):
    img = np.asarray(image)
    if img.ndim == 2:
        return np.ascontiguousarray(img[:, :, None], dtype=np.uint8)
    if img.ndim == 3 and img.shape[2] in (1, 3):
        return np.ascontiguousarray(img, dtype=np.uint8)
    raise ValueError(f"expected HxW or HxWx{{1,3}} image, got {img.shape}")


def dense_crf(image, unary, p):
    """Mean-field inference; unary and output are foreground probabilities.

    Runs up to p.n_iterations fixed-point updates, stopping early once the
    update changes no pixel by more than 1e-5 (the fixed point has been
    reached to numerical tolerance).
    """
    img = _as_image_3d(image)
    q = np.asarray(unary, dtype=np.float64)
    if img.shape[:2] != q.shape:
        raise ValueError(f"image {img.shape[:2]} vs unary {q.shape} dimension mismatch")
    w_sp, w_bi = p.pairwise_weights
    if w_sp == 0.0 and w_bi == 0.0:
        return q.copy()

    r = p.window_radius
    c = img.shape[2]
    # color-range LUT over squared L2 distance (integer-valued for uint8)
    d2 = np.arange(c * 255 * 255 + 1, dtype=np.float64)
    lut = np.exp(-d2 / (2.0 * p.bilateral_sigma_rgb ** 2)).astype(np.float32)
    n = 2 * r + 1
    off = np.arange(n, dtype=np.float64) - r
    spw2d = np.exp(-(off[:, None] ** 2 + off[None, :] ** 2) / (2.0 * p.bilateral_sigma_xy ** 2))
    spw = spw2d.ravel().astype(np.float32)

    # spatial kernel: separable truncated Gaussian, normalized, center removed
    ks = np.exp(-(off ** 2) / (2.0 * p.spatial_sigma ** 2))
    ks /= ks.sum()
    ks = ks.astype(np.float32)
    center_w = np.float32(ks[r] ** 2)

    pc = np.clip(q, _UNARY_CLIP, 1.0 - _UNARY_CLIP).astype(np.float32)
    psi_fg = -np.log(pc)
    psi_bg = -np.log(1.0 - pc)

    cur = q.astype(np.float32)
    for _ in range(p.n_iterations):
        msgs_fg = np.zeros_like(cur)
        msgs_bg = np.zeros_like(cur)
        if w_sp != 0.0:
            blur = sep_correlate(cur, ks, ks)
            avg_sp = (blur - center_w * cur) / (np.float32(1.0) - center_w)
            msgs_fg += np.float32(w_sp) * avg_sp
            msgs_bg += np.float32(w_sp) * (np.float32(1.0) - avg_sp)
        if w_bi != 0.0:
            s, z = kernels.bilateral_pass(img, cur, lut, spw, r)
            avg_bi = s / np.maximum(z, np.float32(1e-12))
            msgs_fg += np.float32(w_bi) * avg_bi
            msgs_bg += np.float32(w_bi) * (np.float32(1.0) - avg_bi)
        # Potts model: a label pays for the other label's mass around it
        e_fg = psi_fg + msgs_bg
        e_bg = psi_bg + msgs_fg
        new = np.float32(1.0) / (np.float32(1.0) + np.exp(e_fg - e_bg))
        done = np.max(np.abs(new - cur)) < 1e-5
        cur = new
        if done:
            break
    return cur.astype(np.float64)


@dataclass(frozen=True)
class MvaState:
    mva: np.ndarray  # float64 probabilities in [0, 1]
    k: int = 0
    alpha: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")


def mva_update(state, prediction, image, p):
    """One recurrence step: blend the CRF-sharpened prediction into the MVA."""
    pred = np.asarray(prediction, dtype=np.float64)
    if pred.shape != state.mva.shape:
        raise ValueError("prediction/state dimension mismatch")
    sharpened = dense_crf(image, pred, p)
    new = (1.0 - state.alpha) * sharpened + state.alpha * state.mva
    return MvaState(mva=new, k=state.k + 1, alpha=state.alpha)


@dataclass(frozen=True)
class FBetaScore:
    beta: float
    precision: float
    recall: float
    f: float
    loss: float
    tp: int
    fp: int
    fn: int


def f_beta(pred, target, beta=1.0):
    """Pixel-count F-beta. Empty-side conventions: P=1 when TP+FP=0,
    R=1 when TP+FN=0 (so two empty masks score a perfect 1)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError("pred/target dimension mismatch")
    pb = pred != 0
    tb = target != 0
    tp = int(np.count_nonzero(pb & tb))
    fp = int(np.count_nonzero(pb & ~tb))
    fn = int(np.count_nonzero(~pb & tb))
    precision = tp / (tp + fp) if tp + fp > 0 else 1.0
    recall = tp / (tp + fn) if tp + fn > 0 else 1.0
    denom = beta * beta * precision + recall
    f = (1.0 + beta * beta) * precision * recall / denom if denom > 0 else 0.0
    return FBetaScore(beta=beta, precision=precision, recall=recall, f=f, loss=1.0 - f,
                      tp=tp, fp=fp, fn=fn)


def binarize(soft, threshold=0.5):
    return (np.asarray(soft, dtype=np.float64) > threshold).astype(np.uint8)


def stage1_predictor(stage1_labels):
    """Default predictor: average the (fixed) stage-1 label with the current
    moving average. Stage-1 is deterministic, so it is computed once and
    reused every round."""
    fixed = [np.asarray(m, dtype=np.float64) for m in stage1_labels]

    def predict(idx, frame, current):
        return 0.5 * fixed[idx] + 0.5 * current

    return predict


def constant_predictor(soft):
    fixed = np.asarray(soft, dtype=np.float64)

    def predict(idx, frame, current):
        return fixed

    return predict


def refine_labels(frames, initial_labels, predictor, alpha=0.7, crf_params=None,
                  stability_eps=1e-3, max_rounds=10, beta=1.0, workers=None):
    """Run the refinement loop over a frame sequence.

    predictor(idx, frame, current_soft) -> soft prediction per frame.
    Stops when the mean per-pixel |delta MVA| over the dataset drops below
    stability_eps, or after max_rounds (with a warning). Returns
    (binary_masks, round_log) where round_log rows are dicts with keys
    round, mean_l_beta, mean_delta_mva.
    """
    if len(frames) != len(initial_labels):
        raise ValueError("frames and initial_labels must align")
    p = crf_params or CrfParams()
    states = [MvaState(mva=np.asarray(lab, dtype=np.float64), k=0, alpha=alpha)
              for lab in initial_labels]
    log = []
    workers = max(1, int(workers or 1))

    def step_one(i):
        pred = predictor(i, frames[i], states[i].mva)
        new = mva_update(states[i], pred, frames[i], p)
        delta = float(np.mean(np.abs(new.mva - states[i].mva)))
        loss = f_beta(binarize(pred), binarize(states[i].mva), beta).loss
        return i, new, delta, loss

    converged = False
    for rnd in range(1, max_rounds + 1):
        if workers > 1 and len(frames) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(step_one, range(len(frames))))
        else:
            results = [step_one(i) for i in range(len(frames))]
        deltas, losses = [], []
        for i, new, delta, loss in results:
            states[i] = new
            deltas.append(delta)
            losses.append(loss)
        log.append({
            "round": rnd,
            "mean_l_beta": float(np.mean(losses)),
            "mean_delta_mva": float(np.mean(deltas)),
        })
        if np.mean(deltas) < stability_eps:
            converged = True
            break
    if not converged and max_rounds > 0:
        warnings.warn(
            f"refinement did not reach stability eps={stability_eps} "
            f"within {max_rounds} rounds (last delta {log[-1]['mean_delta_mva']:.2e})",
            RuntimeWarning,
        )
    return [binarize(st.mva) for st in states], log
