"""Dense optical flow on mask-gated frames and flow-based label cleanup.

The estimator is a classical coarse-to-fine polynomial-expansion flow
(Farneback-style): each frame is locally approximated by a quadratic
polynomial via Gaussian-weighted least squares, and per-pixel displacement
is solved from the expansion coefficients, aggregated over a box window,
iterating with warping at each pyramid level. Deterministic, no trained
weights; sits behind dense_flow() so a learned estimator can be dropped in.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .background import foreground_mask, sep_correlate


@dataclass(frozen=True)
class FlowField:
    u: np.ndarray  # horizontal displacement, px/frame, float32
    v: np.ndarray  # vertical displacement

    @property
    def shape(self):
        return self.u.shape

    def magnitude(self):
        return np.sqrt(self.u.astype(np.float64) ** 2 + self.v.astype(np.float64) ** 2)

    def angle(self):
        """Motion direction in radians, [0, 2*pi); undefined (0) where magnitude is 0."""
        a = np.arctan2(self.v.astype(np.float64), self.u.astype(np.float64))
        return np.where(a < 0, a + 2 * np.pi, a)


@dataclass(frozen=True)
class GatedFramePair:
    x_hat_t: np.ndarray
    x_hat_t1: np.ndarray
    m_t: np.ndarray
    m_t1: np.ndarray

    def swapped(self):
        return GatedFramePair(self.x_hat_t1, self.x_hat_t, self.m_t1, self.m_t)


def gate_frames(x_t, x_t1, m_t, m_t1):
    """Zero out background: x_hat = x * m elementwise."""
    shapes = {x_t.shape, x_t1.shape, m_t.shape, m_t1.shape}
    if len(shapes) != 1:
        raise ValueError(f"dimension mismatch between frames/masks: {sorted(shapes)}")
    return GatedFramePair(
        x_hat_t=(x_t * m_t).astype(np.uint8),
        x_hat_t1=(x_t1 * m_t1).astype(np.uint8),
        m_t=m_t,
        m_t1=m_t1,
    )


# ---------------------------------------------------------------------------
# polynomial-expansion flow
# ---------------------------------------------------------------------------

def _poly_expand(img, n, sigma):
    """Quadratic expansion f ~ x'Ax + b'x + c per pixel.

    Returns (a11, a12, a22, b1, b2) where subscript 1 = x (columns) and
    2 = y (rows). Computed with separable Gaussian-weighted correlations
    and the precomputed inverse Gram matrix of the basis {1,x,y,x2,y2,xy}.
    """
    x = np.arange(n, dtype=np.float64) - n // 2
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()
    gx = g * x
    gxx = g * x * x

    s0 = g.sum()  # 1.0
    s2 = gxx.sum()
    s4 = (gxx * x * x).sum()

    # Gram matrix of the basis under the applicability weights
    G = np.zeros((6, 6))
    G[0, 0] = s0 * s0
    G[1, 1] = s2 * s0  # x*x
    G[2, 2] = s0 * s2  # y*y
    G[3, 3] = s4 * s0  # x2*x2
    G[4, 4] = s0 * s4
    G[5, 5] = s2 * s2  # xy*xy
    G[0, 3] = G[3, 0] = s2 * s0
    G[0, 4] = G[4, 0] = s0 * s2
    G[3, 4] = G[4, 3] = s2 * s2
    Ginv = np.linalg.inv(G)

    f = img.astype(np.float32)
    g32, gx32, gxx32 = (k.astype(np.float32) for k in (g, gx, gxx))
    # shared row passes, then the needed column passes
    row_g = ndimage.correlate1d(f, g32, axis=1, mode="nearest")
    row_gx = ndimage.correlate1d(f, gx32, axis=1, mode="nearest")
    row_gxx = ndimage.correlate1d(f, gxx32, axis=1, mode="nearest")
    col = lambda a, k: ndimage.correlate1d(a, k, axis=0, mode="nearest")
    v = np.stack([
        col(row_g, g32),     # 1
        col(row_gx, g32),    # x
        col(row_g, gx32),    # y
        col(row_gxx, g32),   # x^2
        col(row_g, gxx32),   # y^2
        col(row_gx, gx32),   # xy
    ])
    r = np.tensordot(Ginv.astype(np.float32), v, axes=([1], [0]))
    c_, bx, by, axx, ayy, axy = r
    return axx, 0.5 * axy, ayy, bx, by


def _resize_bilinear(a, shape):
    h, w = shape
    sh, sw = a.shape
    ys = (np.arange(h) + 0.5) * sh / h - 0.5
    xs = (np.arange(w) + 0.5) * sw / w - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, sh - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, sw - 1)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None].astype(np.float32)
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :].astype(np.float32)
    a00 = a[np.ix_(y0, x0)]
    a01 = a[np.ix_(y0, x1)]
    a10 = a[np.ix_(y1, x0)]
    a11 = a[np.ix_(y1, x1)]
    top = a00 * (1 - fx) + a01 * fx
    bot = a10 * (1 - fx) + a11 * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def _downsample2(img):
    k = np.array([1.0, 4.0, 6.0, 4.0, 1.0], dtype=np.float64) / 16.0
    sm = sep_correlate(img.astype(np.float32), k, k)
    return sm[::2, ::2]


def _warp_fields(fields, u, v, yy, xx):
    """Sample each field at (x + u, y + v) with clamped bilinear interpolation."""
    h, w = u.shape
    sx = np.clip(xx + u, 0.0, w - 1.0)
    sy = np.clip(yy + v, 0.0, h - 1.0)
    x0 = sx.astype(np.int64)
    y0 = sy.astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0).astype(np.float32)
    fy = (sy - y0).astype(np.float32)
    w00 = ((1 - fx) * (1 - fy)).ravel()
    w01 = (fx * (1 - fy)).ravel()
    w10 = ((1 - fx) * fy).ravel()
    w11 = (fx * fy).ravel()
    i00 = (y0 * w + x0).ravel()
    i01 = (y0 * w + x1).ravel()
    i10 = (y1 * w + x0).ravel()
    i11 = (y1 * w + x1).ravel()
    stacked = np.stack([a.ravel() for a in fields])  # (k, h*w)
    s = (stacked.take(i00, axis=1) * w00 + stacked.take(i01, axis=1) * w01
         + stacked.take(i10, axis=1) * w10 + stacked.take(i11, axis=1) * w11)
    return [s[k].reshape(h, w) for k in range(len(fields))]


def _box2(a, size):
    out = ndimage.uniform_filter1d(a, size, axis=1, mode="nearest")
    return ndimage.uniform_filter1d(out, size, axis=0, mode="nearest")


def _flow_one_level(f1, f2, u, v, win_size, n_iter, poly_n, poly_sigma, exp1=None, exp2=None):
    a11_1, a12_1, a22_1, b1_1, b2_1 = exp1 if exp1 is not None else _poly_expand(f1, poly_n, poly_sigma)
    a11_2, a12_2, a22_2, b1_2, b2_2 = exp2 if exp2 is not None else _poly_expand(f2, poly_n, poly_sigma)
    h, w = f1.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float32), np.arange(w, dtype=np.float32), indexing="ij")
    for _ in range(n_iter):
        wa11, wa12, wa22, wb1, wb2 = _warp_fields(
            (a11_2, a12_2, a22_2, b1_2, b2_2), u, v, yy, xx)
        m11 = 0.5 * (a11_1 + wa11)
        m12 = 0.5 * (a12_1 + wa12)
        m22 = 0.5 * (a22_1 + wa22)
        # db = -0.5*(b2(x+d) - b1(x)) + A d   (prior displacement folded in)
        db1 = -0.5 * (wb1 - b1_1) + m11 * u + m12 * v
        db2 = -0.5 * (wb2 - b2_1) + m12 * u + m22 * v
        # accumulate A'A and A'db over the box window
        g11 = _box2(m11 * m11 + m12 * m12, win_size)
        g12 = _box2(m12 * (m11 + m22), win_size)
        g22 = _box2(m22 * m22 + m12 * m12, win_size)
        h1 = _box2(m11 * db1 + m12 * db2, win_size)
        h2 = _box2(m12 * db1 + m22 * db2, win_size)
        det = g11 * g22 - g12 * g12
        safe = np.abs(det) > 1e-9
        inv = np.where(safe, 1.0 / np.where(safe, det, 1.0), 0.0)
        u = ((g22 * h1 - g12 * h2) * inv).astype(np.float32)
        v = ((g11 * h2 - g12 * h1) * inv).astype(np.float32)
    return u, v


class _ExpandedFrame:
    """Pyramid plus per-level polynomial expansion of one frame (reusable
    across the two frame pairs a frame participates in)."""

    def __init__(self, img, levels, poly_n, poly_sigma):
        self.pyr = [img.astype(np.float32)]
        for _ in range(levels - 1):
            if min(self.pyr[-1].shape) < 2 * poly_n:
                break
            self.pyr.append(_downsample2(self.pyr[-1]))
        self.exp = [_poly_expand(p, poly_n, poly_sigma) for p in self.pyr]


def _flow_from_expanded(e1, e2, win_size, iterations, poly_n, poly_sigma):
    n_levels = min(len(e1.pyr), len(e2.pyr))
    u = np.zeros(e1.pyr[n_levels - 1].shape, dtype=np.float32)
    v = np.zeros_like(u)
    for lv in range(n_levels - 1, -1, -1):
        if u.shape != e1.pyr[lv].shape:
            u = _resize_bilinear(u, e1.pyr[lv].shape) * 2.0
            v = _resize_bilinear(v, e1.pyr[lv].shape) * 2.0
        u, v = _flow_one_level(e1.pyr[lv], e2.pyr[lv], u, v, win_size, iterations,
                               poly_n, poly_sigma, exp1=e1.exp[lv], exp2=e2.exp[lv])
    return FlowField(u=u, v=v)


def dense_flow(pair, levels=3, win_size=15, iterations=3, poly_n=7, poly_sigma=1.5):
    """Dense displacement field from pair.x_hat_t to pair.x_hat_t1.

    Degenerate (flat or all-zero) inputs give the zero field.
    """
    if pair.x_hat_t.shape != pair.x_hat_t1.shape:
        raise ValueError("frame pair dimensions differ")
    e1 = _ExpandedFrame(pair.x_hat_t, levels, poly_n, poly_sigma)
    e2 = _ExpandedFrame(pair.x_hat_t1, levels, poly_n, poly_sigma)
    return _flow_from_expanded(e1, e2, win_size, iterations, poly_n, poly_sigma)


def flow_gate_mask(flow, m, mag_threshold):
    """Keep only mask pixels that actually move: m AND |flow| >= threshold."""
    if flow.u.shape != m.shape:
        raise ValueError(f"flow shape {flow.u.shape} != mask shape {m.shape}")
    if mag_threshold < 0:
        raise ValueError("mag_threshold must be >= 0")
    if mag_threshold == 0:
        return m.copy()
    return ((m != 0) & (flow.magnitude() >= mag_threshold)).astype(np.uint8)


def pseudo_label(x_t, x_t1, bg, p, mag_threshold=0.5, flow_opts=None):
    """Stage-1 pseudo-label for frame t+1.

    Composition: foreground masks for both frames -> mask-gated frames ->
    dense flow from t+1 back to t (so magnitudes are defined at the pixels
    of frame t+1) -> flow-gate the frame-t+1 mask.
    """
    m_t = foreground_mask(x_t, bg, p)
    m_t1 = foreground_mask(x_t1, bg, p)
    return pseudo_label_from_masks(x_t, x_t1, m_t, m_t1, mag_threshold, flow_opts)


def pseudo_label_from_masks(x_t, x_t1, m_t, m_t1, mag_threshold=0.5, flow_opts=None):
    pair = gate_frames(x_t, x_t1, m_t, m_t1)
    back = dense_flow(pair.swapped(), **(flow_opts or {}))
    return flow_gate_mask(back, m_t1, mag_threshold)


def flow_only_label(x_t, x_t1, mag_threshold=0.5, flow_opts=None):
    """Ablation label: flow magnitude on raw frames, no background gating."""
    full = np.ones_like(x_t, dtype=np.uint8)
    pair = GatedFramePair(x_t, x_t1, full, full)
    back = dense_flow(pair.swapped(), **(flow_opts or {}))
    return (back.magnitude() >= mag_threshold).astype(np.uint8)


DEFAULT_FLOW_OPTS = {"levels": 3, "win_size": 15, "iterations": 3, "poly_n": 7, "poly_sigma": 1.5}


def label_sequence(frames, bg, p, mag_threshold=0.5, bg_gate=True, flow_opts=None, workers=None):
    """Stage-1 pseudo-labels for a whole sequence.

    labels[t] for t >= 1 comes from the pair (t-1, t); labels[0] is empty
    (no earlier frame to estimate motion from). Polynomial expansions are
    reused across consecutive pairs; with workers > 1 the sequence is split
    into contiguous chunks (results are identical either way).
    """
    opts = dict(DEFAULT_FLOW_OPTS)
    opts.update(flow_opts or {})
    levels, poly_n, poly_sigma = opts["levels"], opts["poly_n"], opts["poly_sigma"]
    win_size, iterations = opts["win_size"], opts["iterations"]

    if bg_gate:
        masks = [foreground_mask(f, bg, p) for f in frames]
        gated = [(f * m).astype(np.uint8) for f, m in zip(frames, masks)]
    else:
        masks = None
        gated = list(frames)

    labels = [np.zeros(frames[0].shape, dtype=np.uint8) for _ in frames]

    def run_chunk(t_start, t_end):
        # labels for frames t_start..t_end-1, each from pair (t-1, t)
        prev = _ExpandedFrame(gated[t_start - 1], levels, poly_n, poly_sigma)
        for t in range(t_start, t_end):
            cur = _ExpandedFrame(gated[t], levels, poly_n, poly_sigma)
            back = _flow_from_expanded(cur, prev, win_size, iterations, poly_n, poly_sigma)
            if bg_gate:
                labels[t] = flow_gate_mask(back, masks[t], mag_threshold)
            else:
                labels[t] = (back.magnitude() >= mag_threshold).astype(np.uint8)
            prev = cur

    n = len(frames)
    if n < 2:
        return labels
    workers = max(1, int(workers or 1))
    if workers == 1 or n - 1 <= workers:
        run_chunk(1, n)
        return labels
    from concurrent.futures import ThreadPoolExecutor

    bounds = np.linspace(1, n, workers + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as ex:
        futs = [ex.submit(run_chunk, bounds[i], bounds[i + 1])
                for i in range(workers) if bounds[i] < bounds[i + 1]]
        for f in futs:
            f.result()
    return labels
