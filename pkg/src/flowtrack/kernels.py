"""Hot per-pixel kernels with numba-JIT and pure-numpy implementations.

The JIT path is used by default. Set the environment variable
``FLOWTRACK_NO_NUMBA=1`` (before import) to force the numpy fallback,
e.g. for debugging or on platforms where numba is unavailable.
``benchmarks/bench_kernels.py`` times both paths.

Both paths compute the same quantities; floating-point summation order
differs, so agreement is to ~1e-10, not bit-exact.
"""

import os

import numpy as np

_DISABLED = os.environ.get("FLOWTRACK_NO_NUMBA", "0") not in ("0", "", "false")

if not _DISABLED:
    try:
        from numba import njit

        HAVE_NUMBA = True
    except ImportError:
        HAVE_NUMBA = False
else:
    HAVE_NUMBA = False

USING_NUMBA = HAVE_NUMBA


# ---------------------------------------------------------------------------
# bilateral message pass (dense-CRF inner loop)
#
# For every pixel p, over a (2r+1)^2 window excluding p itself:
#   S[p] = sum_q w(p,q) * q_prob[q]        Z[p] = sum_q w(p,q)
# with w(p,q) = spatial_w[offset] * lut[ ||I(p)-I(q)||^2 ].
# lut carries the color-range Gaussian so no exp() in the loop.
# ---------------------------------------------------------------------------

def _bilateral_pass_numpy(img, q_prob, lut, spatial_w, radius):
    h, w, c = img.shape
    ii = img.astype(np.int32)
    s_out = np.zeros((h, w), dtype=q_prob.dtype)
    z_out = np.zeros((h, w), dtype=q_prob.dtype)
    n = 2 * radius + 1
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            y0, y1 = max(0, -dy), min(h, h - dy)
            x0, x1 = max(0, -dx), min(w, w - dx)
            a = ii[y0:y1, x0:x1]
            b = ii[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
            d2 = ((a - b) ** 2).sum(axis=2)
            wgt = spatial_w[(dy + radius) * n + dx + radius] * lut[d2]
            s_out[y0:y1, x0:x1] += wgt * q_prob[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
            z_out[y0:y1, x0:x1] += wgt
    return s_out, z_out


if HAVE_NUMBA:

    # kernels are single-threaded but release the GIL: callers parallelize
    # over frames with an ordinary thread pool
    @njit(cache=True, nogil=True)
    def _bilateral_pass_numba(img, q_prob, lut, spatial_w, radius):  # pragma: no cover - jit
        h, w, c = img.shape
        s_out = np.zeros((h, w), dtype=q_prob.dtype)
        z_out = np.zeros((h, w), dtype=q_prob.dtype)
        n = 2 * radius + 1
        center_w = spatial_w[radius * n + radius] * lut[0]
        if c == 1:
            im = img[:, :, 0]
            for y in range(h):
                ylo = y - radius if y >= radius else 0
                yhi = y + radius if y + radius < h else h - 1
                for x in range(w):
                    xlo = x - radius if x >= radius else 0
                    xhi = x + radius if x + radius < w else w - 1
                    ip = np.int32(im[y, x])
                    # include the center pair, subtract it afterwards
                    s = -center_w * q_prob[y, x]
                    z = -center_w
                    for yy in range(ylo, yhi + 1):
                        base = (yy - y + radius) * n - x + radius
                        for xx in range(xlo, xhi + 1):
                            d = ip - np.int32(im[yy, xx])
                            wgt = spatial_w[base + xx] * lut[d * d]
                            s += wgt * q_prob[yy, xx]
                            z += wgt
                    s_out[y, x] = s
                    z_out[y, x] = z
        else:
            for y in range(h):
                ylo = y - radius if y >= radius else 0
                yhi = y + radius if y + radius < h else h - 1
                for x in range(w):
                    xlo = x - radius if x >= radius else 0
                    xhi = x + radius if x + radius < w else w - 1
                    s = -center_w * q_prob[y, x]
                    z = -center_w
                    for yy in range(ylo, yhi + 1):
                        base = (yy - y + radius) * n - x + radius
                        for xx in range(xlo, xhi + 1):
                            d2 = 0
                            for ch in range(c):
                                d = np.int32(img[y, x, ch]) - np.int32(img[yy, xx, ch])
                                d2 += d * d
                            wgt = spatial_w[base + xx] * lut[d2]
                            s += wgt * q_prob[yy, xx]
                            z += wgt
                    s_out[y, x] = s
                    z_out[y, x] = z
        return s_out, z_out

    bilateral_pass = _bilateral_pass_numba
else:
    bilateral_pass = _bilateral_pass_numpy


# ---------------------------------------------------------------------------
# 4-connected component labeling
#
# Returns (labels, n) where labels is int32, 0 = background, components
# numbered 1..n in first-encounter (raster) order.
# ---------------------------------------------------------------------------

def _label_components_numpy(mask):
    h, w = mask.shape
    fg = mask != 0
    labels = np.where(fg, np.arange(1, h * w + 1, dtype=np.int64).reshape(h, w), 0)
    # iterative min-propagation to the 4-neighborhood fixpoint
    while True:
        prev = labels.copy()
        shifted = labels.copy()
        shifted[1:, :] = np.minimum(shifted[1:, :], np.where(labels[:-1, :] > 0, labels[:-1, :], shifted[1:, :]))
        shifted[:-1, :] = np.minimum(shifted[:-1, :], np.where(labels[1:, :] > 0, labels[1:, :], shifted[:-1, :]))
        shifted[:, 1:] = np.minimum(shifted[:, 1:], np.where(labels[:, :-1] > 0, labels[:, :-1], shifted[:, 1:]))
        shifted[:, :-1] = np.minimum(shifted[:, :-1], np.where(labels[:, 1:] > 0, labels[:, 1:], shifted[:, :-1]))
        labels = np.where(fg, shifted, 0)
        if np.array_equal(labels, prev):
            break
    # compact to 1..n in raster order of first occurrence
    out = np.zeros((h, w), dtype=np.int32)
    remap = {}
    flat = labels.ravel()
    dest = out.ravel()
    for i in np.flatnonzero(flat):
        lab = flat[i]
        if lab not in remap:
            remap[lab] = len(remap) + 1
        dest[i] = remap[lab]
    return out, len(remap)


if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _ccl_numba(mask):  # pragma: no cover - jit
        h, w = mask.shape
        labels = np.zeros((h, w), dtype=np.int32)
        parent = np.arange(h * w + 1, dtype=np.int32)
        nxt = 1
        # first pass: provisional labels + union with left/up neighbors
        for y in range(h):
            for x in range(w):
                if mask[y, x] == 0:
                    continue
                up = labels[y - 1, x] if y > 0 else 0
                left = labels[y, x - 1] if x > 0 else 0
                if up == 0 and left == 0:
                    labels[y, x] = nxt
                    nxt += 1
                elif up == 0:
                    labels[y, x] = left
                elif left == 0:
                    labels[y, x] = up
                else:
                    labels[y, x] = up if up < left else left
                    # union(up, left)
                    a, b = up, left
                    while parent[a] != a:
                        a = parent[a]
                    while parent[b] != b:
                        b = parent[b]
                    if a != b:
                        if a < b:
                            parent[b] = a
                        else:
                            parent[a] = b
        # second pass: resolve + renumber in raster order
        remap = np.zeros(nxt, dtype=np.int32)
        count = 0
        for y in range(h):
            for x in range(w):
                lab = labels[y, x]
                if lab == 0:
                    continue
                root = lab
                while parent[root] != root:
                    root = parent[root]
                if remap[root] == 0:
                    count += 1
                    remap[root] = count
                labels[y, x] = remap[root]
        return labels, count

    label_components = _ccl_numba
else:
    label_components = _label_components_numpy


def warmup():
    """Trigger JIT compilation on tiny inputs (no-op on the numpy path)."""
    img = np.zeros((4, 4, 1), dtype=np.uint8)
    lut = np.ones(255 * 255 + 1, dtype=np.float32)
    spw = np.ones(9, dtype=np.float32)
    bilateral_pass(img, np.zeros((4, 4), dtype=np.float32), lut, spw, 1)
    label_components(np.eye(4, dtype=np.uint8))
