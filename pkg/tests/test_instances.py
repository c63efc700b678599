import math

import numpy as np
import pytest

from flowtrack.instances import (Instance, binarize_and_extract, connected_components,
                                 convex_hull, matrix_nms, min_area_rect, rle_decode,
                                 rle_encode)


def flood_fill_oracle(mask):
    """Independent 4-connected labeling by BFS."""
    h, w = mask.shape
    seen = np.zeros((h, w), dtype=bool)
    comps = []
    for y in range(h):
        for x in range(w):
            if mask[y, x] and not seen[y, x]:
                stack = [(y, x)]
                seen[y, x] = True
                pix = []
                while stack:
                    cy, cx = stack.pop()
                    pix.append((cy, cx))
                    for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
                comps.append(frozenset(pix))
    return comps


def inst_from_mask(mask, score):
    m = np.asarray(mask, dtype=np.uint8)
    ys, xs = np.nonzero(m)
    bbox = (int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
    return Instance(mask=m, bbox=bbox, score=score, area=int(m.sum()))


# ---------------------------------------------------------------------------
# RLE
# ---------------------------------------------------------------------------

def test_rle_round_trip_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        h, w = rng.integers(1, 20, 2)
        m = (rng.random((h, w)) > 0.5).astype(np.uint8)
        runs = rle_encode(m)
        assert sum(runs) == h * w
        assert np.array_equal(rle_decode(runs, (h, w)), m)


def test_rle_starts_with_background():
    m = np.ones((2, 2), dtype=np.uint8)
    assert rle_encode(m) == [0, 4]
    m[0, 0] = 0
    assert rle_encode(m) == [1, 3]


def test_rle_decode_validates_total():
    with pytest.raises(ValueError):
        rle_decode([3, 2], (2, 2))


# ---------------------------------------------------------------------------
# connected components
# ---------------------------------------------------------------------------

def test_components_empty_mask():
    assert connected_components(np.zeros((5, 5), dtype=np.uint8)) == []


def test_components_two_squares():
    m = np.zeros((12, 20), dtype=np.uint8)
    m[1:6, 1:6] = 1
    m[6:11, 10:15] = 1
    comps = connected_components(m)
    assert len(comps) == 2
    assert all(c.area == 25 for c in comps)
    assert comps[0].bbox == (1, 1, 5, 5)  # area tie: raster order


def test_components_diagonal_is_two_under_4conn():
    m = np.zeros((4, 4), dtype=np.uint8)
    m[1, 1] = 1
    m[2, 2] = 1
    assert len(connected_components(m)) == 2


def test_components_match_flood_fill_oracle():
    rng = np.random.default_rng(1)
    for _ in range(25):
        m = (rng.random((15, 17)) > 0.6).astype(np.uint8)
        comps = connected_components(m)
        oracle = flood_fill_oracle(m)
        got = {frozenset(zip(*np.nonzero(c.mask))) for c in comps}
        assert got == set(oracle)


def test_components_min_area_filter():
    m = np.zeros((10, 10), dtype=np.uint8)
    m[0:3, 0:3] = 1  # area 9
    m[8, 8] = 1  # area 1
    comps = connected_components(m, min_area=5)
    assert len(comps) == 1
    assert comps[0].area == 9


def test_components_order_decreasing_area():
    m = np.zeros((10, 30), dtype=np.uint8)
    m[0:2, 0:2] = 1   # 4
    m[0:4, 10:14] = 1  # 16
    m[0:3, 20:23] = 1  # 9
    areas = [c.area for c in connected_components(m)]
    assert areas == [16, 9, 4]


def test_components_partition_foreground():
    rng = np.random.default_rng(2)
    m = (rng.random((20, 20)) > 0.5).astype(np.uint8)
    comps = connected_components(m)
    union = np.zeros_like(m)
    for c in comps:
        assert not (union & c.mask).any()  # disjoint
        union |= c.mask
    assert np.array_equal(union, m)


# ---------------------------------------------------------------------------
# matrix NMS
# ---------------------------------------------------------------------------

def test_nms_single_instance_identity():
    m = np.zeros((8, 8), dtype=np.uint8)
    m[2:6, 2:6] = 1
    inst = inst_from_mask(m, 0.8)
    out = matrix_nms([inst], sigma=0.5, score_threshold=0.05)
    assert len(out) == 1
    assert out[0].score == pytest.approx(0.8)


def test_nms_identical_masks_decay_formula():
    m = np.zeros((8, 8), dtype=np.uint8)
    m[2:6, 2:6] = 1
    a = inst_from_mask(m, 0.9)
    b = inst_from_mask(m, 0.8)
    for sigma in (0.3, 0.5, 1.0):
        out = matrix_nms([a, b], sigma=sigma, score_threshold=0.0)
        assert out[0].score == pytest.approx(0.9)
        # iou = 1, no third-party suppression of the suppressor
        assert out[1].score == pytest.approx(0.8 * math.exp(-1.0 / sigma), rel=1e-12)


def test_nms_disjoint_masks_unchanged():
    a = np.zeros((8, 8), dtype=np.uint8)
    b = np.zeros((8, 8), dtype=np.uint8)
    a[0:3, 0:3] = 1
    b[5:8, 5:8] = 1
    out = matrix_nms([inst_from_mask(a, 0.9), inst_from_mask(b, 0.4)],
                     sigma=0.5, score_threshold=0.05)
    assert [o.score for o in out] == pytest.approx([0.9, 0.4])


def test_nms_never_increases_scores():
    rng = np.random.default_rng(3)
    for _ in range(20):
        insts = []
        for _ in range(rng.integers(1, 6)):
            m = np.zeros((12, 12), dtype=np.uint8)
            y, x = rng.integers(0, 6, 2)
            h, w = rng.integers(2, 6, 2)
            m[y:y + h, x:x + w] = 1
            insts.append(inst_from_mask(m, float(rng.random())))
        before = sorted((i.score for i in insts), reverse=True)
        out = matrix_nms(insts, sigma=0.5, score_threshold=0.0)
        after = sorted((o.score for o in out), reverse=True)
        assert len(out) == len(insts)
        for a, b in zip(after, before):
            assert a <= b + 1e-12


def greedy_nms_survivors(insts, iou_threshold=0.5):
    from flowtrack.instances import mask_iou_matrix

    order = sorted(range(len(insts)), key=lambda i: -insts[i].score)
    iou = mask_iou_matrix(insts)
    alive = []
    for i in order:
        if all(iou[i, j] <= iou_threshold for j in alive):
            alive.append(i)
    return {i for i in alive}


def test_nms_agrees_with_greedy_on_separated_cases():
    # clusters of near-duplicates (IoU > 0.9) that are mutually disjoint
    rng = np.random.default_rng(4)
    for _ in range(10):
        insts = []
        truth_survivors = set()
        next_idx = 0
        for ci, corner in enumerate([(0, 0), (0, 30), (30, 0), (30, 30)]):
            n_dup = int(rng.integers(1, 4))
            base_score = 0.9 - 0.05 * ci
            for d in range(n_dup):
                m = np.zeros((60, 60), dtype=np.uint8)
                y, x = corner
                m[y + 2:y + 22, x + 2:x + 22] = 1
                if d > 0:
                    m[y + 2, x + 2] = 0  # IoU vs base = 399/400 > 0.9
                insts.append(inst_from_mask(m, base_score - 0.02 * d))
                if d == 0:
                    truth_survivors.add(next_idx)
                next_idx += 1
        out = matrix_nms(insts, sigma=0.5, score_threshold=0.25)
        got_masks = {o.mask.tobytes() for o in out}
        greedy = greedy_nms_survivors(insts)
        assert greedy == truth_survivors
        want_masks = {insts[i].mask.tobytes() for i in greedy}
        assert got_masks == want_masks


# ---------------------------------------------------------------------------
# min-area rotated rectangle
# ---------------------------------------------------------------------------

def sweep_min_area_oracle(mask, step_deg=0.5):
    """Exhaustive angle sweep over foreground pixel centers (hull extremes)."""
    ys, xs = np.nonzero(mask)
    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    hull = np.asarray(convex_hull(pts), dtype=np.float64)
    best = None
    for ang in np.arange(0.0, 180.0, step_deg):
        t = math.radians(ang)
        ux, uy = math.cos(t), math.sin(t)
        pu = hull[:, 0] * ux + hull[:, 1] * uy
        pv = -hull[:, 0] * uy + hull[:, 1] * ux
        area = (pu.max() - pu.min()) * (pv.max() - pv.min())
        if best is None or area < best:
            best = area
    return best


def rasterize_rect(cx, cy, w, h, angle_deg, canvas=80):
    t = math.radians(angle_deg)
    ux, uy = math.cos(t), math.sin(t)
    yy, xx = np.mgrid[0:canvas, 0:canvas]
    lon = (xx - cx) * ux + (yy - cy) * uy
    lat = -(xx - cx) * uy + (yy - cy) * ux
    return ((np.abs(lon) <= w / 2) & (np.abs(lat) <= h / 2)).astype(np.uint8)


def test_rect_axis_aligned_extent_convention():
    m = np.zeros((20, 20), dtype=np.uint8)
    m[5:9, 3:13] = 1  # 10 px wide, 4 px tall
    rb = min_area_rect(m)
    assert rb.w == pytest.approx(9.0)
    assert rb.h == pytest.approx(3.0)
    assert rb.cx == pytest.approx(7.5)
    assert rb.cy == pytest.approx(6.5)
    assert rb.angle == pytest.approx(0.0, abs=1e-9)


def test_rect_single_pixel_degenerate():
    m = np.zeros((5, 5), dtype=np.uint8)
    m[2, 3] = 1
    rb = min_area_rect(m)
    assert (rb.cx, rb.cy, rb.w, rb.h, rb.angle) == (3.0, 2.0, 0.0, 0.0, 0.0)


def test_rect_collinear_pixels():
    m = np.zeros((6, 6), dtype=np.uint8)
    for i in range(5):
        m[i, i] = 1
    rb = min_area_rect(m)
    assert rb.h == pytest.approx(0.0)
    assert rb.w == pytest.approx(4 * math.sqrt(2))
    assert rb.angle == pytest.approx(45.0)


def test_rect_empty_mask_raises():
    with pytest.raises(ValueError):
        min_area_rect(np.zeros((4, 4), dtype=np.uint8))


def test_rect_rotated_matches_sweep_oracle():
    m = rasterize_rect(40, 40, 30, 12, 30.0)
    rb = min_area_rect(m)
    assert abs(rb.angle - 30.0) <= 3.0
    assert rb.w * rb.h <= 1.10 * sweep_min_area_oracle(m)


def test_rect_area_never_exceeds_bbox_area():
    rng = np.random.default_rng(5)
    for _ in range(30):
        m = np.zeros((30, 30), dtype=np.uint8)
        n = int(rng.integers(2, 40))
        ys = rng.integers(0, 30, n)
        xs = rng.integers(0, 30, n)
        m[ys, xs] = 1
        rb = min_area_rect(m)
        bx, by = xs.min(), ys.min()
        bw, bh = xs.max() - xs.min() + 1, ys.max() - ys.min() + 1
        assert rb.w * rb.h <= bw * bh + 1e-9


def test_rect_90_degree_equivariance():
    # rot90 permutes pixel centers exactly, so the rect rotates exactly
    m = rasterize_rect(40, 38, 28, 10, 20.0)
    rb = min_area_rect(m)
    rb90 = min_area_rect(np.rot90(m).copy())
    assert rb90.w == pytest.approx(rb.w, abs=1e-6)
    assert rb90.h == pytest.approx(rb.h, abs=1e-6)
    diff = (rb.angle - rb90.angle) % 180.0
    assert min(diff, 180.0 - diff) == pytest.approx(90.0, abs=1e-6)


def test_rect_corners_contain_all_pixels():
    m = rasterize_rect(40, 40, 26, 9, 73.0)
    rb = min_area_rect(m)
    t = math.radians(rb.angle)
    ux, uy = math.cos(t), math.sin(t)
    ys, xs = np.nonzero(m)
    lon = (xs - rb.cx) * ux + (ys - rb.cy) * uy
    lat = -(xs - rb.cx) * uy + (ys - rb.cy) * ux
    assert np.all(np.abs(lon) <= rb.w / 2 + 1e-6)
    assert np.all(np.abs(lat) <= rb.h / 2 + 1e-6)


# ---------------------------------------------------------------------------
# binarize_and_extract
# ---------------------------------------------------------------------------

def test_extract_below_threshold_empty():
    soft = np.full((10, 10), 0.4)
    assert binarize_and_extract(soft, min_area=1) == []


def test_extract_two_blobs():
    soft = np.zeros((20, 40))
    soft[2:10, 2:10] = 0.9
    soft[10:18, 25:35] = 0.9
    out = binarize_and_extract(soft, min_area=10)
    assert len(out) == 2
    for inst, rbox in out:
        assert inst.score >= 0.1
        assert rbox.w >= rbox.h


def test_extract_min_area_suppresses_speckle():
    soft = np.zeros((20, 20))
    soft[5:15, 5:15] = 0.9
    soft[0, 0] = 0.9
    out = binarize_and_extract(soft, min_area=25)
    assert len(out) == 1
    assert out[0][0].area == 100
