"""Overlay and flow-field rendering (PNG via Pillow).

Track overlays use a fixed 12-color palette keyed by track id so repeated
runs hash identically; trajectory tails fade with age.
"""

import numpy as np
from PIL import Image, ImageDraw

PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 190), (0, 128, 128), (170, 110, 40),
]


def id_color(track_id):
    return PALETTE[(int(track_id) - 1) % len(PALETTE)]


def to_rgb(frame):
    if frame.ndim == 2:
        return np.stack([frame] * 3, axis=2)
    return frame


def flow_to_rgb(flow, max_magnitude=None):
    """HSV-encode a flow field (hue = direction, value = magnitude)."""
    mag = flow.magnitude()
    ang = flow.angle()
    if max_magnitude is None:
        max_magnitude = max(float(mag.max()), 1e-9)
    h = ang / (2 * np.pi)  # [0,1)
    v = np.clip(mag / max_magnitude, 0.0, 1.0)
    s = np.ones_like(v)
    # vectorized HSV -> RGB
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return (np.stack([r, g, b], axis=2) * 255).astype(np.uint8)


def draw_tracks(frame, reported, trails=None, trail_len=20):
    """Render id-colored rotated boxes and fading trajectory tails.

    reported: list of (track_id, box, rbox); trails: {id: [(cx, cy), ...]}.
    Returns an RGB uint8 array.
    """
    img = Image.fromarray(to_rgb(frame))
    draw = ImageDraw.Draw(img)
    if trails:
        for tid, pts in trails.items():
            color = id_color(tid)
            pts = pts[-trail_len:]
            n = len(pts)
            for i in range(1, n):
                fade = (i + 1) / n
                c = tuple(int(ch * fade) for ch in color)
                draw.line([pts[i - 1], pts[i]], fill=c, width=1)
    for tid, box, rbox in reported:
        color = id_color(tid)
        if rbox is not None and (rbox.w > 0 or rbox.h > 0):
            corners = rbox.corners()
            draw.polygon(corners, outline=color)
        else:
            x, y, w, h = box
            draw.rectangle([x, y, x + w, y + h], outline=color)
        x, y, w, h = box
        draw.text((x, max(y - 10, 0)), str(tid), fill=color)
    return np.asarray(img)


def save_png(arr, path):
    Image.fromarray(arr).save(path, format="PNG")
