"""Frame and mask I/O: NetPBM (PGM/PPM) read/write, PNG read, sequence loading.

Binary PGM (P5) is the canonical interchange format: zero-dependency,
bit-exact round trips. PNG is accepted on input only (via Pillow).
Masks go to disk as P5 with foreground 255, background 0.
"""

import re
from pathlib import Path

import numpy as np

# ITU-R BT.601 luma weights
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class FrameIOError(Exception):
    """Raised for unreadable, corrupt, or inconsistent image files."""


def validate_frame(frame):
    if frame.ndim == 2:
        pass
    elif frame.ndim == 3 and frame.shape[2] in (1, 3):
        pass
    else:
        raise ValueError(f"expected HxW or HxWx{{1,3}} array, got shape {frame.shape}")
    if frame.dtype != np.uint8:
        raise ValueError(f"expected uint8 data, got {frame.dtype}")
    if frame.shape[0] < 1 or frame.shape[1] < 1:
        raise ValueError(f"degenerate frame shape {frame.shape}")


def validate_mask(mask):
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    bad = (mask != 0) & (mask != 1)
    if bad.any():
        raise ValueError("mask contains values other than 0 and 1")


def to_gray(frame):
    """Convert an RGB frame to single-channel gray (BT.601, round half-up).

    Single-channel input is returned unchanged (identity), so the
    operation is idempotent.
    """
    validate_frame(frame)
    if frame.ndim == 2:
        return frame
    if frame.shape[2] == 1:
        return frame[:, :, 0]
    w = np.asarray(LUMA_WEIGHTS)
    y = frame.astype(np.float64) @ w
    # round half-up, then clamp to the 8-bit range
    return np.clip(np.floor(y + 0.5), 0, 255).astype(np.uint8)


def _read_pnm(path):
    data = Path(path).read_bytes()
    m = re.match(rb"(P[56])\s(?:#[^\n]*\n|\s)*(\d+)\s(?:#[^\n]*\n|\s)*(\d+)\s(?:#[^\n]*\n|\s)*(\d+)\s", data)
    if not m:
        raise FrameIOError(f"{path}: not a binary PGM/PPM file")
    magic, width, height, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise FrameIOError(f"{path}: unsupported maxval {maxval} (only 8-bit supported)")
    channels = 1 if magic == b"P5" else 3
    raster = data[m.end():]
    need = width * height * channels
    if len(raster) < need:
        raise FrameIOError(f"{path}: truncated raster ({len(raster)} < {need} bytes)")
    arr = np.frombuffer(raster[:need], dtype=np.uint8)
    if channels == 1:
        return arr.reshape(height, width).copy()
    return arr.reshape(height, width, 3).copy()


def read_image(path):
    """Read a PGM/PPM/PNG image as a uint8 array (HxW or HxWx3)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm"):
        return _read_pnm(path)
    if suffix == ".png":
        from PIL import Image

        try:
            with Image.open(path) as im:
                if im.mode not in ("L", "RGB"):
                    im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
                return np.asarray(im, dtype=np.uint8)
        except Exception as e:
            raise FrameIOError(f"{path}: {e}") from e
    raise FrameIOError(f"{path}: unsupported image format {suffix!r}")


def write_pgm(img, path):
    """Write a single-channel uint8 image as binary PGM (P5)."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError(f"PGM requires a 2-D array, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def write_ppm(img, path):
    """Write an HxWx3 uint8 image as binary PPM (P6)."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM requires an HxWx3 array, got shape {img.shape}")
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def write_image(img, path):
    """Dispatch to PGM or PPM based on channel count."""
    if img.ndim == 2:
        write_pgm(img, path)
    else:
        write_ppm(img, path)


def write_mask(mask, path):
    """Write a 0/1 mask as binary PGM with foreground 255."""
    validate_mask(np.asarray(mask))
    write_pgm(np.asarray(mask, dtype=np.uint8) * 255, path)


def read_mask(path):
    """Read a mask PGM written by write_mask; values must be exactly {0, 255}."""
    img = _read_pnm(path)
    if img.ndim != 2:
        raise FrameIOError(f"{path}: mask file must be single-channel")
    bad = (img != 0) & (img != 255)
    if bad.any():
        vals = sorted(np.unique(img[bad]).tolist())
        raise FrameIOError(f"{path}: mask contains non-binary values {vals[:8]}")
    return (img == 255).astype(np.uint8)


def load_sequence(dir_path, pattern="*"):
    """Load all frames matching ``pattern`` in ``dir_path``.

    Files are ordered lexicographically by name; order defines the frame
    index (0-based). All frames must share dimensions.
    """
    d = Path(dir_path)
    if not d.is_dir():
        raise FrameIOError(f"no such directory: {d}")
    names = sorted(p for p in d.glob(pattern) if p.suffix.lower() in (".pgm", ".ppm", ".png"))
    if not names:
        raise FrameIOError(f"no frames matched {pattern!r} in {d}")
    frames = []
    shape0 = None
    for p in names:
        img = read_image(p)
        if shape0 is None:
            shape0 = img.shape[:2]
        elif img.shape[:2] != shape0:
            raise FrameIOError(
                f"{p.name}: dimensions {img.shape[1]}x{img.shape[0]} do not match "
                f"first frame {shape0[1]}x{shape0[0]}"
            )
        frames.append(img)
    return frames
