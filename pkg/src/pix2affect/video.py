"""Frame ingestion and preprocessing: PGM/PPM decoding, Rec. 601 grayscale,
corner-aligned bilinear resize to 72x128, and non-overlapping 8-frame
segmentation. Video containers are out of scope; frames arrive as image
sequences (one directory per video, lexicographic order).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .tensors import FLOAT

FRAME_HEIGHT = 72
FRAME_WIDTH = 128
SEGMENT_FRAMES = 8
FRAME_RATE = 30.0

# Rec. 601 luma coefficients.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


# ---------------------------------------------------------------------------
# Binary PGM (P5) / PPM (P6), 8-bit
# ---------------------------------------------------------------------------

def _read_pnm_header(data: bytes, path: str):
    """Parse magic, width, height, maxval; returns (magic, w, h, maxval, offset).

    Comments (# to end of line) and arbitrary whitespace are allowed between
    header tokens, per the netpbm format.
    """
    if data[:2] not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported magic {data[:2]!r} (want P5 or P6)")
    magic = data[:2].decode()
    pos, tokens = 2, []
    while len(tokens) < 3:
        if pos >= len(data):
            raise DataError(f"{path}: truncated header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            tokens.append(data[start:pos])
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise DataError(f"{path}: malformed header")
    pos += 1  # single whitespace byte before the raster
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DataError(f"{path}: non-numeric header field") from None
    if w < 1 or h < 1:
        raise DataError(f"{path}: bad dimensions {w}x{h}")
    if not 0 < maxval < 256:
        raise DataError(f"{path}: only 8-bit images supported (maxval {maxval})")
    return magic, w, h, maxval, pos


def read_pnm(path: str) -> np.ndarray:
    """Decode binary PGM/PPM to uint8 [H,W] (P5) or [H,W,3] (P6)."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic, w, h, maxval, pos = _read_pnm_header(data, path)
    channels = 1 if magic == "P5" else 3
    count = w * h * channels
    raster = data[pos:pos + count]
    if len(raster) < count:
        raise DataError(f"{path}: truncated payload ({len(raster)} of {count} bytes)")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(
        (h, w) if channels == 1 else (h, w, 3))
    return img.copy()


def write_pgm(path: str, img: np.ndarray) -> None:
    """Write uint8 [H,W] as binary PGM (P5, maxval 255)."""
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ShapeError(f"write_pgm expects uint8 [H,W], got {img.dtype} {img.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def load_frames(directory: str) -> np.ndarray:
    """Decode all .pgm/.ppm files in a directory, lexicographically ordered.

    Returns uint8 [T,H,W] (grayscale) or [T,H,W,3] (color). Mixed
    dimensions or mixed color/grayscale raise an error naming the file.
    """
    names = sorted(n for n in os.listdir(directory)
                   if n.lower().endswith((".pgm", ".ppm")))
    if not names:
        raise DataError(f"{directory}: no .pgm/.ppm frames found")
    frames = []
    for name in names:
        img = read_pnm(os.path.join(directory, name))
        if frames and img.shape != frames[0].shape:
            raise DataError(
                f"{os.path.join(directory, name)}: dimensions {img.shape} differ "
                f"from first frame {frames[0].shape}")
        frames.append(img)
    return np.stack(frames)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def to_grayscale(frame: np.ndarray) -> np.ndarray:
    """8-bit frame to float32 luma in [0,1].

    Color input uses Rec. 601: y = (0.299 R + 0.587 G + 0.114 B) / 255.
    """
    frame = np.asarray(frame)
    if frame.ndim == 2:
        return (frame.astype(np.float64) / 255.0).astype(FLOAT)
    if frame.ndim == 3 and frame.shape[2] == 3:
        y = frame.astype(np.float64) @ _LUMA / 255.0
        return np.clip(y, 0.0, 1.0).astype(FLOAT)
    raise ShapeError(f"expected [H,W] or [H,W,3] frame, got {frame.shape}")


def resize_bilinear(frame: np.ndarray, out_h: int = FRAME_HEIGHT,
                    out_w: int = FRAME_WIDTH) -> np.ndarray:
    """Bilinear resample on a corner-aligned grid.

    Output pixel (i, j) samples the input at (i*(H-1)/(out_h-1),
    j*(W-1)/(out_w-1)), so corners map to corners and constant images stay
    constant. Same-size input is returned unchanged (exact identity).
    """
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise ShapeError(f"expected [H,W] frame, got {frame.shape}")
    h, w = frame.shape
    if h < 2 or w < 2 or out_h < 2 or out_w < 2:
        raise ShapeError(f"resize needs at least 2x2, got {h}x{w} -> {out_h}x{out_w}")
    if (h, w) == (out_h, out_w):
        return frame.astype(FLOAT, copy=True)
    src = frame.astype(np.float64)
    ys = np.arange(out_h) * ((h - 1) / (out_h - 1))
    xs = np.arange(out_w) * ((w - 1) / (out_w - 1))
    y0 = np.minimum(ys.astype(np.int64), h - 2)
    x0 = np.minimum(xs.astype(np.int64), w - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    tl = src[np.ix_(y0, x0)]
    tr = src[np.ix_(y0, x0 + 1)]
    bl = src[np.ix_(y0 + 1, x0)]
    br = src[np.ix_(y0 + 1, x0 + 1)]
    out = (tl * (1 - fy) * (1 - fx) + tr * (1 - fy) * fx
           + bl * fy * (1 - fx) + br * fy * fx)
    return out.astype(FLOAT)


# ---------------------------------------------------------------------------
# Clips and segments
# ---------------------------------------------------------------------------

@dataclass
class Clip:
    """One video's grayscale frame stack at 72x128, values in [0,1]."""

    video_id: str
    frames: np.ndarray
    frame_rate: float = FRAME_RATE

    def __post_init__(self):
        if self.frames.ndim != 3 or self.frames.shape[1:] != (FRAME_HEIGHT, FRAME_WIDTH):
            raise ShapeError(f"clip frames must be [T,{FRAME_HEIGHT},{FRAME_WIDTH}], "
                             f"got {self.frames.shape}")
        if self.frames.shape[0] < SEGMENT_FRAMES:
            raise DataError(f"clip {self.video_id!r} has {self.frames.shape[0]} frames, "
                            f"need at least {SEGMENT_FRAMES}")
        mn, mx = float(self.frames.min()), float(self.frames.max())
        if mn < 0.0 or mx > 1.0:
            raise DataError(f"clip {self.video_id!r} pixels outside [0,1]: [{mn}, {mx}]")


@dataclass
class Segment:
    """Non-overlapping 8-frame window; last_frame is the single-frame input."""

    video_id: str
    frame_window: np.ndarray
    last_frame: np.ndarray
    window_index: int


def ingest_video(directory: str, video_id: str | None = None) -> Clip:
    """Directory of frames -> preprocessed Clip (grayscale, 72x128)."""
    video_id = video_id if video_id is not None else os.path.basename(directory.rstrip("/"))
    raw = load_frames(directory)
    frames = np.stack([resize_bilinear(to_grayscale(f)) for f in raw])
    return Clip(video_id, frames)


def segment_clip(clip: Clip) -> list[Segment]:
    """Cut floor(T/8) disjoint 8-frame windows; the remainder is dropped.

    Windows are views into the clip's frame array, in order;
    last_frame is the window's final slice.
    """
    out = []
    for w in range(clip.frames.shape[0] // SEGMENT_FRAMES):
        window = clip.frames[w * SEGMENT_FRAMES:(w + 1) * SEGMENT_FRAMES]
        out.append(Segment(clip.video_id, window, window[SEGMENT_FRAMES - 1:SEGMENT_FRAMES], w))
    return out
