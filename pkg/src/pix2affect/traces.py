"""Continuous arousal annotation traces: parsing, normalization, frame
alignment, windowing, and mean-split labeling with an uncertainty zone.

A trace is an unbounded, timestamped stream (about 4 samples per second).
Each video's trace is min-max normalized to [0,1] on its own, then aligned
to the 30 Hz frame clock by holding the last annotated value. An 8-frame
window takes the mean of the annotation samples that govern at least one of
its frames, each sample counted once regardless of how many frames it
covers. The window is labeled against the trace mean with a half-width
``epsilon``: High at or above mean+epsilon, Low at or below mean-epsilon,
Uncertain strictly inside the open zone (dropped from datasets).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, TextIO

import numpy as np

from .errors import DataError, ParseError


class Label(IntEnum):
    LOW = 0
    HIGH = 1
    UNCERTAIN = 2


@dataclass
class AnnotationTrace:
    """Raw unbounded annotation samples for one video.

    times are seconds, strictly increasing; at least two samples.
    """

    video_id: str
    times: np.ndarray
    values: np.ndarray
    nominal_rate: float = 4.0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.times.ndim != 1 or self.times.shape != self.values.shape:
            raise DataError("times and values must be equal-length 1D arrays")
        if len(self.times) < 2:
            raise DataError(f"trace {self.video_id!r} needs at least 2 samples")
        if not (np.isfinite(self.times).all() and np.isfinite(self.values).all()):
            raise DataError(f"trace {self.video_id!r} contains non-finite entries")
        if not (np.diff(self.times) > 0).all():
            raise DataError(f"trace {self.video_id!r} has non-increasing timestamps")


@dataclass
class NormalizedTrace:
    """Min-max normalized trace; mean_value is the class split point."""

    video_id: str
    times: np.ndarray
    values: np.ndarray
    mean_value: float
    raw_min: float
    raw_max: float


@dataclass
class LabelingConfig:
    epsilon: float = 0.0
    window_frames: int = 8
    frame_rate: float = 30.0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 0.5:
            raise DataError(f"epsilon must lie in [0, 0.5], got {self.epsilon}")
        if self.window_frames < 1:
            raise DataError("window_frames must be >= 1")
        if self.frame_rate <= 0:
            raise DataError("frame_rate must be positive")


@dataclass
class SegmentLabel:
    label: Label
    window_value: float


def parse_trace(stream: TextIO | str | bytes, video_id: str = "") -> AnnotationTrace:
    """Parse the two-column text format: one ``time_seconds,value`` per line.

    An optional ``time,value`` header, blank lines, UTF-8, and CRLF endings
    are accepted. Errors carry the 1-based line number.
    """
    if isinstance(stream, bytes):
        stream = stream.decode("utf-8")
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    times, values = [], []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line:
            continue
        if lineno == 1 and line.lower().replace(" ", "") == "time,value":
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ParseError(f"expected 'time,value', got {line!r}", line=lineno)
        try:
            t, v = float(parts[0]), float(parts[1])
        except ValueError:
            raise ParseError(f"non-numeric field in {line!r}", line=lineno) from None
        if times and t <= times[-1]:
            raise ParseError(f"timestamp {t} not after previous {times[-1]}", line=lineno)
        times.append(t)
        values.append(v)
    if len(times) < 2:
        raise ParseError(f"trace needs at least 2 samples, got {len(times)}")
    return AnnotationTrace(video_id, np.array(times), np.array(values))


def format_trace(trace: AnnotationTrace) -> str:
    """Inverse of parse_trace (with header), for writing trace files."""
    lines = ["time,value"]
    for t, v in zip(trace.times, trace.values):
        lines.append(f"{t:.6f},{v:.6f}")
    return "\n".join(lines) + "\n"


def normalize_trace(trace: AnnotationTrace) -> NormalizedTrace:
    """Min-max normalize values to [0,1]; constant traces are rejected.

    The mean_value used for labeling is the arithmetic mean of the
    normalized sample values (not of per-frame held values).
    """
    lo, hi = float(trace.values.min()), float(trace.values.max())
    if hi <= lo:
        raise DataError(
            f"trace {trace.video_id!r} is constant (min == max == {lo}); "
            "min-max normalization is undefined, video excluded")
    vals = (trace.values - lo) / (hi - lo)
    return NormalizedTrace(trace.video_id, trace.times.copy(), vals,
                           float(vals.mean()), lo, hi)


def governing_sample_index(trace: NormalizedTrace, frame_times: np.ndarray) -> np.ndarray:
    """Index of the last sample at or before each frame time (hold-last).

    Frames before the first sample take index 0.
    """
    idx = np.searchsorted(trace.times, frame_times, side="right") - 1
    return np.maximum(idx, 0)


def align_to_frames(trace: NormalizedTrace, frame_count: int,
                    frame_rate: float = 30.0) -> np.ndarray:
    """Per-frame arousal: frame i (at time i/frame_rate) holds the value of
    the latest sample at or before it; leading frames hold the first value.
    """
    if frame_count < 1:
        raise DataError("frame_count must be >= 1")
    frame_times = np.arange(frame_count, dtype=np.float64) / frame_rate
    return trace.values[governing_sample_index(trace, frame_times)]


def window_annotation(trace: NormalizedTrace, start_frame: int,
                      cfg: LabelingConfig) -> float:
    """Mean of the annotation samples active within one window.

    A sample is active if it governs at least one frame of
    [start_frame, start_frame + window_frames); each active sample counts
    once, so a sample briefly visible at the window edge is not weighted by
    frame coverage. (A per-frame value array cannot express this, because
    consecutive samples may repeat a value; hence the trace argument.)
    """
    if start_frame < 0:
        raise DataError(f"window start {start_frame} out of range")
    frames = np.arange(start_frame, start_frame + cfg.window_frames, dtype=np.float64)
    idx = governing_sample_index(trace, frames / cfg.frame_rate)
    return float(trace.values[np.unique(idx)].mean())


def label_window(window_value: float, trace_mean: float, cfg: LabelingConfig) -> SegmentLabel:
    """Mean-split with uncertainty zone.

    epsilon > 0: High at window_value >= mean+eps, Low at <= mean-eps,
    Uncertain strictly inside (boundary values are kept). epsilon = 0:
    High iff window_value > mean, ties label Low.
    """
    eps = cfg.epsilon
    if eps > 0:
        if window_value >= trace_mean + eps:
            return SegmentLabel(Label.HIGH, window_value)
        if window_value <= trace_mean - eps:
            return SegmentLabel(Label.LOW, window_value)
        return SegmentLabel(Label.UNCERTAIN, window_value)
    return SegmentLabel(Label.HIGH if window_value > trace_mean else Label.LOW, window_value)


def label_clip_windows(trace: NormalizedTrace, frame_count: int,
                       cfg: LabelingConfig) -> list[SegmentLabel]:
    """Labels for every whole non-overlapping window of a frame_count clip."""
    out = []
    for w in range(frame_count // cfg.window_frames):
        value = window_annotation(trace, w * cfg.window_frames, cfg)
        out.append(label_window(value, trace.mean_value, cfg))
    return out
