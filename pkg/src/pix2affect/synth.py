"""Seeded synthetic gameplay corpus with a planted arousal signal.

Each video carries a latent arousal curve: a bounded random walk at the
4 Hz annotation clock whose up-steps outnumber down-steps (mirroring how
annotators mostly raised arousal over a session). Frames are background
noise plus a bright HUD-style score bar at the top of the screen whose
intensity and filled width both grow with the latent value, so the signal
a model must find lives in a known rectangle. The annotation trace samples
the latent curve with an optional reaction lag and additive noise, then a
random positive affine rescale leaves it unbounded so that per-trace
min-max normalization does real work downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensors import FLOAT, Rng
from .traces import AnnotationTrace
from .video import FRAME_HEIGHT, FRAME_RATE, FRAME_WIDTH, Clip

ANNOTATION_RATE = 4.0


@dataclass
class SynthConfig:
    num_videos: int = 20
    duration_s: float = 60.0
    seed: int = 0
    # (row0, row1, col0, col1): the scored signal box. The score counter is
    # a small square drawn at the box's top-left corner; placing it in the
    # frame corner matters because saliency maps projected up from stride-4
    # conv grids smear content by up to half a 32 px receptive field, and
    # the frame edge clamps two of the four smear directions while the box
    # absorbs the other two.
    signal_region: tuple[int, int, int, int] = (0, 30, 0, 30)
    noise_sigma: float = 0.005
    annotator_lag_s: float = 0.25
    annotator_noise: float = 0.02
    up_prob: float = 0.62
    down_prob: float = 0.28
    # near-black playfield with a bright HUD, like the high-contrast shooter
    background: float = 0.02
    bar_min_intensity: float = 0.35

    def __post_init__(self):
        if self.num_videos < 1:
            raise ConfigError("num_videos must be >= 1")
        if self.duration_s * FRAME_RATE < 8:
            raise ConfigError("duration too short for a single 8-frame segment")
        r0, r1, c0, c1 = self.signal_region
        if not (0 <= r0 < r1 <= FRAME_HEIGHT and 0 <= c0 < c1 <= FRAME_WIDTH):
            raise ConfigError(f"signal region {self.signal_region} outside "
                              f"{FRAME_HEIGHT}x{FRAME_WIDTH} frame")
        area = (r1 - r0) * (c1 - c0)
        if area > 0.10 * FRAME_HEIGHT * FRAME_WIDTH:
            raise ConfigError(f"signal region covers {area} px, over the 10% budget")
        if self.noise_sigma < 0 or self.annotator_noise < 0 or self.annotator_lag_s < 0:
            raise ConfigError("noise and lag parameters must be >= 0")
        if not (0 < self.up_prob < 1 and 0 <= self.down_prob < 1
                and self.up_prob + self.down_prob <= 1):
            raise ConfigError("step probabilities must form a distribution")

    @property
    def frame_count(self) -> int:
        return int(round(self.duration_s * FRAME_RATE))

    @property
    def annotation_count(self) -> int:
        return int(round(self.duration_s * ANNOTATION_RATE))


def latent_curve(rng: Rng, n: int, cfg: SynthConfig) -> np.ndarray:
    """Bounded random walk in [0,1] at the annotation clock, drifting up.

    Start value and step size vary only mildly between videos, so the
    per-video mean-split thresholds land on comparable absolute arousal
    levels (the planted pixel signal encodes absolute arousal).
    """
    a = np.empty(n, dtype=np.float64)
    a[0] = 0.15 + 0.10 * rng.random()
    step = 0.008 + 0.002 * rng.random()
    for k in range(1, n):
        u = rng.random()
        if u < cfg.up_prob:
            a[k] = min(a[k - 1] + step, 1.0)
        elif u < cfg.up_prob + cfg.down_prob:
            a[k] = max(a[k - 1] - step, 0.0)
        else:
            a[k] = a[k - 1]
    return a


def latent_for_frames(latent: np.ndarray, frame_count: int) -> np.ndarray:
    """Hold each 4 Hz latent value across its 30 Hz frames."""
    idx = (np.arange(frame_count) * ANNOTATION_RATE / FRAME_RATE).astype(np.int64)
    return latent[np.minimum(idx, len(latent) - 1)]


def render_video(rng: Rng, latent: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Frames [T,72,128] in [0,1]: noise background plus the score counter.

    The counter is a bright square anchored two pixels inside the signal
    box's top-left corner; both its side length and its brightness grow
    with the latent arousal value.
    """
    t = cfg.frame_count
    per_frame = latent_for_frames(latent, t)
    frames = cfg.background + rng.normal((t, FRAME_HEIGHT, FRAME_WIDTH), 0.0, cfg.noise_sigma)
    r0, r1, c0, c1 = cfg.signal_region
    inset = 2 if min(r1 - r0, c1 - c0) > 8 else 0
    # at most half the box: the box must also absorb the saliency smear of
    # the downstream conv grids (half a receptive field past the counter)
    max_side = max(2, (min(r1 - r0, c1 - c0) - 2 * inset) // 2)
    min_side = max(2.0, max_side / 4.0)
    side = min_side + (max_side - min_side) * per_frame
    intensity = cfg.bar_min_intensity + (1.0 - cfg.bar_min_intensity) * per_frame
    ks = np.arange(max_side, dtype=np.float64)
    for i in range(t):
        # anti-aliased square: the fractional boundary row/column is drawn
        # at partial brightness, so the counter grows continuously
        mask = np.clip(side[i] - ks, 0.0, 1.0)
        frames[i, r0 + inset:r0 + inset + max_side, c0 + inset:c0 + inset + max_side] += \
            intensity[i] * np.outer(mask, mask)
    return np.clip(frames, 0.0, 1.0).astype(FLOAT)


def annotate(rng: Rng, latent: np.ndarray, cfg: SynthConfig) -> AnnotationTrace:
    """Sample the latent curve into an unbounded RankTrace-style trace."""
    n = len(latent)
    times = np.arange(n, dtype=np.float64) / ANNOTATION_RATE
    read_idx = np.maximum(
        np.floor((times - cfg.annotator_lag_s) * ANNOTATION_RATE), 0).astype(np.int64)
    values = latent[read_idx].copy()
    if cfg.annotator_noise > 0:
        values += rng.normal((n,), 0.0, cfg.annotator_noise).astype(np.float64)
    scale = 3.0 + 37.0 * rng.random()
    offset = -50.0 + 100.0 * rng.random()
    return AnnotationTrace("", times, scale * values + offset)


def synth_corpus(cfg: SynthConfig, return_latent: bool = False):
    """Generate (clips, traces) for the whole corpus; bit-identical per seed.

    With ``return_latent`` a third list carries each video's latent curve at
    the annotation clock (generator ground truth, used by self-checks).
    """
    root = Rng(cfg.seed)
    clips, traces, latents = [], [], []
    for v in range(cfg.num_videos):
        video_id = f"video_{v:03d}"
        rng = root.child(video_id)
        latent = latent_curve(rng, cfg.annotation_count, cfg)
        clips.append(Clip(video_id, render_video(rng, latent, cfg)))
        trace = annotate(rng, latent, cfg)
        trace.video_id = video_id
        traces.append(trace)
        latents.append(latent)
    if return_latent:
        return clips, traces, latents
    return clips, traces
