"""Labeled datasets: pair clips with traces, label every 8-frame segment
against its trace mean with the uncertainty zone, drop Uncertain records,
and serialize to the AFD1 container with a key=value sidecar manifest.

AFD1 layout (all integers little-endian): magic ``AFD1``, u32 version,
u32 record count, u32 record layout id (1), then per record: u32 video
ordinal, u32 window index, u8 label (0 Low / 1 High), frame-window tensor
blob ([8,72,128] float32), window value f32. Video ordinals index the
manifest's ``video.N.id`` entries.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .tensors import read_tensor, write_tensor
from .traces import AnnotationTrace, Label, LabelingConfig, normalize_trace, window_annotation, label_window
from .video import SEGMENT_FRAMES, Clip, segment_clip

log = logging.getLogger("pix2affect.dataset")

DATASET_MAGIC = b"AFD1"
DATASET_VERSION = 1
RECORD_LAYOUT = 1


@dataclass
class Record:
    """One labeled segment; ``window`` is the [8,72,128] frame stack."""

    video_id: str
    window_index: int
    window: np.ndarray
    label: int
    window_value: float

    @property
    def last_frame(self) -> np.ndarray:
        return self.window[SEGMENT_FRAMES - 1:SEGMENT_FRAMES]


@dataclass
class LabeledDataset:
    records: list[Record]
    epsilon: float
    trace_means: dict[str, float]
    video_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.video_ids:
            seen = dict.fromkeys(r.video_id for r in self.records)
            self.video_ids = list(seen)

    def records_for(self, video_id: str) -> list[Record]:
        return [r for r in self.records if r.video_id == video_id]


def build_dataset(clips: list[Clip], traces: list[AnnotationTrace],
                  epsilon: float) -> LabeledDataset:
    """Label every whole segment of every video; Uncertain records dropped.

    Videos with constant traces, or whose every window lands in the
    uncertainty zone, are excluded with a logged warning. Clip and trace
    video ids must match one to one.
    """
    cfg = LabelingConfig(epsilon=epsilon)
    trace_by_id = {t.video_id: t for t in traces}
    clip_ids = [c.video_id for c in clips]
    if len(trace_by_id) != len(traces) or len(set(clip_ids)) != len(clips):
        raise DataError("duplicate video ids")
    missing = [i for i in clip_ids if i not in trace_by_id]
    if missing or len(clips) != len(traces):
        raise DataError(f"clip/trace pairing mismatch (unpaired: {missing})")
    records: list[Record] = []
    means: dict[str, float] = {}
    kept_videos: list[str] = []
    dropped_uncertain = 0
    for clip in clips:
        try:
            norm = normalize_trace(trace_by_id[clip.video_id])
        except DataError as err:
            log.warning("excluding video %s: %s", clip.video_id, err)
            continue
        means[clip.video_id] = norm.mean_value
        video_records = []
        for seg in segment_clip(clip):
            value = window_annotation(norm, seg.window_index * cfg.window_frames, cfg)
            lab = label_window(value, norm.mean_value, cfg)
            if lab.label is Label.UNCERTAIN:
                dropped_uncertain += 1
                continue
            video_records.append(Record(clip.video_id, seg.window_index,
                                        seg.frame_window, int(lab.label), value))
        if not video_records:
            log.warning("excluding video %s: no labeled windows at epsilon=%s",
                        clip.video_id, epsilon)
            means.pop(clip.video_id, None)
            continue
        kept_videos.append(clip.video_id)
        records.extend(video_records)
    log.info("built dataset: %d records across %d videos at epsilon=%s "
             "(%d windows dropped as Uncertain)",
             len(records), len(kept_videos), epsilon, dropped_uncertain)
    if not records:
        raise DataError(f"no labeled records at epsilon={epsilon}")
    return LabeledDataset(records, epsilon, means, kept_videos)


# ---------------------------------------------------------------------------
# AFD1 serialization
# ---------------------------------------------------------------------------

def save_dataset(path: str, ds: LabeledDataset, manifest_extra: dict | None = None) -> None:
    """Write the AFD1 container plus ``<path>.manifest.txt`` sidecar."""
    ordinal = {vid: i for i, vid in enumerate(ds.video_ids)}
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<III", DATASET_VERSION, len(ds.records), RECORD_LAYOUT))
        for rec in ds.records:
            fh.write(struct.pack("<IIB", ordinal[rec.video_id], rec.window_index, rec.label))
            write_tensor(fh, rec.window)
            fh.write(struct.pack("<f", rec.window_value))
    lines = [f"epsilon={ds.epsilon}", f"videos={len(ds.video_ids)}"]
    for i, vid in enumerate(ds.video_ids):
        lines.append(f"video.{i}.id={vid}")
        lines.append(f"video.{i}.trace_mean={ds.trace_means[vid]!r}")
    for key, value in (manifest_extra or {}).items():
        lines.append(f"{key}={value}")
    with open(path + ".manifest.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path: str) -> dict[str, str]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                key, value = line.split("=", 1)
                out[key] = value
    return out


def load_dataset(path: str) -> LabeledDataset:
    """Read an AFD1 container (and its sidecar manifest when present)."""
    try:
        manifest = read_manifest(path + ".manifest.txt")
    except FileNotFoundError:
        manifest = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise ConfigError(f"{path}: bad dataset magic {magic!r}")
        version, count, layout = struct.unpack("<III", fh.read(12))
        if version != DATASET_VERSION or layout != RECORD_LAYOUT:
            raise ConfigError(f"{path}: unsupported version/layout {version}/{layout}")
        records = []
        max_ordinal = -1
        for _ in range(count):
            ordn, widx, label = struct.unpack("<IIB", fh.read(9))
            window = read_tensor(fh)
            (value,) = struct.unpack("<f", fh.read(4))
            vid = manifest.get(f"video.{ordn}.id", f"video_{ordn:03d}")
            records.append(Record(vid, widx, window, int(label), float(value)))
            max_ordinal = max(max_ordinal, ordn)
    epsilon = float(manifest.get("epsilon", "0"))
    video_ids = [manifest.get(f"video.{i}.id", f"video_{i:03d}")
                 for i in range(max_ordinal + 1)]
    means = {}
    for i, vid in enumerate(video_ids):
        if f"video.{i}.trace_mean" in manifest:
            means[vid] = float(manifest[f"video.{i}.trace_mean"])
    present = {r.video_id for r in records}
    return LabeledDataset(records, epsilon, means, [v for v in video_ids if v in present])
