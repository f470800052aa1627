"""Corpus manifest handling and the in-memory segment corpus."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import SegmentFeatures
from .errors import DataError

MANIFEST_HEADER = ["utterance_id", "wav_path", "label", "speaker"]


@dataclass
class ManifestRow:
    utterance_id: str
    wav_path: Path
    label: str
    speaker: str = ""


@dataclass
class Manifest:
    """Utterance inventory; class indices come from sorted label names."""

    rows: list[ManifestRow]
    class_names: list[str] = field(init=False)
    label_to_index: dict[str, int] = field(init=False)

    def __post_init__(self):
        ids = [r.utterance_id for r in self.rows]
        if len(set(ids)) != len(ids):
            dupes = sorted({u for u in ids if ids.count(u) > 1})
            raise DataError(f"duplicate utterance ids in manifest: {dupes}")
        self.class_names = sorted({r.label for r in self.rows})
        self.label_to_index = {name: i for i, name in enumerate(self.class_names)}

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def utterance_labels(self) -> dict[str, int]:
        return {r.utterance_id: self.label_to_index[r.label] for r in self.rows}


def load_manifest(path, check_paths: bool = True) -> Manifest:
    """Load a manifest CSV; wav paths are resolved relative to it."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{path}: empty manifest") from None
    if header != MANIFEST_HEADER:
        raise DataError(
            f"{path}: bad manifest header {header!r}, expected {MANIFEST_HEADER!r}"
        )
    for record in reader:
        if not record:
            continue
        if len(record) < 3:
            raise DataError(f"{path}: malformed manifest row {record!r}")
        speaker = record[3] if len(record) > 3 else ""
        wav_path = base / record[1]
        rows.append(ManifestRow(record[0], wav_path, record[2], speaker))
    if not rows:
        raise DataError(f"{path}: manifest has no utterances")
    if check_paths:
        missing = [str(r.wav_path) for r in rows if not r.wav_path.exists()]
        if missing:
            raise DataError(f"{path}: wav files not found: {missing[:5]}")
    return Manifest(rows)


def save_manifest(path, rows: list[ManifestRow], header_comments=()) -> None:
    """Write a manifest CSV with wav paths relative to its directory."""
    path = Path(path)
    base = path.parent
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for comment in header_comments:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in rows:
            try:
                rel = Path(r.wav_path).relative_to(base)
            except ValueError:
                rel = Path(r.wav_path)
            writer.writerow([r.utterance_id, rel.as_posix(), r.label, r.speaker])


@dataclass
class SegmentCorpus:
    """Segments plus utterance-level class labels, ready for training."""

    segments: list[SegmentFeatures]
    utterance_labels: dict[str, int]
    class_names: list[str]

    def __post_init__(self):
        unlabeled = sorted(
            {s.utterance_id for s in self.segments} - set(self.utterance_labels)
        )
        if unlabeled:
            raise DataError(f"segments reference unlabeled utterances: {unlabeled[:5]}")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def segment_ids(self) -> list[str]:
        return [s.segment_id for s in self.segments]

    @property
    def segment_utterances(self) -> list[str]:
        return [s.utterance_id for s in self.segments]

    def utterance_ids(self) -> list[str]:
        seen = dict.fromkeys(s.utterance_id for s in self.segments)
        return list(seen)

    def features(self) -> np.ndarray:
        """Stacked (n_segments, n_mels, seg_len) float32 array."""
        return np.stack([s.matrix for s in self.segments])

    def segment_label_indices(self) -> np.ndarray:
        return np.array(
            [self.utterance_labels[s.utterance_id] for s in self.segments], dtype=np.int64
        )


def build_corpus(segments: list[SegmentFeatures], manifest: Manifest) -> SegmentCorpus:
    return SegmentCorpus(
        segments=segments,
        utterance_labels=manifest.utterance_labels(),
        class_names=list(manifest.class_names),
    )
