"""Binary segment-feature cache (magic "SEGF").

Layout, all integers unsigned 32-bit little-endian:

    magic "SEGF" | version | n_mels | seg_len | segment count
    per segment: utterance-id byte length | UTF-8 id bytes |
                 start_frame | matrix as row-major float32 LE

Segment ids and per-utterance indices are reconstructed from the
record order, which the writer preserves.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .dsp import SegmentFeatures
from .errors import DataError

MAGIC = b"SEGF"
VERSION = 1


def write_feature_cache(path, segments: list[SegmentFeatures]) -> None:
    if not segments:
        raise DataError("refusing to write an empty feature cache")
    n_mels, seg_len = segments[0].matrix.shape
    for seg in segments:
        if seg.matrix.shape != (n_mels, seg_len):
            raise DataError(
                f"segment {seg.segment_id} has shape {seg.matrix.shape}, "
                f"cache requires ({n_mels}, {seg_len})"
            )
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIII", MAGIC, VERSION, n_mels, seg_len, len(segments)))
        for seg in segments:
            uid = seg.utterance_id.encode("utf-8")
            fh.write(struct.pack("<I", len(uid)))
            fh.write(uid)
            fh.write(struct.pack("<I", seg.start_frame))
            fh.write(np.ascontiguousarray(seg.matrix, dtype="<f4").tobytes())


def read_feature_cache(path) -> list[SegmentFeatures]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read feature cache {path}: {exc}") from exc
    if len(raw) < 20 or raw[:4] != MAGIC:
        raise DataError(f"{path}: not a feature cache (bad magic)")
    version, n_mels, seg_len, count = struct.unpack_from("<IIII", raw, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    pos = 20
    matrix_bytes = n_mels * seg_len * 4
    segments = []
    per_utt_counter: dict[str, int] = {}
    for _ in range(count):
        if pos + 4 > len(raw):
            raise DataError(f"{path}: truncated cache")
        (uid_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        uid = raw[pos : pos + uid_len].decode("utf-8")
        pos += uid_len
        (start_frame,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if pos + matrix_bytes > len(raw):
            raise DataError(f"{path}: truncated cache")
        matrix = np.frombuffer(raw, dtype="<f4", count=n_mels * seg_len, offset=pos)
        pos += matrix_bytes
        idx = per_utt_counter.get(uid, 0)
        per_utt_counter[uid] = idx + 1
        segments.append(
            SegmentFeatures(
                matrix=matrix.reshape(n_mels, seg_len).copy(),
                segment_id=f"{uid}:{idx:05d}",
                utterance_id=uid,
                start_frame=start_frame,
                index_in_utterance=idx,
            )
        )
    return segments
