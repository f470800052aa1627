"""Waveform container, WAV file I/O, and linear resampling.

The WAV reader accepts little-endian mono PCM 16-bit (format tag 1)
and mono IEEE float 32-bit (format tag 3). Everything else is
rejected with an error that names the file and the offending field.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

_FORMAT_PCM = 1
_FORMAT_IEEE_FLOAT = 3


@dataclass
class Waveform:
    """Mono audio: samples in [-1, 1] plus the sampling rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D sample array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration_seconds(self) -> float:
        return self.samples.size / self.sample_rate


def read_wav(path) -> Waveform:
    """Read a mono PCM16 or float32 WAV file into a Waveform."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read WAV file {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise DataError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8 : pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise DataError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            if len(body) < chunk_size:
                raise DataError(f"{path}: truncated data chunk")
            data = body
        # chunks are word-aligned; odd sizes carry a pad byte
        pos += 8 + chunk_size + (chunk_size & 1)

    if fmt is None or data is None:
        raise DataError(f"{path}: missing fmt or data chunk")
    audio_format, channels, sample_rate, _byte_rate, _block_align, bits = fmt
    if channels != 1:
        raise DataError(
            f"{path}: {channels}-channel audio is not supported, expected mono"
        )
    if audio_format == _FORMAT_PCM and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == _FORMAT_IEEE_FLOAT and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(samples)):
            raise DataError(f"{path}: float WAV contains non-finite samples")
        samples = np.clip(samples, -1.0, 1.0)
    else:
        raise DataError(
            f"{path}: unsupported encoding (format tag {audio_format}, "
            f"{bits}-bit); expected PCM 16-bit or IEEE float 32-bit"
        )
    if samples.size == 0:
        raise DataError(f"{path}: empty data chunk")
    return Waveform(samples, sample_rate)


def write_wav_pcm16(path, waveform: Waveform) -> None:
    """Write a Waveform as mono 16-bit PCM, clipping to [-1, 1]."""
    samples = np.clip(waveform.samples, -1.0, 1.0)
    pcm = np.round(samples * 32767.0).astype("<i2")
    data = pcm.tobytes()
    sr = waveform.sample_rate
    header = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, _FORMAT_PCM, 1, sr, sr * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(data))
    Path(path).write_bytes(header + data)


def resample_linear(waveform: Waveform, target_rate: int) -> Waveform:
    """Resample by linear interpolation.

    This is a deliberate approximation (no anti-alias filtering); it
    only has to put all corpora on a common rate before feature
    extraction, not preserve fidelity.
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == waveform.sample_rate:
        return Waveform(waveform.samples.copy(), waveform.sample_rate)
    n_out = max(1, int(round(waveform.samples.size * target_rate / waveform.sample_rate)))
    t_out = np.arange(n_out) / target_rate
    t_in = np.arange(waveform.samples.size) / waveform.sample_rate
    return Waveform(np.interp(t_out, t_in, waveform.samples), target_rate)
