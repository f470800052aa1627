"""Log-mel feature extraction and fixed-length segmentation.

An utterance is framed with periodic Hann windows, each frame goes
through an FFT power spectrum and a triangular mel filterbank, and the
log-power matrix is cut into overlapping fixed-length segments that
become the classifier's training examples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import Waveform
from .errors import DataError, UsageError

# Defaults follow the standard 16 kHz front end used throughout.
DEFAULT_SAMPLE_RATE = 16000
DEFAULT_WINDOW_MS = 25.0
DEFAULT_HOP_MS = 10.0
DEFAULT_N_FFT = 512
DEFAULT_N_MELS = 64
DEFAULT_F_MIN = 125.0
DEFAULT_F_MAX = 7500.0
DEFAULT_SEG_LEN = 32

# Floor applied inside the log so silence stays finite and deterministic.
LOG_FLOOR = 1e-10


def mel_scale(f):
    """Map frequency in Hz to the mel scale: 1127 * ln(1 + f/700)."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("mel_scale is undefined for negative frequencies")
    return 1127.0 * np.log1p(f / 700.0)


def mel_to_hz(m):
    """Inverse of mel_scale."""
    m = np.asarray(m, dtype=np.float64)
    return 700.0 * np.expm1(m / 1127.0)


@dataclass
class MelFilterbank:
    """Triangular mel filterbank, peak-normalized so each row maxes at 1."""

    weights: np.ndarray
    n_mels: int
    f_min: float
    f_max: float
    n_fft: int
    sample_rate: int
    center_frequencies: np.ndarray


def build_mel_filterbank(
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    n_fft: int = DEFAULT_N_FFT,
    n_mels: int = DEFAULT_N_MELS,
    f_min: float = DEFAULT_F_MIN,
    f_max: float = DEFAULT_F_MAX,
) -> MelFilterbank:
    """Build n_mels triangular filters with equal spacing on the mel axis.

    n_mels + 2 breakpoints are placed between f_min and f_max on the mel
    scale and mapped back to Hz; filter m rises from breakpoint m to
    m+1 and falls to m+2, evaluated at the FFT bin centers. Filters are
    peak-normalized. A filter whose support covers no FFT bin is a
    configuration error.
    """
    if n_mels < 1:
        raise ValueError(f"n_mels must be >= 1, got {n_mels}")
    if not (0 <= f_min < f_max <= sample_rate / 2):
        raise ValueError(
            f"need 0 <= f_min < f_max <= sample_rate/2, got "
            f"f_min={f_min}, f_max={f_max}, sample_rate={sample_rate}"
        )
    breakpoints = mel_to_hz(np.linspace(mel_scale(f_min), mel_scale(f_max), n_mels + 2))
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)

    weights = np.zeros((n_mels, bin_freqs.size))
    for m in range(n_mels):
        left, center, right = breakpoints[m : m + 3]
        if center - left <= 0 or right - center <= 0:
            raise UsageError(
                f"mel filter {m} is degenerate: breakpoints "
                f"{left:.3f}/{center:.3f}/{right:.3f} Hz collapse"
            )
        rising = (bin_freqs - left) / (center - left)
        falling = (right - bin_freqs) / (right - center)
        tri = np.maximum(0.0, np.minimum(rising, falling))
        peak = tri.max()
        if peak <= 0.0:
            raise UsageError(
                f"mel filter {m} is empty: no FFT bin falls inside "
                f"({left:.3f}, {right:.3f}) Hz; increase n_fft or widen the range"
            )
        weights[m] = tri / peak
    return MelFilterbank(
        weights=weights,
        n_mels=n_mels,
        f_min=f_min,
        f_max=f_max,
        n_fft=n_fft,
        sample_rate=sample_rate,
        center_frequencies=breakpoints[1:-1].copy(),
    )


def hann_periodic(length: int) -> np.ndarray:
    """Periodic Hann window of the given length."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


def frame_signal(
    waveform: Waveform,
    window_ms: float = DEFAULT_WINDOW_MS,
    hop_ms: float = DEFAULT_HOP_MS,
) -> np.ndarray:
    """Slice a waveform into Hann-windowed frames.

    Returns an (n_frames, win_len) array with
    n_frames = floor((n_samples - win_len) / hop_len) + 1; a trailing
    partial frame is dropped rather than padded.
    """
    win_len = int(round(waveform.sample_rate * window_ms / 1000.0))
    hop_len = int(round(waveform.sample_rate * hop_ms / 1000.0))
    if win_len < 1 or hop_len < 1:
        raise ValueError("window and hop must each span at least one sample")
    n = waveform.samples.size
    if n < win_len:
        raise DataError(
            f"waveform too short to frame: {n} samples, need at least {win_len}"
        )
    n_frames = (n - win_len) // hop_len + 1
    idx = np.arange(win_len)[None, :] + hop_len * np.arange(n_frames)[:, None]
    return waveform.samples[idx] * hann_periodic(win_len)[None, :]


def stft_power(frame: np.ndarray, n_fft: int = DEFAULT_N_FFT) -> np.ndarray:
    """Power spectrum |DFT|^2 of one frame, zero-padded to n_fft points."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.size > n_fft:
        raise ValueError(f"frame of {frame.size} samples exceeds n_fft={n_fft}")
    return np.abs(np.fft.rfft(frame, n=n_fft)) ** 2


def log_mel_frames(
    waveform: Waveform,
    filterbank: MelFilterbank,
    window_ms: float = DEFAULT_WINDOW_MS,
    hop_ms: float = DEFAULT_HOP_MS,
) -> np.ndarray:
    """Log-power mel spectrogram, shape (n_mels, n_frames).

    Entry (m, t) is ln(max(filterbank_m . power_t, LOG_FLOOR)), so the
    output is finite for any input including digital silence.
    """
    if waveform.sample_rate != filterbank.sample_rate:
        raise UsageError(
            f"sample-rate mismatch: waveform at {waveform.sample_rate} Hz, "
            f"filterbank built for {filterbank.sample_rate} Hz"
        )
    frames = frame_signal(waveform, window_ms, hop_ms)
    power = np.abs(np.fft.rfft(frames, n=filterbank.n_fft, axis=1)) ** 2
    mel_power = filterbank.weights @ power.T
    return np.log(np.maximum(mel_power, LOG_FLOOR))


@dataclass
class SegmentFeatures:
    """One fixed-length log-mel segment with its utterance linkage."""

    matrix: np.ndarray  # (n_mels, seg_len) float32 log-power values
    segment_id: str
    utterance_id: str
    start_frame: int
    index_in_utterance: int


def segment_utterance(
    logmel: np.ndarray,
    seg_len: int,
    seg_hop: int,
    utterance_id: str,
) -> list[SegmentFeatures]:
    """Cut a log-mel matrix into overlapping segments of seg_len frames.

    Segment i covers frames [i*seg_hop, i*seg_hop + seg_len); the count
    is floor((n_frames - seg_len) / seg_hop) + 1 and a trailing partial
    segment is dropped.
    """
    if seg_len < 1 or seg_hop < 1:
        raise ValueError("seg_len and seg_hop must be >= 1")
    n_mels, n_frames = logmel.shape
    if n_frames < seg_len:
        raise DataError(
            f"utterance {utterance_id!r} has {n_frames} frames, "
            f"need at least {seg_len} for one segment"
        )
    count = (n_frames - seg_len) // seg_hop + 1
    segments = []
    for i in range(count):
        start = i * seg_hop
        segments.append(
            SegmentFeatures(
                matrix=np.ascontiguousarray(
                    logmel[:, start : start + seg_len], dtype=np.float32
                ),
                segment_id=f"{utterance_id}:{i:05d}",
                utterance_id=utterance_id,
                start_frame=start,
                index_in_utterance=i,
            )
        )
    return segments


def segment_time_span(
    start_frame: int,
    seg_len: int,
    window_ms: float = DEFAULT_WINDOW_MS,
    hop_ms: float = DEFAULT_HOP_MS,
) -> tuple[float, float]:
    """Seconds covered by a segment: first frame start to last frame end."""
    start_s = start_frame * hop_ms / 1000.0
    end_s = (start_frame + seg_len - 1) * hop_ms / 1000.0 + window_ms / 1000.0
    return start_s, end_s
