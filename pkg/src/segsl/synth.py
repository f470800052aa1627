"""Synthetic tone corpus with exact segment-level ground truth.

Each class owns a small set of pure-tone frequencies pinned to mel
filter centers. An utterance plays its class's tones in white noise;
one contiguous interval covering contamination_rate of the timeline
instead plays a different class's tones. The interval layout is
recorded, so the true class of every segment is known exactly - which
is what lets label-correction behaviour be measured without any
licensed corpus.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform
from .dsp import (
    DEFAULT_F_MAX,
    DEFAULT_F_MIN,
    DEFAULT_N_MELS,
    DEFAULT_SAMPLE_RATE,
    SegmentFeatures,
    build_mel_filterbank,
    mel_scale,
    mel_to_hz,
    segment_time_span,
)
from .errors import DataError

NOISE_STD = 0.05
# Each class is a tone PAIR whose mel-band spacing is its signature
# (2, 3, 4, ... bands apart). A global-average-pooled convolutional
# classifier is blind to absolute band position, so classes must
# differ by local spectral texture rather than by placement alone.
BASE_BAND = 14
FIRST_SPACING = 2
INTER_CLASS_SPACING = 4
# Tones are emitted in random bursts rather than continuously, so the
# class evidence is unevenly distributed across an utterance: segments
# that catch no burst are genuinely ambiguous. Burst duty varies per
# utterance, so some utterances are evidence-rich and some sparse.
# snr_db measures tone against noise power while a burst is on.
BURST_ON_MIN_MS = 80.0
BURST_ON_MAX_MS = 200.0
BURST_DUTY_MIN = 0.15
BURST_DUTY_MAX = 0.8
# Every utterance additionally carries a static "voice" pair of tones
# at a random band position and spacing, present throughout. These
# fingerprints identify the utterance, so a classifier trained on
# noisy labels can memorize label noise through them and pay for it
# on held-out utterances. Scale 0 disables them.
FINGERPRINT_POS_MIN = 12.0
FINGERPRINT_POS_MAX = 48.0
FINGERPRINT_SPACING_MIN = 1.5
FINGERPRINT_SPACING_MAX = 6.5
FINGERPRINT_AMP_SCALE = 0.25


def default_tone_table(n_classes: int, sample_rate: int = DEFAULT_SAMPLE_RATE) -> list[list[float]]:
    """Per-class tone pairs at mel filter centers, all bands distinct."""
    fb = build_mel_filterbank(sample_rate=sample_rate)
    centers = fb.center_frequencies
    table = []
    band = BASE_BAND
    for c in range(n_classes):
        spacing = FIRST_SPACING + c
        if band + spacing >= centers.size:
            raise ValueError(f"too many classes ({n_classes}) for the default tone table")
        table.append([float(centers[band]), float(centers[band + spacing])])
        band += spacing + INTER_CLASS_SPACING
    return table


@dataclass
class SynthSpec:
    n_classes: int = 4
    utterances_per_class: int = 60
    utterance_seconds: float = 1.4
    sample_rate: int = DEFAULT_SAMPLE_RATE
    tone_frequencies: list[list[float]] | None = None
    contamination_rate: float = 0.2
    snr_db: float = 10.0
    seed: int = 17

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if not (0.0 <= self.contamination_rate < 0.5):
            raise ValueError("contamination_rate must lie in [0, 0.5)")
        if self.tone_frequencies is None:
            self.tone_frequencies = default_tone_table(self.n_classes, self.sample_rate)
        if len(self.tone_frequencies) != self.n_classes:
            raise ValueError("tone table size does not match n_classes")
        flat = [f for tones in self.tone_frequencies for f in tones]
        if len(set(flat)) != len(flat):
            raise ValueError("class tone frequencies must be pairwise disjoint")

    def class_name(self, c: int) -> str:
        return f"class{c:02d}"


@dataclass
class SynthUtterance:
    utterance_id: str
    waveform: Waveform
    label: int
    # (start_s, end_s, emitting class) intervals tiling the utterance
    intervals: list[tuple[float, float, int]]


@dataclass
class SynthCorpus:
    spec: SynthSpec
    utterances: list[SynthUtterance]
    class_names: list[str] = field(init=False)

    def __post_init__(self):
        self.class_names = [self.spec.class_name(c) for c in range(self.spec.n_classes)]

    def truth(self) -> dict[str, list[tuple[float, float, int]]]:
        return {u.utterance_id: list(u.intervals) for u in self.utterances}

    def labels(self) -> dict[str, int]:
        return {u.utterance_id: u.label for u in self.utterances}


def _tone_amplitude(snr_db: float, n_tones: int) -> float:
    # total tone power n*A^2/2 against white noise power NOISE_STD^2
    return float(np.sqrt(2.0 * NOISE_STD**2 * 10.0 ** (snr_db / 10.0) / n_tones))


def _band_position_to_hz(pos: float) -> float:
    """Hz at a fractional mel-band position of the default 64-band grid."""
    lo = mel_scale(DEFAULT_F_MIN)
    hi = mel_scale(DEFAULT_F_MAX)
    step = (hi - lo) / (DEFAULT_N_MELS + 1)
    return float(mel_to_hz(lo + (pos + 1.0) * step))


def _burst_gate(rng, n_samples: int, sample_rate: int) -> np.ndarray:
    """Alternating on/off mask; per-call duty drawn once, run lengths random."""
    duty = rng.uniform(BURST_DUTY_MIN, BURST_DUTY_MAX)
    off_scale = (1.0 - duty) / duty
    gate = np.zeros(n_samples, dtype=bool)
    pos = 0
    on = bool(rng.integers(0, 2))
    while pos < n_samples:
        run_ms = rng.uniform(BURST_ON_MIN_MS, BURST_ON_MAX_MS)
        if not on:
            run_ms *= off_scale
        run = int(run_ms / 1000.0 * sample_rate)
        if on:
            gate[pos : pos + run] = True
        pos += max(1, run)
        on = not on
    return gate


def generate_corpus(spec: SynthSpec) -> SynthCorpus:
    """Deterministic corpus: seed -> bit-identical waveforms and truth."""
    n_samples = int(round(spec.utterance_seconds * spec.sample_rate))
    duration = n_samples / spec.sample_rate
    amp_of = [
        _tone_amplitude(spec.snr_db, len(tones)) for tones in spec.tone_frequencies
    ]
    utterances = []
    for c in range(spec.n_classes):
        for i in range(spec.utterances_per_class):
            rng = np.random.default_rng(np.random.SeedSequence((spec.seed, c, i)))
            t = np.arange(n_samples) / spec.sample_rate
            emitter = np.full(n_samples, c, dtype=np.int64)
            intervals: list[tuple[float, float, int]]
            if spec.contamination_rate > 0.0:
                n_cont = int(round(spec.contamination_rate * n_samples))
                start = int(rng.integers(0, n_samples - n_cont + 1))
                other_choices = [o for o in range(spec.n_classes) if o != c]
                other = int(other_choices[rng.integers(0, len(other_choices))])
                emitter[start : start + n_cont] = other
                intervals = [
                    (0.0, start / spec.sample_rate, c),
                    (start / spec.sample_rate, (start + n_cont) / spec.sample_rate, other),
                    ((start + n_cont) / spec.sample_rate, duration, c),
                ]
                intervals = [iv for iv in intervals if iv[1] > iv[0]]
            else:
                intervals = [(0.0, duration, c)]

            signal = rng.normal(0.0, NOISE_STD, size=n_samples)
            gate = _burst_gate(rng, n_samples, spec.sample_rate)
            for cls in sorted(set(emitter.tolist())):
                mask = (emitter == cls) & gate
                for freq in spec.tone_frequencies[cls]:
                    phase = rng.uniform(0.0, 2.0 * np.pi)
                    signal[mask] += amp_of[cls] * np.sin(2.0 * np.pi * freq * t[mask] + phase)
            if FINGERPRINT_AMP_SCALE > 0.0:
                # utterance fingerprint: a static class-neutral tone pair
                pos = rng.uniform(FINGERPRINT_POS_MIN, FINGERPRINT_POS_MAX)
                spacing = rng.uniform(FINGERPRINT_SPACING_MIN, FINGERPRINT_SPACING_MAX)
                fp_amp = FINGERPRINT_AMP_SCALE * amp_of[c]
                for freq in (_band_position_to_hz(pos), _band_position_to_hz(pos + spacing)):
                    phase = rng.uniform(0.0, 2.0 * np.pi)
                    signal += fp_amp * np.sin(2.0 * np.pi * freq * t + phase)
            signal = np.clip(signal, -1.0, 1.0)
            utterances.append(
                SynthUtterance(
                    utterance_id=f"{spec.class_name(c)}_{i:03d}",
                    waveform=Waveform(signal, spec.sample_rate),
                    label=c,
                    intervals=intervals,
                )
            )
    return SynthCorpus(spec=spec, utterances=utterances)


def segment_truth(
    truth: dict[str, list[tuple[float, float, int]]],
    segments: list[SegmentFeatures],
    utterance_labels: dict[str, int],
    window_ms: float,
    hop_ms: float,
    seg_len: int,
) -> np.ndarray:
    """True class per segment: whichever class emits the majority of its
    time span, with exact 50/50 ties going to the utterance's own class."""
    out = np.empty(len(segments), dtype=np.int64)
    for i, seg in enumerate(segments):
        ivs = truth.get(seg.utterance_id)
        if ivs is None:
            raise DataError(f"no truth intervals for utterance {seg.utterance_id!r}")
        start_s, end_s = segment_time_span(seg.start_frame, seg_len, window_ms, hop_ms)
        utt_end = max(e for _, e, _ in ivs)
        if end_s > utt_end + 1e-9:
            raise DataError(
                f"segment {seg.segment_id} spans to {end_s:.3f}s but utterance "
                f"ends at {utt_end:.3f}s; feature geometry does not match the truth file"
            )
        overlap: dict[int, float] = {}
        for t0, t1, cls in ivs:
            dt = min(end_s, t1) - max(start_s, t0)
            if dt > 0:
                overlap[cls] = overlap.get(cls, 0.0) + dt
        own = utterance_labels[seg.utterance_id]
        best_cls, best_dt = own, overlap.get(own, 0.0)
        for cls, dt in sorted(overlap.items()):
            if dt > best_dt + 1e-12:
                best_cls, best_dt = cls, dt
        out[i] = best_cls
    return out


@dataclass
class CorrectionStats:
    corrected: int
    corrupted: int
    damaged: int
    clean: int

    @property
    def correction_rate(self) -> float:
        return self.corrected / self.corrupted if self.corrupted else float("nan")

    @property
    def damage_rate(self) -> float:
        return self.damaged / self.clean if self.clean else float("nan")


def correction_rate(
    targets: np.ndarray,
    noisy_classes: np.ndarray,
    true_classes: np.ndarray,
) -> CorrectionStats:
    """Among mislabeled segments, how many targets now point at the truth;
    among clean segments, how many were flipped away from it."""
    targets = np.asarray(targets)
    noisy_classes = np.asarray(noisy_classes, dtype=np.int64)
    true_classes = np.asarray(true_classes, dtype=np.int64)
    if not (len(targets) == noisy_classes.size == true_classes.size):
        raise ValueError("targets, noisy labels, and truth must cover identical segments")
    assigned = targets.argmax(axis=1)
    corrupted_mask = true_classes != noisy_classes
    clean_mask = ~corrupted_mask
    return CorrectionStats(
        corrected=int((assigned[corrupted_mask] == true_classes[corrupted_mask]).sum()),
        corrupted=int(corrupted_mask.sum()),
        damaged=int((assigned[clean_mask] != true_classes[clean_mask]).sum()),
        clean=int(clean_mask.sum()),
    )


def write_truth(path, corpus: SynthCorpus) -> None:
    """Delimited truth file: utterance_id, interval_start_s, interval_end_s, class."""
    with open(path, "w", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["utterance_id", "interval_start_s", "interval_end_s", "class"])
        for utt in corpus.utterances:
            for t0, t1, cls in utt.intervals:
                writer.writerow([utt.utterance_id, f"{t0:.9g}", f"{t1:.9g}", corpus.class_names[cls]])


def read_truth(path, label_to_index: dict[str, int]) -> dict[str, list[tuple[float, float, int]]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"truth file not found: {path}")
    truth: dict[str, list[tuple[float, float, int]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        header = next(reader, None)
        if header != ["utterance_id", "interval_start_s", "interval_end_s", "class"]:
            raise DataError(f"{path}: bad truth file header {header!r}")
        for row in reader:
            if not row:
                continue
            utt, t0, t1, cls = row
            if cls not in label_to_index:
                raise DataError(f"{path}: unknown class {cls!r} in truth file")
            truth.setdefault(utt, []).append((float(t0), float(t1), label_to_index[cls]))
    return truth
