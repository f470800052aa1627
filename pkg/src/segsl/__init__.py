"""Segment-level self-learning pipeline for noisy-label audio classification."""

from .aggregate import AggregationConfig, UtteranceRepresentation, percentile, utterance_representation
from .audio import Waveform, read_wav, resample_linear, write_wav_pcm16
from .backbone import (
    ArchDescriptor,
    ConvNetModel,
    TrainConfig,
    create_model,
    gradients,
    kl_divergence,
    label_entropy,
    predict_batch,
    predict_proba,
    soft_cross_entropy,
    train,
)
from .corpus import Manifest, SegmentCorpus, build_corpus, load_manifest
from .dsl import (
    LabelUpdateRule,
    effective_alpha,
    init_noisy_labels,
    run_dsl,
    update_bdsl,
    update_dhl,
    update_gsl,
    update_wdsl,
)
from .dsp import (
    MelFilterbank,
    SegmentFeatures,
    build_mel_filterbank,
    frame_signal,
    log_mel_frames,
    mel_scale,
    segment_utterance,
    stft_power,
)
from .errors import DataError, NumericError, PipelineError, UsageError
from .evaluate import (
    FoldAssignment,
    MetricsReport,
    out_of_fold_predictions,
    per_class_report,
    stratified_folds,
    utterance_metrics,
    verify_no_leakage,
)
from .forest import Forest, ForestConfig, fit_forest, predict_forest
from .synth import SynthSpec, correction_rate, generate_corpus, segment_truth

__version__ = "0.1.0"
