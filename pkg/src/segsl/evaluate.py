"""Utterance-level stratified cross-validation and accuracy metrics.

Folds partition utterances (never individual segments), stratified so
per-class counts across folds differ by at most one. Out-of-fold
predictions come from self-learning runs that excluded the evaluated
fold entirely, which the provenance bookkeeping can verify.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import TrainConfig, derive_seed, predict_batch
from .corpus import SegmentCorpus
from .dsl import DslRunState, LabelUpdateRule, run_dsl
from .errors import DataError

DEFAULT_FOLDS = 10


@dataclass
class FoldAssignment:
    fold_of: dict[str, int]
    k: int
    seed: int

    def fold_utterances(self, fold: int) -> set[str]:
        return {u for u, f in self.fold_of.items() if f == fold}


def stratified_folds(utterance_labels: dict[str, int], k: int = DEFAULT_FOLDS, seed: int = 0) -> FoldAssignment:
    """Shuffle each class with the seed and deal its utterances round-robin."""
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    by_class: dict[int, list[str]] = {}
    for utt in sorted(utterance_labels):
        by_class.setdefault(utterance_labels[utt], []).append(utt)
    deficient = {c: len(u) for c, u in by_class.items() if len(u) < k}
    if deficient:
        raise DataError(
            f"classes with fewer than {k} utterances cannot be stratified: {deficient}"
        )
    rng = np.random.default_rng(seed)
    fold_of = {}
    for c in sorted(by_class):
        utts = by_class[c]
        order = rng.permutation(len(utts))
        for j, idx in enumerate(order):
            fold_of[utts[idx]] = j % k
    return FoldAssignment(fold_of=fold_of, k=k, seed=seed)


@dataclass
class OutOfFoldResult:
    """One out-of-sample probability row per corpus segment."""

    probs: np.ndarray  # (n_segments, K) aligned with corpus.segments
    segment_ids: list[str]
    utterance_ids: list[str]
    fold_of_segment: np.ndarray
    fold_runs: dict[int, DslRunState]
    provenance: dict[int, set[str]]  # fold -> utterances its models trained on


def out_of_fold_predictions(
    corpus: SegmentCorpus,
    folds: FoldAssignment,
    rule: LabelUpdateRule | None,
    train_cfg: TrainConfig,
    iterations: int,
) -> OutOfFoldResult:
    """Run self-learning once per fold and predict the held-out segments."""
    all_utts = set(corpus.utterance_labels)
    missing = set(s.utterance_id for s in corpus.segments) - set(folds.fold_of)
    if missing:
        raise DataError(f"utterances without a fold assignment: {sorted(missing)[:5]}")

    n = len(corpus.segments)
    probs = np.full((n, corpus.n_classes), np.nan)
    fold_of_segment = np.array(
        [folds.fold_of[s.utterance_id] for s in corpus.segments], dtype=np.int64
    )
    fold_runs: dict[int, DslRunState] = {}
    provenance: dict[int, set[str]] = {}

    for f in range(folds.k):
        eval_utts = folds.fold_utterances(f)
        train_utts = all_utts - eval_utts
        cfg_f = replace(train_cfg, seed=derive_seed(train_cfg.seed, 1, f))
        run = run_dsl(corpus, rule, iterations, cfg_f, train_utterances=train_utts)
        fold_runs[f] = run
        provenance[f] = run.train_utterances
        idx = np.flatnonzero(fold_of_segment == f)
        if idx.size:
            probs[idx] = predict_batch(run.final_model, [corpus.segments[i] for i in idx])

    if np.isnan(probs).any():
        raise DataError("some segments never received an out-of-fold prediction")
    return OutOfFoldResult(
        probs=probs,
        segment_ids=corpus.segment_ids,
        utterance_ids=corpus.segment_utterances,
        fold_of_segment=fold_of_segment,
        fold_runs=fold_runs,
        provenance=provenance,
    )


def verify_no_leakage(result: OutOfFoldResult, folds: FoldAssignment) -> int:
    """Count evaluated utterances that appear in their own model's training set."""
    leaks = 0
    for f in range(folds.k):
        trained_on = result.provenance[f]
        for utt in folds.fold_utterances(f):
            if utt in trained_on:
                leaks += 1
    return leaks


@dataclass
class MetricsReport:
    wa: float
    ua: float
    confusion: np.ndarray  # (K, K) counts, rows are true classes
    per_class_recall: np.ndarray
    class_names: list[str] = field(default_factory=list)


def utterance_metrics(true_labels, predicted_labels, n_classes: int, class_names=None) -> MetricsReport:
    """Weighted accuracy (pooled fraction correct) and unweighted accuracy
    (mean per-class recall over classes with support)."""
    true_labels = np.asarray(true_labels, dtype=np.int64)
    predicted_labels = np.asarray(predicted_labels, dtype=np.int64)
    if true_labels.size == 0:
        raise DataError("cannot compute metrics on an empty label set")
    if true_labels.shape != predicted_labels.shape:
        raise ValueError("true and predicted label arrays disagree in length")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (true_labels, predicted_labels), 1)
    support = confusion.sum(axis=1)
    with np.errstate(invalid="ignore"):
        recall = np.where(support > 0, np.diag(confusion) / np.maximum(support, 1), np.nan)
    wa = float(np.trace(confusion) / confusion.sum())
    ua = float(np.nanmean(recall))
    return MetricsReport(
        wa=wa,
        ua=ua,
        confusion=confusion,
        per_class_recall=recall,
        class_names=list(class_names) if class_names else [],
    )


def per_class_report(report: MetricsReport) -> list[tuple[str, int, float]]:
    """(class name, support, recall) rows for plotting or tabulation."""
    rows = []
    support = report.confusion.sum(axis=1)
    for c in range(report.confusion.shape[0]):
        name = report.class_names[c] if report.class_names else str(c)
        rows.append((name, int(support[c]), float(report.per_class_recall[c])))
    return rows


def metrics_document(report: MetricsReport, config: dict) -> dict:
    """JSON-shaped metrics document with the run's effective config."""
    return {
        "wa": report.wa,
        "ua": report.ua,
        "confusion": report.confusion.tolist(),
        "per_class_recall": [
            None if np.isnan(r) else float(r) for r in report.per_class_recall
        ],
        "class_names": report.class_names,
        "pooling": "micro",
        "config": config,
    }


def write_metrics(path, report: MetricsReport, config: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metrics_document(report, config), fh, indent=2)
        fh.write("\n")


def read_metrics(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read metrics document {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed metrics document: {exc}") from exc
