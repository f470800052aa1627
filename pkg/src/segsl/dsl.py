"""Alternating self-learning: retrain the segment classifier against
targets produced from the previous round's predictions.

Iteration 0 trains a fresh model on the one-hot labels each segment
inherits from its utterance. Every later iteration predicts all
training segments with the previous model, applies one of four update
rules to build new targets, and trains a freshly initialized model on
them. The inherited noisy labels are never modified.

Update rules:
    bdsl - previous predictions used verbatim
    wdsl - convex blend of predictions and the noisy one-hot (weight alpha)
    gsl  - utterance-wide mean prediction, shared by all its segments
    dhl  - one-hot at the argmax of the prediction
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import (
    ArchDescriptor,
    ConvNetModel,
    EpochRecord,
    TrainConfig,
    check_soft_labels,
    create_model,
    derive_seed,
    label_entropy,
    predict_batch,
    train,
)
from .corpus import SegmentCorpus
from .errors import DataError, UsageError

RULE_KINDS = ("bdsl", "wdsl", "gsl", "dhl")
DEFAULT_WDSL_ALPHA = 0.2


@dataclass
class LabelUpdateRule:
    """Which update rule to apply, plus the wdsl blend weight."""

    kind: str
    alpha: float | None = None
    alpha_schedule: list[float] | None = None

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise UsageError(f"unknown update rule {self.kind!r}, expected one of {RULE_KINDS}")
        if self.kind == "wdsl":
            if self.alpha is None and self.alpha_schedule is None:
                self.alpha = DEFAULT_WDSL_ALPHA
            if self.alpha is not None and not (0.0 <= self.alpha <= 1.0):
                raise UsageError(f"alpha must lie in [0, 1], got {self.alpha}")
            if self.alpha_schedule is not None:
                sched = list(self.alpha_schedule)
                if not sched:
                    raise UsageError("alpha_schedule must not be empty")
                if any(not (0.0 <= a <= 1.0) for a in sched):
                    raise UsageError("alpha_schedule values must lie in [0, 1]")
                if any(later > earlier for earlier, later in zip(sched, sched[1:])):
                    raise UsageError("alpha_schedule must be non-increasing")
                self.alpha_schedule = sched
        else:
            if self.alpha is not None or self.alpha_schedule is not None:
                raise UsageError(f"alpha only applies to the wdsl rule, not {self.kind!r}")


def effective_alpha(rule: LabelUpdateRule, update_index: int) -> float:
    """Blend weight for the update_index-th label update (0-based).

    With a schedule, updates beyond its end hold the last value.
    """
    if rule.kind != "wdsl":
        raise ValueError(f"effective_alpha is only defined for wdsl, not {rule.kind!r}")
    if rule.alpha_schedule is not None:
        return rule.alpha_schedule[min(update_index, len(rule.alpha_schedule) - 1)]
    return rule.alpha


def update_bdsl(pred: np.ndarray) -> np.ndarray:
    """Use the prediction itself as the new target."""
    return np.asarray(pred, dtype=np.float64).copy()


def update_wdsl(pred: np.ndarray, noisy: np.ndarray, alpha: float) -> np.ndarray:
    """(1 - alpha) * prediction + alpha * noisy one-hot."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    pred = np.asarray(pred, dtype=np.float64)
    noisy = np.asarray(noisy, dtype=np.float64)
    if pred.shape != noisy.shape:
        raise ValueError("prediction and noisy label disagree in shape")
    return (1.0 - alpha) * pred + alpha * noisy


def update_gsl(utterance_preds) -> np.ndarray:
    """Mean prediction over all segments of one utterance."""
    preds = np.asarray(utterance_preds, dtype=np.float64)
    if preds.ndim != 2 or preds.shape[0] == 0:
        raise ValueError("update_gsl needs a non-empty list of predictions")
    return preds.mean(axis=0)


def update_dhl(pred: np.ndarray) -> np.ndarray:
    """One-hot at the argmax; ties go to the lowest class index."""
    pred = np.asarray(pred, dtype=np.float64)
    out = np.zeros_like(pred)
    out[int(np.argmax(pred))] = 1.0
    return out


def init_noisy_labels(corpus: SegmentCorpus) -> list["SegmentLabelState"]:
    """One label state per segment, seeded with the utterance one-hot."""
    k = corpus.n_classes
    states = []
    for seg in corpus.segments:
        label = corpus.utterance_labels.get(seg.utterance_id)
        if label is None:
            raise DataError(f"utterance {seg.utterance_id!r} has no label")
        onehot = np.zeros(k)
        onehot[label] = 1.0
        states.append(
            SegmentLabelState(
                segment_id=seg.segment_id,
                utterance_id=seg.utterance_id,
                noisy_label=onehot,
                current_target=onehot.copy(),
            )
        )
    return states


@dataclass
class SegmentLabelState:
    segment_id: str
    utterance_id: str
    noisy_label: np.ndarray  # one-hot, immutable for the whole run
    current_target: np.ndarray
    history: list[np.ndarray] = field(default_factory=list)


@dataclass
class IterationDiagnostics:
    iteration: int
    mean_prediction_entropy: float
    changed_fraction: float  # targets whose argmax left the noisy label


@dataclass
class DslRunState:
    """Everything one self-learning run produced, per iteration."""

    iterations: int
    models: list[ConvNetModel]
    label_snapshots: list[np.ndarray]  # targets used to train model t
    diagnostics: list[IterationDiagnostics]
    states: list[SegmentLabelState]
    train_utterances: set[str]
    train_logs: list[list[EpochRecord]]
    rule: LabelUpdateRule | None

    @property
    def final_model(self) -> ConvNetModel:
        return self.models[-1]


def _apply_rule(
    rule: LabelUpdateRule,
    preds: np.ndarray,
    noisy: np.ndarray,
    utterance_ids: list[str],
    update_index: int,
) -> np.ndarray:
    if rule.kind == "bdsl":
        return preds.copy()
    if rule.kind == "wdsl":
        alpha = effective_alpha(rule, update_index)
        return (1.0 - alpha) * preds + alpha * noisy
    if rule.kind == "gsl":
        uniq = {u: i for i, u in enumerate(dict.fromkeys(utterance_ids))}
        idx = np.array([uniq[u] for u in utterance_ids])
        sums = np.zeros((len(uniq), preds.shape[1]))
        np.add.at(sums, idx, preds)
        counts = np.bincount(idx, minlength=len(uniq)).astype(np.float64)
        return sums[idx] / counts[idx, None]
    if rule.kind == "dhl":
        out = np.zeros_like(preds)
        out[np.arange(preds.shape[0]), preds.argmax(axis=1)] = 1.0
        return out
    raise UsageError(f"unknown update rule {rule.kind!r}")


def run_dsl(
    corpus: SegmentCorpus,
    rule: LabelUpdateRule | None,
    iterations: int,
    train_cfg: TrainConfig,
    train_utterances: set[str] | None = None,
    arch: ArchDescriptor | None = None,
    warm_start: bool = False,
) -> DslRunState:
    """Alternate training and label updates for the given iteration count.

    iterations = 0 trains only the baseline model on the noisy one-hot
    labels. Only segments of train_utterances participate; held-out
    utterances are never predicted, relabeled, or trained on. Each
    iteration trains a freshly initialized model (unless warm_start)
    with seeds derived from train_cfg.seed, so runs are reproducible.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if iterations > 0 and rule is None:
        raise UsageError("label updates require an update rule")

    if train_utterances is None:
        train_utterances = set(corpus.utterance_labels)
    segments = [s for s in corpus.segments if s.utterance_id in train_utterances]
    if not segments:
        raise DataError("no training segments selected")
    sub = SegmentCorpus(segments, corpus.utterance_labels, corpus.class_names)
    states = init_noisy_labels(sub)
    noisy = np.stack([st.noisy_label for st in states])
    utt_ids = [s.utterance_id for s in segments]

    if arch is None:
        arch = ArchDescriptor(
            input_shape=segments[0].matrix.shape, n_classes=corpus.n_classes
        )

    models: list[ConvNetModel] = []
    snapshots: list[np.ndarray] = []
    diagnostics: list[IterationDiagnostics] = []
    train_logs: list[list[EpochRecord]] = []

    targets = noisy.copy()
    model = None
    for t in range(iterations + 1):
        if t > 0:
            preds = predict_batch(models[-1], segments)
            targets = _apply_rule(rule, preds, noisy, utt_ids, update_index=t - 1)
            check_soft_labels(targets, corpus.n_classes)
        iter_seed = derive_seed(train_cfg.seed, 2, t)
        cfg_t = replace(train_cfg, seed=iter_seed)
        if model is None or not warm_start:
            model = create_model(arch, seed=derive_seed(iter_seed, 3))
        result = train(model, segments, targets, cfg_t)
        models.append(result.model)
        train_logs.append(result.log)
        snapshots.append(targets.copy())
        for st, tgt in zip(states, targets):
            st.current_target = tgt.copy()
            st.history.append(tgt.copy())

        preds_t = predict_batch(result.model, segments)
        diagnostics.append(
            IterationDiagnostics(
                iteration=t,
                mean_prediction_entropy=float(label_entropy(preds_t).mean()),
                changed_fraction=float(
                    (targets.argmax(axis=1) != noisy.argmax(axis=1)).mean()
                ),
            )
        )

    return DslRunState(
        iterations=iterations,
        models=models,
        label_snapshots=snapshots,
        diagnostics=diagnostics,
        states=states,
        train_utterances=set(train_utterances),
        train_logs=train_logs,
        rule=rule,
    )


def write_label_snapshot(
    path,
    iteration: int,
    rule: LabelUpdateRule | None,
    segment_ids: list[str],
    utterance_ids: list[str],
    targets: np.ndarray,
) -> None:
    """Delimited snapshot: header, then segment, utterance, K targets."""
    kind = rule.kind if rule is not None else "none"
    alpha = ""
    if rule is not None and rule.kind == "wdsl":
        alpha = f"{effective_alpha(rule, max(0, iteration - 1)):.9g}"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# iteration={iteration} rule={kind} alpha={alpha or 'none'}\n")
        for sid, uid, row in zip(segment_ids, utterance_ids, targets):
            probs = ",".join(f"{p:.9g}" for p in row)
            fh.write(f"{sid},{uid},{probs}\n")


def read_label_snapshot(path) -> tuple[dict, list[str], list[str], np.ndarray]:
    """Inverse of write_label_snapshot; returns (header, sids, uids, targets)."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise DataError(f"{path}: missing snapshot header")
    header = {}
    for token in lines[0][1:].split():
        key, _, value = token.partition("=")
        header[key] = value
    sids, uids, rows = [], [], []
    for line in lines[1:]:
        if not line:
            continue
        parts = line.split(",")
        sids.append(parts[0])
        uids.append(parts[1])
        rows.append([float(v) for v in parts[2:]])
    return header, sids, uids, np.array(rows)
