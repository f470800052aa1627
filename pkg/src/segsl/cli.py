"""Command-line pipeline: synth-gen -> featurize -> train -> evaluate -> report.

Stages communicate only through documented files (manifest, feature
cache, predictions, label snapshots, metrics documents), every command
echoes its full effective configuration, and all randomness flows from
the --seed / --seed2 flags via documented sub-seed derivation. Exit
codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import dsp
from .aggregate import AggregationConfig, utterance_representation, write_representations
from .audio import read_wav, resample_linear, write_wav_pcm16
from .backbone import TrainConfig, save_model, write_training_log
from .cache import read_feature_cache, write_feature_cache
from .corpus import ManifestRow, SegmentCorpus, build_corpus, load_manifest, save_manifest
from .dsl import LabelUpdateRule, write_label_snapshot
from .errors import DataError, NumericError, PipelineError, UsageError
from .evaluate import (
    MetricsReport,
    out_of_fold_predictions,
    per_class_report,
    read_metrics,
    stratified_folds,
    utterance_metrics,
    write_metrics,
)
from .forest import ForestConfig, fit_forest, predict_forest
from .report import (
    accuracy_figure,
    alpha_sweep_figure,
    comparison_rows,
    correction_summary,
    entropy_figure,
    per_class_figure,
    read_diagnostics,
    write_comparison,
    write_correction_summary,
)
from .synth import SynthSpec, correction_rate, generate_corpus, read_truth, segment_truth, write_truth

RULE_CHOICES = ("bdsl", "wdsl", "gsl", "dhl", "none")


def _echo(config: dict) -> None:
    for key, value in config.items():
        print(f"{key}={value}")


def _write_config(out_dir: Path, config: dict) -> None:
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, default=str)
        fh.write("\n")


def cmd_synth_gen(
    out_dir,
    n_classes: int = 4,
    per_class: int = 60,
    seconds: float = 1.4,
    sample_rate: int = 16000,
    contamination: float = 0.2,
    snr_db: float = 10.0,
    seed: int = 17,
    force: bool = False,
) -> Path:
    """Generate a synthetic corpus: WAV files, manifest, and truth file."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise DataError(f"output directory {out_dir} is not empty; pass --force to overwrite")
    spec = SynthSpec(
        n_classes=n_classes,
        utterances_per_class=per_class,
        utterance_seconds=seconds,
        sample_rate=sample_rate,
        contamination_rate=contamination,
        snr_db=snr_db,
        seed=seed,
    )
    config = {
        "command": "synth-gen",
        "classes": n_classes,
        "per_class": per_class,
        "utterances": n_classes * per_class,
        "seconds": seconds,
        "sample_rate": sample_rate,
        "contamination": contamination,
        "snr_db": snr_db,
        "seed": seed,
    }
    _echo(config)
    corpus = generate_corpus(spec)
    wav_dir = out_dir / "wavs"
    wav_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for utt in corpus.utterances:
        wav_path = wav_dir / f"{utt.utterance_id}.wav"
        write_wav_pcm16(wav_path, utt.waveform)
        rows.append(
            ManifestRow(utt.utterance_id, wav_path, corpus.class_names[utt.label], "synth")
        )
    header = [f"{k}={v}" for k, v in config.items() if k != "command"]
    save_manifest(out_dir / "manifest.csv", rows, header_comments=header)
    write_truth(out_dir / "truth.csv", corpus)
    _write_config(out_dir, config)
    print(f"wrote {len(rows)} utterances to {out_dir}")
    return out_dir


def cmd_featurize(
    manifest_path,
    out_cache,
    window_ms: float = dsp.DEFAULT_WINDOW_MS,
    hop_ms: float = dsp.DEFAULT_HOP_MS,
    n_fft: int = dsp.DEFAULT_N_FFT,
    n_mels: int = dsp.DEFAULT_N_MELS,
    f_min: float = dsp.DEFAULT_F_MIN,
    f_max: float = dsp.DEFAULT_F_MAX,
    seg_len: int = dsp.DEFAULT_SEG_LEN,
    seg_hop_ms: float = 30.0,
    target_rate: int = dsp.DEFAULT_SAMPLE_RATE,
) -> Path:
    """Extract log-mel segments for every manifest utterance into a cache."""
    seg_hop = max(1, int(round(seg_hop_ms / hop_ms)))
    config = {
        "command": "featurize",
        "window_ms": window_ms,
        "hop_ms": hop_ms,
        "n_fft": n_fft,
        "n_mels": n_mels,
        "f_min": f_min,
        "f_max": f_max,
        "seg_len": seg_len,
        "seg_hop_ms": seg_hop_ms,
        "seg_hop_frames": seg_hop,
        "target_rate": target_rate,
    }
    _echo(config)
    manifest = load_manifest(manifest_path)
    filterbank = dsp.build_mel_filterbank(target_rate, n_fft, n_mels, f_min, f_max)
    segments = []
    for row in manifest.rows:
        waveform = read_wav(row.wav_path)
        if waveform.sample_rate != target_rate:
            waveform = resample_linear(waveform, target_rate)
        logmel = dsp.log_mel_frames(waveform, filterbank, window_ms, hop_ms)
        utt_segments = dsp.segment_utterance(logmel, seg_len, seg_hop, row.utterance_id)
        segments.extend(utt_segments)
        print(f"{row.utterance_id} segments={len(utt_segments)}")
    out_cache = Path(out_cache)
    out_cache.parent.mkdir(parents=True, exist_ok=True)
    write_feature_cache(out_cache, segments)
    print(f"wrote {len(segments)} segments to {out_cache}")
    return out_cache


def _predictions_header(config: dict) -> str:
    keys = ("rule", "alpha", "iterations", "folds", "seed")
    return "# " + " ".join(f"{k}={config.get(k)}" for k in keys)


def write_predictions(path, header_config: dict, segment_ids, utterance_ids, fold_of_segment, probs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_predictions_header(header_config) + "\n")
        fh.write("segment_id,utterance_id,fold," +
                 ",".join(f"p{i}" for i in range(probs.shape[1])) + "\n")
        for sid, uid, fold, row in zip(segment_ids, utterance_ids, fold_of_segment, probs):
            fh.write(f"{sid},{uid},{fold}," + ",".join(f"{p:.9g}" for p in row) + "\n")


def read_predictions(path):
    """Returns (header dict, segment_ids, utterance_ids, folds, probs)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"predictions file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise DataError(f"{path}: missing predictions header")
    header = {}
    for token in lines[0][1:].split():
        key, _, value = token.partition("=")
        header[key] = value
    sids, uids, folds, rows = [], [], [], []
    for line in lines[2:]:
        if not line:
            continue
        parts = line.split(",")
        sids.append(parts[0])
        uids.append(parts[1])
        folds.append(int(parts[2]))
        rows.append([float(v) for v in parts[3:]])
    if not rows:
        raise DataError(f"{path}: no predictions")
    return header, sids, uids, np.array(folds), np.array(rows)


def cmd_train(
    cache_path,
    manifest_path,
    rule_name: str,
    out_dir,
    alpha: float | None = None,
    alpha_schedule: list[float] | None = None,
    iterations: int = 1,
    folds: int = 10,
    seed: int = 0,
    max_epochs: int = 8,
    batch_size: int = 128,
    initial_lr: float = 0.001,
    lr_decay_rate: float = 0.8,
    decay_every_epochs: int = 2,
    patience: int = 3,
    optimizer: str = "adam",
    truth_path=None,
    window_ms: float = dsp.DEFAULT_WINDOW_MS,
    hop_ms: float = dsp.DEFAULT_HOP_MS,
) -> Path:
    """Out-of-fold self-learning: per fold, train (and relabel) on the
    other folds, then predict the held-out segments with the final model."""
    if rule_name not in RULE_CHOICES:
        raise UsageError(f"unknown rule {rule_name!r}, expected one of {RULE_CHOICES}")
    if rule_name == "none":
        rule = None
        iterations = 0  # baseline: no label updates
    else:
        kwargs = {}
        if rule_name == "wdsl":
            kwargs = {"alpha": alpha, "alpha_schedule": alpha_schedule}
        elif alpha is not None or alpha_schedule is not None:
            raise UsageError(f"--alpha only applies to the wdsl rule, not {rule_name!r}")
        rule = LabelUpdateRule(rule_name, **kwargs)

    config = {
        "command": "train",
        "rule": rule_name,
        "alpha": (rule.alpha if rule is not None and rule.kind == "wdsl" else None),
        "alpha_schedule": (rule.alpha_schedule if rule is not None else None),
        "iterations": iterations,
        "folds": folds,
        "seed": seed,
        "max_epochs": max_epochs,
        "batch_size": batch_size,
        "initial_lr": initial_lr,
        "lr_decay_rate": lr_decay_rate,
        "decay_every_epochs": decay_every_epochs,
        "patience": patience,
        "optimizer": optimizer,
        "window_ms": window_ms,
        "hop_ms": hop_ms,
        "cache": str(cache_path),
        "manifest": str(manifest_path),
        "truth": str(truth_path) if truth_path else None,
    }
    _echo(config)

    manifest = load_manifest(manifest_path)
    segments = read_feature_cache(cache_path)
    corpus = build_corpus(segments, manifest)
    cfg = TrainConfig(
        initial_lr=initial_lr,
        lr_decay_rate=lr_decay_rate,
        decay_every_epochs=decay_every_epochs,
        batch_size=batch_size,
        early_stop_patience=patience,
        max_epochs=max_epochs,
        seed=seed,
        optimizer=optimizer,
    )
    assignment = stratified_folds(corpus.utterance_labels, folds, seed)
    result = out_of_fold_predictions(corpus, assignment, rule, cfg, iterations)

    out_dir = Path(out_dir)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    (out_dir / "models").mkdir(exist_ok=True)
    (out_dir / "logs").mkdir(exist_ok=True)
    _write_config(out_dir, config)
    write_predictions(
        out_dir / "predictions.csv",
        config,
        result.segment_ids,
        result.utterance_ids,
        result.fold_of_segment,
        result.probs,
    )

    seg_truth = None
    if truth_path:
        truth = read_truth(truth_path, manifest.label_to_index)
        seg_len = segments[0].matrix.shape[1]
        seg_truth = segment_truth(
            truth, corpus.segments, corpus.utterance_labels, window_ms, hop_ms, seg_len
        )
    seg_index = {sid: i for i, sid in enumerate(corpus.segment_ids)}
    labels_arr = corpus.segment_label_indices()

    with open(out_dir / "diagnostics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["fold", "iteration", "mean_entropy", "changed_fraction",
             "corrected", "corrupted", "damaged", "clean"]
        )
        for f, run in sorted(result.fold_runs.items()):
            run_idx = np.array([seg_index[st.segment_id] for st in run.states])
            for t, diag in enumerate(run.diagnostics):
                stats = ["", "", "", ""]
                if seg_truth is not None:
                    cs = correction_rate(
                        run.label_snapshots[t], labels_arr[run_idx], seg_truth[run_idx]
                    )
                    stats = [cs.corrected, cs.corrupted, cs.damaged, cs.clean]
                writer.writerow(
                    [f, t, f"{diag.mean_prediction_entropy:.9g}",
                     f"{diag.changed_fraction:.9g}", *stats]
                )
            for t, snapshot in enumerate(run.label_snapshots):
                write_label_snapshot(
                    out_dir / "labels" / f"fold{f}_iter{t}.csv",
                    t,
                    run.rule,
                    [st.segment_id for st in run.states],
                    [st.utterance_id for st in run.states],
                    snapshot,
                )
            for t, model in enumerate(run.models):
                save_model(out_dir / "models" / f"fold{f}_iter{t}.segm", model)
            for t, log in enumerate(run.train_logs):
                write_training_log(out_dir / "logs" / f"fold{f}_iter{t}.log", log)

    print(f"wrote out-of-fold predictions for {len(result.segment_ids)} segments to {out_dir}")
    return out_dir


def cmd_evaluate(
    predictions_path,
    manifest_path,
    out_dir,
    beta_low: float = 0.2,
    beta_high: float = 0.3,
    trees: int = 100,
    folds2: int = 10,
    seed2: int = 0,
) -> Path:
    """Aggregate segment predictions per utterance and score them with a
    random forest under a second stratified cross-validation."""
    header, sids, uids, _folds, probs = read_predictions(predictions_path)
    manifest = load_manifest(manifest_path, check_paths=False)
    config = {
        "command": "evaluate",
        "rule": header.get("rule"),
        "alpha": None if header.get("alpha") in (None, "None") else float(header["alpha"]),
        "iterations": int(header.get("iterations", 0)),
        "folds": int(header.get("folds", 0)),
        "seed": int(header.get("seed", 0)),
        "beta_low": beta_low,
        "beta_high": beta_high,
        "trees": trees,
        "folds2": folds2,
        "seed2": seed2,
    }
    _echo(config)

    labels = manifest.utterance_labels()
    by_utt: dict[str, list[int]] = {}
    for i, uid in enumerate(uids):
        by_utt.setdefault(uid, []).append(i)
    missing = sorted(set(labels) - set(by_utt))
    if missing:
        raise DataError(f"utterances without predictions: {missing[:5]}")

    agg = AggregationConfig(beta_low=beta_low, beta_high=beta_high)
    utt_ids = [r.utterance_id for r in manifest.rows]
    reps = [
        utterance_representation(probs[by_utt[uid]], agg, utterance_id=uid)
        for uid in utt_ids
    ]
    x = np.stack([r.values for r in reps])
    y = np.array([labels[uid] for uid in utt_ids])

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name_of = {uid: manifest.rows[i].label for i, uid in enumerate(utt_ids)}
    write_representations(out_dir / "representations.csv", reps, name_of)

    assignment = stratified_folds(labels, folds2, seed2)
    predicted = np.full(y.size, -1, dtype=np.int64)
    for f in range(folds2):
        eval_mask = np.array([assignment.fold_of[uid] == f for uid in utt_ids])
        forest = fit_forest(
            x[~eval_mask], y[~eval_mask], ForestConfig(n_trees=trees, seed=seed2 + 1000 * f)
        )
        if eval_mask.any():
            predicted[eval_mask] = predict_forest(forest, x[eval_mask])[0]

    report = utterance_metrics(y, predicted, manifest.n_classes, manifest.class_names)
    write_metrics(out_dir / "metrics.json", report, config)
    with open(out_dir / "per_class.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "support", "recall"])
        for name, support, recall in per_class_report(report):
            writer.writerow([name, support, f"{recall:.9g}"])
    print(f"wa={report.wa:.6f} ua={report.ua:.6f}")
    return out_dir


def cmd_report(metrics_paths, out_dir, diagnostics_paths=(), figures: bool = True) -> Path:
    """Join metrics documents into a comparison table plus figures."""
    config = {
        "command": "report",
        "metrics": [str(p) for p in metrics_paths],
        "diagnostics": [str(p) for p in diagnostics_paths],
        "figures": figures,
    }
    _echo(config)
    documents = []
    for path in metrics_paths:
        path = Path(path)
        if not path.exists():
            raise DataError(f"metrics document not found: {path}")
        documents.append((path.stem if path.stem != "metrics" else path.parent.name, read_metrics(path)))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = comparison_rows(documents)
    write_comparison(out_dir / "comparison.csv", rows)

    summary = []
    if diagnostics_paths:
        named = []
        for path in diagnostics_paths:
            path = Path(path)
            named.append((path.stem if path.stem != "diagnostics" else path.parent.name,
                          read_diagnostics(path)))
        summary = correction_summary(named)
        write_correction_summary(out_dir / "correction.csv", summary)

    if figures:
        accuracy_figure(documents, out_dir / "accuracy.png")
        per_class_figure(documents, out_dir / "per_class.png")
        if summary:
            entropy_figure(summary, out_dir / "entropy.png")
        alpha_sweep_figure(documents, out_dir / "alpha_sweep.png")
    print(f"wrote comparison of {len(documents)} runs to {out_dir}")
    return out_dir


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segsl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic labeled corpus")
    p.add_argument("out_dir")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=60)
    p.add_argument("--seconds", type=float, default=1.4)
    p.add_argument("--sample-rate", type=int, default=16000)
    p.add_argument("--contamination", type=float, default=0.2)
    p.add_argument("--snr", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=17)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("featurize", help="extract log-mel segment features")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--window-ms", type=float, default=dsp.DEFAULT_WINDOW_MS)
    p.add_argument("--hop-ms", type=float, default=dsp.DEFAULT_HOP_MS)
    p.add_argument("--n-fft", type=int, default=dsp.DEFAULT_N_FFT)
    p.add_argument("--n-mels", type=int, default=dsp.DEFAULT_N_MELS)
    p.add_argument("--fmin", type=float, default=dsp.DEFAULT_F_MIN)
    p.add_argument("--fmax", type=float, default=dsp.DEFAULT_F_MAX)
    p.add_argument("--seg-len", type=int, default=dsp.DEFAULT_SEG_LEN)
    p.add_argument("--seg-hop-ms", type=float, default=30.0)
    p.add_argument("--target-rate", type=int, default=dsp.DEFAULT_SAMPLE_RATE)

    p = sub.add_parser("train", help="out-of-fold self-learning over the corpus")
    p.add_argument("cache")
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.add_argument("--rule", required=True, choices=RULE_CHOICES)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--alpha-schedule", type=str, default=None,
                   help="comma-separated non-increasing values, wdsl only")
    p.add_argument("--iterations", type=int, default=1)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-epochs", type=int, default=8)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--lr-decay", type=float, default=0.8)
    p.add_argument("--decay-every", type=int, default=2)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--truth", default=None, help="truth file for correction diagnostics")
    p.add_argument("--window-ms", type=float, default=dsp.DEFAULT_WINDOW_MS)
    p.add_argument("--hop-ms", type=float, default=dsp.DEFAULT_HOP_MS)

    p = sub.add_parser("evaluate", help="aggregate predictions and score with a forest")
    p.add_argument("predictions")
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.add_argument("--beta-low", type=float, default=0.2)
    p.add_argument("--beta-high", type=float, default=0.3)
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--folds2", type=int, default=10)
    p.add_argument("--seed2", type=int, default=0)

    p = sub.add_parser("report", help="tabulate and plot one or more metric documents")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics", nargs="*", default=())
    p.add_argument("--no-figures", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "synth-gen":
            cmd_synth_gen(
                args.out_dir,
                n_classes=args.classes,
                per_class=args.per_class,
                seconds=args.seconds,
                sample_rate=args.sample_rate,
                contamination=args.contamination,
                snr_db=args.snr,
                seed=args.seed,
                force=args.force,
            )
        elif args.command == "featurize":
            cmd_featurize(
                args.manifest,
                args.out,
                window_ms=args.window_ms,
                hop_ms=args.hop_ms,
                n_fft=args.n_fft,
                n_mels=args.n_mels,
                f_min=args.fmin,
                f_max=args.fmax,
                seg_len=args.seg_len,
                seg_hop_ms=args.seg_hop_ms,
                target_rate=args.target_rate,
            )
        elif args.command == "train":
            schedule = None
            if args.alpha_schedule:
                try:
                    schedule = [float(v) for v in args.alpha_schedule.split(",")]
                except ValueError:
                    raise UsageError(f"bad --alpha-schedule {args.alpha_schedule!r}") from None
            cmd_train(
                args.cache,
                args.manifest,
                args.rule,
                args.out_dir,
                alpha=args.alpha,
                alpha_schedule=schedule,
                iterations=args.iterations,
                folds=args.folds,
                seed=args.seed,
                max_epochs=args.max_epochs,
                batch_size=args.batch_size,
                initial_lr=args.lr,
                lr_decay_rate=args.lr_decay,
                decay_every_epochs=args.decay_every,
                patience=args.patience,
                optimizer=args.optimizer,
                truth_path=args.truth,
                window_ms=args.window_ms,
                hop_ms=args.hop_ms,
            )
        elif args.command == "evaluate":
            cmd_evaluate(
                args.predictions,
                args.manifest,
                args.out_dir,
                beta_low=args.beta_low,
                beta_high=args.beta_high,
                trees=args.trees,
                folds2=args.folds2,
                seed2=args.seed2,
            )
        elif args.command == "report":
            cmd_report(
                args.metrics,
                args.out,
                diagnostics_paths=args.diagnostics,
                figures=not args.no_figures,
            )
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except PipelineError as exc:  # pragma: no cover - defensive
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
