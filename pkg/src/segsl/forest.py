"""Random-forest classifier for the utterance representations.

Trees are grown on bootstrap samples with Gini-impurity splits over a
random ceil(sqrt(d)) feature subset per node, until nodes are pure or
too small to split. Thresholds sit halfway between consecutive sorted
feature values and tests are "x <= threshold". Tree t draws its
randomness from seed + t, so serial and parallel fits coincide.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass
class ForestConfig:
    n_trees: int = 100
    max_features: str = "sqrt"
    min_samples_split: int = 2
    max_depth: int | None = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_features != "sqrt":
            raise ValueError("only sqrt feature subsampling is supported")


@dataclass
class DecisionTree:
    """Flat node arrays; feature < 0 marks a leaf."""

    feature: np.ndarray  # int32
    threshold: np.ndarray  # float64
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    counts: np.ndarray  # (n_nodes, K) float64 class counts at leaves

    def leaf_distribution(self, x: np.ndarray) -> np.ndarray:
        node = 0
        while self.feature[node] >= 0:
            if x[self.feature[node]] <= self.threshold[node]:
                node = self.left[node]
            else:
                node = self.right[node]
        c = self.counts[node]
        return c / c.sum()


@dataclass
class Forest:
    trees: list[DecisionTree]
    n_classes: int
    n_features: int
    config: ForestConfig
    oob_accuracy: float | None = None
    bootstrap_indices: list[np.ndarray] = field(default_factory=list, repr=False)


def _best_split(x, y, k, feature_ids):
    """Lowest weighted-Gini split over the candidate features.

    Returns (feature, threshold, gini) or None when every candidate
    feature is constant on this node.
    """
    n = y.size
    onehot = np.eye(k)[y]
    best = None
    for f in feature_ids:
        v = x[:, f]
        order = np.argsort(v, kind="stable")
        vs = v[order]
        cuts = np.flatnonzero(vs[:-1] < vs[1:])
        if cuts.size == 0:
            continue
        cum = np.cumsum(onehot[order], axis=0)
        left = cum[cuts]
        right = cum[-1] - left
        nl = (cuts + 1).astype(np.float64)
        nr = n - nl
        gini_l = 1.0 - ((left / nl[:, None]) ** 2).sum(axis=1)
        gini_r = 1.0 - ((right / nr[:, None]) ** 2).sum(axis=1)
        weighted = (nl * gini_l + nr * gini_r) / n
        i = int(np.argmin(weighted))
        if best is None or weighted[i] < best[2]:
            thr = (vs[cuts[i]] + vs[cuts[i] + 1]) / 2.0
            best = (int(f), float(thr), float(weighted[i]))
    return best


def _grow_tree(x, y, k, cfg: ForestConfig, rng) -> DecisionTree:
    m = math.ceil(math.sqrt(x.shape[1]))
    feature, threshold, left, right, counts = [], [], [], [], []

    stack = [(np.arange(y.size), 0, None, None)]  # (samples, depth, parent, side)
    while stack:
        samples, depth, parent, side = stack.pop()
        node_id = len(feature)
        if parent is not None:
            (left if side == "l" else right)[parent] = node_id
        ys = y[samples]
        node_counts = np.bincount(ys, minlength=k).astype(np.float64)

        splittable = (
            samples.size >= cfg.min_samples_split
            and np.count_nonzero(node_counts) > 1
            and (cfg.max_depth is None or depth < cfg.max_depth)
        )
        split = None
        if splittable:
            feature_ids = rng.choice(x.shape[1], size=m, replace=False)
            split = _best_split(x[samples], ys, k, feature_ids)
        if split is None:
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            counts.append(node_counts)
            continue

        f, thr, _ = split
        feature.append(f)
        threshold.append(thr)
        left.append(-1)
        right.append(-1)
        counts.append(node_counts)
        mask = x[samples, f] <= thr
        # push right first so the left child is built (and numbered) first
        stack.append((samples[~mask], depth + 1, node_id, "r"))
        stack.append((samples[mask], depth + 1, node_id, "l"))

    return DecisionTree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        counts=np.stack(counts),
    )


def fit_forest(x, y, cfg: ForestConfig | None = None) -> Forest:
    """Fit a seeded, deterministic forest on (n, d) features and int labels."""
    if cfg is None:
        cfg = ForestConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise ValueError("x must be (n, d) with one label per row")
    if y.size < 2:
        raise DataError("need at least 2 training points")
    classes = np.unique(y)
    if classes.size < 2:
        raise DataError("training data contains a single class")
    k = int(y.max()) + 1

    trees = []
    boot_idx = []
    oob_votes = np.zeros((y.size, k))
    for t in range(cfg.n_trees):
        rng = np.random.default_rng(cfg.seed + t)
        if cfg.bootstrap:
            sample = rng.integers(0, y.size, size=y.size)
        else:
            sample = np.arange(y.size)
        tree = _grow_tree(x[sample], y[sample], k, cfg, rng)
        trees.append(tree)
        boot_idx.append(sample)
        if cfg.bootstrap:
            oob = np.setdiff1d(np.arange(y.size), sample, assume_unique=False)
            for i in oob:
                oob_votes[i] += tree.leaf_distribution(x[i])

    oob_accuracy = None
    if cfg.bootstrap:
        covered = oob_votes.sum(axis=1) > 0
        if covered.any():
            oob_accuracy = float(
                (oob_votes[covered].argmax(axis=1) == y[covered]).mean()
            )
    return Forest(
        trees=trees,
        n_classes=k,
        n_features=x.shape[1],
        config=cfg,
        oob_accuracy=oob_accuracy,
        bootstrap_indices=boot_idx,
    )


def predict_forest(forest: Forest, x) -> tuple[np.ndarray, np.ndarray]:
    """Predicted classes and mean leaf distributions for (n, d) inputs."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != forest.n_features:
        raise ValueError(
            f"feature dimension {x.shape[1]} does not match forest ({forest.n_features})"
        )
    probs = np.zeros((x.shape[0], forest.n_classes))
    for tree in forest.trees:
        for i in range(x.shape[0]):
            probs[i] += tree.leaf_distribution(x[i])
    probs /= len(forest.trees)
    return probs.argmax(axis=1), probs


FOREST_MAGIC = b"SEGT"
FOREST_VERSION = 1


def save_forest(path, forest: Forest) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", FOREST_MAGIC, FOREST_VERSION))
        fh.write(
            struct.pack(
                "<IIIi",
                len(forest.trees),
                forest.n_classes,
                forest.n_features,
                forest.config.seed,
            )
        )
        for tree in forest.trees:
            fh.write(struct.pack("<I", tree.feature.size))
            fh.write(tree.feature.astype("<i4").tobytes())
            fh.write(tree.threshold.astype("<f8").tobytes())
            fh.write(tree.left.astype("<i4").tobytes())
            fh.write(tree.right.astype("<i4").tobytes())
            fh.write(tree.counts.astype("<f8").tobytes())


def load_forest(path) -> Forest:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 24 or raw[:4] != FOREST_MAGIC:
        raise DataError(f"{path}: not a forest checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FOREST_VERSION:
        raise DataError(f"{path}: unsupported forest version {version}")
    n_trees, k, d, seed = struct.unpack_from("<IIIi", raw, 8)
    pos = 24
    trees = []
    for _ in range(n_trees):
        (n_nodes,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        feature = np.frombuffer(raw, dtype="<i4", count=n_nodes, offset=pos)
        pos += 4 * n_nodes
        threshold = np.frombuffer(raw, dtype="<f8", count=n_nodes, offset=pos)
        pos += 8 * n_nodes
        left = np.frombuffer(raw, dtype="<i4", count=n_nodes, offset=pos)
        pos += 4 * n_nodes
        right = np.frombuffer(raw, dtype="<i4", count=n_nodes, offset=pos)
        pos += 4 * n_nodes
        counts = np.frombuffer(raw, dtype="<f8", count=n_nodes * k, offset=pos)
        pos += 8 * n_nodes * k
        trees.append(
            DecisionTree(
                feature=feature.copy(),
                threshold=threshold.copy(),
                left=left.copy(),
                right=right.copy(),
                counts=counts.reshape(n_nodes, k).copy(),
            )
        )
    return Forest(
        trees=trees,
        n_classes=k,
        n_features=d,
        config=ForestConfig(n_trees=n_trees, seed=seed),
    )
