"""Segment classifier: a compact convolutional network with explicit
backpropagation, soft-target cross-entropy training, and an Adam/SGD
optimizer with exponential learning-rate decay and early stopping.

The network is conv3x3(c1)-relu-maxpool2 -> conv3x3(c2)-relu-maxpool2
-> global average pool -> dense -> softmax, all in double precision so
analytic gradients can be checked against finite differences. Features
are standardized per mel band with statistics taken from the training
data and stored on the model.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .dsp import SegmentFeatures
from .errors import DataError, NumericError

# Predictions are clamped to [PROB_FLOOR, 1] inside logarithms.
PROB_FLOOR = 1e-12

SIMPLEX_TOL = 1e-9


def check_soft_labels(arr: np.ndarray, n_classes: int | None = None, tol: float = SIMPLEX_TOL):
    """Validate that each row is a probability vector; returns the array."""
    arr = np.asarray(arr, dtype=np.float64)
    rows = arr[None, :] if arr.ndim == 1 else arr
    if n_classes is not None and rows.shape[1] != n_classes:
        raise ValueError(f"expected {n_classes} classes, got {rows.shape[1]}")
    if rows.shape[1] < 2:
        raise ValueError("soft labels need at least 2 classes")
    if np.any(rows < -tol) or np.any(rows > 1 + tol):
        raise ValueError("soft label entries outside [0, 1]")
    if np.any(np.abs(rows.sum(axis=1) - 1.0) > tol):
        raise ValueError("soft label rows do not sum to 1")
    return arr


def label_entropy(labels: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) per row, with 0*ln(0) = 0."""
    labels = np.asarray(labels, dtype=np.float64)
    rows = labels[None, :] if labels.ndim == 1 else labels
    terms = np.where(rows > 0.0, rows * np.log(np.where(rows > 0.0, rows, 1.0)), 0.0)
    ent = -terms.sum(axis=1)
    return ent[0] if labels.ndim == 1 else ent


def soft_cross_entropy(target: np.ndarray, pred: np.ndarray) -> float:
    """-sum_k target_k * ln(pred_k), with predictions clamped at PROB_FLOOR."""
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError(f"shape mismatch: target {target.shape} vs pred {pred.shape}")
    return float(-(target * np.log(np.clip(pred, PROB_FLOOR, 1.0))).sum())


def kl_divergence(target: np.ndarray, pred: np.ndarray) -> float:
    """KL(target || pred) = soft_cross_entropy - entropy(target)."""
    return soft_cross_entropy(target, pred) - float(label_entropy(np.asarray(target)))


@dataclass
class TrainConfig:
    initial_lr: float = 0.001
    lr_decay_rate: float = 0.8
    decay_every_epochs: int = 2
    batch_size: int = 128
    early_stop_patience: int = 3
    max_epochs: int = 8
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    optimizer: str = "adam"  # "adam" or "sgd"
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if not (0 < self.lr_decay_rate <= 1):
            raise ValueError("lr_decay_rate must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class ArchDescriptor:
    input_shape: tuple[int, int]  # (n_mels, seg_len)
    conv_channels: tuple[int, int] = (8, 16)
    n_classes: int = 4


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    holdout_loss: float | None
    lr: float


def derive_seed(base: int, *parts: int) -> int:
    """Stable sub-seed derivation; documented so runs are replayable."""
    return int(np.random.SeedSequence((int(base),) + tuple(int(p) for p in parts)).generate_state(1)[0])


def _conv_patches(x):
    """x: (B, H, W, C) -> zero-padded 3x3 patches (B, H, W, 9C).

    The last axis holds nine channel blocks, one per kernel offset in
    row-major order, which is the layout _w_forward_mat expects.
    """
    B, H, W, C = x.shape
    xp = np.zeros((B, H + 2, W + 2, C))
    xp[:, 1:-1, 1:-1, :] = x
    patches = np.empty((B, H, W, 9 * C))
    for s, (i, j) in enumerate((i, j) for i in range(3) for j in range(3)):
        patches[:, :, :, s * C : (s + 1) * C] = xp[:, i : i + H, j : j + W, :]
    return patches


def _w_forward_mat(w):
    # (O, C, 3, 3) -> (9C, O), rows ordered (offset, channel)
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(-1, w.shape[0])


def _conv3x3_forward(x, w, b):
    """Same-padding 3x3 convolution; x is channels-last (B, H, W, C).

    Returns the output and the patch matrix, which the backward pass
    reuses instead of rebuilding.
    """
    B, H, W, _ = x.shape
    patches = _conv_patches(x)
    out = patches.reshape(B * H * W, -1) @ _w_forward_mat(w)
    return out.reshape(B, H, W, w.shape[0]) + b, patches


def _conv3x3_backward(patches, w, gout, need_gx=True):
    B, H, W, Cout = gout.shape
    Cin = w.shape[1]
    g2d = gout.reshape(B * H * W, Cout)
    gw_mat = patches.reshape(B * H * W, -1).T @ g2d  # (9C, O)
    gw = gw_mat.reshape(3, 3, Cin, Cout).transpose(3, 2, 0, 1)
    gb = gout.sum(axis=(0, 1, 2))
    gx = None
    if need_gx:
        # input gradient by scatter-adding one GEMM per kernel offset,
        # which avoids materializing patches of the output gradient
        gxp = np.zeros((B, H + 2, W + 2, Cin))
        for i in range(3):
            for j in range(3):
                contrib = g2d @ w[:, :, i, j]  # (BHW, Cin)
                gxp[:, i : i + H, j : j + W, :] += contrib.reshape(B, H, W, Cin)
        gx = gxp[:, 1:-1, 1:-1, :]
    return gx, gw, gb


def _maxpool2_forward(x):
    """2x2 stride-2 max pool on (B, H, W, C); odd edges are cropped.

    Returns the pooled output and four routing masks that send each
    window's gradient to its first maximum (row-major window order).
    """
    B, H, W, C = x.shape
    xe = x[:, : (H // 2) * 2, : (W // 2) * 2, :]
    views = (
        xe[:, 0::2, 0::2, :],
        xe[:, 0::2, 1::2, :],
        xe[:, 1::2, 0::2, :],
        xe[:, 1::2, 1::2, :],
    )
    out = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for v in views:
        m = (v == out) & ~taken
        taken |= m
        masks.append(m)
    return out, masks


def _maxpool2_backward(gout, masks, in_shape):
    B, H, W, C = in_shape
    gx = np.zeros(in_shape)
    H2, W2 = H // 2, W // 2
    slices = ((0, 0), (0, 1), (1, 0), (1, 1))
    for (di, dj), m in zip(slices, masks):
        gx[:, di : H2 * 2 : 2, dj : W2 * 2 : 2, :] = gout * m
    return gx


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class ConvNetModel:
    """Parameters live in one flat float64 vector with named views."""

    def __init__(self, descriptor: ArchDescriptor, seed: int):
        self.descriptor = descriptor
        self.init_seed = seed
        h, w = descriptor.input_shape
        c1, c2 = descriptor.conv_channels
        k = descriptor.n_classes
        if h // 4 < 1 or w // 4 < 1:
            raise ValueError(f"input shape {descriptor.input_shape} too small to pool twice")
        self._layout = {}
        offset = 0
        for name, shape in [
            ("conv1_w", (c1, 1, 3, 3)),
            ("conv1_b", (c1,)),
            ("conv2_w", (c2, c1, 3, 3)),
            ("conv2_b", (c2,)),
            ("dense_w", (c2, k)),
            ("dense_b", (k,)),
        ]:
            size = int(np.prod(shape))
            self._layout[name] = (slice(offset, offset + size), shape)
            offset += size
        self.theta = np.zeros(offset)
        # per-mel-band standardization, identity until train() fits it
        self.scaler_mean = np.zeros(h)
        self.scaler_std = np.ones(h)
        self._he_uniform_init(np.random.default_rng(seed))

    def _he_uniform_init(self, rng):
        fan_in = {"conv1_w": 9, "conv2_w": self.descriptor.conv_channels[0] * 9,
                  "dense_w": self.descriptor.conv_channels[1]}
        for name, (sl, shape) in self._layout.items():
            if name.endswith("_b"):
                continue
            limit = np.sqrt(6.0 / fan_in[name])
            self.theta[sl] = rng.uniform(-limit, limit, size=int(np.prod(shape)))

    def param(self, name: str) -> np.ndarray:
        sl, shape = self._layout[name]
        return self.theta[sl].reshape(shape)

    @property
    def n_parameters(self) -> int:
        return self.theta.size

    def set_scaler(self, mean: np.ndarray, std: np.ndarray):
        self.scaler_mean = np.asarray(mean, dtype=np.float64)
        self.scaler_std = np.asarray(std, dtype=np.float64)

    def scale(self, feats: np.ndarray) -> np.ndarray:
        """Standardize (B, H, W) raw features per mel band."""
        x = np.asarray(feats, dtype=np.float64)
        return (x - self.scaler_mean[None, :, None]) / self.scaler_std[None, :, None]

    def _forward(self, x):
        """x: scaled (B, H, W). Returns probs and the backward cache."""
        x4 = x[:, :, :, None]
        w1, b1 = self.param("conv1_w"), self.param("conv1_b")
        w2, b2 = self.param("conv2_w"), self.param("conv2_b")
        wd, bd = self.param("dense_w"), self.param("dense_b")
        z1, patches1 = _conv3x3_forward(x4, w1, b1)
        a1 = np.maximum(z1, 0.0)
        p1, masks1 = _maxpool2_forward(a1)
        z2, patches2 = _conv3x3_forward(p1, w2, b2)
        a2 = np.maximum(z2, 0.0)
        p2, masks2 = _maxpool2_forward(a2)
        gap = p2.mean(axis=(1, 2))
        logits = gap @ wd + bd
        probs = _softmax(logits)
        cache = (patches1, z1, a1, masks1, patches2, z2, a2, p2, masks2, gap)
        return probs, cache

    def loss(self, x, targets) -> float:
        """Mean soft cross-entropy of scaled inputs against targets."""
        probs, _ = self._forward(x)
        logp = np.log(np.clip(probs, PROB_FLOOR, 1.0))
        return float(-(np.asarray(targets) * logp).sum(axis=1).mean())

    def loss_and_grad(self, x, targets):
        """Loss plus the analytic gradient as a flat vector."""
        targets = np.asarray(targets, dtype=np.float64)
        probs, cache = self._forward(x)
        patches1, z1, a1, masks1, patches2, z2, a2, p2, masks2, gap = cache
        B = x.shape[0]
        logp = np.log(np.clip(probs, PROB_FLOOR, 1.0))
        loss = float(-(targets * logp).sum(axis=1).mean())

        # d(mean CE)/d(logits); the clamp zeroes gradients of floored probs
        u = np.where(probs > PROB_FLOOR, -targets / np.maximum(probs, PROB_FLOOR), 0.0)
        dlogits = probs * (u - (u * probs).sum(axis=1, keepdims=True)) / B

        wd = self.param("dense_w")
        g_dense_w = gap.T @ dlogits
        g_dense_b = dlogits.sum(axis=0)
        dgap = dlogits @ wd.T
        h4, w4 = p2.shape[1], p2.shape[2]
        dp2 = np.broadcast_to(dgap[:, None, None, :] / (h4 * w4), p2.shape)
        da2 = _maxpool2_backward(dp2, masks2, a2.shape)
        dz2 = da2 * (z2 > 0.0)
        dp1, g_conv2_w, g_conv2_b = _conv3x3_backward(patches2, self.param("conv2_w"), dz2)
        da1 = _maxpool2_backward(dp1, masks1, a1.shape)
        dz1 = da1 * (z1 > 0.0)
        _, g_conv1_w, g_conv1_b = _conv3x3_backward(
            patches1, self.param("conv1_w"), dz1, need_gx=False
        )

        grad = np.zeros_like(self.theta)
        for name, g in [
            ("conv1_w", g_conv1_w),
            ("conv1_b", g_conv1_b),
            ("conv2_w", g_conv2_w),
            ("conv2_b", g_conv2_b),
            ("dense_w", g_dense_w),
            ("dense_b", g_dense_b),
        ]:
            sl, _ = self._layout[name]
            grad[sl] = g.ravel()
        return loss, grad


def create_model(descriptor: ArchDescriptor, seed: int) -> ConvNetModel:
    return ConvNetModel(descriptor, seed)


def _stack_features(segments: list[SegmentFeatures]) -> np.ndarray:
    return np.stack([s.matrix for s in segments]).astype(np.float64)


def predict_batch(model: ConvNetModel, segments: list[SegmentFeatures], chunk: int = 512) -> np.ndarray:
    """Class probabilities, shape (n_segments, K)."""
    expected = model.descriptor.input_shape
    for s in segments:
        if s.matrix.shape != expected:
            raise ValueError(
                f"segment {s.segment_id} shape {s.matrix.shape} does not match "
                f"model input {expected}"
            )
    out = []
    for start in range(0, len(segments), chunk):
        x = model.scale(_stack_features(segments[start : start + chunk]))
        out.append(model._forward(x)[0])
    return np.concatenate(out, axis=0)


def predict_proba(model: ConvNetModel, segment: SegmentFeatures) -> np.ndarray:
    """Probability vector for one segment."""
    return predict_batch(model, [segment])[0]


def gradients(model: ConvNetModel, segments: list[SegmentFeatures], targets: np.ndarray) -> np.ndarray:
    """Flat gradient of the mean soft cross-entropy over the batch."""
    if not segments:
        raise ValueError("gradient of an empty batch is undefined")
    x = model.scale(_stack_features(segments))
    return model.loss_and_grad(x, np.asarray(targets, dtype=np.float64))[1]


@dataclass
class TrainResult:
    model: ConvNetModel
    log: list[EpochRecord] = field(default_factory=list)


def _fit_scaler(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = feats.mean(axis=(0, 2))
    std = feats.std(axis=(0, 2))
    return mean, np.maximum(std, 1e-8)


def train(
    model: ConvNetModel,
    segments: list[SegmentFeatures],
    targets: np.ndarray,
    cfg: TrainConfig,
) -> TrainResult:
    """Train the model in place against soft targets.

    A seeded 10% utterance-level holdout monitors early stopping; the
    parameters from the best holdout epoch are restored at the end. The
    learning rate is multiplied by lr_decay_rate every
    decay_every_epochs epochs. Deterministic for a fixed (data, cfg).
    """
    if not segments:
        raise DataError("cannot train on an empty dataset")
    targets = check_soft_labels(
        np.asarray(targets, dtype=np.float64), model.descriptor.n_classes
    )
    if targets.shape[0] != len(segments):
        raise ValueError("segments and targets disagree in length")

    feats = _stack_features(segments)
    rng = np.random.default_rng(cfg.seed)

    utts = list(dict.fromkeys(s.utterance_id for s in segments))
    hold_utts: set[str] = set()
    if len(utts) >= 2 and cfg.holdout_fraction > 0:
        order = rng.permutation(len(utts))
        n_hold = min(len(utts) - 1, max(1, int(round(cfg.holdout_fraction * len(utts)))))
        hold_utts = {utts[i] for i in order[:n_hold]}
    is_hold = np.array([s.utterance_id in hold_utts for s in segments])
    train_idx = np.flatnonzero(~is_hold)
    hold_idx = np.flatnonzero(is_hold)

    model.set_scaler(*_fit_scaler(feats[train_idx]))
    x_all = model.scale(feats)
    x_hold = x_all[hold_idx]
    t_hold = targets[hold_idx]

    m_state = np.zeros_like(model.theta)
    v_state = np.zeros_like(model.theta)
    adam_t = 0

    log: list[EpochRecord] = []
    best_loss = np.inf
    best_theta = model.theta.copy()
    epochs_since_improve = 0

    for epoch in range(cfg.max_epochs):
        lr = cfg.initial_lr * cfg.lr_decay_rate ** (epoch // cfg.decay_every_epochs)
        order = rng.permutation(train_idx.size)
        loss_sum = 0.0
        for bi, start in enumerate(range(0, order.size, cfg.batch_size)):
            idx = train_idx[order[start : start + cfg.batch_size]]
            loss, grad = model.loss_and_grad(x_all[idx], targets[idx])
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise NumericError(
                    f"non-finite loss in epoch {epoch}, batch {bi}"
                )
            loss_sum += loss * idx.size
            if cfg.optimizer == "adam":
                adam_t += 1
                m_state = cfg.adam_beta1 * m_state + (1 - cfg.adam_beta1) * grad
                v_state = cfg.adam_beta2 * v_state + (1 - cfg.adam_beta2) * grad**2
                m_hat = m_state / (1 - cfg.adam_beta1**adam_t)
                v_hat = v_state / (1 - cfg.adam_beta2**adam_t)
                model.theta -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon)
            else:
                model.theta -= lr * grad

        train_loss = loss_sum / train_idx.size
        holdout_loss = model.loss(x_hold, t_hold) if hold_idx.size else None
        log.append(EpochRecord(epoch, train_loss, holdout_loss, lr))

        monitored = holdout_loss if holdout_loss is not None else train_loss
        if monitored < best_loss:
            best_loss = monitored
            best_theta = model.theta.copy()
            epochs_since_improve = 0
        else:
            epochs_since_improve += 1
            if epochs_since_improve >= cfg.early_stop_patience:
                break

    model.theta = best_theta
    return TrainResult(model=model, log=log)


def write_training_log(path, log: list[EpochRecord]) -> None:
    """Line-delimited per-epoch records: epoch, train_loss, holdout_loss, lr."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in log:
            hold = "" if rec.holdout_loss is None else f"{rec.holdout_loss:.9g}"
            fh.write(f"epoch={rec.epoch} train_loss={rec.train_loss:.9g} "
                     f"holdout_loss={hold} lr={rec.lr:.9g}\n")


MODEL_MAGIC = b"SEGM"
MODEL_VERSION = 1


def save_model(path, model: ConvNetModel) -> None:
    desc = {
        "input_shape": list(model.descriptor.input_shape),
        "conv_channels": list(model.descriptor.conv_channels),
        "n_classes": model.descriptor.n_classes,
        "init_seed": model.init_seed,
    }
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", MODEL_MAGIC, MODEL_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", model.theta.size))
        fh.write(model.theta.astype("<f8").tobytes())
        fh.write(struct.pack("<I", model.scaler_mean.size))
        fh.write(model.scaler_mean.astype("<f8").tobytes())
        fh.write(model.scaler_std.astype("<f8").tobytes())


def load_model(path) -> ConvNetModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != MODEL_MAGIC:
        raise DataError(f"{path}: not a model checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != MODEL_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<I", raw, 8)
    pos = 12
    desc = json.loads(raw[pos : pos + blob_len].decode("utf-8"))
    pos += blob_len
    (n_theta,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    theta = np.frombuffer(raw, dtype="<f8", count=n_theta, offset=pos).copy()
    pos += n_theta * 8
    (n_band,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    mean = np.frombuffer(raw, dtype="<f8", count=n_band, offset=pos).copy()
    pos += n_band * 8
    std = np.frombuffer(raw, dtype="<f8", count=n_band, offset=pos).copy()
    model = ConvNetModel(
        ArchDescriptor(
            input_shape=tuple(desc["input_shape"]),
            conv_channels=tuple(desc["conv_channels"]),
            n_classes=desc["n_classes"],
        ),
        seed=desc["init_seed"],
    )
    if theta.size != model.theta.size:
        raise DataError(f"{path}: parameter count mismatch")
    model.theta = theta
    model.set_scaler(mean, std)
    return model
