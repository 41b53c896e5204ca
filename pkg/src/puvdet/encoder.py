"""Small trainable scorer over fixed embeddings, with exact gradients.

Architecture: input dim -> tanh hidden -> 2-way softmax head, plus a linear
projection head (hidden -> proj_dim) whose L2-normalized output feeds the
contrastive losses. Parameters live in one flat float64 vector with layout

    W1 (dim x hidden) | b1 (hidden) | W2 (hidden x 2) | b2 (2)
    | Wp (hidden x proj_dim) | bp (proj_dim)

row-major. Gradients are hand-derived backpropagation for the weighted CE,
the two contrastive objectives, and their combination; they are validated
against central finite differences in the test suite.

Per-unit gradient contributions (one unit per example or contrast group)
are reduced with a fixed pairwise tree, so results are bit-stable and batch
duplication scales gradients exactly.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    BatchConstructionError,
    ConfigError,
    DimensionError,
    NumericError,
    TrainingError,
    ValidationError,
)
from .losses import MrlConfig, sample_contrast_ids

_CKPT_MAGIC = b"PUVM"
_CKPT_VERSION = 1

OBJECTIVES = ("ce", "self", "weak", "metric")


def param_count(dim: int, hidden: int, proj_dim: int) -> int:
    return dim * hidden + hidden + hidden * 2 + 2 + hidden * proj_dim + proj_dim


@dataclass(frozen=True)
class EncoderModel:
    dim: int
    hidden: int
    proj_dim: int
    params: np.ndarray

    def __post_init__(self):
        expect = param_count(self.dim, self.hidden, self.proj_dim)
        params = np.asarray(self.params, dtype=np.float64)
        if params.shape != (expect,):
            raise ValidationError(
                f"parameter vector has shape {params.shape}, layout needs ({expect},)"
            )
        params = params.copy()
        params.flags.writeable = False
        object.__setattr__(self, "params", params)

    def with_params(self, params) -> "EncoderModel":
        return replace(self, params=np.asarray(params, dtype=np.float64))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 5
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValidationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ValidationError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class LabeledBatch:
    """Weighted binary examples for the CE objective."""

    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    ids: tuple[str, ...] | None = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        y = np.asarray(self.y, dtype=np.int64).ravel()
        w = np.asarray(self.w, dtype=np.float64).ravel()
        if not (len(X) == len(y) == len(w)):
            raise ValidationError("X, y, w must have equal lengths")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)

    def __len__(self):
        return len(self.y)


@dataclass(frozen=True)
class ContrastGroup:
    """Raw (un-projected) vectors for one anchor's contrastive term."""

    anchor: np.ndarray
    members: np.ndarray            # (B, dim)
    positive_index: int
    member_labels: tuple[int, ...] | None = None
    anchor_label: int | None = None


@dataclass(frozen=True)
class ObjectiveBatch:
    labeled: LabeledBatch | None = None
    groups: tuple[ContrastGroup, ...] = ()


def _unpack(model: EncoderModel):
    d, h, m = model.dim, model.hidden, model.proj_dim
    p = model.params
    o = 0
    W1 = p[o:o + d * h].reshape(d, h); o += d * h
    b1 = p[o:o + h]; o += h
    W2 = p[o:o + h * 2].reshape(h, 2); o += h * 2
    b2 = p[o:o + 2]; o += 2
    Wp = p[o:o + h * m].reshape(h, m); o += h * m
    bp = p[o:o + m]; o += m
    return W1, b1, W2, b2, Wp, bp


class _GradViews:
    """Writable views over one flat gradient buffer, mirroring the layout."""

    def __init__(self, model: EncoderModel):
        d, h, m = model.dim, model.hidden, model.proj_dim
        self.flat = np.zeros(param_count(d, h, m))
        o = 0
        self.W1 = self.flat[o:o + d * h].reshape(d, h); o += d * h
        self.b1 = self.flat[o:o + h]; o += h
        self.W2 = self.flat[o:o + h * 2].reshape(h, 2); o += h * 2
        self.b2 = self.flat[o:o + 2]; o += 2
        self.Wp = self.flat[o:o + h * m].reshape(h, m); o += h * m
        self.bp = self.flat[o:o + m]; o += m


def init_model(dim: int, hidden: int = 256, proj_dim: int = 64, seed: int = 0) -> EncoderModel:
    """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer."""
    if dim < 1 or hidden < 1 or proj_dim < 1:
        raise ValidationError("dim, hidden and proj_dim must all be positive")
    rng = np.random.default_rng(seed)
    s_in, s_h = 1.0 / np.sqrt(dim), 1.0 / np.sqrt(hidden)
    parts = [
        rng.uniform(-s_in, s_in, dim * hidden),
        rng.uniform(-s_in, s_in, hidden),
        rng.uniform(-s_h, s_h, hidden * 2),
        rng.uniform(-s_h, s_h, 2),
        rng.uniform(-s_h, s_h, hidden * proj_dim),
        rng.uniform(-s_h, s_h, proj_dim),
    ]
    return EncoderModel(dim, hidden, proj_dim, np.concatenate(parts))


def zero_model(dim: int, hidden: int = 256, proj_dim: int = 64) -> EncoderModel:
    return EncoderModel(dim, hidden, proj_dim, np.zeros(param_count(dim, hidden, proj_dim)))


def _hidden(model, X):
    W1, b1, *_ = _unpack(model)
    return np.tanh(X @ W1 + b1)


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def predict_proba_batch(model: EncoderModel, X) -> np.ndarray:
    """(n, 2) array of (p_neg, p_pos) rows."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.dim:
        raise DimensionError(f"input dim {X.shape[1]} != model dim {model.dim}")
    _, _, W2, b2, _, _ = _unpack(model)
    logits = _hidden(model, X) @ W2 + b2
    return np.exp(_log_softmax(logits))


def predict_proba(model: EncoderModel, x) -> tuple[float, float]:
    p = predict_proba_batch(model, np.asarray(x, dtype=np.float64).reshape(1, -1))[0]
    return float(p[0]), float(p[1])


def project(model: EncoderModel, X) -> np.ndarray:
    """L2-normalized projection head outputs, one row per input."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.dim:
        raise DimensionError(f"input dim {X.shape[1]} != model dim {model.dim}")
    _, _, _, _, Wp, bp = _unpack(model)
    Z = _hidden(model, X) @ Wp + bp
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NumericError("zero-norm projection cannot be L2-normalized")
    return Z / norms


def accuracy(model: EncoderModel, X, y) -> float:
    preds = predict_proba_batch(model, X).argmax(axis=1)
    return float(np.mean(preds == np.asarray(y)))


def _pairwise_reduce(units: np.ndarray) -> np.ndarray:
    # Fixed-order pairwise tree: duplicate-adjacent batches reduce to an
    # exact power-of-two multiple of the single-copy gradient.
    if len(units) == 0:
        raise ValidationError("cannot reduce an empty unit list")
    block = units
    while block.shape[0] > 1:
        if block.shape[0] % 2:
            block = np.vstack([block, np.zeros((1, block.shape[1]))])
        block = block[0::2] + block[1::2]
    return block[0]


def _ce_units(model, batch: LabeledBatch):
    """Per-example loss terms and per-example gradient rows."""
    W1, b1, W2, b2, _, _ = _unpack(model)
    n = len(batch)
    X, y, w = batch.X, batch.y, batch.w
    if X.shape[1] != model.dim:
        raise DimensionError(f"input dim {X.shape[1]} != model dim {model.dim}")
    A = X @ W1 + b1
    H = np.tanh(A)
    logits = H @ W2 + b2
    logp = _log_softmax(logits)
    losses = -logp[np.arange(n), y] * w
    if not np.all(np.isfinite(losses)):
        bad = int(np.argmax(~np.isfinite(losses)))
        label = batch.ids[bad] if batch.ids else f"index {bad}"
        raise NumericError(f"non-finite CE loss for sample {label}")

    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits *= w[:, None]
    dH = dlogits @ W2.T
    dA = (1.0 - H * H) * dH

    units = np.zeros((n, model.params.shape[0]))
    for i in range(n):
        g = _GradViews(model)
        g.W2 += np.outer(H[i], dlogits[i])
        g.b2 += dlogits[i]
        g.W1 += np.outer(X[i], dA[i])
        g.b1 += dA[i]
        units[i] = g.flat
    return losses, units


def _group_unit(model, group: ContrastGroup, objective: str, mcfg: MrlConfig):
    """Loss and gradient for one contrastive group (anchor + B members)."""
    W1, b1, _, _, Wp, bp = _unpack(model)
    members = np.atleast_2d(np.asarray(group.members, dtype=np.float64))
    V = np.vstack([np.asarray(group.anchor, dtype=np.float64).reshape(1, -1), members])
    if V.shape[1] != model.dim:
        raise DimensionError(f"input dim {V.shape[1]} != model dim {model.dim}")
    B = members.shape[0]

    A = V @ W1 + b1
    H = np.tanh(A)
    Z = H @ Wp + bp
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NumericError("zero-norm projection in contrastive group")
    Zn = Z / norms

    q, M = Zn[0], Zn[1:]
    logits = M @ q / mcfg.tau
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite similarity logits in contrastive group")

    def target_for(obj):
        t = np.zeros(B)
        if obj == "self":
            t[group.positive_index] = 1.0
            return t
        if group.member_labels is None or group.anchor_label is None:
            raise ValidationError("weak objective needs member and anchor labels")
        same = [k for k, lab in enumerate(group.member_labels) if lab == group.anchor_label]
        if not same:
            raise ValidationError("weak objective needs a same-label member")
        if mcfg.average_anchors:
            t[same] = 1.0 / len(same)
        else:
            t[group.positive_index if group.positive_index in same else same[0]] = 1.0
        return t

    if objective == "metric":
        target = mcfg.alpha * target_for("self") + (1.0 - mcfg.alpha) * target_for("weak")
        scale = 1.0  # alpha folded into the mixed target
    else:
        target = target_for(objective)
        scale = 1.0

    m = logits.max()
    lse = m + np.log(np.sum(np.exp(logits - m)))
    loss = scale * (lse - float(target @ logits))

    dlogits = scale * (np.exp(logits - lse) - target)
    dq = (dlogits @ M) / mcfg.tau
    dM = np.outer(dlogits, q) / mcfg.tau

    dZn = np.vstack([dq.reshape(1, -1), dM])
    # back through the row-wise L2 normalization
    dZ = (dZn - Zn * np.sum(Zn * dZn, axis=1, keepdims=True)) / norms

    dH = dZ @ Wp.T
    dA = (1.0 - H * H) * dH

    g = _GradViews(model)
    g.Wp += H.T @ dZ
    g.bp += dZ.sum(axis=0)
    g.W1 += V.T @ dA
    g.b1 += dA.sum(axis=0)
    return loss, g.flat


def loss_and_grad(model: EncoderModel, batch: ObjectiveBatch, objective: str,
                  mcfg: MrlConfig | None = None) -> tuple[float, np.ndarray]:
    """Objective value and exact gradient, same layout as model.params."""
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")
    if objective in ("self", "weak", "metric") and mcfg is None:
        mcfg = MrlConfig()
    if batch.labeled is None and not batch.groups:
        raise ValidationError("empty objective batch")

    losses, units = [], []
    if objective in ("ce", "metric") and batch.labeled is not None and len(batch.labeled):
        ce_losses, ce_units = _ce_units(model, batch.labeled)
        losses.extend(ce_losses.tolist())
        units.append(ce_units)
    if objective in ("self", "weak", "metric"):
        for group in batch.groups:
            gl, gu = _group_unit(model, group, objective, mcfg)
            losses.append(gl)
            units.append(gu.reshape(1, -1))
    if not units:
        raise ValidationError(f"objective {objective!r} got no usable batch content")

    grad_vec = _pairwise_reduce(np.vstack(units))
    return float(np.sum(losses)), grad_vec


def grad(model: EncoderModel, batch: ObjectiveBatch, objective: str,
         mcfg: MrlConfig | None = None) -> np.ndarray:
    return loss_and_grad(model, batch, objective, mcfg)[1]


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    val_accuracy: float | None


@dataclass(frozen=True)
class TrainResult:
    model: EncoderModel
    history: tuple[EpochRecord, ...]


@dataclass(frozen=True)
class TrainingSet:
    """Weighted labeled vectors, optionally with ids for contrast sampling."""

    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    ids: tuple[str, ...] | None = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        y = np.asarray(self.y, dtype=np.int64).ravel()
        w = np.asarray(self.w, dtype=np.float64).ravel()
        if not (len(X) == len(y) == len(w)):
            raise ValidationError("X, y, w must have equal lengths")
        if self.ids is not None and len(self.ids) != len(y):
            raise ValidationError("ids must match the number of examples")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)

    def __len__(self):
        return len(self.y)


class _Optimizer:
    def __init__(self, cfg: TrainConfig, n_params: int):
        self.cfg = cfg
        self.t = 0
        if cfg.optimizer == "adam":
            self.m = np.zeros(n_params)
            self.v = np.zeros(n_params)

    def step(self, params, g):
        lr = self.cfg.learning_rate
        if self.cfg.optimizer == "sgd":
            return params - lr * g
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        self.m = b1 * self.m + (1 - b1) * g
        self.v = b2 * self.v + (1 - b2) * g * g
        mhat = self.m / (1 - b1 ** self.t)
        vhat = self.v / (1 - b2 ** self.t)
        return params - lr * mhat / (np.sqrt(vhat) + eps)


def _contrast_groups_for(data: TrainingSet, anchor_rows, mcfg: MrlConfig, rng):
    """Groups for the anchors in one minibatch; anchors whose pool cannot
    satisfy the batch size are skipped (strictness lives in the builder)."""
    by_row = {f"r{k}": k for k in range(len(data))}
    labels = {f"r{k}": int(data.y[k]) for k in range(len(data))}
    groups = []
    for row in anchor_rows:
        anchor_id = f"r{row}"
        try:
            positive, others = sample_contrast_ids(anchor_id, labels, mcfg.batch_b, rng)
        except BatchConstructionError:
            continue
        member_rows = [by_row[positive]] + [by_row[i] for i in others]
        groups.append(ContrastGroup(
            anchor=data.X[row],
            members=data.X[member_rows],
            positive_index=0,
            member_labels=tuple(int(data.y[r]) for r in member_rows),
            anchor_label=int(data.y[row]),
        ))
    return tuple(groups)


def train(model: EncoderModel, data: TrainingSet, cfg: TrainConfig,
          valid=None, objective: str = "ce",
          mcfg: MrlConfig | None = None) -> TrainResult:
    """Minibatch training with optional accuracy-based early stopping.

    valid is an (X, y) pair or None. With a validation set, training stops
    as soon as accuracy fails to improve (patience 1) and the parameters
    from the best epoch are returned, earlier epochs winning ties. Without
    one, all max_epochs run and the final parameters are returned.
    """
    if len(data) == 0:
        raise ValidationError("training set is empty")
    if objective in ("self", "weak", "metric") and mcfg is None:
        mcfg = MrlConfig()

    params = model.params.copy()
    opt = _Optimizer(cfg, params.shape[0])
    rng = np.random.default_rng(cfg.seed)

    history = []
    best_acc, best_params, stop = -1.0, None, False
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(data))
        epoch_loss = 0.0
        for start in range(0, len(data), cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            current = model.with_params(params)
            labeled = LabeledBatch(
                X=data.X[rows], y=data.y[rows], w=data.w[rows],
                ids=tuple(data.ids[r] for r in rows) if data.ids else None,
            )
            groups = ()
            if objective == "metric":
                batch_rng = random.Random(f"{cfg.seed}:{epoch}:{int(start)}")
                groups = _contrast_groups_for(data, rows, mcfg, batch_rng)
            try:
                loss, g = loss_and_grad(
                    current, ObjectiveBatch(labeled=labeled, groups=groups),
                    "ce" if objective == "ce" else objective, mcfg,
                )
            except NumericError as exc:
                raise TrainingError(f"training diverged at epoch {epoch}: {exc}") from exc
            epoch_loss += loss
            params = opt.step(params, g)
        if not np.isfinite(epoch_loss) or not np.all(np.isfinite(params)):
            raise TrainingError(f"training diverged at epoch {epoch}")

        val_acc = None
        if valid is not None and len(valid[1]) > 0:
            val_acc = accuracy(model.with_params(params), valid[0], valid[1])
            if val_acc > best_acc:
                best_acc, best_params = val_acc, params.copy()
            else:
                stop = True
        history.append(EpochRecord(epoch=epoch, loss=float(epoch_loss), val_accuracy=val_acc))
        if stop:
            break

    final = best_params if best_params is not None else params
    return TrainResult(model=model.with_params(final), history=tuple(history))


def save_checkpoint(path, model: EncoderModel) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<IIIII", _CKPT_VERSION, model.dim, model.hidden, 2,
                             model.proj_dim))
        fh.write(struct.pack("<Q", model.params.shape[0]))
        fh.write(model.params.astype("<f8").tobytes())


def load_checkpoint(path) -> EncoderModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ValidationError(f"{path}: not a model checkpoint")
        version, dim, hidden, out, proj = struct.unpack("<IIIII", fh.read(20))
        if version != _CKPT_VERSION or out != 2:
            raise ValidationError(f"{path}: unsupported checkpoint header")
        (count,) = struct.unpack("<Q", fh.read(8))
        params = np.frombuffer(fh.read(8 * count), dtype="<f8")
        if params.shape[0] != count:
            raise ValidationError(f"{path}: truncated parameter vector")
    return EncoderModel(dim, hidden, proj, params.astype(np.float64))
