"""Distance-based pseudo-label selection and the progressive expansion loop.

Stage one ranks every unlabeled sample by how far it sits from its k
nearest labeled positives (sum of the k distances, and distance to their
mean vector); samples in the top of BOTH farthest-first rankings become the
initial high-quality negatives. Stage two alternates retraining with
thresholded pseudo-label additions, decaying the weight of later additions.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder
from .embed import EmbeddingMatrix, l1_distance
from .errors import ConfigError, ValidationError

HN = "HN"
HP = "HP"


@dataclass(frozen=True)
class PrototypeConfig:
    k_mode: str = "fraction"          # "fraction" of positives, or "count"
    k_value: float = 0.3
    t_ratio: float = 0.3
    hn_count_mode: str = "ratio-of-unlabeled"   # or "paper-literal"

    def __post_init__(self):
        if self.k_mode not in ("fraction", "count"):
            raise ValidationError(f"unknown k_mode {self.k_mode!r}")
        if self.k_mode == "fraction" and not 0 < self.k_value <= 1:
            raise ValidationError(f"fraction k_value must be in (0,1], got {self.k_value}")
        if self.k_mode == "count" and (self.k_value < 1 or self.k_value != int(self.k_value)):
            raise ValidationError(f"count k_value must be an integer >= 1, got {self.k_value}")
        if self.t_ratio <= 0:
            raise ValidationError(f"t_ratio must be positive, got {self.t_ratio}")
        if self.hn_count_mode not in ("ratio-of-unlabeled", "paper-literal"):
            raise ValidationError(f"unknown hn_count_mode {self.hn_count_mode!r}")

    def resolve_k(self, n_positives: int) -> int:
        if self.k_mode == "count":
            return int(self.k_value)
        return max(1, round(self.k_value * n_positives))

    def resolve_t(self, n_unlabeled: int, n_positives: int) -> int:
        if self.hn_count_mode == "paper-literal":
            return round(self.t_ratio * n_unlabeled / n_positives)
        return round(self.t_ratio * n_unlabeled)


@dataclass(frozen=True)
class PrototypeDistances:
    """Per-unlabeled-sample distances to its positive prototype."""

    ids: tuple[str, ...]
    d_sum: np.ndarray
    d_mean: np.ndarray

    def __post_init__(self):
        if len(self.ids) != len(self.d_sum) or len(self.ids) != len(self.d_mean):
            raise ValidationError("one (d_sum, d_mean) pair per id required")
        for name, arr in (("d_sum", self.d_sum), ("d_mean", self.d_mean)):
            if len(arr) and (not np.all(np.isfinite(arr)) or np.any(np.asarray(arr) < 0)):
                raise ValidationError(f"{name} entries must be finite and nonnegative")

    def __len__(self):
        return len(self.ids)


def prototype_distances(emb: EmbeddingMatrix, positives, unlabeled,
                        cfg: PrototypeConfig) -> PrototypeDistances:
    """Distances from each unlabeled sample to its k nearest positives.

    d_sum is the sum of the k nearest L1 distances; d_mean is the L1
    distance to the mean vector of those k positives. Nearness ties break
    on ascending sample id.
    """
    pos_ids = sorted(positives)
    unl_ids = sorted(unlabeled)
    if not pos_ids:
        raise ValidationError("prototype distances need at least one positive")
    k = cfg.resolve_k(len(pos_ids))
    if k > len(pos_ids):
        raise ConfigError(f"resolved k={k} exceeds the {len(pos_ids)} available positives")
    if not unl_ids:
        return PrototypeDistances((), np.zeros(0), np.zeros(0))

    pos_rows = np.stack([emb.row(i) for i in pos_ids]).astype(np.float64)
    d_sum = np.zeros(len(unl_ids))
    d_mean = np.zeros(len(unl_ids))
    for u_idx, uid in enumerate(unl_ids):
        x = emb.row(uid).astype(np.float64)
        dists = np.sum(np.abs(pos_rows - x), axis=1)
        # (distance, id) sort makes the k-nearest set unique under ties
        order = sorted(range(len(pos_ids)), key=lambda j: (dists[j], pos_ids[j]))
        nearest = order[:k]
        d_sum[u_idx] = float(np.sum(dists[nearest]))
        prototype = pos_rows[nearest].mean(axis=0)
        d_mean[u_idx] = l1_distance(x, prototype)
    return PrototypeDistances(tuple(unl_ids), d_sum, d_mean)


def select_hn(dist: PrototypeDistances, counts: tuple[int, int],
              cfg: PrototypeConfig) -> set[str]:
    """Intersect the top-T farthest samples of both distance rankings.

    counts is (n_unlabeled, n_positives); the selection count T comes from
    cfg.resolve_t. Ranking ties break on ascending sample id.
    """
    n_u, n_p = counts
    if len(dist) == 0:
        raise ValidationError("cannot select negatives from empty distances")
    if n_p < 1:
        raise ValidationError("need at least one positive to resolve T")
    t = cfg.resolve_t(n_u, n_p)
    if t <= 0:
        warnings.warn(f"selection count T resolved to {t}; returning no negatives",
                      RuntimeWarning)
        return set()
    if t > len(dist):
        warnings.warn(f"selection count T={t} exceeds {len(dist)} unlabeled samples; clamped",
                      RuntimeWarning)
        t = len(dist)

    def top(values):
        order = sorted(range(len(dist)), key=lambda j: (-values[j], dist.ids[j]))
        return {dist.ids[j] for j in order[:t]}

    return top(dist.d_sum) & top(dist.d_mean)


def epoch_weight(e: int, e_max: int) -> float:
    """Decaying weight for samples added at progressive epoch e.

    Computed as (e_max + 1 - e) / (e_max + 1), the exact fraction form of
    1 - e / (e_max + 1).
    """
    if e_max < 1:
        raise ValidationError(f"e_max must be >= 1, got {e_max}")
    if not 1 <= e <= e_max:
        raise ValidationError(f"epoch {e} outside 1..{e_max}")
    return (e_max + 1 - e) / (e_max + 1)


class PseudoLabelLedger:
    """Grow-only record of pseudo-labeled samples with their epoch stamps.

    Epoch 0 marks the prototype-selection phase. Entries never move between
    classes, never disappear, and never name a revealed positive.
    """

    def __init__(self, forbidden=()):
        self._forbidden = frozenset(forbidden)
        self._entries: dict[str, tuple[str, int]] = {}

    def _add(self, sample_id: str, kind: str, epoch: int):
        if epoch < 0:
            raise ValidationError(f"epoch stamp must be nonnegative, got {epoch}")
        if sample_id in self._forbidden:
            raise ValidationError(f"{sample_id!r} is a revealed positive; cannot pseudo-label")
        existing = self._entries.get(sample_id)
        if existing is not None:
            raise ValidationError(
                f"{sample_id!r} already pseudo-labeled {existing[0]} at epoch {existing[1]}"
            )
        self._entries[sample_id] = (kind, epoch)

    def add_hn(self, sample_id: str, epoch: int):
        self._add(sample_id, HN, epoch)

    def add_hp(self, sample_id: str, epoch: int):
        self._add(sample_id, HP, epoch)

    def kind(self, sample_id: str) -> str | None:
        entry = self._entries.get(sample_id)
        return entry[0] if entry else None

    def epoch(self, sample_id: str) -> int:
        return self._entries[sample_id][1]

    @property
    def hn(self) -> set[str]:
        return {i for i, (k, _) in self._entries.items() if k == HN}

    @property
    def hp(self) -> set[str]:
        return {i for i, (k, _) in self._entries.items() if k == HP}

    def __contains__(self, sample_id):
        return sample_id in self._entries

    def __len__(self):
        return len(self._entries)

    def weight(self, sample_id: str, e_max: int) -> float:
        e = self.epoch(sample_id)
        return 1.0 if e == 0 else epoch_weight(e, e_max)

    def snapshot(self) -> dict[str, tuple[str, int]]:
        return dict(self._entries)

    def validate(self, e_max: int):
        if self.hn & self.hp:
            raise ValidationError("HN and HP overlap")
        for sid, (_, e) in self._entries.items():
            if sid in self._forbidden:
                raise ValidationError(f"revealed positive {sid!r} in ledger")
            if e > e_max:
                raise ValidationError(f"{sid!r} stamped at epoch {e} > {e_max}")


def write_ledger(path, ledger: PseudoLabelLedger, e_max: int) -> None:
    """Audit export: one {"id", "pseudo", "epoch", "weight"} object per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for sid in sorted(ledger.snapshot()):
            kind, epoch = ledger.snapshot()[sid]
            fh.write(json.dumps({
                "id": sid,
                "pseudo": kind,
                "epoch": epoch,
                "weight": ledger.weight(sid, e_max),
            }) + "\n")


def read_ledger(path, forbidden=()) -> PseudoLabelLedger:
    ledger = PseudoLabelLedger(forbidden)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["pseudo"] == HN:
                ledger.add_hn(rec["id"], rec["epoch"])
            else:
                ledger.add_hp(rec["id"], rec["epoch"])
    return ledger


@dataclass(frozen=True)
class ProgressiveConfig:
    t_max: float = 0.9
    t_min: float = 0.1
    max_progressive_epochs: int = 5

    def __post_init__(self):
        if not 0 < self.t_max <= 1:
            raise ValidationError(f"t_max must be in (0,1], got {self.t_max}")
        if not 0 <= self.t_min < 1:
            raise ValidationError(f"t_min must be in [0,1), got {self.t_min}")
        if self.t_min >= self.t_max:
            raise ValidationError(
                f"t_min ({self.t_min}) must be below t_max ({self.t_max})"
            )
        if self.max_progressive_epochs < 1:
            raise ValidationError("max_progressive_epochs must be >= 1")


@dataclass(frozen=True)
class ProgressiveEpoch:
    epoch: int
    added_hn: tuple[str, ...]
    added_hp: tuple[str, ...]
    train_loss: float
    val_accuracy: float | None
    ledger_snapshot: dict


@dataclass(frozen=True)
class ProgressiveResult:
    ledger: PseudoLabelLedger
    model: encoder.EncoderModel
    history: tuple[ProgressiveEpoch, ...]


def ledger_training_set(emb, positives, ledger, e_max):
    ids, ys, ws = [], [], []
    for sid in sorted(positives):
        ids.append(sid); ys.append(1); ws.append(1.0)
    snap = ledger.snapshot()
    for sid in sorted(snap):
        kind, _ = snap[sid]
        ids.append(sid)
        ys.append(1 if kind == HP else 0)
        ws.append(ledger.weight(sid, e_max))
    X = np.stack([emb.row(i) for i in ids]).astype(np.float64)
    return encoder.TrainingSet(X=X, y=np.array(ys), w=np.array(ws), ids=tuple(ids))


def progressive_select(emb: EmbeddingMatrix, positives, ledger: PseudoLabelLedger,
                       model: encoder.EncoderModel, pcfg: ProgressiveConfig,
                       tcfg: encoder.TrainConfig, valid=None,
                       unlabeled=None) -> ProgressiveResult:
    """Alternate retraining with thresholded pseudo-label additions.

    Phase 1 fits the model on revealed positives vs. the epoch-0 negatives
    without touching the ledger. Phase 2 then runs up to
    max_progressive_epochs rounds: retrain from the retained weights with
    epoch-decayed sample weights, score every still-unlabeled sample, and
    add confident ones (p_pos above t_max -> HP, below t_min -> HN).
    Optimizer moments reset at each retrain; model weights carry over.

    valid is an (X, y) pair scored after each round; the loop stops early
    the first time accuracy fails to improve. unlabeled defaults to every
    embedding id that is neither a positive nor already in the ledger.
    """
    positives = set(positives)
    if not positives:
        raise ValidationError("progressive selection needs revealed positives")
    if not ledger.hn:
        raise ValidationError("ledger has no epoch-0 negatives; cannot form a binary problem")
    e_max = pcfg.max_progressive_epochs
    ledger.validate(e_max)

    if unlabeled is None:
        unlabeled = [i for i in emb.ids if i not in positives]
    pool = sorted(i for i in unlabeled if i not in positives)

    # Phase 1: no additions, fixed inner epochs, no inner early stop.
    result = encoder.train(model, ledger_training_set(emb, positives, ledger, e_max),
                           tcfg, valid=None, objective="ce")
    model = result.model

    history = []
    best_acc = -1.0
    for e in range(1, e_max + 1):
        result = encoder.train(model, ledger_training_set(emb, positives, ledger, e_max),
                               tcfg, valid=None, objective="ce")
        model = result.model
        train_loss = result.history[-1].loss if result.history else 0.0

        candidates = [i for i in pool if i not in ledger]
        added_hn, added_hp = [], []
        if candidates:
            X = np.stack([emb.row(i) for i in candidates]).astype(np.float64)
            p_pos = encoder.predict_proba_batch(model, X)[:, 1]
            for sid, p in zip(candidates, p_pos):
                if p > pcfg.t_max:
                    ledger.add_hp(sid, e)
                    added_hp.append(sid)
                elif p < pcfg.t_min:
                    ledger.add_hn(sid, e)
                    added_hn.append(sid)
        ledger.validate(e_max)

        val_acc = None
        if valid is not None and len(valid[1]) > 0:
            val_acc = encoder.accuracy(model, valid[0], valid[1])
        history.append(ProgressiveEpoch(
            epoch=e,
            added_hn=tuple(added_hn),
            added_hp=tuple(added_hp),
            train_loss=train_loss,
            val_accuracy=val_acc,
            ledger_snapshot=ledger.snapshot(),
        ))
        if val_acc is not None:
            if val_acc > best_acc:
                best_acc = val_acc
            else:
                break
    return ProgressiveResult(ledger=ledger, model=model, history=tuple(history))
