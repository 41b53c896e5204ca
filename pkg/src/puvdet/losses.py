"""Mixed-supervision objectives: weighted CE plus two contrastive terms.

The combined objective is  alpha * self_loss + (1 - alpha) * weak_loss + ce.
Both contrastive losses are temperature-scaled softmax classification over
a batch of projected vectors; they differ only in how the target member is
chosen (designated positive vs. shared pseudo-label). Everything here is a
pure function of its arguments; gradients through the encoder live in the
encoder module.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

from .errors import BatchConstructionError, NumericError, ValidationError


@dataclass(frozen=True)
class MrlConfig:
    alpha: float = 0.5
    tau: float = 0.07
    batch_b: int = 16
    reduction: str = "sum"
    # Eq-the-target has a single same-label anchor; averaging over all of
    # them is available behind this flag.
    average_anchors: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must be in [0,1], got {self.alpha}")
        if self.tau <= 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")
        if self.batch_b < 2:
            raise ValidationError(f"batch_b must be >= 2, got {self.batch_b}")
        if self.reduction not in ("sum", "mean"):
            raise ValidationError(f"unknown reduction {self.reduction!r}")


@dataclass(frozen=True)
class ContrastBatch:
    """One anchor's contrastive set: a query plus B candidate members."""

    query: np.ndarray
    members: np.ndarray          # (B, d) projected vectors
    positive_index: int          # designated positive member
    pseudo_labels: tuple[int, ...]
    anchor_label: int

    def __post_init__(self):
        members = np.asarray(self.members, dtype=np.float64)
        query = np.asarray(self.query, dtype=np.float64)
        if members.ndim != 2 or query.shape != (members.shape[1],):
            raise ValidationError("query and members must share one dimension")
        if not 0 <= self.positive_index < members.shape[0]:
            raise ValidationError(
                f"positive_index {self.positive_index} outside 0..{members.shape[0] - 1}"
            )
        if len(self.pseudo_labels) != members.shape[0]:
            raise ValidationError("one pseudo label per member required")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "query", query)

    @property
    def size(self) -> int:
        return self.members.shape[0]


def nll_over_logits(logits, target_weights) -> float:
    """Stabilized -log softmax under a target distribution.

    target_weights is a probability vector (one-hot for a single target).
    Shifting all logits by a constant leaves the value unchanged.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite similarity logits")
    m = logits.max()
    lse = m + np.log(np.sum(np.exp(logits - m)))
    return float(lse - np.dot(target_weights, logits))


def loss_ce(labels, probs, weights, reduction: str = "sum") -> float:
    """Weighted cross-entropy: sum_i W_i * (-log p_i[y_i]).

    probs rows must already be floored away from zero at the labeled class;
    a zero there is a numeric error, not a silent inf.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ValidationError("weights must be nonnegative")
    picked = probs[np.arange(len(labels)), labels]
    if np.any(picked <= 0):
        bad = int(np.argmax(picked <= 0))
        raise NumericError(f"probability 0 at labeled class (sample index {bad})")
    terms = weights * -np.log(picked)
    total = float(np.sum(terms))
    if reduction == "mean":
        return total / len(labels)
    return total


def _similarities(query, members, tau) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return members @ np.asarray(query, dtype=np.float64) / tau


def loss_self(batch: ContrastBatch, cfg: MrlConfig) -> float:
    """Classify the query as its designated positive among the B members."""
    logits = _similarities(batch.query, batch.members, cfg.tau)
    target = np.zeros(batch.size)
    target[batch.positive_index] = 1.0
    return nll_over_logits(logits, target)


def _anchor_indices(batch: ContrastBatch) -> list[int]:
    return [k for k, lab in enumerate(batch.pseudo_labels) if lab == batch.anchor_label]


def loss_weak(batch: ContrastBatch, cfg: MrlConfig) -> float:
    """Classify the anchor as its same-pseudo-label member.

    With average_anchors set, the loss is averaged over every member that
    shares the anchor's pseudo-label; otherwise the designated positive is
    used (falling back to the first same-label member if it disagrees).
    """
    same = _anchor_indices(batch)
    if not same:
        raise BatchConstructionError(
            f"no member shares the anchor's pseudo-label {batch.anchor_label}"
        )
    logits = _similarities(batch.query, batch.members, cfg.tau)
    target = np.zeros(batch.size)
    if cfg.average_anchors:
        target[same] = 1.0 / len(same)
    else:
        chosen = batch.positive_index if batch.positive_index in same else same[0]
        target[chosen] = 1.0
    return nll_over_logits(logits, target)


def loss_metric(self_loss: float, weak_loss: float, ce_loss: float, cfg: MrlConfig) -> float:
    for name, v in (("self", self_loss), ("weak", weak_loss), ("ce", ce_loss)):
        if not np.isfinite(v):
            raise NumericError(f"non-finite {name} loss component: {v}")
    return cfg.alpha * self_loss + (1.0 - cfg.alpha) * weak_loss + ce_loss


def sample_contrast_ids(anchor_id, labels: dict, batch_b: int, rng: random.Random):
    """Seeded draw of (positive_id, other_ids) for one anchor.

    One positive is chosen uniformly from the anchor's label class; the
    remaining batch_b - 1 members come uniformly from everything else in
    the pool (any label), excluding the anchor and the chosen positive.
    """
    if anchor_id not in labels:
        raise BatchConstructionError(f"anchor {anchor_id!r} not in the labeled pool")
    anchor_label = labels[anchor_id]
    same = sorted(i for i, lab in labels.items() if lab == anchor_label and i != anchor_id)
    if not same:
        raise BatchConstructionError(
            f"pool has no other sample with label {anchor_label} for anchor {anchor_id!r}"
        )
    positive = same[rng.randrange(len(same))]
    rest = sorted(i for i in labels if i not in (anchor_id, positive))
    if len(rest) < batch_b - 1:
        raise BatchConstructionError(
            f"pool has {len(rest)} candidates but batch needs {batch_b - 1} non-positive members"
        )
    others = rng.sample(rest, batch_b - 1)
    return positive, others


def build_contrast_batch(anchor_id, labels: dict, projections, cfg: MrlConfig,
                         seed: int) -> ContrastBatch:
    """Assemble a ContrastBatch from projected vectors, deterministically."""
    rng = random.Random(seed)
    positive, others = sample_contrast_ids(anchor_id, labels, cfg.batch_b, rng)
    member_ids = [positive] + others
    members = np.stack([np.asarray(projections[i], dtype=np.float64) for i in member_ids])
    return ContrastBatch(
        query=np.asarray(projections[anchor_id], dtype=np.float64),
        members=members,
        positive_index=0,
        pseudo_labels=tuple(labels[i] for i in member_ids),
        anchor_label=labels[anchor_id],
    )
