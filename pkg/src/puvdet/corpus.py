"""Dataset ingestion, deterministic splits, and PU labeling simulation.

A corpus is a list of code functions with an optional hidden ground-truth
class and a "selected" flag marking the positives revealed to the learner.
Ground truth is kept on the sample (hidden from training, visible to
evaluation) so selection quality can be measured afterwards.

All values here are immutable after construction; every operation is a
pure function of its inputs and seed.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ParseError, ValidationError

_KNOWN_FIELDS = {"id", "code", "truth", "selected"}


@dataclass(frozen=True)
class CodeSample:
    """One source function.

    truth: 1 = vulnerable, 0 = not, None = unknown. selected: 1 when the
    sample was revealed as a labeled positive. A selected sample with known
    truth must be a true positive.
    """

    id: str
    code: str
    truth: int | None = None
    selected: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.selected not in (0, 1):
            raise ValidationError(f"sample {self.id!r}: selected must be 0 or 1")
        if self.truth not in (None, 0, 1):
            raise ValidationError(f"sample {self.id!r}: truth must be 0, 1 or absent")
        if self.selected == 1 and self.truth == 0:
            raise ValidationError(
                f"sample {self.id!r}: selected=1 contradicts truth=0"
            )


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train/valid/test id lists covering the full corpus, 8:1:1."""

    train: tuple[str, ...]
    valid: tuple[str, ...]
    test: tuple[str, ...]
    seed: int

    def __post_init__(self):
        parts = (set(self.train), set(self.valid), set(self.test))
        if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
            raise ValidationError("split parts are not disjoint")

    @property
    def all_ids(self) -> set[str]:
        return set(self.train) | set(self.valid) | set(self.test)


@dataclass(frozen=True)
class ScarConfig:
    """Labeling regime: each positive is revealed with frequency c.

    mode "exact" labels round(c * n_pos) positives chosen uniformly without
    replacement; mode "bernoulli" flips an independent coin per positive.
    """

    label_frequency_c: float
    seed: int
    mode: str = "exact"

    def __post_init__(self):
        if not 0.0 <= self.label_frequency_c <= 1.0:
            raise ValidationError(
                f"label_frequency_c must be in [0,1], got {self.label_frequency_c}"
            )
        if self.mode not in ("exact", "bernoulli"):
            raise ValidationError(f"unknown scar mode {self.mode!r}")


def load_corpus(path) -> list[CodeSample]:
    """Read a line-delimited corpus file (one JSON object per line).

    Required fields: id, code. Optional: truth, selected (defaults to 0).
    Unknown fields are preserved and written back on save.
    """
    samples = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: invalid record: {exc}") from exc
            if not isinstance(rec, dict) or "id" not in rec or "code" not in rec:
                raise ParseError(f"{path}: line {lineno}: record needs 'id' and 'code'")
            sid = rec["id"]
            if not isinstance(sid, str):
                raise ParseError(f"{path}: line {lineno}: id must be a string")
            if sid in seen:
                raise ValidationError(f"{path}: line {lineno}: duplicate id {sid!r}")
            seen.add(sid)
            extra = {k: v for k, v in rec.items() if k not in _KNOWN_FIELDS}
            try:
                samples.append(
                    CodeSample(
                        id=sid,
                        code=rec["code"],
                        truth=rec.get("truth"),
                        selected=rec.get("selected", 0),
                        extra=extra,
                    )
                )
            except ValidationError as exc:
                raise ValidationError(f"{path}: line {lineno}: {exc}") from exc
    return samples


def save_corpus(samples, path) -> None:
    """Write samples in the interchange format, preserving unknown fields."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {"id": s.id, "code": s.code}
            if s.truth is not None:
                rec["truth"] = s.truth
            rec["selected"] = s.selected
            rec.update(s.extra)
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def split_dataset(samples, seed: int) -> DatasetSplit:
    """Deterministic 8:1:1 split by count, remainder assigned to train.

    Pure function of the id multiset and the seed: ids are sorted before
    the seeded shuffle, so input order never matters.
    """
    ids = sorted(s.id for s in samples)
    n = len(ids)
    if n < 10:
        raise ValidationError(f"need at least 10 samples to split, got {n}")
    rng = random.Random(seed)
    rng.shuffle(ids)
    n_valid = n // 10
    n_test = n // 10
    n_train = n - n_valid - n_test
    return DatasetSplit(
        train=tuple(ids[:n_train]),
        valid=tuple(ids[n_train:n_train + n_valid]),
        test=tuple(ids[n_train + n_valid:]),
        seed=seed,
    )


def apply_scar(samples, cfg: ScarConfig) -> tuple[list[CodeSample], int]:
    """Reveal positives according to the labeling regime.

    Every sample must carry ground truth and start unselected. Returns the
    relabeled samples (same order) and the realized labeled count.
    """
    for s in samples:
        if s.truth is None:
            raise ValidationError(f"sample {s.id!r} has no ground truth; cannot label")
        if s.selected != 0:
            raise ValidationError(f"sample {s.id!r} is already selected")

    pos_ids = [s.id for s in samples if s.truth == 1]
    rng = random.Random(cfg.seed)
    if cfg.mode == "exact":
        n_label = round(cfg.label_frequency_c * len(pos_ids))
        chosen = set(rng.sample(pos_ids, n_label)) if n_label else set()
    else:
        chosen = {i for i in pos_ids if rng.random() < cfg.label_frequency_c}

    out = [replace(s, selected=1) if s.id in chosen else s for s in samples]
    return out, len(chosen)


def dataset_stats(samples) -> dict:
    """Mixture statistics: class prior and realized labeled fraction."""
    n = len(samples)
    n_pos = sum(1 for s in samples if s.truth == 1)
    n_neg = sum(1 for s in samples if s.truth == 0)
    n_unknown = n - n_pos - n_neg
    n_selected = sum(s.selected for s in samples)
    return {
        "n": n,
        "n_positive": n_pos,
        "n_negative": n_neg,
        "n_unknown_truth": n_unknown,
        "n_selected": n_selected,
        "class_prior": n_pos / n if n else 0.0,
        "labeled_fraction": n_selected / n if n else 0.0,
        "label_frequency": n_selected / n_pos if n_pos else 0.0,
    }
