"""Per-sample embedding vectors and the distance primitive.

Downstream selection and training only ever see an EmbeddingMatrix, so any
producer works: the built-in hashing embedder (deterministic, dependency
free) or a file exported from a pretrained model in the interchange format
below.

Binary interchange format (little-endian):
    magic "PUVD" | version u32 | dim u32 | count u64
    then per record: id length u32 | id bytes (utf-8) | dim float32
A plain-text variant (one "id v0 v1 ..." per line) is accepted on load for
debugging.
"""

from __future__ import annotations

import hashlib
import re
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AlignmentError, DimensionError, NumericError, ParseError, ValidationError

_MAGIC = b"PUVD"
_VERSION = 1
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Dense row-per-sample vectors, row order aligned with ids."""

    ids: tuple[str, ...]
    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float32)
        if rows.ndim != 2 or rows.shape[0] != len(self.ids):
            raise ValidationError(
                f"rows shape {rows.shape} does not match {len(self.ids)} ids"
            )
        if not np.all(np.isfinite(rows)):
            raise NumericError("embedding matrix contains non-finite entries")
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("embedding ids are not unique")
        rows.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "_index", {i: k for k, i in enumerate(self.ids)})

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def row(self, sample_id: str) -> np.ndarray:
        try:
            return self.rows[self._index[sample_id]]
        except KeyError:
            raise AlignmentError(f"unknown sample id {sample_id!r}") from None

    def subset(self, ids) -> "EmbeddingMatrix":
        ids = tuple(ids)
        return EmbeddingMatrix(ids, np.stack([self.row(i) for i in ids]) if ids else
                               np.zeros((0, self.dim), dtype=np.float32))


@dataclass(frozen=True)
class EmbedderConfig:
    dim: int = 256
    ngram: int = 2
    normalize: bool = True

    def __post_init__(self):
        if self.dim < 8:
            raise ValidationError(f"embedder dim must be >= 8, got {self.dim}")
        if self.ngram not in (1, 2, 3):
            raise ValidationError(f"ngram order must be 1, 2 or 3, got {self.ngram}")


def _bucket(gram: str, dim: int) -> int:
    # blake2b, not hash(): python's hash is salted per process and the
    # embedder must be bit-stable across restarts.
    digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dim


def hash_embed(samples, cfg: EmbedderConfig) -> EmbeddingMatrix:
    """Hashing bag of token n-grams (orders 1..cfg.ngram), one row per sample.

    Each n-gram occurrence adds +1 to its hashed bucket, so before
    normalization the entries of a unigram row sum to the token count.
    Empty code yields a zero row; with normalize on it stays zero and a
    warning is emitted.
    """
    rows = np.zeros((len(samples), cfg.dim), dtype=np.float64)
    empty = []
    for r, s in enumerate(samples):
        tokens = _TOKEN_RE.findall(s.code)
        if not tokens:
            empty.append(s.id)
            continue
        for order in range(1, cfg.ngram + 1):
            for k in range(len(tokens) - order + 1):
                gram = "␟".join(tokens[k:k + order])
                rows[r, _bucket(gram, cfg.dim)] += 1.0
    if cfg.normalize:
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        nonzero = norms[:, 0] > 0
        rows[nonzero] /= norms[nonzero]
        if empty:
            warnings.warn(
                f"{len(empty)} empty sample(s) left as zero rows under normalize "
                f"(first: {empty[0]!r})",
                RuntimeWarning,
            )
    return EmbeddingMatrix(tuple(s.id for s in samples), rows.astype(np.float32))


def write_embedding_file(path, matrix: EmbeddingMatrix) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIQ", _VERSION, matrix.dim, len(matrix.ids)))
        for sid, row in zip(matrix.ids, matrix.rows):
            raw = sid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(row.astype("<f4").tobytes())


def write_embedding_text(path, matrix: EmbeddingMatrix) -> None:
    """Debug variant: one "id v0 v1 ..." line per sample."""
    with open(path, "w", encoding="utf-8") as fh:
        for sid, row in zip(matrix.ids, matrix.rows):
            fh.write(sid + " " + " ".join(repr(float(v)) for v in row) + "\n")


def _read_binary(path):
    with open(path, "rb") as fh:
        header = fh.read(4 + 4 + 4 + 8)
        version, dim, count = struct.unpack("<IIQ", header[4:])
        if version != _VERSION:
            raise ParseError(f"{path}: unsupported embedding format version {version}")
        ids, rows = [], []
        for _ in range(count):
            (id_len,) = struct.unpack("<I", fh.read(4))
            ids.append(fh.read(id_len).decode("utf-8"))
            buf = fh.read(4 * dim)
            if len(buf) != 4 * dim:
                raise ParseError(f"{path}: truncated record for id {ids[-1]!r}")
            rows.append(np.frombuffer(buf, dtype="<f4"))
    return ids, np.array(rows, dtype=np.float32).reshape(count, dim)


def _read_text(path):
    ids, rows = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) < 2:
                raise ParseError(f"{path}: line {lineno}: expected 'id v0 v1 ...'")
            ids.append(parts[0])
            try:
                rows.append(np.array([float(v) for v in parts[1:]], dtype=np.float32))
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: bad float: {exc}") from exc
    if rows and any(r.shape != rows[0].shape for r in rows):
        raise ParseError(f"{path}: inconsistent vector lengths")
    return ids, np.stack(rows) if rows else np.zeros((0, 0), dtype=np.float32)


def load_embedding_file(path, ids) -> EmbeddingMatrix:
    """Load an embedding file and align rows to the requested id order.

    Missing or extra ids are an alignment error listing the first 10
    offenders; non-finite values are a corruption error.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
    file_ids, rows = _read_binary(path) if magic == _MAGIC else _read_text(path)

    requested = list(ids)
    available = {sid: k for k, sid in enumerate(file_ids)}
    if len(available) != len(file_ids):
        raise ValidationError(f"{path}: duplicate ids in embedding file")
    missing = [i for i in requested if i not in available]
    extra = [i for i in file_ids if i not in set(requested)]
    if missing or extra:
        offenders = [f"missing:{i}" for i in missing] + [f"extra:{i}" for i in extra]
        raise AlignmentError(
            f"{path}: id mismatch ({len(missing)} missing, {len(extra)} extra): "
            + ", ".join(offenders[:10])
        )
    aligned = rows[[available[i] for i in requested]]
    if not np.all(np.isfinite(aligned)):
        bad = [requested[k] for k in np.where(~np.isfinite(aligned).all(axis=1))[0][:10]]
        raise NumericError(f"{path}: non-finite values in rows {bad}")
    return EmbeddingMatrix(tuple(requested), aligned)


def l1_distance(u, v) -> float:
    """Sum of per-dimension absolute differences."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionError(f"length mismatch: {u.shape} vs {v.shape}")
    return float(np.sum(np.abs(u - v)))
