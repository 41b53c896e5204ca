"""Metrics, multi-seed PU experiments, and the suspected-mislabel report.

An experiment repeats the labeling scenario over several seeds on a fixed
split, runs the selection + training pipeline per seed, and averages the
per-seed metrics (the reported F1 is the mean of per-seed F1 values, not
the F1 of mean precision/recall).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import encoder
from .config import RunConfig, serialize_config
from .corpus import DatasetSplit, ScarConfig, apply_scar, split_dataset
from .embed import EmbedderConfig, EmbeddingMatrix, hash_embed, load_embedding_file
from .errors import AlignmentError, PuvdetError, ValidationError
from .selection import (
    HP,
    PseudoLabelLedger,
    ledger_training_set,
    progressive_select,
    prototype_distances,
    select_hn,
)

STRATEGIES = ("selective", "all-negative")


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: bool = False     # a zero denominator was mapped to 0.0
    n_seeds: int = 1
    per_seed: tuple = ()


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def compute_metrics(predictions: dict, truth: dict) -> MetricsReport:
    """Confusion counts and the four derived metrics for one evaluation."""
    if set(predictions) != set(truth):
        missing = sorted(set(truth) - set(predictions))[:5]
        extra = sorted(set(predictions) - set(truth))[:5]
        raise AlignmentError(
            f"prediction/truth id mismatch (missing {missing}, extra {extra})"
        )
    tp = fp = tn = fn = 0
    for sid, pred in predictions.items():
        actual = truth[sid]
        if pred == 1 and actual == 1:
            tp += 1
        elif pred == 1 and actual == 0:
            fp += 1
        elif pred == 0 and actual == 0:
            tn += 1
        else:
            fn += 1
    total = tp + fp + tn + fn
    degenerate = (tp + fp == 0) or (tp + fn == 0)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return MetricsReport(
        tp=tp, fp=fp, tn=tn, fn=fn,
        accuracy=(tp + tn) / total if total else 0.0,
        precision=precision,
        recall=recall,
        f1=_f1(precision, recall),
        degenerate=degenerate,
    )


def mean_report(reports) -> MetricsReport:
    """Arithmetic mean of per-seed metrics; counts are summed."""
    reports = tuple(reports)
    if not reports:
        raise ValidationError("cannot average zero reports")
    return MetricsReport(
        tp=sum(r.tp for r in reports),
        fp=sum(r.fp for r in reports),
        tn=sum(r.tn for r in reports),
        fn=sum(r.fn for r in reports),
        accuracy=float(np.mean([r.accuracy for r in reports])),
        precision=float(np.mean([r.precision for r in reports])),
        recall=float(np.mean([r.recall for r in reports])),
        f1=float(np.mean([r.f1 for r in reports])),
        degenerate=any(r.degenerate for r in reports),
        n_seeds=len(reports),
        per_seed=reports,
    )


@dataclass(frozen=True)
class MislabelEntry:
    id: str
    truth: int
    pseudo: str
    confidence: float
    epoch: int


@dataclass(frozen=True)
class MislabelReport:
    entries: tuple[MislabelEntry, ...]

    def ids(self) -> set[str]:
        return {e.id for e in self.entries}


def mislabel_report(ledger: PseudoLabelLedger, truth: dict,
                    confidences: dict) -> MislabelReport:
    """Pseudo-labeled samples whose label contradicts recorded ground truth.

    Sorted by confidence descending, id ascending; an empty report is a
    valid outcome.
    """
    entries = []
    for sid, (kind, epoch) in ledger.snapshot().items():
        if sid not in truth:
            raise ValidationError(f"no ground truth for pseudo-labeled sample {sid!r}")
        pseudo_class = 1 if kind == HP else 0
        if pseudo_class != truth[sid]:
            entries.append(MislabelEntry(
                id=sid,
                truth=truth[sid],
                pseudo=kind,
                confidence=float(confidences.get(sid, 0.0)),
                epoch=epoch,
            ))
    entries.sort(key=lambda e: (-e.confidence, e.id))
    return MislabelReport(entries=tuple(entries))


def write_mislabel_csv(path, report: MislabelReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id,truth,pseudo,confidence,epoch\n")
        for e in report.entries:
            fh.write(f"{e.id},{e.truth},{e.pseudo},{e.confidence:.6f},{e.epoch}\n")


@dataclass(frozen=True)
class SeedResult:
    seed: int
    metrics: MetricsReport
    ledger: PseudoLabelLedger | None
    model: encoder.EncoderModel
    confidences: dict
    n_labeled: int
    progressive_history: tuple


@dataclass(frozen=True)
class ExperimentResult:
    report: MetricsReport
    seed_results: tuple[SeedResult, ...]
    split: DatasetSplit
    strategy: str
    validation_mode: str
    failures: tuple = ()


def build_embeddings(samples, cfg: RunConfig, base_dir=None) -> EmbeddingMatrix:
    ids = [s.id for s in samples]
    if cfg.embedding.source == "hash":
        return hash_embed(samples, EmbedderConfig(
            dim=cfg.embedding.dim, ngram=cfg.embedding.ngram,
            normalize=cfg.embedding.normalize,
        ))
    path = cfg.embedding.path
    if base_dir is not None:
        path = Path(base_dir) / path
    return load_embedding_file(path, ids)


def _truth_map(samples) -> dict:
    truth = {}
    for s in samples:
        if s.truth is None:
            raise ValidationError(f"sample {s.id!r} lacks ground truth; cannot evaluate")
        truth[s.id] = s.truth
    return truth


def _validation_pair(emb, cfg, split, by_id, positives, ledger):
    """Early-stopping reference set; PU mode scores agreement with the
    anchor pseudo-labels (revealed positives + epoch-0 negatives)."""
    if cfg.evaluation.validation == "truth":
        ids = [i for i in split.valid if by_id[i].truth is not None]
        if not ids:
            return None
        X = np.stack([emb.row(i) for i in ids])
        y = np.array([by_id[i].truth for i in ids])
        return (X, y)
    anchor_ids = sorted(positives) + sorted(ledger.hn)
    if not anchor_ids:
        return None
    X = np.stack([emb.row(i) for i in anchor_ids])
    y = np.array([1 if i in positives else 0 for i in anchor_ids])
    return (X, y)


def run_seed_pipeline(samples_by_id, split: DatasetSplit, emb: EmbeddingMatrix,
                      cfg: RunConfig, seed: int,
                      strategy: str = "selective") -> SeedResult:
    """One full labeling scenario: SCAR, selection, training, test metrics."""
    if strategy not in STRATEGIES:
        raise ValidationError(f"unknown strategy {strategy!r}")
    train_samples = [samples_by_id[i] for i in split.train]
    labeled_train, n_labeled = apply_scar(
        train_samples,
        ScarConfig(cfg.scar.label_frequency, seed=seed, mode=cfg.scar.mode),
    )
    positives = {s.id for s in labeled_train if s.selected}
    unlabeled = [s.id for s in labeled_train if not s.selected]
    if not positives:
        raise ValidationError(f"seed {seed}: labeling revealed no positives")

    tcfg = replace(cfg.train, seed=seed)
    model = encoder.init_model(emb.dim, cfg.encoder.hidden, cfg.encoder.proj_dim, seed=seed)

    ledger = None
    history = ()
    if strategy == "all-negative":
        ids = [s.id for s in labeled_train]
        X = np.stack([emb.row(i) for i in ids])
        y = np.array([s.selected for s in labeled_train])
        result = encoder.train(model, encoder.TrainingSet(X=X, y=y, w=np.ones(len(y)),
                                                          ids=tuple(ids)), tcfg)
        model = result.model
    else:
        dist = prototype_distances(emb, positives, unlabeled, cfg.selection)
        hn = select_hn(dist, (len(unlabeled), len(positives)), cfg.selection)
        if not hn:
            raise ValidationError(f"seed {seed}: prototype step selected no negatives")
        ledger = PseudoLabelLedger(forbidden=positives)
        for sid in sorted(hn):
            ledger.add_hn(sid, 0)
        valid = _validation_pair(emb, cfg, split, samples_by_id, positives, ledger)
        prog = progressive_select(emb, positives, ledger, model, cfg.progressive,
                                  tcfg, valid=valid, unlabeled=unlabeled)
        model, ledger, history = prog.model, prog.ledger, prog.history
        if cfg.evaluation.mrl_stage:
            ts = ledger_training_set(emb, positives, ledger,
                                     cfg.progressive.max_progressive_epochs)
            result = encoder.train(model, ts, tcfg, valid=valid,
                                   objective="metric", mcfg=cfg.mrl)
            model = result.model

    test_ids = list(split.test)
    truth = _truth_map([samples_by_id[i] for i in test_ids])
    X_test = np.stack([emb.row(i) for i in test_ids])
    preds = encoder.predict_proba_batch(model, X_test).argmax(axis=1)
    metrics = compute_metrics({i: int(p) for i, p in zip(test_ids, preds)}, truth)

    confidences = {}
    if ledger is not None and len(ledger):
        ledger_ids = sorted(ledger.snapshot())
        probs = encoder.predict_proba_batch(
            model, np.stack([emb.row(i) for i in ledger_ids]))
        for sid, p in zip(ledger_ids, probs):
            pseudo_class = 1 if ledger.kind(sid) == HP else 0
            confidences[sid] = float(p[pseudo_class])

    return SeedResult(seed=seed, metrics=metrics, ledger=ledger, model=model,
                      confidences=confidences, n_labeled=n_labeled,
                      progressive_history=history)


def run_pu_experiment(samples, cfg: RunConfig, n_repeats: int | None = None,
                      seeds=None, strategy: str = "selective",
                      emb: EmbeddingMatrix | None = None,
                      split: DatasetSplit | None = None) -> ExperimentResult:
    """Repeat the labeling scenario and average the per-seed test metrics.

    A seed that fails is recorded and skipped; the experiment only fails
    when every seed does.
    """
    if seeds is None:
        seeds = cfg.seeds
    if n_repeats is None:
        n_repeats = cfg.evaluation.n_repeats
    seeds = tuple(seeds)[:n_repeats]
    if not seeds:
        raise ValidationError("experiment needs at least one seed")

    by_id = {s.id: s for s in samples}
    if split is None:
        split = split_dataset(samples, cfg.split_seed)
    if emb is None:
        emb = build_embeddings(samples, cfg)

    results, failures = [], []
    for seed in seeds:
        try:
            results.append(run_seed_pipeline(by_id, split, emb, cfg, seed, strategy))
        except PuvdetError as exc:
            failures.append((seed, str(exc)))
    if not results:
        detail = "; ".join(f"seed {s}: {m}" for s, m in failures)
        raise PuvdetError(f"all seeds failed: {detail}")

    return ExperimentResult(
        report=mean_report([r.metrics for r in results]),
        seed_results=tuple(results),
        split=split,
        strategy=strategy,
        validation_mode=cfg.evaluation.validation,
        failures=tuple(failures),
    )


def format_metrics_line(m: MetricsReport) -> str:
    return (f"tp={m.tp} fp={m.fp} tn={m.tn} fn={m.fn} "
            f"accuracy={m.accuracy:.6f} precision={m.precision:.6f} "
            f"recall={m.recall:.6f} f1={m.f1:.6f}"
            + (" [degenerate]" if m.degenerate else ""))


def format_experiment(result: ExperimentResult, cfg: RunConfig) -> str:
    lines = [
        "# pu experiment report",
        f"strategy: {result.strategy}",
        f"validation_mode: {result.validation_mode}",
        f"seeds: {', '.join(str(r.seed) for r in result.seed_results)}",
    ]
    if result.failures:
        for seed, msg in result.failures:
            lines.append(f"failed_seed: {seed}: {msg}")
    lines.append("")
    lines.append("[config]")
    lines.extend(serialize_config(cfg).rstrip().splitlines())
    lines.append("")
    lines.append("[per-seed]")
    for r in result.seed_results:
        lines.append(f"seed={r.seed} n_labeled={r.n_labeled} " + format_metrics_line(r.metrics))
    lines.append("")
    lines.append("[mean]")
    lines.append(format_metrics_line(result.report))
    return "\n".join(lines) + "\n"


def run_sweep(samples, cfg: RunConfig, parameter: str | None = None,
              values=None, strategy: str = "selective"):
    """Re-run the experiment over one hyper-parameter axis.

    Returns (parameter, [(value, ExperimentResult), ...]). The split and
    embeddings are shared across all grid points.
    """
    parameter = parameter or cfg.sweep.parameter
    values = tuple(values if values is not None else cfg.sweep.values)
    split = split_dataset(samples, cfg.split_seed)
    emb = build_embeddings(samples, cfg)

    rows = []
    for value in values:
        if parameter == "ratio":
            point = replace(cfg, scar=replace(cfg.scar, label_frequency=float(value)))
        elif parameter == "k":
            point = replace(cfg, selection=replace(cfg.selection, k_value=float(value)))
        elif parameter == "t_ratio":
            point = replace(cfg, selection=replace(cfg.selection, t_ratio=float(value)))
        else:
            raise ValidationError(f"unknown sweep parameter {parameter!r}")
        rows.append((value, run_pu_experiment(samples, point, strategy=strategy,
                                              emb=emb, split=split)))
    return parameter, rows


def format_sweep(parameter: str, rows) -> str:
    lines = [f"# sweep over {parameter}",
             f"{parameter},accuracy,precision,recall,f1"]
    for value, result in rows:
        m = result.report
        lines.append(f"{value},{m.accuracy:.6f},{m.precision:.6f},{m.recall:.6f},{m.f1:.6f}")
    return "\n".join(lines) + "\n"
