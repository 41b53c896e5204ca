"""Command-line front end.

Stages write their artifacts under <workdir>/<output_dir> so a run
directory is self-contained and reproducible: the exact config used is
echoed into it, and re-running any stage with that config rewrites the
same bytes.

Exit codes: 0 success, 1 stage failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import encoder
from .config import RunConfig, parse_config, write_config
from .corpus import (
    DatasetSplit,
    ScarConfig,
    apply_scar,
    dataset_stats,
    load_corpus,
    save_corpus,
    split_dataset,
)
from .embed import load_embedding_file, write_embedding_file
from .errors import PuvdetError, ValidationError
from .evaluation import (
    build_embeddings,
    compute_metrics,
    format_experiment,
    format_metrics_line,
    format_sweep,
    mean_report,
    mislabel_report,
    run_pu_experiment,
    run_seed_pipeline,
    run_sweep,
    write_mislabel_csv,
    ExperimentResult,
)
from .selection import (
    PseudoLabelLedger,
    progressive_select,
    prototype_distances,
    read_ledger,
    select_hn,
    write_ledger,
    ledger_training_set,
)

COMMANDS = ("prep", "simulate-pu", "select", "train", "evaluate", "report", "sweep")


class Workspace:
    def __init__(self, workdir: Path, cfg: RunConfig):
        self.root = Path(workdir)
        self.cfg = cfg
        self.run_dir = self.root / cfg.output_dir

    @property
    def dataset_path(self):
        return self.root / self.cfg.dataset

    @property
    def splits_path(self):
        return self.run_dir / "splits.json"

    @property
    def embeddings_path(self):
        return self.run_dir / "embeddings.puvd"

    def seed_dir(self, seed: int) -> Path:
        return self.run_dir / f"seed_{seed}"

    def load_samples(self):
        if not self.dataset_path.exists():
            raise PuvdetError(f"dataset not found: {self.dataset_path}")
        return load_corpus(self.dataset_path)

    def load_split(self) -> DatasetSplit:
        if not self.splits_path.exists():
            raise PuvdetError(f"missing {self.splits_path}; run 'prep' first")
        rec = json.loads(self.splits_path.read_text(encoding="utf-8"))
        return DatasetSplit(train=tuple(rec["train"]), valid=tuple(rec["valid"]),
                            test=tuple(rec["test"]), seed=rec["seed"])

    def load_embeddings(self, ids):
        if not self.embeddings_path.exists():
            raise PuvdetError(f"missing {self.embeddings_path}; run 'prep' first")
        return load_embedding_file(self.embeddings_path, ids)

    def load_pu_corpus(self, seed: int):
        path = self.seed_dir(seed) / "pu.jsonl"
        if not path.exists():
            raise PuvdetError(f"missing {path}; run 'simulate-pu' first")
        return load_corpus(path)


def cmd_prep(ws: Workspace) -> None:
    samples = ws.load_samples()
    ws.run_dir.mkdir(parents=True, exist_ok=True)
    write_config(ws.run_dir / "config.yaml", ws.cfg)

    split = split_dataset(samples, ws.cfg.split_seed)
    ws.splits_path.write_text(json.dumps({
        "seed": split.seed,
        "train": list(split.train),
        "valid": list(split.valid),
        "test": list(split.test),
    }, indent=0), encoding="utf-8")

    emb = build_embeddings(samples, ws.cfg, base_dir=ws.root)
    write_embedding_file(ws.embeddings_path, emb)

    stats = dataset_stats(samples)
    lines = ["# dataset stats"] + [f"{k}={v}" for k, v in stats.items()]
    lines += [f"split_train={len(split.train)}", f"split_valid={len(split.valid)}",
              f"split_test={len(split.test)}"]
    (ws.run_dir / "stats.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"prep: {stats['n']} samples, embeddings dim {emb.dim} -> {ws.run_dir}")


def cmd_simulate_pu(ws: Workspace) -> None:
    samples = ws.load_samples()
    split = ws.load_split()
    by_id = {s.id: s for s in samples}
    train_samples = [by_id[i] for i in split.train]
    for seed in ws.cfg.seeds:
        labeled, n = apply_scar(
            train_samples,
            ScarConfig(ws.cfg.scar.label_frequency, seed=seed, mode=ws.cfg.scar.mode),
        )
        out = ws.seed_dir(seed) / "pu.jsonl"
        save_corpus(labeled, out)
        print(f"simulate-pu: seed {seed}: {n} positives revealed -> {out}")


def cmd_select(ws: Workspace) -> None:
    split = ws.load_split()
    all_ids = list(split.train) + list(split.valid) + list(split.test)
    for seed in ws.cfg.seeds:
        pu = ws.load_pu_corpus(seed)
        emb = ws.load_embeddings(all_ids)
        positives = {s.id for s in pu if s.selected}
        unlabeled = [s.id for s in pu if not s.selected]
        if not positives:
            raise PuvdetError(f"seed {seed}: PU corpus has no revealed positives")
        dist = prototype_distances(emb, positives, unlabeled, ws.cfg.selection)
        hn = select_hn(dist, (len(unlabeled), len(positives)), ws.cfg.selection)
        ledger = PseudoLabelLedger(forbidden=positives)
        for sid in sorted(hn):
            ledger.add_hn(sid, 0)
        path = ws.seed_dir(seed) / "ledger.jsonl"
        write_ledger(path, ledger, ws.cfg.progressive.max_progressive_epochs)
        print(f"select: seed {seed}: {len(hn)} negatives -> {path}")


def cmd_train(ws: Workspace) -> None:
    samples = ws.load_samples()
    split = ws.load_split()
    by_id = {s.id: s for s in samples}
    for seed in ws.cfg.seeds:
        pu = ws.load_pu_corpus(seed)
        positives = {s.id for s in pu if s.selected}
        unlabeled = [s.id for s in pu if not s.selected]
        ledger_path = ws.seed_dir(seed) / "ledger.jsonl"
        if not ledger_path.exists():
            raise PuvdetError(f"missing {ledger_path}; run 'select' first")
        ledger = read_ledger(ledger_path, forbidden=positives)
        emb = ws.load_embeddings([s.id for s in samples])

        tcfg = replace(ws.cfg.train, seed=seed)
        model = encoder.init_model(emb.dim, ws.cfg.encoder.hidden,
                                   ws.cfg.encoder.proj_dim, seed=seed)
        valid = None
        if ws.cfg.evaluation.validation == "truth":
            ids = [i for i in split.valid if by_id[i].truth is not None]
            if ids:
                valid = (np.stack([emb.row(i) for i in ids]),
                         np.array([by_id[i].truth for i in ids]))
        else:
            anchor = sorted(positives) + sorted(ledger.hn)
            valid = (np.stack([emb.row(i) for i in anchor]),
                     np.array([1 if i in positives else 0 for i in anchor]))

        prog = progressive_select(emb, positives, ledger, model, ws.cfg.progressive,
                                  tcfg, valid=valid, unlabeled=unlabeled)
        model, ledger = prog.model, prog.ledger
        if ws.cfg.evaluation.mrl_stage:
            ts = ledger_training_set(emb, positives, ledger,
                                     ws.cfg.progressive.max_progressive_epochs)
            model = encoder.train(model, ts, tcfg, valid=valid,
                                  objective="metric", mcfg=ws.cfg.mrl).model

        write_ledger(ledger_path, ledger, ws.cfg.progressive.max_progressive_epochs)
        encoder.save_checkpoint(ws.seed_dir(seed) / "model.puvm", model)
        print(f"train: seed {seed}: ledger {len(ledger)} entries, "
              f"{len(prog.history)} progressive epochs")


def cmd_evaluate(ws: Workspace) -> None:
    samples = ws.load_samples()
    split = ws.load_split()
    by_id = {s.id: s for s in samples}
    test_ids = list(split.test)
    truth = {}
    for i in test_ids:
        if by_id[i].truth is None:
            raise PuvdetError(f"test sample {i!r} lacks ground truth")
        truth[i] = by_id[i].truth
    emb = ws.load_embeddings([s.id for s in samples])

    reports = []
    lines = ["# evaluation", f"validation_mode: {ws.cfg.evaluation.validation}", "",
             "[per-seed]"]
    for seed in ws.cfg.seeds:
        ckpt = ws.seed_dir(seed) / "model.puvm"
        if not ckpt.exists():
            raise PuvdetError(f"missing {ckpt}; run 'train' first")
        model = encoder.load_checkpoint(ckpt)
        X = np.stack([emb.row(i) for i in test_ids])
        preds = encoder.predict_proba_batch(model, X).argmax(axis=1)
        metrics = compute_metrics({i: int(p) for i, p in zip(test_ids, preds)}, truth)
        reports.append(metrics)
        line = f"seed={seed} " + format_metrics_line(metrics)
        lines.append(line)
        (ws.seed_dir(seed) / "metrics.txt").write_text(line + "\n", encoding="utf-8")
    lines += ["", "[mean]", format_metrics_line(mean_report(reports))]
    (ws.run_dir / "metrics.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"evaluate: mean over {len(reports)} seed(s): "
          + format_metrics_line(mean_report(reports)))


def cmd_report(ws: Workspace) -> None:
    samples = ws.load_samples()
    by_id = {s.id: s for s in samples}
    emb = ws.load_embeddings([s.id for s in samples])
    for seed in ws.cfg.seeds:
        pu = ws.load_pu_corpus(seed)
        positives = {s.id for s in pu if s.selected}
        ledger_path = ws.seed_dir(seed) / "ledger.jsonl"
        ckpt = ws.seed_dir(seed) / "model.puvm"
        if not ledger_path.exists() or not ckpt.exists():
            raise PuvdetError(f"seed {seed}: need ledger and model; run 'train' first")
        ledger = read_ledger(ledger_path, forbidden=positives)
        model = encoder.load_checkpoint(ckpt)
        truth = {i: by_id[i].truth for i in ledger.snapshot() if by_id[i].truth is not None}
        ids = sorted(ledger.snapshot())
        probs = encoder.predict_proba_batch(model, np.stack([emb.row(i) for i in ids]))
        conf = {}
        for sid, p in zip(ids, probs):
            conf[sid] = float(p[1] if ledger.kind(sid) == "HP" else p[0])
        report = mislabel_report(ledger, truth, conf)
        out = ws.seed_dir(seed) / "mislabels.csv"
        write_mislabel_csv(out, report)
        print(f"report: seed {seed}: {len(report.entries)} suspected mislabels -> {out}")


def cmd_sweep(ws: Workspace, parameter=None, values=None) -> None:
    samples = ws.load_samples()
    parameter, rows = run_sweep(samples, ws.cfg, parameter=parameter, values=values)
    text = format_sweep(parameter, rows)
    ws.run_dir.mkdir(parents=True, exist_ok=True)
    (ws.run_dir / "sweep.csv").write_text(text, encoding="utf-8")
    print(text, end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="puvdet",
        description="PU-learning pipeline for function-level vulnerability detection",
    )
    parser.add_argument("--workdir", default=".", help="root for all relative paths")
    parser.add_argument("--config", default="config.yaml",
                        help="run config file, relative to --workdir")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed list with one seed")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("prep", "simulate-pu", "select", "train", "evaluate", "report"):
        sub.add_parser(name)
    sweep = sub.add_parser("sweep")
    sweep.add_argument("--parameter", choices=("ratio", "k", "t_ratio"), default=None)
    sweep.add_argument("--values", default=None,
                       help="comma-separated grid values, overrides the config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    workdir = Path(args.workdir)
    try:
        cfg = parse_config(workdir / args.config)
        if args.seed is not None:
            cfg = replace(cfg, seeds=(args.seed,))
        ws = Workspace(workdir, cfg)
        if args.command == "prep":
            cmd_prep(ws)
        elif args.command == "simulate-pu":
            cmd_simulate_pu(ws)
        elif args.command == "select":
            cmd_select(ws)
        elif args.command == "train":
            cmd_train(ws)
        elif args.command == "evaluate":
            cmd_evaluate(ws)
        elif args.command == "report":
            cmd_report(ws)
        elif args.command == "sweep":
            values = None
            if args.values:
                values = [float(v) for v in args.values.split(",")]
            cmd_sweep(ws, parameter=args.parameter, values=values)
    except PuvdetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
