"""Command line front end.

Every subcommand reads an experiment YAML file (``--config``); ``--seed`` and
``--out`` override the master seed and output directory.  Failures exit with
a category code: 2 invalid arguments or config, 3 hygiene violation,
4 numeric failure, 5 bad or incompatible file, 6 missing file.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .errors import KDError
from .runner import (
    ExperimentConfig,
    RepresentationPipeline,
    emit_report,
    prepare_data,
    read_results,
    run_experiment,
    write_results,
)

log = logging.getLogger("kdanomaly")


def _load(args) -> ExperimentConfig:
    return ExperimentConfig.load(args.config).with_overrides(seed=args.seed, output_dir=args.out)


def _pipelines(cfg: ExperimentConfig, only: Optional[List[str]]):
    data = prepare_data(cfg)
    names = only or [r.name for r in cfg.representations]
    return [RepresentationPipeline(cfg, cfg.representation(n), data) for n in names]


def cmd_pretrain(args) -> None:
    cfg = _load(args)
    for pipe in _pipelines(cfg, args.representation):
        teacher = pipe.teacher()
        log.info("teacher %s -> %s (final loss %s)", pipe.rep.name, pipe.teacher_path,
                 teacher.history[-1] if teacher.history else "n/a")


def cmd_distill(args) -> None:
    cfg = _load(args)
    for pipe in _pipelines(cfg, args.representation):
        pair = pipe.pair()
        log.info("student %s -> %s (final loss %s)", pipe.rep.name, pipe.student_path,
                 pair.history[-1] if pair.history else "n/a")


def cmd_score(args) -> None:
    """Write per-image test scores for every representation and detector."""
    cfg = _load(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "scores.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["representation", "detector", "index", "target", "score"])
        for pipe in _pipelines(cfg, args.representation):
            scores = pipe.scores(pipe.pair(), cfg.detectors)
            for det in cfg.detectors:
                for i, (t, s) in enumerate(zip(pipe.data.test_targets, scores[det])):
                    w.writerow([pipe.rep.name, det, i, int(t), repr(float(s))])
    log.info("wrote %s", path)


def cmd_eval(args) -> None:
    cfg = _load(args)
    rows = run_experiment(cfg, jobs=args.jobs)
    write_results(rows, Path(cfg.output_dir) / "results.csv")
    for r in rows:
        print(f"{r.representation:>16s} {r.detector:>18s} auroc={r.auroc:.4f}")


def cmd_brittleness(args) -> None:
    cfg = _load(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "brittleness.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["representation", "numerator", "denominator", "score", "n", "stop_teacher"])
        for pipe in _pipelines(cfg, args.representation):
            rep = pipe.brittleness(pipe.pair())
            w.writerow([pipe.rep.name, repr(rep.numerator), repr(rep.denominator), repr(rep.score), rep.n,
                        rep.stop_teacher])
            print(f"{pipe.rep.name:>16s} avg_l2_norm={rep.numerator:.6g} trace={rep.denominator:.6g} "
                  f"score={rep.score:.6g}")


def cmd_run(args) -> None:
    cfg = _load(args)
    rows = run_experiment(cfg, jobs=args.jobs)
    paths = emit_report(rows, cfg.output_dir)
    print(Path(paths["correlations"]).read_text(), end="")
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))


def cmd_report(args) -> None:
    """Rebuild scatter.csv and correlations.txt from an existing results.csv."""
    out = Path(args.out) if args.out else Path(_load(args).output_dir)
    rows = read_results(Path(args.results) if args.results else out / "results.csv")
    paths = emit_report(rows, out)
    print(Path(paths["correlations"]).read_text(), end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kdanomaly", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, jobs=False, reps=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=name != "report", help="experiment YAML file")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default=None, help="override the output directory")
        if reps:
            p.add_argument("--representation", action="append", default=None,
                           help="restrict to this representation (repeatable)")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="representations to run in parallel")
        p.set_defaults(func=func)
        return p

    add("pretrain", cmd_pretrain, "pre-train (or resume) teachers and save checkpoints")
    add("distill", cmd_distill, "train students against their teachers")
    add("score", cmd_score, "write per-image anomaly scores for the test split")
    add("eval", cmd_eval, "compute AUROC rows and write results.csv", jobs=True, reps=False)
    add("brittleness", cmd_brittleness, "compute the brittleness diagnostic per representation")
    add("run", cmd_run, "run the full grid and write all reports", jobs=True, reps=False)
    rep = add("report", cmd_report, "rebuild reports from results.csv", reps=False)
    rep.add_argument("--results", default=None, help="results.csv to read (default: <out>/results.csv)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "report" and not args.config and not args.out:
        parser.error("report needs --out or --config")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    try:
        args.func(args)
    except KDError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
