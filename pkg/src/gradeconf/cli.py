"""Command-line front end.

Subcommands::

    synthesize  generate the synthetic cohort and rater annotations
    train       train k x D models (synthesizing data unless --data is given)
    score       score bags with saved checkpoints
    evaluate    selective curves, median split and agreement from saved scores
    run-all     the full experiment

Exit codes: 0 on success, 1 on usage or configuration errors, 2 on runtime
failures. Every run writes ``run-info.json`` into the output directory.
The output directory defaults to ``$GRADECONF_OUTPUT_ROOT`` (or
``./gradeconf-out``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import ConfigError, ExperimentConfig, build_config, dump_config
from .confidence import METHODS, read_scores_csv, write_scores_csv
from .evaluation import (
    agreement_analysis,
    median_split_report,
    selective_curve,
    write_agreement_csv,
    write_curves_csv,
    write_stratified_csv,
    write_thresholds_csv,
)
from .model import load_checkpoint, read_bag_dir, save_checkpoint, write_bag
from .numerics import STREAM_BOOTSTRAP, STREAM_RANDOM_BASELINE, RandomStream
from .pipeline import (
    PipelineError,
    make_splits,
    read_predictions_csv,
    run_experiment,
    score_only,
    train_ensembles,
    write_predictions_csv,
)
from .synthdata import generate, read_manifest, simulate_raters, write_dataset

OUTPUT_ENV = "GRADECONF_OUTPUT_ROOT"
log = logging.getLogger("gradeconf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file with [section] key = value entries")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="master seed (overrides experiment.seed)")
    common.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./gradeconf-out)")
    common.add_argument("--jobs", type=int, help="concurrent trainings")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="gradeconf", description="Grade-sensitive confidence experiments.")
    parser.add_argument("--version", action="version", version=f"gradeconf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("synthesize", parents=[common], help="write the synthetic cohort")
    p = sub.add_parser("train", parents=[common], help="train k x D models")
    p.add_argument("--data", help="directory of .bag files with manifest.csv (default: synthesize)")
    p = sub.add_parser("score", parents=[common], help="score bags with saved checkpoints")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint file or directory of .npz checkpoints (repeatable)")
    p.add_argument("--bags", help="directory of .bag files (default: <out>/test)")
    p.add_argument("--method", action="append", choices=METHODS, help="confidence method (repeatable; default all)")
    p = sub.add_parser("evaluate", parents=[common], help="evaluate saved predictions and scores")
    p.add_argument("--predictions", help="predictions CSV (default: <out>/predictions.csv)")
    p.add_argument("--scores", help="scores CSV (default: <out>/scores.csv)")
    p.add_argument("--manifest", help="manifest CSV with rater agreement (optional)")
    p.add_argument("--method", action="append", choices=METHODS, help="confidence method (repeatable; default all)")
    p.add_argument("--curve-step", type=int, help="bags removed between curve points")
    sub.add_parser("run-all", parents=[common], help="run the full experiment")
    return parser


def _config(args) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.jobs is not None:
        overrides.append(f"experiment.jobs={args.jobs}")
    if getattr(args, "curve_step", None) is not None:
        overrides.append(f"experiment.curve_step={args.curve_step}")
    return build_config(args.config, overrides, args.seed)


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUTPUT_ENV) or "gradeconf-out")


def _write_run_info(
    out: Path, args, cfg: ExperimentConfig, started: float, status: str, timings: Optional[dict] = None
) -> None:
    info = {
        "command": args.command,
        "argv": sys.argv[1:],
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_text": dump_config(cfg),
        "wall_clock_seconds": round(time.time() - started, 3),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "status": status,
        "stage_seconds": {k: round(v, 3) for k, v in (timings or {}).items()},
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "run-info.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synthesize(cfg: ExperimentConfig, args, out: Path) -> None:
    ds = generate(cfg.generator)
    write_dataset(ds, out / "data", simulate_raters(ds, cfg.rater))
    print(f"wrote {len(ds.bags)} bags to {out / 'data'}")


def _load_data(cfg: ExperimentConfig, data: Optional[str], out: Path):
    if data is None:
        ds = generate(cfg.generator)
        write_dataset(ds, out / "data", simulate_raters(ds, cfg.rater))
        return ds.bags
    bags = read_bag_dir(data)
    if not bags:
        raise FileNotFoundError(f"no .bag files in {data}")
    return bags


def cmd_train(cfg: ExperimentConfig, args, out: Path) -> None:
    bags = _load_data(cfg, args.data, out)
    _, test, folds = make_splits([b.label for b in bags], cfg)
    (out / "test").mkdir(parents=True, exist_ok=True)
    for i in test:
        write_bag(bags[i], out / "test" / f"{bags[i].bag_id}.bag")
    models, histories = train_ensembles(bags, folds, cfg)
    ck = out / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    for p in models:
        save_checkpoint(p, ck / f"fold{p.meta['fold']}_member{p.meta['member']}.npz")
    (out / "training.json").write_text(json.dumps(histories, indent=1, sort_keys=True) + "\n")
    print(f"trained {len(models)} models; checkpoints in {ck}")


def _checkpoint_files(paths: Sequence[str]) -> list[Path]:
    files: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.glob("*.npz")))
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(f"checkpoint not found: {p}")
    if not files:
        raise FileNotFoundError(f"no checkpoints found in {', '.join(paths)}")
    return files


def cmd_score(cfg: ExperimentConfig, args, out: Path) -> None:
    models = [load_checkpoint(f, cfg.generator.n_classes) for f in _checkpoint_files(args.checkpoint)]
    bags = read_bag_dir(args.bags or out / "test")
    if not bags:
        raise FileNotFoundError(f"no .bag files in {args.bags or out / 'test'}")
    methods = args.method or list(METHODS)
    e = cfg.experiment
    res = score_only(models, bags, methods, cfg.seed, e.mc_samples, e.confidence_reduce)
    out.mkdir(parents=True, exist_ok=True)
    predicted = {p.bag_id: p.predicted_class for p in res.predictions}
    truth = {p.bag_id: p.true_class for p in res.predictions}
    write_scores_csv(out / "scores.csv", list(res.scores.values()), predicted, truth)
    write_predictions_csv(out / "predictions.csv", res.predictions)
    accounting = {"forward_passes": res.forward_passes, "passes_per_bag": res.passes_per_bag}
    (out / "inference.json").write_text(json.dumps(accounting, indent=1, sort_keys=True) + "\n")
    print(f"scored {len(bags)} bags with {len(models)} models: {', '.join(res.scores)}")


def cmd_evaluate(cfg: ExperimentConfig, args, out: Path) -> None:
    preds = read_predictions_csv(args.predictions or out / "predictions.csv")
    scores = read_scores_csv(args.scores or out / "scores.csv")
    methods = args.method or [m for m in METHODS if m in scores]
    missing = [m for m in methods if m not in scores]
    if missing:
        raise KeyError(f"scores file has no values for {', '.join(missing)}")
    scores = {m: scores[m] for m in methods}
    e = cfg.experiment
    curves = [
        selective_curve(preds, scores[m], e.curve_step, e.random_trials, RandomStream(cfg.seed, STREAM_RANDOM_BASELINE))
        for m in methods
    ]
    out.mkdir(parents=True, exist_ok=True)
    write_curves_csv(out / "selective_curves.csv", curves)
    write_thresholds_csv(out / "threshold_curves.csv", curves)
    if len(preds) >= 2 * len(preds[0].risk):
        write_stratified_csv(out / "stratified.csv",
                             median_split_report(preds, scores, e.bootstrap, RandomStream(cfg.seed, STREAM_BOOTSTRAP)))
    if args.manifest:
        rows = {r["bag_id"]: r for r in read_manifest(args.manifest)}
        flags = [rows[p.bag_id]["agreement"] == "1" for p in preds]
        if any(flags) and not all(flags):
            results = []
            for m in methods:
                lookup = scores[m].as_dict()
                results.append(agreement_analysis([lookup[p.bag_id] for p in preds], flags, m))
            write_agreement_csv(out / "agreement.csv", results)
    print(f"evaluated {len(preds)} bags for {', '.join(methods)} in {out}")


def cmd_run_all(cfg: ExperimentConfig, args, out: Path) -> None:
    report = run_experiment(cfg, out, args.timings)
    gs = report["selective_curves"]["grade_sensitive"]
    print(f"overall AUC {report['metrics']['overall_auc']:.4f}; "
          f"grade-sensitive AUC after removing {gs['removed'][-1]} bags: {gs['auc'][-1]}")
    print(f"report: {out / 'report.json'}")


COMMANDS = {
    "synthesize": cmd_synthesize,
    "train": cmd_train,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "run-all": cmd_run_all,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _config(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"gradeconf: configuration error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"gradeconf: error: {exc}", file=sys.stderr)
        return 2

    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    out = _out_dir(args)
    started = time.time()
    args.timings = {}
    try:
        COMMANDS[args.command](cfg, args, out)
    except PipelineError as exc:
        print(f"gradeconf {args.command}: error: {exc}", file=sys.stderr)
        _write_run_info(out, args, cfg, started, f"failed at stage {exc.stage}", args.timings)
        return 2
    except Exception as exc:  # every other failure is reported without a traceback
        log.debug("failure", exc_info=True)
        print(f"gradeconf {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        _write_run_info(out, args, cfg, started, f"failed: {type(exc).__name__}", args.timings)
        return 2
    _write_run_info(out, args, cfg, started, "ok", args.timings)
    return 0


if __name__ == "__main__":
    sys.exit(main())
