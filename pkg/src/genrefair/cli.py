"""Command-line entry point.

Examples:
  genrefair run --config configs/ml100k.json --out results/ml100k
  genrefair sweep --config configs/synthetic.json --out results/sweep --seed 3
  genrefair train --config configs/ml100k.json --out results/ckpt --model MF-fair
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiment import (
    DEFAULT_ALPHAS,
    ExperimentConfig,
    ExperimentError,
    ReportBundle,
    _safe_name,
    alpha_sweep,
    balanced_group_sample,
    emit_report,
    evaluate_model,
    figure1_csv,
    fit_model,
    genre_proportion_analysis,
    load_configured_dataset,
    prepare,
    run_experiment,
    sweep_csv,
)
from .ingest import FEMALE, MALE, filter_dataset, summarize
from .recommenders import MfModel, load_model

_logger = logging.getLogger("genrefair")


def _out_dir(args, sub: str | None = None) -> Path:
    out = Path(args.out) / sub if sub else Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.overwrite:
        raise ExperimentError("output", f"{out} is not empty (use --overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=1), encoding="utf-8")


def _config(args) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.load(args.config)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ExperimentError("config", f"{args.config}: {exc}") from exc
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is None:
        args.out = cfg.output.get("directory", "results")
    return cfg


def cmd_ingest(args) -> None:
    cfg = _config(args)
    try:
        ds = filter_dataset(load_configured_dataset(cfg.dataset), int(cfg.dataset.get("min_interactions", 5)))
    except Exception as exc:
        raise ExperimentError("ingest", str(exc)) from exc
    out = _out_dir(args)
    _write_json(out / "dataset.json", ds.to_json())
    _write_json(out / "summary.json", summarize(ds))
    print(json.dumps(summarize(ds)))


def cmd_split(args) -> None:
    cfg = _config(args)
    prep = prepare(cfg)
    out = _out_dir(args)
    _write_json(out / f"split_seed{cfg.seed}.json", prep.split.to_json())
    print(f"train={len(prep.split.train)} validation={len(prep.split.validation)} test={len(prep.split.test)}")


def cmd_train(args) -> None:
    cfg = _config(args)
    prep = prepare(cfg)
    out = _out_dir(args, "checkpoints")
    for spec in cfg.models:
        if args.model and spec.name not in args.model:
            continue
        model, log = fit_model(spec, prep, cfg.seed)
        stem = f"{_safe_name(spec.name)}_seed{cfg.seed}"
        if isinstance(model, MfModel):
            model.save(out / f"{stem}.npz", extra={"model_name": spec.name})
            (out / f"{stem}_training_log.csv").write_text(log.to_csv(), encoding="utf-8")
        else:
            model.save(out / f"{stem}.npz")
        print(f"saved {spec.name} -> {out / (stem + '.npz')}")


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    prep = prepare(cfg)
    ckpt = Path(args.out) / "checkpoints"
    models = {}
    for spec in cfg.models:
        if args.model and spec.name not in args.model:
            continue
        path = ckpt / f"{_safe_name(spec.name)}_seed{cfg.seed}.npz"
        if not path.is_file():
            models[spec.name] = {"type": spec.type, "failure": f"missing checkpoint {path}"}
            continue
        entry = {"type": spec.type, "fair": spec.fair, "hyperparameters": spec.hyperparameters}
        entry.update(evaluate_model(load_model(path), prep, cfg, spec.name))
        models[spec.name] = entry
    bundle = ReportBundle(config=cfg.to_json(), dataset=summarize(prep.dataset), models=models, seed=cfg.seed)
    emit_report(bundle, Path(args.out) / "report", overwrite=args.overwrite)
    print(f"wrote report to {Path(args.out) / 'report'}")


def cmd_sweep(args) -> None:
    cfg = _config(args)
    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas else list(DEFAULT_ALPHAS)
    rows = alpha_sweep(cfg, args.model[0] if args.model else None, alphas)
    out = _out_dir(args)
    K = int(cfg.evaluation["K"])
    (out / f"sweep_seed{cfg.seed}.csv").write_text(sweep_csv(rows, K), encoding="utf-8")
    _write_json(out / f"sweep_seed{cfg.seed}.json", {"config": cfg.to_json(), "rows": rows})
    sys.stdout.write(sweep_csv(rows, K))


def cmd_figure1(args) -> None:
    cfg = _config(args)
    prep = prepare(cfg)
    fig_cfg = cfg.evaluation.get("figure1") or {}
    specs = [m for m in cfg.models if (m.name in args.model if args.model else m.type == "MF" and not m.fair)]
    if not specs:
        raise ExperimentError("figure1", "no matching model (default: the unregularized MF)")
    out = _out_dir(args)
    male, female = balanced_group_sample(prep.test_users_of(MALE), prep.test_users_of(FEMALE),
                                         int(fig_cfg.get("seed", cfg.seed)))
    for spec in specs:
        model, _ = fit_model(spec, prep, cfg.seed)
        fig = genre_proportion_analysis(model, prep, male, female, fig_cfg.get("categories"), int(fig_cfg.get("k", 10)))
        path = out / f"{_safe_name(spec.name)}_seed{cfg.seed}_figure1.csv"
        path.write_text(figure1_csv(fig), encoding="utf-8")
        print(f"wrote {path}")


def cmd_run(args) -> None:
    cfg = _config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.overwrite:
        raise ExperimentError("output", f"{out} is not empty (use --overwrite)")
    bundle = run_experiment(cfg, args.model or None)
    if args.sweep:
        bundle.sweep = alpha_sweep(cfg)
    for p in emit_report(bundle, out, overwrite=args.overwrite):
        print(p)
    failed = [n for n, m in bundle.models.items() if "failure" in m]
    if failed:
        raise ExperimentError("train", f"models failed: {', '.join(failed)}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genrefair", description="Category-aware gender fairness experiments",
                                     formatter_class=argparse.RawDescriptionHelpFormatter, epilog=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {
        "ingest": (cmd_ingest, "parse and filter the dataset"),
        "split": (cmd_split, "write the train/validation/test split"),
        "train": (cmd_train, "train models and save checkpoints under OUT/checkpoints"),
        "evaluate": (cmd_evaluate, "evaluate checkpoints from OUT/checkpoints into OUT/report"),
        "sweep": (cmd_sweep, "alpha sweep for the fair MF model"),
        "figure1": (cmd_figure1, "balanced-group genre proportions and Precision@10"),
        "run": (cmd_run, "full pipeline: ingest, split, train, evaluate, report"),
    }
    for name, (fn, help_) in handlers.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the split/model seed")
        p.add_argument("--out", default=None, help="output directory (default: config output.directory)")
        p.add_argument("--overwrite", action="store_true", help="allow writing into a non-empty directory")
        p.add_argument("--model", action="append", default=[], help="restrict to this model name (repeatable)")
        if name == "sweep":
            p.add_argument("--alphas", default=None, help="comma-separated alphas (default 0.0..0.6)")
        if name == "run":
            p.add_argument("--sweep", action="store_true", help="also run the alpha sweep")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ExperimentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
