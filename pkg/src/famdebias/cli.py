"""Command-line entry point.

Subcommands mirror the pipeline stages (simulate, fit, debias, evaluate,
report, run) plus a gradient self-check. Exit codes: 0 success, 2 invalid
input or configuration, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .bucketizer import AdjustmentTable
from .core import FamiliarityVector, FeatureSchema
from .debias import CombinerWeights, DebiasConfig, SlateCandidate, debias_slate
from .estimator import (
    RegressorModel,
    TrainConfig,
    gradient_check,
    train_xy,
)
from .harness import (
    ConfigError,
    ExperimentConfig,
    StageError,
    build_universe,
    emit_report,
    evaluate_results,
    fit_artifacts,
    make_policies,
    read_arm_outputs,
    run_pipeline,
    write_arm_outputs,
)
from .simulator import run_arm

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_STAGE = 3


def _load_config(path: str, seed_override: int | None = None) -> dict:
    raw = json.loads(Path(path).read_text())
    if seed_override is not None:
        raw["experiment_seed"] = seed_override
    return raw


def _cmd_run(args) -> int:
    config = _load_config(args.config, args.seed)
    report = run_pipeline(config, args.out)
    for name, check in sorted(report["checks"].items()):
        print(f"[{'PASS' if check.get('pass', True) else 'FAIL'}] {name}")
    print(f"report written to {Path(args.out) / 'report.json'}")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    config = _load_config(args.config, args.seed)
    cfg = ExperimentConfig.from_dict(config)
    table = AdjustmentTable.load(args.table) if args.table else None
    model = RegressorModel.load(args.model) if args.model else None
    arm_names = args.arms.split(",") if args.arms else [a["name"] for a in cfg.arms]
    known = {a["name"] for a in cfg.arms}
    unknown = [n for n in arm_names if n not in known]
    if unknown:
        raise ConfigError(f"unknown arm(s) {unknown}")
    universe = build_universe(cfg)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "manifest.json").write_text(
        json.dumps(universe.manifest(), sort_keys=True) + "\n"
    )
    cfg.schema.save(outdir / "schema.json")
    policies = make_policies(cfg, table=table, model=model, arm_names=arm_names)
    for name in arm_names:
        result = run_arm(
            universe, policies[name], cfg.inflation, cfg.session,
            cfg.experiment_seed, name=name,
        )
        write_arm_outputs(result, cfg.schema, outdir)
        print(f"wrote {name}: {len(result.log)} interactions")
    return EXIT_OK


def _cmd_fit(args) -> int:
    config = _load_config(args.config)
    cfg = ExperimentConfig.from_dict(config)
    from .core import read_jsonl

    log = read_jsonl(args.log, cfg.schema)
    if len(log) == 0:
        raise ConfigError("fitting log is empty")
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    _, table, model = fit_artifacts(log, cfg)
    if args.mode in ("both", "discrete"):
        table.save(outdir / "table.json")
        print(f"wrote {outdir / 'table.json'}")
    if args.mode in ("both", "continuous"):
        model.save(outdir / "model.json")
        print(f"wrote {outdir / 'model.json'}")
    cfg.schema.save(outdir / "schema.json")
    return EXIT_OK


def _resolve_schema(args, table, model) -> FeatureSchema:
    if args.schema:
        return FeatureSchema.load(args.schema)
    if table is not None:
        return table.edges.schema
    if model is not None and "schema" in model.metadata:
        return FeatureSchema.from_dict(model.metadata["schema"])
    raise ConfigError("no schema available: pass --schema")


def _cmd_debias(args) -> int:
    table = AdjustmentTable.load(args.table) if args.table else None
    model = RegressorModel.load(args.model) if args.model else None
    if args.mode == "discrete" and table is None:
        raise ConfigError("discrete mode needs --table")
    if args.mode == "continuous" and model is None:
        raise ConfigError("continuous mode needs --model")
    artifact = table if args.mode == "discrete" else model
    schema = _resolve_schema(args, table, model)
    config = DebiasConfig(mode=args.mode, strength=args.strength)

    candidates = []
    with open(args.infile) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            fam = obj["familiarity"]
            candidates.append(
                SlateCandidate(
                    item_id=obj["item_id"],
                    creator_id=obj.get("creator_id", ""),
                    urps=float(obj["urps"]),
                    familiarity=FamiliarityVector(
                        tuple(float(fam[n]) for n in schema.names)
                    ),
                    quality_signals={
                        k: float(v) for k, v in obj.get("quality_signals", {}).items()
                    },
                )
            )
    ranked = debias_slate(candidates, artifact, config, CombinerWeights())
    with open(args.outfile, "w") as fh:
        for cand in ranked:
            fh.write(
                json.dumps(
                    {
                        "item_id": cand.item_id,
                        "creator_id": cand.creator_id,
                        "urps": cand.urps,
                        "familiarity": dict(
                            zip(schema.names, cand.familiarity.values)
                        ),
                        "quality_signals": cand.quality_signals,
                        "debiased_score": cand.debiased_score,
                        "final_score": cand.final_score,
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )
    print(f"ranked {len(ranked)} candidates -> {args.outfile}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    config = _load_config(args.config)
    cfg = ExperimentConfig.from_dict(config)
    logs_dir = Path(args.logs)
    artifacts_dir = Path(args.artifacts)
    table = AdjustmentTable.load(artifacts_dir / "table.json")
    model = RegressorModel.load(artifacts_dir / "model.json")
    universe = build_universe(cfg)

    from .simulator import ArmResult

    results = {}
    for arm in cfg.arms:
        name = arm["name"]
        log, impressions = read_arm_outputs(name, cfg.schema, logs_dir)
        results[name] = ArmResult(
            name=name,
            log=log,
            item_impressions=np.zeros(universe.n_items, dtype=np.int64),
            user_creator_impressions=impressions,
        )
    report = evaluate_results(cfg, universe, results, table.edges, table, model)
    emit_report(report, args.out)
    print(f"report written to {Path(args.out) / 'report.json'}")
    return EXIT_OK


def _cmd_report(args) -> int:
    report = json.loads(Path(args.report).read_text())
    emit_report(report, args.out)
    print(f"CSV tables written to {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    n, arity = 64, 4
    feats = np.column_stack(
        [
            rng.integers(0, 20, n).astype(float),
            rng.integers(0, 10, n).astype(float),
            rng.uniform(0, 365, n),
            rng.uniform(0, 1, n),
        ]
    )
    targets = rng.uniform(0.5, 4.0, n)
    schema = FeatureSchema(
        names=("c1", "c2", "r1", "a1"),
        kinds=("count", "count", "recency", "affinity"),
        monotonicity=(
            "increasing-with-familiarity",
            "increasing-with-familiarity",
            "decreasing-with-familiarity",
            "increasing-with-familiarity",
        ),
    )
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = train_xy(
            feats, targets, schema,
            TrainConfig(max_epochs=2, batch_size=16, seed=args.seed),
        )
    report = gradient_check(
        model, feats, targets, step=args.step, tolerance=args.tolerance, seed=args.seed
    )
    for entry in report.entries:
        print(
            f"param[{entry['parameter']}][{entry['offset']}] "
            f"analytic={entry['analytic']:.6e} numeric={entry['numeric']:.6e} "
            f"rel={entry['relative_error']:.2e}"
        )
    print(
        f"max relative error {report.max_relative_error:.3e} "
        f"(tolerance {report.tolerance:g}): {'PASS' if report.passed else 'FAIL'}"
    )
    return EXIT_OK if report.passed else EXIT_STAGE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="famdebias",
        description="Familiarity debiasing toolkit: simulate, fit, correct, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override experiment seed")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("simulate", help="run experiment arms and write logs")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--arms", default=None, help="comma-separated arm names (default all)")
    p.add_argument("--table", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit", help="fit the adjustment table and regressor on a log")
    p.add_argument("--config", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("both", "discrete", "continuous"), default="both")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("debias", help="rank a slate file with a fitted artifact")
    p.add_argument("--mode", choices=("discrete", "continuous"), required=True)
    p.add_argument("--table", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--schema", default=None)
    p.add_argument("--strength", type=float, default=1.0)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.set_defaults(func=_cmd_debias)

    p = sub.add_parser("evaluate", help="compute metrics from logs and artifacts")
    p.add_argument("--config", required=True)
    p.add_argument("--logs", required=True)
    p.add_argument("--artifacts", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="re-emit CSV tables from a report.json")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("gradcheck", help="verify analytic gradients numerically")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
