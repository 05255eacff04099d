"""Command line entry point: ``fjsda <subcommand> ...``.

Exit codes: 0 success, 2 config error, 3 a cell (or theory suite) failed,
4 a benchmark threshold was violated under ``--check``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import theory, toy
from .adaptation import METHODS
from .harness import (ConfigError, ExperimentConfig, RunReport, aggregate, check_thresholds, emit_plots,
                      evaluate_nll, importance_metrics, run_experiment, seed_data, train_method,
                      write_curve, write_importance)
from .importance import fit_unsupervised

EXIT_OK, EXIT_CONFIG, EXIT_FAILED, EXIT_CHECK = 0, 2, 3, 4


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if getattr(args, "eval_on_train", False):
        cfg = replace(cfg, eval_on_train=True)
    return cfg


def _out(args, cfg) -> Path:
    out = Path(args.out or cfg.out_dir or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    for seed in cfg.seeds:
        for ds, name in zip(seed_data(cfg, seed), ("source", "target", "eval")):
            toy.write_csv(ds, out / f"{name}_{seed}.csv")
    print(f"wrote datasets for seeds {list(cfg.seeds)} to {out}")
    return EXIT_OK


def cmd_estimate_importance(args) -> int:
    cfg = _config(args)
    if args.K is not None:
        cfg = replace(cfg, importance={**cfg.importance, "K": args.K})
    out = _out(args, cfg)
    fitted = {}
    for seed in cfg.seeds:
        source, target, _ = seed_data(cfg, seed)
        fitted[seed] = fit_unsupervised(source.x, source.y, target.x, cfg.importance_config(seed))
        fitted[seed].save(out / f"importance_{seed}.json")
    K = cfg.importance_config(cfg.seeds[0]).K
    write_importance(fitted[cfg.seeds[0]], cfg.hexagon, cfg.source_spec, out / f"importance_{K}.csv")
    metrics = importance_metrics(cfg, fitted)
    (out / "importance_metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=1) + "\n")
    for q, p, e in zip(toy.QUADRANTS, metrics["mean_products"], metrics["rel_error"]):
        print(f"{q}: U*V = {p:.4f}  rel. error {e:+.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    seed = cfg.seeds[0]
    source, target, ev = seed_data(cfg, seed)
    model, _ = train_method(args.method, source, target, cfg, seed)
    model.save(out / f"model_{args.method}_{seed}.json")
    write_curve(model, cfg.hexagon, out / f"curve_{args.method}.csv")
    print(f"{args.method} seed {seed}: target NLL {evaluate_nll(model, ev.x, ev.y):.4f}")
    return EXIT_OK


def _finish(report: RunReport, out: Path, check: bool) -> int:
    report.save(out / "report.json")
    print(report.table())
    print(f"report digest {report.digest}")
    if report.failed:
        for c in report.failed:
            print(f"FAILED {c['method']} seed {c['seed']}: {c['error']}", file=sys.stderr)
        return EXIT_FAILED
    if check:
        bad = check_thresholds(report)
        for b in bad:
            print(f"CHECK {b}", file=sys.stderr)
        if bad:
            return EXIT_CHECK
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    log = None if args.quiet else (lambda s: print(s, file=sys.stderr))
    report = run_experiment(cfg, jobs=args.jobs, log=log)
    emit_plots(report, out)
    return _finish(report, out, args.check)


def cmd_report(args) -> int:
    report = RunReport.load(args.report)
    report.aggregate = aggregate(report.cells)
    out = Path(args.out) if args.out else Path(args.report).parent
    out.mkdir(parents=True, exist_ok=True)
    return _finish(report, out, args.check)


def cmd_verify_theory(args) -> int:
    failed = False
    for name, fn in (("CS => DI", theory.verify_theorem_1), ("FJS => GLS", theory.verify_theorem_2)):
        rep = fn(trials=args.trials, seed=args.seed or 0)
        print(f"{name}: {rep.trials} trials, {rep.failures} counterexamples, {rep.elapsed_ms:.0f} ms")
        failed |= rep.failures > 0
    src, tgt = toy.quadrant_tables()
    flags = {a: theory.check_assumption(src, tgt, a) for a in theory.ASSUMPTIONS}
    print("toy tables: " + ", ".join(f"{a}={v}" for a, v in flags.items()))
    rng = np.random.default_rng(args.seed or 0)
    worst = 0.0
    for _ in range(args.trials):
        n = int(rng.integers(2, 8))
        p, q = theory.random_simplex(rng, n, False), theory.random_simplex(rng, n, False)
        _, value = theory.lemma1_value(p, q)
        worst = max(worst, abs(value - theory.jsd_bound(p, q)))
    print(f"discriminator optimum vs 2(log 2 - JSD): max deviation {worst:.2e}")
    failed |= worst > 1e-9
    return EXIT_FAILED if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fjsda", description="Joint importance adaptation on the hexagon benchmark")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--out", help="output directory")
        if seed:
            p.add_argument("--seed", type=int, help="run only this seed")
        return p

    common(sub.add_parser("generate", help="write datasets")).set_defaults(fn=cmd_generate)
    p = common(sub.add_parser("estimate-importance", help="fit U, V and write grids"))
    p.add_argument("--K", type=int)
    p.set_defaults(fn=cmd_estimate_importance)
    p = common(sub.add_parser("train", help="train a single (method, seed) cell"))
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--eval-on-train", action="store_true")
    p.set_defaults(fn=cmd_train)
    p = common(sub.add_parser("run", help="full experiment"))
    p.add_argument("--check", action="store_true", help="exit 4 if benchmark thresholds fail")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--eval-on-train", action="store_true")
    p.set_defaults(fn=cmd_run)
    p = sub.add_parser("report", help="re-aggregate a saved report")
    p.add_argument("report")
    p.add_argument("--out")
    p.add_argument("--check", action="store_true")
    p.set_defaults(fn=cmd_report)
    p = sub.add_parser("verify-theory", help="run the finite-domain theory suites")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_verify_theory)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
