"""Command-line entry point: ``simulate``, ``semisynth`` and ``diagnose``.

Every flag may also come from a flat ``key = value`` file passed with
``--config``; keys use the flag names with or without leading dashes and
with ``-`` or ``_``.  Flags given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from bapm.core import RngStream, Sample
from bapm.design import DesignConfig, Method, run_design
from bapm.harness import (
    STANDARD_METHODS,
    ScenarioConfig,
    build_semisynthetic,
    draw_population,
    emit_report,
    ingest_csv,
    simulate,
)
from bapm.inference import mse_decomposition
from bapm.matching import pairing_diagnostics
from bapm.predict import LearnerConfig, oracle_score


def read_config_file(path: str) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.lstrip("-").replace("-", "_")] = value
    return out


def _methods(text: str) -> tuple[Method, ...]:
    return tuple(Method.parse(t) for t in text.split(",") if t.strip())


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file with default flag values")
    p.add_argument("--n", type=int, default=96)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--methods", type=_methods, default=STANDARD_METHODS)
    p.add_argument("--out", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--trees", type=int, default=200)
    p.add_argument("--max-depth", type=int, default=2)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--min-leaf", type=int, default=1)
    p.add_argument("--cv-folds", type=int, default=5, help="inner folds choosing the tree count; 0 disables")
    p.add_argument("--batch1-fraction", type=float, default=0.5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bapm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="synthetic Monte Carlo scenario")
    _common(sim)
    sim.add_argument("--n-rel", type=int, default=10)
    sim.add_argument("--n-irr", type=int, default=10)

    semi = sub.add_parser("semisynth", help="scenario on a completed experimental dataset")
    _common(semi)
    semi.add_argument("--data", required=False)
    semi.add_argument("--outcome", required=False)
    semi.add_argument("--treatment", required=False)
    semi.add_argument("--ensemble", type=int, default=25)

    diag = sub.add_parser("diagnose", help="pairing and decomposition diagnostics for one draw")
    _common(diag)
    diag.add_argument("--scenario", default="10,10", help="n_rel,n_irr")
    diag.add_argument("--method", type=Method.parse, default=Method.BAPM)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config_file(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        defaults = {}
        for action in sub._actions:
            if action.dest in values:
                raw = values.pop(action.dest)
                defaults[action.dest] = action.type(raw) if action.type else raw
        if values:
            parser.error(f"unknown config keys: {sorted(values)}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _learner(args) -> LearnerConfig:
    return LearnerConfig(
        trees=args.trees, max_depth=args.max_depth, learning_rate=args.learning_rate,
        min_leaf=args.min_leaf, cv_folds=args.cv_folds,
    )


def _scenario(args, n_rel=None, n_irr=None) -> ScenarioConfig:
    return ScenarioConfig(
        n=args.n, n_rel=n_rel, n_irr=n_irr, iterations=args.iterations, seed=args.seed,
        methods=args.methods, learner=_learner(args), output_path=args.out,
        batch1_fraction=args.batch1_fraction, workers=args.workers,
    )


def cmd_simulate(args) -> int:
    cfg = _scenario(args, args.n_rel, args.n_irr)
    result = simulate(cfg, progress=True)
    emit_report(result.rows, args.out)
    if result.rematch_checks:
        print(f"rematching inequality violations: {result.rematch_violations}/{result.rematch_checks}")
    if result.failures:
        print(f"failed iterations: {len(result.failures)}")
    return 0


def cmd_semisynth(args) -> int:
    for key in ("data", "outcome", "treatment"):
        if not getattr(args, key):
            raise SystemExit(f"semisynth needs --{key}")
    x, y, t, cols = ingest_csv(args.data, args.outcome, args.treatment)
    pop = build_semisynthetic(x, y, t, args.ensemble, _learner(args), RngStream(args.seed, (10**6,)), columns=cols)
    cfg = _scenario(args)
    if args.n > len(y):
        raise SystemExit(f"--n {args.n} exceeds the {len(y)} rows in {args.data}")
    result = simulate(cfg, population=pop, progress=True)
    emit_report(result.rows, args.out)
    print(f"population ATE: {pop.tau:.6f}")
    return 0


def cmd_diagnose(args) -> int:
    n_rel, n_irr = (int(v) for v in args.scenario.split(","))
    stream = RngStream(args.seed, (0,))
    draw = draw_population((args.n, n_rel, n_irr), stream.child(0))
    sample = Sample(draw.observed)

    def oracle(unit, arm):
        return float(draw.y1[unit] if arm == 1 else draw.y0[unit])

    design = run_design(
        sample, DesignConfig(args.method, _learner(args), args.batch1_fraction), stream.child(1), oracle,
        oracle_score=oracle_score(draw.y1, draw.y0),
    )
    print(f"method: {args.method.value}")
    if design.ordered is not None:
        d = pairing_diagnostics(sample, design.ordered)
        print(f"within-pair mean |dX|:    {d.within_pair_L1:.6f}")
        print(f"within-pair mean |dX|^2:  {d.within_pair_L2sq:.6f}")
        print("adjacent pairs |dX|^2:    " + ", ".join(f"{v:.6f}" for v in d.cross_pair_L2sq))
    if design.weighted_total_rematched is not None:
        print(f"weighted distance total: stage 1 {design.weighted_total_stage1:.6f}, rematched {design.weighted_total_rematched:.6f}")
        print(f"accuracy weights: {design.weights.w.round(4).tolist()}")
    # linear decomposition against a large independent reference draw
    z = design.assignment
    y = np.where(z == 1, draw.y1, draw.y0)
    ones = np.ones((args.n, 1))
    x = np.hstack([ones, draw.observed])
    ref = draw_population((100_000, n_rel, n_irr), stream.child(2))
    xr = np.hstack([np.ones((100_000, 1)), ref.observed])
    b1_star = np.linalg.lstsq(xr, ref.y1, rcond=None)[0]
    b0_star = np.linalg.lstsq(xr, ref.y0, rcond=None)[0]
    b1_hat = np.linalg.lstsq(x[z == 1], y[z == 1], rcond=None)[0]
    b0_hat = np.linalg.lstsq(x[z == 0], y[z == 0], rcond=None)[0]
    dec = mse_decomposition(y, z, x, b1_hat, b0_hat, b1_star, b0_star, 0.5)
    print(f"influence mean A_n: {dec.psi_bar:.6f}")
    print(f"imbalance term B_n: {dec.second_term:.6f}")
    print(f"quadratic term:     {dec.quad_term:.6f}")
    print(f"|imbalance|:        {np.linalg.norm(dec.imbalance):.6f}")
    return 0


def main(argv=None) -> int:
    args = parse_args(argv)
    handler = {"simulate": cmd_simulate, "semisynth": cmd_semisynth, "diagnose": cmd_diagnose}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
