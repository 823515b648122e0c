"""Synthetic and semi-synthetic Monte Carlo scenarios, metrics and reports.

Each iteration owns the substream ``(seed, iteration)``; its children are
0 for the population draw, 1 + k for the design of family k and 50 + k for
the analysis of method k.  Methods that differ only in the analysis
(BAPM/BAPM+, CR/CR+) share one design realization per iteration, so their
comparison isolates the analysis.
"""

from __future__ import annotations

import csv
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

from bapm.core import RngStream, Sample
from bapm.design import DesignConfig, DesignResult, Method, run_design
from bapm.inference import (
    EstimateReport,
    brs_test,
    cr_plus_estimate,
    neyman_variance_cr,
    stratified_adjusted_estimate,
)
from bapm.predict import LearnerConfig, fit, oracle_score

log = logging.getLogger(__name__)

CSV_HEADER = ["n_rel", "n_irr", "method", "ate", "se", "ci_length", "coverage", "rmse"]
STANDARD_METHODS = (
    Method.BAPM_PLUS, Method.BAPM, Method.WBPM, Method.WBPM_OLS, Method.MH, Method.CR, Method.CR_PLUS,
)
MAX_FAILURE_RATE = 0.01

# designs shared between methods that differ only in analysis
_DESIGN_FAMILY = {
    Method.BAPM_PLUS: Method.BAPM,
    Method.BAPM: Method.BAPM,
    Method.CR_PLUS: Method.CR,
    Method.CR: Method.CR,
}


def true_ate() -> float:
    """Population ATE of the synthetic outcome model (extra covariates cancel)."""
    return 0.1 * (math.e - 1.0) - 0.2 * math.exp(0.5) * norm.cdf(1.0)


@dataclass(frozen=True)
class DgpDraw:
    base: np.ndarray
    observed: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    extra: np.ndarray

    @property
    def n(self) -> int:
        return self.base.shape[0]


@dataclass(frozen=True)
class ScenarioConfig:
    n: int = 96
    n_rel: int | None = 10
    n_irr: int | None = 10
    iterations: int = 100
    seed: int = 7
    methods: tuple[Method, ...] = STANDARD_METHODS
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    output_path: str | None = None
    batch1_fraction: float = 0.5
    folds: int = 5
    strat_variance_form: str = "residual"
    crplus_variance_form: str = "influence"
    workers: int = 1

    def __post_init__(self) -> None:
        if self.n < 4 or self.n % 2:
            raise ValueError("n must be even and at least 4")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        object.__setattr__(self, "methods", tuple(Method.parse(m) if isinstance(m, str) else m for m in self.methods))


def _observed_columns(n_rel: int) -> list[int]:
    if n_rel == 0:
        return []
    if n_rel == 5:
        return [0, 1, 2, 5, 6]
    if n_rel > 5:
        return [1, 2, 3, 5, 6]
    raise ValueError(f"n_rel must be 0, 5 or greater than 5, got {n_rel}")


def extra_coefficients(n_rel: int) -> np.ndarray:
    k = max(n_rel - 5, 0)
    if k == 0:
        return np.zeros(0)
    if k == 1:
        return np.array([0.05])
    return np.linspace(0.05, 0.01, k)


def draw_population(config: ScenarioConfig | tuple[int, int, int], rng: RngStream | np.random.Generator) -> DgpDraw:
    """Draw n units of the nonlinear two-arm outcome model.

    ``config`` may be a ScenarioConfig or a tuple (n, n_rel, n_irr).
    """
    if isinstance(config, ScenarioConfig):
        n, n_rel, n_irr = config.n, config.n_rel, config.n_irr
    else:
        n, n_rel, n_irr = config
    g = rng.generator() if isinstance(rng, RngStream) else rng
    x1, x2, x3, x7 = g.standard_normal((4, n))
    x5 = g.uniform(0.0, 1.0, n)
    x4 = g.normal(x5, 1.0)
    x6 = g.normal(x3, 1.0)
    base = np.column_stack([x1, x2, x3, x4, x5, x6, x7])
    y0 = 0.1 * np.sin(x1) + 0.3 * np.exp(x2) + 0.1 * np.exp(np.abs(x3)) + 0.2 * x4 * x6
    y1 = 0.1 * np.sin(x1) + 0.1 * np.exp(x5) + 0.3 * np.exp(x2) + 0.2 * x4 * x7
    coef = extra_coefficients(n_rel)
    extra = g.standard_normal((n, len(coef)))
    shift = extra @ coef
    y0, y1 = y0 + shift, y1 + shift
    noise = g.standard_normal((n, n_irr))
    observed = np.column_stack([base[:, _observed_columns(n_rel)], extra, noise])
    return DgpDraw(base, observed, y0, y1, extra)


@dataclass(frozen=True)
class SemiSyntheticPopulation:
    covariates: np.ndarray
    y_observed: np.ndarray
    y_counterfactual: np.ndarray
    treatment: np.ndarray
    ensemble_size: int
    columns: tuple[str, ...] = ()

    @property
    def y1(self) -> np.ndarray:
        return np.where(self.treatment == 1, self.y_observed, self.y_counterfactual)

    @property
    def y0(self) -> np.ndarray:
        return np.where(self.treatment == 0, self.y_observed, self.y_counterfactual)

    @property
    def tau(self) -> float:
        return float(np.mean(self.y1 - self.y0))


def ingest_csv(path: str, outcome: str, treatment: str):
    """Read an experiment CSV: one-hot encode text columns, median-fill missing covariates."""
    import pandas as pd

    df = pd.read_csv(path)
    for col in (outcome, treatment):
        if col not in df.columns:
            raise ValueError(f"column {col!r} not found in {path}")
    df = df.dropna(subset=[outcome, treatment])
    y = df[outcome].to_numpy(dtype=float)
    t = df[treatment].to_numpy()
    if not np.all(np.isin(t, (0, 1))):
        raise ValueError("treatment column must be 0/1")
    cov = df.drop(columns=[outcome, treatment])
    cov = pd.get_dummies(cov, dummy_na=False, dtype=float)
    cov = cov.apply(pd.to_numeric, errors="coerce")
    cov = cov.fillna(cov.median()).fillna(0.0)
    keep = cov.columns[cov.std(ddof=0) > 0]
    cov = cov[keep]
    return cov.to_numpy(dtype=float), y, t.astype(np.int64), tuple(str(c) for c in keep)


def build_semisynthetic(
    covariates, outcome, treatment, ensemble: int, config: LearnerConfig, rng: RngStream,
    subsample: float = 0.8, columns: Sequence[str] = (),
) -> SemiSyntheticPopulation:
    """Complete each unit's missing potential outcome with the opposite arm's ensemble mean."""
    x = np.asarray(covariates, dtype=float)
    y = np.asarray(outcome, dtype=float)
    t = np.asarray(treatment).astype(np.int64)
    if ensemble < 1:
        raise ValueError("ensemble size must be >= 1")
    for arm in (0, 1):
        if np.sum(t == arm) < 10:
            raise ValueError(f"arm {arm} has fewer than 10 rows")
    learner = replace(config, subsample=subsample)
    counter = np.zeros(len(y))
    for arm in (0, 1):
        rows = t == arm
        target = t != arm
        preds = np.zeros(int(target.sum()))
        for m in range(ensemble):
            model = fit(x[rows], y[rows], learner, rng.child(arm).child(m))
            preds += model.predict(x[target])
        counter[target] = preds / ensemble
    return SemiSyntheticPopulation(x, y.copy(), counter, t, ensemble, tuple(columns))


@dataclass(frozen=True)
class MetricsRow:
    n_rel: int | None
    n_irr: int | None
    method: str
    ate: float
    se: float
    ci_length: float
    coverage: float
    rmse: float


@dataclass
class IterationOutcome:
    iteration: int
    tau: float
    reports: dict
    failures: list
    rematch_violations: int = 0
    rematch_checks: int = 0


@dataclass
class ScenarioResult:
    rows: list[MetricsRow]
    tau: float
    estimates: dict
    ses: dict
    covered: dict
    failures: list
    rematch_violations: int
    rematch_checks: int

    def row(self, method: Method | str) -> MetricsRow:
        name = method.value if isinstance(method, Method) else Method.parse(method).value
        for r in self.rows:
            if r.method == name:
                return r
        raise KeyError(name)


def _analyze(method: Method, design: DesignResult, y, x, config: ScenarioConfig, rng: RngStream) -> EstimateReport:
    z = design.assignment
    if method is Method.CR:
        return neyman_variance_cr(y, z)
    if method is Method.CR_PLUS:
        return cr_plus_estimate(y, z, x, config.learner, config.folds, rng, config.crplus_variance_form)
    if method is Method.BAPM_PLUS:
        return stratified_adjusted_estimate(
            design.blocks, y, z, x, config.learner, config.folds, rng, config.strat_variance_form
        )
    return brs_test(design.ordered, y, z)


def _population_for(config: ScenarioConfig, stream: RngStream, population: SemiSyntheticPopulation | None):
    if population is None:
        draw = draw_population(config, stream.child(0))
        return draw.observed, draw.y1, draw.y0, true_ate()
    idx = stream.child(0).generator().choice(len(population.y_observed), size=config.n, replace=False)
    return population.covariates[idx], population.y1[idx], population.y0[idx], population.tau


def run_iteration(config: ScenarioConfig, it: int, population: SemiSyntheticPopulation | None = None) -> IterationOutcome:
    stream = RngStream(config.seed, (it,))
    x, y1, y0, tau = _population_for(config, stream, population)
    sample = Sample(x)

    def oracle(unit: int, arm: int) -> float:
        return float(y1[unit] if arm == 1 else y0[unit])

    designs: dict[Method, DesignResult] = {}
    out = IterationOutcome(it, tau, {}, [])
    for method in sorted(config.methods, key=lambda m: m.rank):
        family = _DESIGN_FAMILY.get(method, method)
        try:
            if family not in designs:
                dcfg = DesignConfig(family, config.learner, config.batch1_fraction)
                designs[family] = run_design(
                    sample, dcfg, stream.child(1 + family.rank), oracle,
                    oracle_score=oracle_score(y1, y0),
                )
                d = designs[family]
                if d.weighted_total_rematched is not None:
                    out.rematch_checks += 1
                    out.rematch_violations += int(not d.rematch_improves)
            design = designs[family]
            y = np.where(design.assignment == 1, y1, y0)
            out.reports[method] = _analyze(method, design, y, x, config, stream.child(50 + method.rank))
        except Exception as exc:  # recorded for replay, excluded from metrics
            log.warning("iteration %d method %s failed: %s", it, method.value, exc)
            out.failures.append((it, method.value, repr(exc)))
    return out


def _run_chunk(args):
    config, iterations, population = args
    return [run_iteration(config, it, population) for it in iterations]


def _summarize(config: ScenarioConfig, outcomes: list[IterationOutcome], n_rel, n_irr) -> ScenarioResult:
    outcomes = sorted(outcomes, key=lambda o: o.iteration)
    tau = outcomes[0].tau if outcomes else float("nan")
    est, ses, cov, rows = {}, {}, {}, []
    failures = [f for o in outcomes for f in o.failures]
    for method in sorted(config.methods, key=lambda m: m.rank):
        reps = [o.reports[method] for o in outcomes if method in o.reports]
        if not reps:
            continue
        e = np.array([r.tau_hat for r in reps])
        s = np.array([r.se for r in reps])
        c = np.array([r.covers(tau) for r in reps])
        est[method], ses[method], cov[method] = e, s, c
        rows.append(MetricsRow(
            n_rel, n_irr, method.value, float(e.mean()), float(s.mean()),
            float(np.mean([r.ci_high - r.ci_low for r in reps])), float(c.mean()),
            float(np.sqrt(np.mean((e - tau) ** 2))),
        ))
    return ScenarioResult(
        rows, tau, est, ses, cov, failures,
        sum(o.rematch_violations for o in outcomes), sum(o.rematch_checks for o in outcomes),
    )


def simulate(config: ScenarioConfig, population: SemiSyntheticPopulation | None = None, progress: bool = False) -> ScenarioResult:
    """Run every iteration of a scenario and aggregate per-method metrics."""
    its = list(range(config.iterations))
    if config.workers > 1:
        chunks = [its[i :: config.workers * 4] for i in range(config.workers * 4)]
        with ProcessPoolExecutor(config.workers) as pool:
            parts = pool.map(_run_chunk, [(config, c, population) for c in chunks if c])
            outcomes = [o for part in parts for o in part]
    else:
        outcomes = []
        for it in its:
            outcomes.append(run_iteration(config, it, population))
            if progress and (it + 1) % 100 == 0:
                print(f"  {it + 1}/{config.iterations} iterations", file=sys.stderr, flush=True)
    n_failed_its = len({f[0] for o in outcomes for f in o.failures})
    if n_failed_its > MAX_FAILURE_RATE * config.iterations:
        raise RuntimeError(
            f"{n_failed_its} of {config.iterations} iterations failed; first: {outcomes and next(f for o in outcomes for f in o.failures)}"
        )
    semi = population is not None
    return _summarize(config, outcomes, None if semi else config.n_rel, None if semi else config.n_irr)


def run_scenario(config: ScenarioConfig, population: SemiSyntheticPopulation | None = None) -> list[MetricsRow]:
    result = simulate(config, population)
    if config.output_path:
        emit_report(result.rows, config.output_path)
    return result.rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".12g")
    return str(v)


def emit_report(rows: Iterable[MetricsRow], path: str | None, fmt: str = "csv", stream=None) -> None:
    """Write the CSV report (canonical method order) and print an aligned table."""
    rows = sorted(rows, key=lambda r: (r.n_rel is None, r.n_rel or 0, r.n_irr or 0, Method.parse(r.method).rank))
    if not rows:
        raise ValueError("no rows to report")
    if fmt != "csv":
        raise ValueError(f"unsupported report format {fmt!r}")
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in rows:
                w.writerow([_fmt(getattr(r, c)) for c in CSV_HEADER])
    out = stream if stream is not None else sys.stdout
    widths = [6, 6, 9, 10, 8, 10, 9, 8]
    print("".join(h.rjust(w) for h, w in zip(CSV_HEADER, widths)), file=out)
    for r in rows:
        cells = [
            "" if r.n_rel is None else str(r.n_rel), "" if r.n_irr is None else str(r.n_irr), r.method,
            f"{r.ate:.4f}", f"{r.se:.4f}", f"{r.ci_length:.4f}", f"{r.coverage:.3f}", f"{r.rmse:.4f}",
        ]
        print("".join(c.rjust(w) for c, w in zip(cells, widths)), file=out)


def read_report(path: str) -> list[MetricsRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(MetricsRow(
                int(rec["n_rel"]) if rec["n_rel"] else None,
                int(rec["n_irr"]) if rec["n_irr"] else None,
                rec["method"], float(rec["ate"]), float(rec["se"]), float(rec["ci_length"]),
                float(rec["coverage"]), float(rec["rmse"]),
            ))
    return rows
