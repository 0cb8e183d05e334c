"""Multi-trial experiments, figure reproduction, invariant checks and reports.

Everything here is plain data in, files or dataclasses out; :mod:`monoprox.cli`
is a thin argument-parsing layer on top.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import serialization, theory
from .algorithms import (
    Algorithm,
    ConfigError,
    RunConfig,
    Trace,
    initial_state,
    lsvrp_step,
    make_rng,
    point_saga_step,
    run,
    sppm_oc_step,
    sppm_step,
)
from .operators import OperatorEnsemble
from .problems import SaddleSpec, build_tightness_instance, generate_saddle_instance

log = logging.getLogger(__name__)

__all__ = [
    "AlgorithmSpec",
    "ExperimentConfig",
    "Aggregate",
    "trial_seed",
    "run_trials",
    "aggregate",
    "write_aggregate",
    "calls_to_target",
    "reproduce",
    "FIGURES",
    "Check",
    "verify_suite",
    "trajectory_states",
    "estimate_report",
    "write_estimate",
]


def trial_seed(base_seed: int, trial: int) -> np.random.SeedSequence:
    """Independent stream for trial ``trial``; reproducible from ``base_seed`` alone."""
    return np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(trial),))


# ---------------------------------------------------------------- configs


@dataclass(frozen=True)
class AlgorithmSpec:
    name: str
    gamma: object = "auto"
    p: Optional[float] = None
    label: Optional[str] = None

    @property
    def algorithm(self) -> Algorithm:
        return Algorithm.parse(self.name)

    @property
    def key(self) -> str:
        if self.label:
            return self.label
        parts = [self.algorithm.value]
        if self.p is not None:
            parts.append(f"p{self.p:g}")
        if self.gamma != "auto":
            parts.append(f"g{float(self.gamma):g}")
        return "_".join(parts)

    @classmethod
    def from_dict(cls, doc: dict) -> "AlgorithmSpec":
        unknown = set(doc) - {"name", "gamma", "p", "label"}
        if unknown:
            raise ConfigError(f"unknown algorithm keys: {sorted(unknown)}")
        if "name" not in doc:
            raise ConfigError("algorithm entry needs a name")
        spec = cls(doc["name"], doc.get("gamma", "auto"), doc.get("p"), doc.get("label"))
        try:
            spec.algorithm
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return spec


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: a problem, a list of algorithms and the trial budget.

    ``problem`` is either a path to a serialized ensemble or an inline
    :class:`SaddleSpec` dict.
    """

    problem: object = field(default_factory=SaddleSpec)
    algorithms: tuple = ()
    iterations: int = 1000
    trials: int = 1
    seed: int = 0
    output_dir: str = "out"
    target_error: Optional[float] = None

    KEYS = ("problem", "algorithms", "iterations", "trials", "seed", "output_dir", "target_error")

    def __post_init__(self):
        if not isinstance(self.trials, int) or self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if not isinstance(self.iterations, int) or self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if not self.algorithms:
            raise ConfigError("config lists no algorithms")
        if self.target_error is not None and not self.target_error > 0:
            raise ConfigError("target_error must be positive")

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        unknown = set(doc) - set(cls.KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        problem = doc.get("problem", {})
        if isinstance(problem, dict):
            try:
                problem = SaddleSpec.from_dict(problem)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad problem spec: {exc}") from None
        elif isinstance(problem, str):
            path = Path(problem)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            problem = str(path)
        else:
            raise ConfigError("problem must be a path or a spec object")
        algs = tuple(AlgorithmSpec.from_dict(a) for a in doc.get("algorithms", []))
        kw = {k: doc[k] for k in ("iterations", "trials", "seed", "output_dir", "target_error") if k in doc}
        return cls(problem=problem, algorithms=algs, **kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(doc, path.parent)

    def build_problem(self) -> OperatorEnsemble:
        if isinstance(self.problem, SaddleSpec):
            return generate_saddle_instance(self.problem)
        path = Path(self.problem)
        if not path.exists():
            raise ConfigError(f"problem file {path} does not exist")
        return serialization.load(path)[0]


# ---------------------------------------------------------------- trials


def run_trials(
    spec: AlgorithmSpec,
    ens: OperatorEnsemble,
    iters: int,
    trials: int,
    base_seed: int,
    *,
    target_error: Optional[float] = None,
    x_star=None,
    constants: Optional[theory.ProblemConstants] = None,
    x0=None,
) -> list[Trace]:
    """Run ``trials`` independent runs; trial ``t`` uses ``trial_seed(base_seed, t)``."""
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    x_star = ens.solution() if x_star is None else x_star
    if constants is None:
        constants = theory.problem_constants(ens, x_star)
    out = []
    for t in range(trials):
        cfg = RunConfig(
            gamma=spec.gamma,
            p=spec.p,
            iters=iters,
            seed=trial_seed(base_seed, t),
            x0=x0,
            target_error=target_error,
        )
        out.append(run(spec.algorithm, ens, cfg, x_star=x_star, constants=constants))
    return out


@dataclass
class Aggregate:
    """Per-iteration statistics over trials.

    Trials stopped early by a target error contribute only up to their last
    row; ``n_active`` counts the trials still present at each ``k``.
    """

    k: np.ndarray
    mean_calls: np.ndarray
    mean_sq_error: np.ndarray
    p10_sq_error: np.ndarray
    p90_sq_error: np.ndarray
    n_active: np.ndarray
    bound_value: np.ndarray

    COLUMNS = ("k", "mean_calls", "mean_sq_error", "p10_sq_error", "p90_sq_error", "n_active", "bound_value")

    def rows(self):
        return zip(*(getattr(self, c) for c in self.COLUMNS))


def aggregate(traces: Sequence[Trace], n: int) -> Aggregate:
    length = max(len(t) for t in traces)
    err = np.full((len(traces), length), np.nan)
    cost = np.full((len(traces), length), np.nan)
    for j, t in enumerate(traces):
        err[j, : len(t)] = t.sq_error
        cost[j, : len(t)] = t.cost(n)
    active = np.sum(~np.isnan(err), axis=0)
    longest = max(traces, key=len)
    return Aggregate(
        k=np.arange(length),
        mean_calls=np.nanmean(cost, axis=0),
        mean_sq_error=np.nanmean(err, axis=0),
        p10_sq_error=np.nanpercentile(err, 10, axis=0),
        p90_sq_error=np.nanpercentile(err, 90, axis=0),
        n_active=active,
        bound_value=longest.bound_value,
    )


def write_aggregate(agg: Aggregate, path) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(Aggregate.COLUMNS)
        for row in agg.rows():
            wr.writerow([int(row[0]), repr(float(row[1]))] + [repr(float(v)) for v in row[2:5]] + [int(row[5]), repr(float(row[6]))])


def calls_to_target(trace: Trace, n: int, target: float) -> Optional[int]:
    """Cumulative call units at the first iterate with squared error <= target."""
    j = trace.first_reaching(target)
    return None if j is None else int(trace.cost(n)[j])


def _write_traces(traces: Sequence[Trace], ens: OperatorEnsemble, key: str, out: Path, ens_hash: str) -> Aggregate:
    for t, tr in enumerate(traces):
        tr.meta["ensemble_hash"] = ens_hash
        tr.to_csv(out / f"{key}_trial{t}.csv")
    agg = aggregate(traces, ens.n)
    write_aggregate(agg, out / f"{key}.csv")
    return agg


def run_experiment(config: ExperimentConfig, *, write_trials: bool = False) -> dict:
    """Run every algorithm of ``config`` and write one aggregate CSV per algorithm."""
    ens = config.build_problem()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ens_hash = serialization.ensemble_hash(ens)
    x_star = ens.solution()
    constants = theory.problem_constants(ens, x_star)
    summary = {}
    for spec in config.algorithms:
        traces = run_trials(
            spec, ens, config.iterations, config.trials, config.seed,
            target_error=config.target_error, x_star=x_star, constants=constants,
        )
        if write_trials:
            agg = _write_traces(traces, ens, spec.key, out, ens_hash)
        else:
            agg = aggregate(traces, ens.n)
            write_aggregate(agg, out / f"{spec.key}.csv")
        summary[spec.key] = {
            "gamma": traces[0].meta["gamma"],
            "p": spec.p,
            "final_mean_sq_error": float(agg.mean_sq_error[-1]),
        }
    (out / "run_meta.json").write_text(
        json.dumps({"ensemble_hash": ens_hash, "seed": config.seed, "trials": config.trials, "algorithms": summary}, indent=2)
    )
    return summary


# ---------------------------------------------------------------- figures


FIGURES = {
    "fig1": (
        AlgorithmSpec("sppm", 1e-3, label="sppm_g0.001"),
        AlgorithmSpec("sppm", 1e-2, label="sppm_g0.01"),
        AlgorithmSpec("sppm", 1e-1, label="sppm_g0.1"),
        AlgorithmSpec("sppm-oc"),
        AlgorithmSpec("l-svrp", p=0.05),
    ),
    "fig2": (
        AlgorithmSpec("sppm-oc"),
        AlgorithmSpec("l-svrp", p=1.0),
        AlgorithmSpec("l-svrp", p=0.1),
        AlgorithmSpec("l-svrp", p=0.05),
        AlgorithmSpec("l-svrp", p=0.005),
        AlgorithmSpec("point-saga"),
    ),
}


def reproduce(
    figure: str,
    seed: int = 0,
    out_dir="out",
    *,
    iters: int = 20_000,
    trials: int = 5,
    target_error: float = 1e-10,
    spec: Optional[SaddleSpec] = None,
) -> dict:
    """Regenerate the data behind one figure.

    The saddle instance is generated from ``seed`` (unless ``spec`` is
    given) and every curve uses trial seeds derived from the same ``seed``.
    Writes ``<curve>.csv`` aggregates (error against iteration and against
    mean call units) and ``summary.json`` with plateau levels and call units
    to ``target_error``.
    """
    if figure not in FIGURES:
        raise ConfigError(f"unknown figure {figure!r}; choose from {sorted(FIGURES)}")
    spec = SaddleSpec(seed=seed) if spec is None else spec
    ens = generate_saddle_instance(spec)
    out = Path(out_dir) / figure
    out.mkdir(parents=True, exist_ok=True)
    ens_hash = serialization.ensemble_hash(ens)
    x_star = ens.solution()
    constants = theory.problem_constants(ens, x_star)
    curves = {}
    t0 = time.perf_counter()
    for alg in FIGURES[figure]:
        traces = run_trials(alg, ens, iters, trials, seed, x_star=x_star, constants=constants)
        agg = _write_traces(traces, ens, alg.key, out, ens_hash)
        tail = agg.mean_sq_error[-max(1, len(agg.k) // 5):]
        hits = [calls_to_target(t, ens.n, target_error) for t in traces]
        curves[alg.key] = {
            "algorithm": alg.algorithm.value,
            "gamma": traces[0].meta["gamma"],
            "p": alg.p,
            "plateau_mean_sq_error": float(np.mean(tail)),
            "final_mean_sq_error": float(agg.mean_sq_error[-1]),
            "calls_to_target": hits,
        }
    summary = {
        "figure": figure,
        "seed": seed,
        "spec": spec.to_dict(),
        "ensemble_hash": ens_hash,
        "iters": iters,
        "trials": trials,
        "target_error": target_error,
        "error_metric": "squared distance to the solution",
        "delta_spectral": constants.delta,
        "elapsed_s": round(time.perf_counter() - t0, 3),
        "curves": curves,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


# ---------------------------------------------------------------- verification


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    slack: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag}  {self.name:<44} slack={self.slack:+.3e}  {self.detail}".rstrip()


def trajectory_states(algorithm, ens, gamma, p, count, seed, x0=None):
    """Yield ``count`` consecutive states of one trajectory, starting from ``x0``."""
    alg = Algorithm.parse(algorithm)
    x0 = np.ones(ens.dim) if x0 is None else x0
    state = initial_state(alg, ens, x0)
    rng = make_rng(seed)
    for _ in range(count):
        yield state
        if alg is Algorithm.SPPM:
            state = sppm_step(state, ens, gamma, rng)
        elif alg is Algorithm.SPPM_OC:
            state = sppm_oc_step(state, ens, gamma, rng)
        elif alg is Algorithm.LSVRP:
            state = lsvrp_step(state, ens, gamma, p, rng)
        else:
            state = point_saga_step(state, ens, gamma, rng)


def step_inequality_checks(
    algorithm,
    ens: OperatorEnsemble,
    constants: theory.ProblemConstants,
    *,
    p: Optional[float] = None,
    states: int = 1000,
    seed: int = 0,
    x0=None,
    min_error: Optional[float] = 1e-20,
) -> list[theory.StepCheck]:
    """Exact one-step checks at ``states`` trajectory points, run at the theory-optimal stepsize.

    States whose squared error is at or below ``min_error`` sit at the
    rounding floor, where both sides of the inequality are noise; when one is
    reached the next trajectory (seed ``seed + 1``, ...) is started instead.
    ``min_error=None`` keeps every state of a single trajectory.
    """
    alg = Algorithm.parse(algorithm)
    x_star = ens.solution()
    gamma = theory.theoretical_stepsize(alg, constants, p)
    delta = constants.delta_tilde if alg is Algorithm.POINT_SAGA else constants.delta
    out: list[theory.StepCheck] = []
    traj = seed
    while len(out) < states:
        for s in trajectory_states(alg, ens, gamma, p, states - len(out), traj, x0):
            e = s.x - x_star
            if min_error is not None and float(e @ e) <= min_error:
                break
            out.append(theory.verify_step_inequality(alg, s, ens, x_star, gamma, p, delta, mu=constants.mu))
        traj += 1
    return out


def _summarize(name: str, checks: Sequence[theory.StepCheck]) -> Check:
    # states at the rounding floor pass on the absolute tolerance; their relative slack is noise
    rel = [c.slack / abs(c.rhs) for c in checks if abs(c.rhs) > 1e-20 or not c.holds]
    bad = sum(not c.holds for c in checks)
    worst = float(min(rel)) if rel else 0.0
    return Check(name, bad == 0, worst, f"{bad}/{len(checks)} violations (slack relative to rhs)")


def verify_suite(
    ens: Optional[OperatorEnsemble] = None,
    *,
    seed: int = 0,
    states: int = 1000,
    delta_mode: str = "certified",
    delta_scale: float = 1.0,
    cases: int = 1000,
) -> list[Check]:
    """Run the invariant suite on a saddle instance.

    ``delta_mode`` picks the similarity constants fed to the stepsize and the
    contraction factors ("certified" or "spectral"); ``delta_scale`` multiplies
    them, which is how a corrupted constant is injected.
    """
    ens = generate_saddle_instance(SaddleSpec(seed=seed)) if ens is None else ens
    rng = np.random.default_rng(seed)
    x_star = ens.solution()
    checks: list[Check] = []

    # resolvent fixed point and contraction on every member
    worst_fp, worst_con = 0.0, math.inf
    mu = theory.ensemble_modulus(ens)
    for _ in range(cases):
        i = int(rng.integers(ens.n))
        g = float(10 ** rng.uniform(-4, 1))
        a = ens.member_element(i, x_star)
        worst_fp = max(worst_fp, float(np.linalg.norm(ens.resolve(i, g, x_star + g * a) - x_star)))
        x, y = rng.normal(size=(2, ens.dim))
        lhs = np.linalg.norm(ens.resolve(i, g, x) - ens.resolve(i, g, y))
        worst_con = min(worst_con, float(np.linalg.norm(x - y) / (1 + g * mu) + 1e-12 - lhs))
    checks.append(Check("resolvent fixed point at solution", worst_fp <= 1e-10, 1e-10 - worst_fp))
    checks.append(Check("resolvent contraction", worst_con >= 0, worst_con))

    # tightness: SPPM recursion holds with equality
    tight = build_tightness_instance(1.0, [0.0], [1.0, -1.0])
    worst = 0.0
    for g in (0.1, 1.0, 10.0):
        for x in rng.normal(size=50) * 3:
            c = theory.verify_step_inequality("sppm", initial_state("sppm", tight, [x]), tight, [0.0], g)
            worst = max(worst, abs(c.slack))
    checks.append(Check("SPPM tightness equality", worst <= 1e-10, 1e-10 - worst))

    # stationarity: variance-reduced maps fix the solution state
    constants = theory.with_delta(theory.problem_constants(ens, x_star, convention=delta_mode), delta_scale)
    g = theory.theoretical_stepsize("sppm-oc", constants)
    drift = 0.0
    for i in range(ens.n):
        s = sppm_oc_step(initial_state("sppm-oc", ens, x_star), ens, g, _Fixed(i, ens.n))
        drift = max(drift, float(np.linalg.norm(s.x - x_star)))
        s = lsvrp_step(initial_state("l-svrp", ens, x_star), ens, g, 0.5, _Fixed(i, ens.n))
        drift = max(drift, float(np.linalg.norm(s.x - x_star)))
        s = point_saga_step(initial_state("point-saga", ens, x_star), ens, g, _Fixed(i, ens.n))
        drift = max(drift, float(np.linalg.norm(s.x - x_star)))
    checks.append(Check("variance-reduced stationarity at solution", drift <= 1e-12, 1e-12 - drift))

    label = f"{delta_mode} delta x{delta_scale:g}"
    for alg, p in (("sppm-oc", None), ("l-svrp", 0.05), ("l-svrp", 0.1), ("point-saga", None)):
        name = f"step inequality {alg}" + (f" p={p:g}" if p else "") + f" [{label}]"
        checks.append(_summarize(name, step_inequality_checks(alg, ens, constants, p=p, states=states, seed=seed)))
    return checks


class _Fixed:
    """Uniform source that always selects member ``i`` and never refreshes."""

    def __init__(self, i: int, n: int):
        self.u = (i + 0.5) / n

    def random(self) -> float:
        return self.u


# ---------------------------------------------------------------- estimates


def estimate_report(ens: OperatorEnsemble, *, probes: int = 200, seed: int = 0) -> dict:
    """Problem constants plus optimal stepsizes and factors for all four methods."""
    x_star = ens.solution()
    mu = theory.ensemble_modulus(ens)
    rep: dict = {"n": ens.n, "dim": ens.dim, "mu": mu}
    rng = np.random.default_rng(seed)
    grid = x_star + rng.normal(size=(probes, ens.dim)) * 10 ** rng.uniform(-2, 2, size=(probes, 1))
    if ens.affine:
        rep["L"] = theory.ensemble_lipschitz(ens)
        rep["delta_spectral"] = theory.estimate_delta_spectral(ens)
        rep["delta_certified"] = theory.certified_delta(ens)
        rep["delta_exact"] = theory.exact_delta(ens)
        rep["delta_tilde_exact"] = theory.average_similarity_delta(ens)
    else:
        rep["L"] = math.nan
        rep["delta_spectral"] = math.nan
    rep["delta_empirical"] = theory.empirical_similarity(ens, x_star, grid)
    sig = theory.sigma_star_sq(ens, x_star)
    rep["sigma_star_sq"] = sig
    delta = rep["delta_spectral"] if ens.affine else rep["delta_empirical"]
    constants = theory.ProblemConstants(mu, delta, delta, sig, ens.n, "spectral" if ens.affine else "empirical")
    methods = {}
    if not mu > 0:
        for key in ("sppm", "sppm-oc", "l-svrp p=0.05", "l-svrp p=0.1", "point-saga"):
            methods[key] = {"gamma": math.nan, "factor": math.nan, "note": "a member is not strongly monotone; no rate"}
        rep["methods"] = methods
        return rep
    for alg, p in (("sppm", None), ("sppm-oc", None), ("l-svrp", 0.05), ("l-svrp", 0.1), ("point-saga", None)):
        key = alg + (f" p={p:g}" if p else "")
        if alg == "sppm":
            r = theory.sppm_rate(1e-3, mu, sig)
            methods[key] = {"gamma": r.gamma, "factor": r.contraction_factor, "note": "fixed gamma=1e-3; no optimal stepsize"}
            continue
        r = theory.rate_report(alg, "auto", constants, p)
        note = "unbounded; any gamma contracts" if math.isinf(r.gamma) else ""
        methods[key] = {"gamma": r.gamma, "factor": r.contraction_factor, "note": note}
    rep["methods"] = methods
    return rep


def format_estimate(rep: dict) -> str:
    lines = [f"n = {rep['n']}, dim = {rep['dim']}"]
    for k in ("mu", "L", "delta_spectral", "delta_certified", "delta_exact", "delta_tilde_exact", "delta_empirical", "sigma_star_sq"):
        if k in rep:
            lines.append(f"{k:<18} {rep[k]:.10g}")
    for name, m in rep["methods"].items():
        g = f"{m['gamma']:.6g}"
        lines.append(f"{name:<18} gamma={g:<12} factor={m['factor']:.10g}  {m['note']}".rstrip())
    return "\n".join(lines)


def write_estimate(rep: dict, path) -> None:
    """CSV with one ``field,value`` row per constant and per method."""
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["field", "value"])
        for k, v in rep.items():
            if k != "methods":
                wr.writerow([k, repr(float(v)) if isinstance(v, float) else v])
        for name, m in rep["methods"].items():
            wr.writerow([f"gamma[{name}]", repr(float(m["gamma"]))])
            wr.writerow([f"factor[{name}]", repr(float(m["factor"]))])
