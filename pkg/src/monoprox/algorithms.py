"""Stochastic proximal-point iterations and the run driver.

Each ``*_step`` function is pure: it takes a state, the ensemble, the
stepsize and a uniform source ``rng`` (anything with a ``random()`` method
returning a float in [0, 1)), and returns the next state with its call
counter advanced. Per iteration the draws are: member index first (inverse
CDF on the weights), then, for L-SVRP with ``p < 1``, one uniform for the coin.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import theory
from .operators import OperatorEnsemble, as_vector
from .states import Algorithm, CallCounter, LsvrpState, PointSagaState, SppmOcState, SppmState

__all__ = [
    "Algorithm",
    "CallCounter",
    "SppmState",
    "SppmOcState",
    "LsvrpState",
    "PointSagaState",
    "UniformStream",
    "RunConfig",
    "Trace",
    "ConfigError",
    "sppm_step",
    "sppm_oc_step",
    "lsvrp_step",
    "point_saga_step",
    "initial_state",
    "run",
    "make_rng",
    "sppm_batch",
]

log = logging.getLogger(__name__)

TABLE_REFRESH = 10_000


class ConfigError(ValueError):
    pass


class UniformStream:
    """Buffered stream of uniforms from a numpy ``Generator``.

    Bulk and scalar ``Generator.random`` draws produce the same sequence, so
    buffering changes speed, not values.
    """

    def __init__(self, generator: np.random.Generator, block: int = 4096):
        self.generator = generator
        self._block = block
        self._buf: list[float] = []
        self._pos = 0

    def random(self) -> float:
        if self._pos == len(self._buf):
            self._buf = self.generator.random(self._block).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return u


def make_rng(seed) -> UniformStream:
    """Uniform stream seeded from an int or a ``SeedSequence``."""
    return UniformStream(np.random.Generator(np.random.PCG64(seed)))


# ---------------------------------------------------------------- steps


def sppm_step(state: SppmState, ens: OperatorEnsemble, gamma: float, rng) -> SppmState:
    i = ens.sample(rng.random())
    x = ens.resolve(i, gamma, state.x)
    return SppmState(x, state.k + 1, state.calls.charge(member=1))


def sppm_oc_step(state: SppmOcState, ens: OperatorEnsemble, gamma: float, rng) -> SppmOcState:
    i = ens.sample(rng.random())
    x = state.x
    h = ens.member_element(i, x) - ens.mean_element(x)
    x_new = ens.resolve(i, gamma, x + gamma * h)
    return SppmOcState(x_new, state.k + 1, state.calls.charge(member=1, full=1))


def lsvrp_step(state: LsvrpState, ens: OperatorEnsemble, gamma: float, p: float, rng) -> LsvrpState:
    i = ens.sample(rng.random())
    h = ens.member_element(i, state.w) - state.a_bar
    x_new = ens.resolve(i, gamma, state.x + gamma * h)
    # p = 1 refreshes deterministically and consumes no draw
    refresh = p >= 1.0 or rng.random() < p
    if refresh:
        return LsvrpState(x_new, x_new, ens.mean_element(x_new), state.k + 1, state.calls.charge(member=1, full=1))
    return LsvrpState(x_new, state.w, state.a_bar, state.k + 1, state.calls.charge(member=1))


def point_saga_step(
    state: PointSagaState,
    ens: OperatorEnsemble,
    gamma: float,
    rng,
    *,
    check_recovery: bool = False,
) -> PointSagaState:
    """One Point-SAGA iteration.

    The new table entry is recovered from the resolvent output as
    ``(x - x_new) / gamma + h``, an element of ``A_i(x_new)``, so no extra
    operator call is charged. With ``check_recovery`` the entry is also
    re-evaluated directly and the two must agree.
    """
    n = ens.n
    i = ens.sample(rng.random())
    old = state.table[i]
    h = old - state.a_bar
    x_new = ens.resolve(i, gamma, state.x + gamma * h)
    entry = (state.x - x_new) / gamma + h
    if check_recovery and not ens.members[i].contains(x_new, entry, tol=1e-9):
        raise RuntimeError(f"recovered element {entry} is not in A_{i}({x_new})")
    table = state.table.copy()
    table[i] = entry
    k = state.k + 1
    if k % TABLE_REFRESH == 0:
        a_bar = table.mean(axis=0)
    else:
        a_bar = state.a_bar + (entry - old) / n
    shadow = state.shadow_w
    if shadow is not None:
        shadow = shadow.copy()
        shadow[i] = x_new
    return PointSagaState(x_new, table, a_bar, shadow, k, state.calls.charge(member=1))


def initial_state(algorithm, ens: OperatorEnsemble, x0, w0=None, *, track_shadow: bool = True):
    """Starting state, with the start-up operator calls already charged.

    L-SVRP starts its anchor at ``x0`` and evaluates ``A(x0)`` once; Point-SAGA
    fills its table with ``A_i(x0)``, one member call per entry.
    """
    alg = Algorithm.parse(algorithm)
    x0 = as_vector(x0, ens.dim).copy()
    if w0 is not None and not np.array_equal(as_vector(w0, ens.dim), x0):
        raise ConfigError("L-SVRP is initialised with w0 = x0")
    if alg is Algorithm.SPPM:
        return SppmState(x0)
    if alg is Algorithm.SPPM_OC:
        return SppmOcState(x0)
    if alg is Algorithm.LSVRP:
        return LsvrpState(x0, x0.copy(), ens.mean_element(x0), 0, CallCounter(0, 1))
    if not ens.uniform:
        raise ConfigError("Point-SAGA needs a uniform finite sum")
    table = ens.member_elements(x0).copy()
    shadow = np.tile(x0, (ens.n, 1)) if track_shadow else None
    return PointSagaState(x0, table, table.mean(axis=0), shadow, 0, CallCounter(ens.n, 0))


# ---------------------------------------------------------------- run driver


@dataclass(frozen=True)
class RunConfig:
    """Settings of one run.

    ``gamma="auto"`` takes the theory-optimal stepsize from the problem
    constants. ``x0`` defaults to the all-ones vector. ``target_error`` stops
    the run once the squared error reaches it.
    """

    gamma: Union[float, str] = "auto"
    p: Optional[float] = None
    iters: int = 1000
    seed: Union[int, np.random.SeedSequence] = 0
    x0: Optional[np.ndarray] = None
    w0: Optional[np.ndarray] = None
    target_error: Optional[float] = None
    check_recovery: bool = False

    def validate(self, algorithm: Algorithm) -> None:
        if self.iters < 0:
            raise ConfigError("iters must be >= 0")
        if not (isinstance(self.gamma, str) and self.gamma == "auto"):
            g = float(self.gamma)
            if not (g > 0 and math.isfinite(g)):
                raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if algorithm is Algorithm.LSVRP:
            if self.p is None or not 0 < self.p <= 1:
                raise ConfigError(f"L-SVRP needs p in (0, 1], got {self.p}")


@dataclass
class Trace:
    """Per-iteration record of a run; row ``j`` describes the iterate ``x^k[j]``."""

    k: np.ndarray
    member_calls: np.ndarray
    full_calls: np.ndarray
    sq_error: np.ndarray
    lyapunov: np.ndarray
    bound_value: np.ndarray
    meta: dict = field(default_factory=dict)

    COLUMNS = ("k", "member_calls", "full_calls", "sq_error", "lyapunov", "bound_value")

    def __len__(self):
        return len(self.k)

    def cost(self, n: int) -> np.ndarray:
        return self.member_calls + n * self.full_calls

    def first_reaching(self, target: float) -> Optional[int]:
        """Row index of the first iterate with squared error <= target."""
        hit = np.flatnonzero(self.sq_error <= target)
        return int(hit[0]) if hit.size else None

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        return all(np.array_equal(getattr(self, c), getattr(other, c), equal_nan=True) for c in self.COLUMNS)

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.COLUMNS)
            for row in zip(*(getattr(self, c) for c in self.COLUMNS)):
                wr.writerow([int(row[0]), int(row[1]), int(row[2])] + [repr(float(v)) for v in row[3:]])
        if self.meta:
            path.with_suffix(".meta.json").write_text(json.dumps(self.meta, indent=2, sort_keys=True, default=str))

    @classmethod
    def from_csv(cls, path) -> "Trace":
        path = Path(path)
        with path.open(newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            if tuple(header) != cls.COLUMNS:
                raise ValueError(f"unexpected trace header {header}")
            rows = list(rd)
        cols = list(zip(*rows)) if rows else [()] * len(cls.COLUMNS)
        ints = [np.array([int(v) for v in c], dtype=np.int64) for c in cols[:3]]
        floats = [np.array([float(v) for v in c], dtype=float) for c in cols[3:]]
        meta_path = path.with_suffix(".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(*ints, *floats, meta=meta)


def _seed_meta(seed) -> dict:
    if isinstance(seed, np.random.SeedSequence):
        return {"entropy": seed.entropy, "spawn_key": list(seed.spawn_key)}
    return {"entropy": int(seed), "spawn_key": []}


def run(
    algorithm,
    ens: OperatorEnsemble,
    config: RunConfig,
    x_star=None,
    constants: Optional[theory.ProblemConstants] = None,
) -> Trace:
    """Run ``config.iters`` iterations and record the trace.

    ``x_star`` defaults to the ensemble's root. If it is supplied it wins over
    the computed one; a warning is recorded when the mean operator there is
    not close to zero. ``constants`` default to
    ``theory.problem_constants(ens, x_star)`` when the ensemble admits them.
    """
    alg = Algorithm.parse(algorithm)
    config.validate(alg)
    warnings = []
    if x_star is None:
        x_star = ens.solution()
    else:
        x_star = as_vector(x_star, ens.dim)
        resid = float(np.linalg.norm(ens.mean_element(x_star)))
        if resid > 1e-6:
            msg = f"supplied x_star has |A(x_star)| = {resid:.3e}"
            log.warning(msg)
            warnings.append(msg)
    if constants is None:
        try:
            constants = theory.problem_constants(ens, x_star)
        except (TypeError, ValueError) as exc:
            if config.gamma == "auto":
                raise ConfigError(f"cannot resolve gamma='auto': {exc}") from exc
    if isinstance(config.gamma, str):
        gamma = theory.theoretical_stepsize(alg, constants, config.p)
        if not math.isfinite(gamma):
            raise ConfigError("theory-optimal gamma is unbounded for this ensemble; give gamma explicitly")
    else:
        gamma = float(config.gamma)
    p = config.p

    x0 = np.ones(ens.dim) if config.x0 is None else config.x0
    state = initial_state(alg, ens, x0, config.w0)
    rng = make_rng(config.seed)
    mu = constants.mu if constants is not None else theory.ensemble_modulus(ens)
    p_or_n = p if alg is Algorithm.LSVRP else ens.n

    if alg is Algorithm.SPPM:
        step = sppm_step
    elif alg is Algorithm.SPPM_OC:
        step = sppm_oc_step
    elif alg is Algorithm.LSVRP:
        def step(s, e, g, r):
            return lsvrp_step(s, e, g, p, r)
    else:
        def step(s, e, g, r):
            return point_saga_step(s, e, g, r, check_recovery=config.check_recovery)

    iters = config.iters
    target = config.target_error
    ks = np.arange(iters + 1)
    member = np.zeros(iters + 1, dtype=np.int64)
    full = np.zeros(iters + 1, dtype=np.int64)
    sq = np.empty(iters + 1)
    lyap = np.empty(iters + 1)
    plain = alg in (Algorithm.SPPM, Algorithm.SPPM_OC)

    def record(j, s):
        e = s.x - x_star
        sq[j] = e @ e
        lyap[j] = sq[j] if plain else theory.lyapunov(alg, s, x_star, gamma, mu, p_or_n)
        member[j] = s.calls.member_calls
        full[j] = s.calls.full_calls

    record(0, state)
    last = iters
    for j in range(1, iters + 1):
        state = step(state, ens, gamma, rng)
        record(j, state)
        if target is not None and sq[j] <= target:
            last = j
            break

    sl = slice(0, last + 1)
    bound = _bound_curve(alg, ks[sl], gamma, p, constants, sq[0], lyap[0])
    meta = {
        "algorithm": alg.value,
        "gamma": gamma,
        "p": p,
        "seed": _seed_meta(config.seed),
        "iters": iters,
        "n": ens.n,
        "dim": ens.dim,
        "x0": np.asarray(x0, dtype=float).tolist(),
        "delta_convention": None if constants is None else constants.convention,
        "warnings": warnings,
    }
    return Trace(ks[sl].copy(), member[sl].copy(), full[sl].copy(), sq[sl].copy(), lyap[sl].copy(), bound, meta)


def sppm_batch(ens: OperatorEnsemble, gamma: float, x0, iters: int, seeds, x_star=None) -> np.ndarray:
    """Squared errors of many independent SPPM runs at once, shape ``(trials, iters + 1)``.

    Row ``t`` follows the same index sequence as
    ``run("sppm", ens, RunConfig(gamma, iters=iters, seed=seeds[t], x0=x0))``:
    each trial gets its own uniform stream and the same inverse-CDF rule.
    The errors agree to rounding (exactly in dimension one, where no
    summation order is involved). Needs affine resolvents.
    """
    maps = ens.resolvent_maps(gamma)
    if maps is None:
        raise TypeError("sppm_batch needs affine resolvents")
    M, c = maps
    x_star = ens.solution() if x_star is None else as_vector(x_star, ens.dim)
    seeds = list(seeds)
    U = np.stack([np.random.Generator(np.random.PCG64(s)).random(iters) for s in seeds]) if iters else np.empty((len(seeds), 0))
    idx = np.minimum(np.searchsorted(np.asarray(ens._cdf), U, side="right"), ens.n - 1)
    X = np.tile(as_vector(x0, ens.dim), (len(seeds), 1))
    out = np.empty((len(seeds), iters + 1))
    E = X - x_star
    out[:, 0] = np.einsum("ij,ij->i", E, E)
    for k in range(iters):
        i = idx[:, k]
        X = np.einsum("tij,tj->ti", M[i], X) - c[i]
        E = X - x_star
        out[:, k + 1] = np.einsum("ij,ij->i", E, E)
    return out


def _bound_curve(alg, ks, gamma, p, constants, err0, v0) -> np.ndarray:
    if constants is None:
        return np.full(len(ks), np.nan)
    c = constants
    if alg is Algorithm.SPPM:
        if not (c.mu > 0 and math.isfinite(c.sigma_star_sq)):
            return np.full(len(ks), np.nan)
        return np.array([theory.sppm_bound(int(k), gamma, c.mu, c.sigma_star_sq, err0)[0] for k in ks])
    if not (c.mu > 0 and math.isfinite(c.delta)):
        return np.full(len(ks), np.nan)
    factor = theory.rate_report(alg, gamma, c, p).contraction_factor
    start = err0 if alg is Algorithm.SPPM_OC else v0
    return start * factor ** ks.astype(float)
