"""Rates, stepsizes, Lyapunov functions and similarity constants.

Besides the closed-form contraction factors, this module computes the exact
one-step conditional expectation of the error (or Lyapunov value) of each
method by enumerating every sample index (and both coin outcomes for
L-SVRP). Comparing that expectation with the contraction of the current
value is a machine check of the per-step recursions behind the convergence
theorems; see :func:`verify_step_inequality`.

Similarity constants
--------------------
For an ensemble whose members have linear parts ``B_i`` and canonical
selections ``a_i(x) = B_i x + r_i`` the centered deviation at ``x`` is
``(B_i - B_bar)(x - x_star)``. Four related numbers are available:

``estimate_delta_spectral``
    ``sqrt(sum_i w_i |B_i - B_bar|)``, the cheap estimate used by default for
    the theory-optimal stepsizes (about 26.8 on the default saddle
    instance). It is *not* a valid similarity constant in general.
``certified_delta``
    ``sqrt(sum_i w_i |B_i - B_bar|^2)``, a valid expected-similarity constant.
``exact_delta``
    ``sqrt(lambda_max(sum_i w_i D_i^T D_i))`` with ``D_i = B_i - B_bar``, the
    smallest valid expected-similarity constant for canonical selections.
``average_similarity_delta``
    Smallest valid average-similarity constant (the one Point-SAGA needs),
    the norm of ``x_1..x_n -> (B_i x_i - mean_j B_j x_j)_i``. It does not
    reduce to the deviation norms above: a single displaced ``x_i`` already
    gives a ratio of ``|B_i x_i| / |x_i|``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import LinearOperator, eigsh

from .operators import (
    AffineOperator,
    OperatorEnsemble,
    PiecewiseScalarOperator,
    ShiftedScalingOperator,
    as_vector,
    lipschitz_constant,
    strong_monotonicity_modulus,
)
from .states import Algorithm

__all__ = [
    "RateReport",
    "StepCheck",
    "ProblemConstants",
    "AmbiguousSelectionError",
    "sigma_star_sq",
    "sppm_bound",
    "sppm_rate",
    "sppm_oc_rate",
    "lsvrp_rate",
    "point_saga_rate",
    "rate_report",
    "theoretical_stepsize",
    "iterations_to_accuracy",
    "lyapunov",
    "estimate_delta_spectral",
    "certified_delta",
    "exact_delta",
    "average_similarity_delta",
    "empirical_similarity",
    "ensemble_modulus",
    "problem_constants",
    "verify_step_inequality",
    "sppm_expected_sq_error",
]

STEP_RTOL = 1e-9


class AmbiguousSelectionError(ValueError):
    """A set-valued member sits on a breakpoint where the selection matters."""


@dataclass(frozen=True)
class RateReport:
    """Contraction factor of one method at a given stepsize.

    ``neighborhood`` is the asymptotic squared-error floor (zero for the
    variance-reduced methods). ``optimal_gamma`` is None for SPPM, which has
    no single best stepsize, and ``inf`` when any stepsize contracts.
    """

    gamma: float
    contraction_factor: float
    neighborhood: float
    optimal_gamma: Optional[float]
    iteration_complexity_constant: float


@dataclass(frozen=True)
class StepCheck:
    lhs: float
    rhs: float
    holds: bool
    slack: float

    @classmethod
    def compare(cls, lhs: float, rhs: float, atol: float = 0.0) -> "StepCheck":
        return cls(float(lhs), float(rhs), bool(lhs <= rhs * (1 + STEP_RTOL) + atol), float(rhs - lhs))


@dataclass(frozen=True)
class ProblemConstants:
    """Constants fed to the rate and stepsize formulas.

    ``delta`` enters SPPM-OC and L-SVRP, ``delta_tilde`` enters Point-SAGA.
    ``convention`` records how they were obtained (``"spectral"``,
    ``"certified"`` or ``"manual"``).
    """

    mu: float
    delta: float
    delta_tilde: float
    sigma_star_sq: float
    n: int
    convention: str = "manual"


# ---------------------------------------------------------------- rates


def sigma_star_sq(ens: OperatorEnsemble, x_star=None, atol: float = 1e-8) -> float:
    """``sum_i w_i |a_i*|^2`` for the canonical selections at the root."""
    x_star = ens.solution() if x_star is None else as_vector(x_star, ens.dim)
    a = ens.member_elements(x_star)
    mean = ens.weights @ a
    scale = max(1.0, float(np.max(np.linalg.norm(a, axis=1))))
    if np.linalg.norm(mean) > atol * scale:
        raise ValueError(f"selections at x_star do not average to zero (|mean| = {np.linalg.norm(mean):.3e})")
    return float(ens.weights @ np.einsum("ij,ij->i", a, a))


_sigma_star_sq = sigma_star_sq


def sppm_bound(k: int, gamma: float, mu: float, sigma_star_sq: float, init_err_sq: float) -> tuple[float, float]:
    """Expected squared error bound of SPPM after ``k`` steps.

    Returns ``(exact, simplified)``: the geometric-sum form, which is attained
    by shifted-scaling ensembles, and its ``k``-free neighborhood relaxation.
    """
    if gamma <= 0 or mu <= 0 or k < 0:
        raise ValueError("need gamma > 0, mu > 0, k >= 0")
    q = (1.0 + gamma * mu) ** 2
    decay = q ** (-k)
    exact = decay * init_err_sq + (1.0 - decay) / (q - 1.0) * gamma**2 * sigma_star_sq
    simplified = decay * init_err_sq + gamma * sigma_star_sq / (2 * mu + gamma * mu**2)
    return exact, simplified


def sppm_rate(gamma: float, mu: float, sigma_star_sq: float) -> RateReport:
    factor = (1.0 + gamma * mu) ** -2
    return RateReport(gamma, factor, gamma * sigma_star_sq / (2 * mu + gamma * mu**2), None, math.nan)


def _auto(gamma) -> bool:
    return gamma is None or (isinstance(gamma, str) and gamma == "auto")


def sppm_oc_rate(gamma, mu: float, delta: float) -> RateReport:
    """``(1 + gamma^2 delta^2) / (1 + gamma mu)^2``; best at ``gamma = mu / delta^2``."""
    opt = math.inf if delta == 0 else mu / delta**2
    g = opt if _auto(gamma) else float(gamma)
    if math.isinf(g):
        factor = (delta / mu) ** 2
    else:
        factor = (1 + g**2 * delta**2) / (1 + g * mu) ** 2
    return RateReport(g, factor, 0.0, opt, delta**2 / mu**2 + 1)


def _branches(g: float, mu: float, tail: float, coef: float) -> float:
    # max{1/(1+g mu), tail + g coef / (mu (1+g mu))}
    if math.isinf(g):
        return 0.0 if coef == 0 else max(0.0, tail + coef / mu**2)
    return max(1.0 / (1 + g * mu), tail + g * coef / (mu * (1 + g * mu)))


def lsvrp_rate(gamma, mu: float, delta: float, p: float) -> RateReport:
    """Lyapunov contraction of L-SVRP with anchor-refresh probability ``p``."""
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    denom = delta**2 + (1 - p) / p * mu**2
    opt = math.inf if denom == 0 else mu / denom
    g = opt if _auto(gamma) else float(gamma)
    factor = _branches(g, mu, 1 - p, delta**2 * p)
    return RateReport(g, factor, 0.0, opt, delta**2 / mu**2 + 1 / p)


def point_saga_rate(gamma, mu: float, delta_tilde: float, n: int) -> RateReport:
    """Lyapunov contraction of Point-SAGA on an ``n``-member finite sum."""
    if n < 1:
        raise ValueError("n must be >= 1")
    denom = delta_tilde**2 + (n - 1) * mu**2
    opt = math.inf if denom == 0 else mu / denom
    g = opt if _auto(gamma) else float(gamma)
    factor = _branches(g, mu, 1 - 1 / n, delta_tilde**2 / n)
    return RateReport(g, factor, 0.0, opt, delta_tilde**2 / mu**2 + n)


def rate_report(algorithm, gamma, constants: ProblemConstants, p: float | None = None) -> RateReport:
    alg = Algorithm.parse(algorithm)
    c = constants
    if alg is Algorithm.SPPM:
        if _auto(gamma):
            raise ValueError("SPPM has no theory-optimal stepsize; give gamma explicitly")
        return sppm_rate(float(gamma), c.mu, c.sigma_star_sq)
    if alg is Algorithm.SPPM_OC:
        return sppm_oc_rate(gamma, c.mu, c.delta)
    if alg is Algorithm.LSVRP:
        if p is None:
            raise ValueError("L-SVRP needs p")
        return lsvrp_rate(gamma, c.mu, c.delta, p)
    return point_saga_rate(gamma, c.mu, c.delta_tilde, c.n)


def theoretical_stepsize(algorithm, constants: ProblemConstants, p: float | None = None) -> float:
    return rate_report(algorithm, "auto", constants, p).gamma


def iterations_to_accuracy(factor: float, v0: float, eps: float) -> int:
    """Smallest ``k`` with ``factor^k v0 <= eps``."""
    if v0 <= eps:
        return 0
    if factor <= 0:
        return 1
    if factor >= 1:
        return math.inf
    return math.ceil(math.log(v0 / eps) / -math.log(factor))


# ---------------------------------------------------------------- Lyapunov


def lyapunov(algorithm, state, x_star, gamma: float, mu: float, p_or_n=None) -> float:
    """Potential contracted by each method's theorem.

    Plain squared error for SPPM and SPPM-OC;
    ``|x - x*|^2 + (gamma mu / p) |w - x*|^2`` for L-SVRP;
    ``|x - x*|^2 + gamma mu sum_i |w_i - x*|^2`` for Point-SAGA.
    """
    alg = Algorithm.parse(algorithm)
    e = state.x - x_star
    v = float(e @ e)
    if alg is Algorithm.LSVRP:
        if p_or_n is None:
            raise ValueError("L-SVRP Lyapunov value needs p")
        ew = state.w - x_star
        v += gamma * mu / p_or_n * float(ew @ ew)
    elif alg is Algorithm.POINT_SAGA:
        if state.shadow_w is None:
            raise ValueError("Point-SAGA Lyapunov value needs shadow_w tracking")
        ew = state.shadow_w - x_star
        v += gamma * mu * float(np.einsum("ij,ij->", ew, ew))
    return v


# ---------------------------------------------------------------- constants


def _linear_parts(ens: OperatorEnsemble) -> np.ndarray:
    if ens.affine:
        return np.asarray(ens.B)
    parts = []
    for m in ens.members:
        if isinstance(m, AffineOperator):
            parts.append(m.B)
        elif isinstance(m, ShiftedScalingOperator):
            parts.append(m.mu * np.eye(m.dim))
        else:
            raise TypeError("similarity constants need members with a linear part")
    return np.stack(parts)


def _deviations(ens: OperatorEnsemble) -> np.ndarray:
    B = _linear_parts(ens)
    return B - np.einsum("i,ijk->jk", ens.weights, B)


def estimate_delta_spectral(ens: OperatorEnsemble) -> float:
    """``sqrt(sum_i w_i |B_i - B_bar|_2)``; see the module notes."""
    D = _deviations(ens)
    norms = np.linalg.norm(D, ord=2, axis=(1, 2))
    return float(np.sqrt(ens.weights @ norms))


def certified_delta(ens: OperatorEnsemble) -> float:
    """``sqrt(sum_i w_i |B_i - B_bar|_2^2)``, a valid expected-similarity constant."""
    D = _deviations(ens)
    norms = np.linalg.norm(D, ord=2, axis=(1, 2))
    return float(np.sqrt(ens.weights @ norms**2))


def exact_delta(ens: OperatorEnsemble) -> float:
    """Smallest expected-similarity constant for canonical selections."""
    D = _deviations(ens)
    S = np.einsum("n,nji,njk->ik", ens.weights, D, D)
    return float(np.sqrt(max(0.0, np.linalg.eigvalsh(S)[-1])))


def average_similarity_delta(ens: OperatorEnsemble, tol: float = 1e-12) -> float:
    """Norm of ``(x_i)_i -> (B_i x_i - mean_j B_j x_j)_i`` for a uniform ensemble."""
    if not ens.uniform:
        raise ValueError("average similarity is defined for uniform finite sums")
    B = _linear_parts(ens)
    n, d, _ = B.shape
    if n * d <= 600:
        # block (i, j) is (delta_ij - 1/n) B_j
        G = np.kron(np.eye(n) - 1.0 / n, np.eye(d)) @ scipy.linalg.block_diag(*B)
        return float(np.linalg.norm(G, 2))

    def gram(v):
        e = v.reshape(n, d)
        y = np.einsum("nij,nj->ni", B, e)
        y -= y.mean(axis=0)
        return np.einsum("nji,nj->ni", B, y).ravel()

    op = LinearOperator((n * d, n * d), matvec=gram, dtype=float)
    v0 = np.ones(n * d)
    lam = eigsh(op, k=1, which="LA", tol=tol, v0=v0, return_eigenvectors=False)[0]
    return float(np.sqrt(max(lam, 0.0)))


def empirical_similarity(ens: OperatorEnsemble, x_star, probe_points: Sequence) -> float:
    """Largest observed similarity ratio over the probe points.

    For each probe ``x != x_star`` computes
    ``sqrt(sum_i w_i |a_i(x) - a_bar(x) - a_i*|^2 / |x - x_star|^2)``; the
    maximum is a lower bound on the best expected-similarity constant.
    """
    x_star = as_vector(x_star, ens.dim)
    a_star = ens.member_elements(x_star)
    best = 0.0
    for x in probe_points:
        x = as_vector(x, ens.dim)
        dist = float((x - x_star) @ (x - x_star))
        if dist == 0.0:
            continue
        a = ens.member_elements(x)
        dev = a - ens.weights @ a - a_star
        best = max(best, math.sqrt(float(ens.weights @ np.einsum("ij,ij->i", dev, dev)) / dist))
    return best


def ensemble_modulus(ens: OperatorEnsemble) -> float:
    """Common strong-monotonicity modulus: the minimum over members."""
    return min(strong_monotonicity_modulus(m) for m in ens.members)


def ensemble_lipschitz(ens: OperatorEnsemble) -> float:
    if ens.affine:
        return float(np.max(np.linalg.norm(ens.B, ord=2, axis=(1, 2))))
    return max(lipschitz_constant(m) for m in ens.members)


def problem_constants(ens: OperatorEnsemble, x_star=None, convention: str = "spectral") -> ProblemConstants:
    """Constants for the stepsize formulas.

    ``convention="spectral"`` uses :func:`estimate_delta_spectral` for both
    similarity constants, the cheap default. ``"certified"`` uses
    :func:`certified_delta` and :func:`average_similarity_delta`, for which
    the per-step recursions are guaranteed.
    """
    x_star = ens.solution() if x_star is None else as_vector(x_star, ens.dim)
    mu = ensemble_modulus(ens)
    if convention == "spectral":
        delta = delta_tilde = estimate_delta_spectral(ens)
    elif convention == "certified":
        delta = certified_delta(ens)
        delta_tilde = average_similarity_delta(ens) if ens.uniform else math.nan
    else:
        raise ValueError(f"unknown convention {convention!r}")
    return ProblemConstants(mu, delta, delta_tilde, sigma_star_sq(ens, x_star), ens.n, convention)


# ---------------------------------------------------------------- exact checks


def _check_selection(ens: OperatorEnsemble, point: np.ndarray, x_star: np.ndarray) -> None:
    if ens.affine or np.array_equal(point, x_star):
        return
    for m in ens.members:
        if isinstance(m, PiecewiseScalarOperator) and m.is_breakpoint(point):
            raise AmbiguousSelectionError(f"member selection at breakpoint {point[0]} is not unique")


def verify_step_inequality(
    algorithm,
    state,
    ens: OperatorEnsemble,
    x_star,
    gamma: float,
    p: float | None = None,
    delta: float | None = None,
    *,
    mu: float | None = None,
    sigma_star_sq: float | None = None,
) -> StepCheck:
    """Compare the exact next-step expectation with its theoretical bound.

    ``lhs`` is the conditional expectation of the next squared error (SPPM,
    SPPM-OC) or Lyapunov value (L-SVRP, Point-SAGA), computed by enumerating
    every member index with its weight, and both coin outcomes for L-SVRP.
    ``rhs`` is the bound from the current state: for SPPM
    ``(|e|^2 + gamma^2 sigma*^2) / (1 + gamma mu)^2``, for the others the
    method's contraction factor times the current value. ``delta`` is the
    average-similarity constant for Point-SAGA.
    """
    alg = Algorithm.parse(algorithm)
    x_star = as_vector(x_star, ens.dim)
    mu = ensemble_modulus(ens) if mu is None else mu
    x = state.x
    e = x - x_star
    err = float(e @ e)
    atol = 1e-26 * (1.0 + float(x_star @ x_star))

    if alg is Algorithm.SPPM:
        if sigma_star_sq is None:
            sigma_star_sq = _sigma_star_sq(ens, x_star)
        X = ens.resolve_all(gamma, np.broadcast_to(x, (ens.n, ens.dim)))
        d = X - x_star
        lhs = ens.weights @ np.einsum("ij,ij->i", d, d)
        rhs = (err + gamma**2 * sigma_star_sq) / (1 + gamma * mu) ** 2
        return StepCheck.compare(lhs, rhs, atol)

    if delta is None:
        raise ValueError("delta is required for the variance-reduced checks")

    if alg is Algorithm.SPPM_OC:
        _check_selection(ens, x, x_star)
        A = ens.member_elements(x)
        H = A - ens.mean_element(x)
        X = ens.resolve_all(gamma, x + gamma * H)
        d = X - x_star
        lhs = ens.weights @ np.einsum("ij,ij->i", d, d)
        rhs = sppm_oc_rate(gamma, mu, delta).contraction_factor * err
        return StepCheck.compare(lhs, rhs, atol)

    if alg is Algorithm.LSVRP:
        if p is None:
            raise ValueError("L-SVRP check needs p")
        _check_selection(ens, state.w, x_star)
        ew = state.w - x_star
        errw = float(ew @ ew)
        alpha = gamma * mu / p
        H = ens.member_elements(state.w) - state.a_bar
        X = ens.resolve_all(gamma, x + gamma * H)
        d = X - x_star
        nxt = np.einsum("ij,ij->i", d, d)
        v_refresh = nxt * (1 + alpha)
        v_keep = nxt + alpha * errw
        lhs = ens.weights @ (p * v_refresh + (1 - p) * v_keep)
        rhs = lsvrp_rate(gamma, mu, delta, p).contraction_factor * (err + alpha * errw)
        return StepCheck.compare(lhs, rhs, atol)

    if not ens.uniform:
        raise ValueError("Point-SAGA needs uniform weights")
    if state.shadow_w is None:
        raise ValueError("Point-SAGA check needs shadow_w tracking")
    ews = state.shadow_w - x_star
    shadow = np.einsum("ij,ij->i", ews, ews)
    total = float(shadow.sum())
    H = state.table - state.a_bar
    X = ens.resolve_all(gamma, x + gamma * H)
    d = X - x_star
    nxt = np.einsum("ij,ij->i", d, d)
    lhs = np.mean(nxt + gamma * mu * (total - shadow + nxt))
    rhs = point_saga_rate(gamma, mu, delta, ens.n).contraction_factor * (err + gamma * mu * total)
    return StepCheck.compare(lhs, rhs, atol)


def sppm_expected_sq_error(ens: OperatorEnsemble, gamma: float, x0, x_star, iters: int) -> np.ndarray:
    """Exact ``E|x^k - x*|^2`` of SPPM for ``k = 0..iters``.

    Valid when every resolvent is affine (affine and shifted-scaling
    members). The first and second moments of the iterate are pushed through
    the mixture of resolvent maps, enumerating every member at every step.
    """
    maps = ens.resolvent_maps(gamma)
    if maps is None:
        raise TypeError("exact SPPM moments need affine resolvents")
    M, c = maps
    w = ens.weights
    x_star = as_vector(x_star, ens.dim)
    m = as_vector(x0, ens.dim).copy()
    S = np.outer(m, m)
    out = np.empty(iters + 1)
    out[0] = np.trace(S) - 2 * x_star @ m + x_star @ x_star
    for k in range(1, iters + 1):
        Mm = M @ m
        S_new = np.zeros_like(S)
        for i in range(ens.n):
            cross = np.outer(Mm[i], c[i])
            S_new += w[i] * (M[i] @ S @ M[i].T - cross - cross.T + np.outer(c[i], c[i]))
        m = w @ (Mm - c)
        S = S_new
        out[k] = np.trace(S) - 2 * x_star @ m + x_star @ x_star
    return out


def with_delta(constants: ProblemConstants, scale: float) -> ProblemConstants:
    """Copy of ``constants`` with both similarity constants scaled."""
    return replace(constants, delta=constants.delta * scale, delta_tilde=constants.delta_tilde * scale)
