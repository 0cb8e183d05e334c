"""Maximally monotone operators, their resolvents, and finite ensembles.

Three concrete operator families are supported:

* :class:`AffineOperator` -- ``x -> B x + r`` on R^d,
* :class:`PiecewiseScalarOperator` -- set-valued monotone graphs on R built
  from affine pieces with jump intervals at the breakpoints,
* :class:`ShiftedScalingOperator` -- ``x -> mu (x - center) + offset``.

Every operator exposes ``dim``, ``evaluate(x)`` (a canonical selection from
the image) and is accepted by :func:`resolvent`. Vectors are 1-D float64
arrays; operators on R use vectors of length one.
"""

from __future__ import annotations

import bisect
import threading
import warnings
from typing import Callable, Sequence, Union

import numpy as np
import scipy.linalg

__all__ = [
    "AffineOperator",
    "PiecewiseScalarOperator",
    "ShiftedScalingOperator",
    "OperatorEnsemble",
    "Operator",
    "DimensionError",
    "SingularResolventError",
    "evaluate_element",
    "resolvent",
    "strong_monotonicity_modulus",
    "lipschitz_constant",
    "ensemble_mean_element",
    "ensemble_root",
]


class DimensionError(ValueError):
    """Raised when a vector does not match an operator's dimension."""


class SingularResolventError(np.linalg.LinAlgError):
    """Raised when ``I + gamma B`` (or a mean linear part) is numerically singular."""


def as_vector(x, dim: int | None = None) -> np.ndarray:
    """Return ``x`` as a finite 1-D float array, optionally checking its length."""
    v = np.atleast_1d(np.asarray(x, dtype=float))
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise DimensionError(f"expected dimension {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _check_gamma(gamma: float) -> float:
    gamma = float(gamma)
    if not gamma > 0 or not np.isfinite(gamma):
        raise ValueError(f"stepsize gamma must be positive and finite, got {gamma}")
    return gamma


class AffineOperator:
    """Single-valued affine operator ``x -> B x + r``.

    Monotone iff the symmetric part of ``B`` is positive semidefinite; this is
    not enforced, use :func:`strong_monotonicity_modulus` to inspect it.
    """

    kind = "affine"

    def __init__(self, B, r):
        B = np.atleast_2d(np.asarray(B, dtype=float))
        if B.ndim != 2 or B.shape[0] != B.shape[1]:
            raise DimensionError(f"B must be square, got shape {B.shape}")
        r = as_vector(r, B.shape[0])
        if not np.all(np.isfinite(B)):
            raise ValueError("B has non-finite entries")
        self.B = _frozen(B)
        self.r = _frozen(r)

    @property
    def dim(self) -> int:
        return self.B.shape[0]

    def evaluate(self, x) -> np.ndarray:
        return self.B @ as_vector(x, self.dim) + self.r

    def contains(self, x, u, tol: float = 1e-9) -> bool:
        """Whether ``u`` belongs to ``A(x)`` (up to ``tol`` relative)."""
        a = self.evaluate(x)
        return bool(np.linalg.norm(a - as_vector(u, self.dim)) <= tol * (1.0 + np.linalg.norm(a)))

    def resolvent_map(self, gamma: float) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(M, c)`` with ``(I + gamma A)^{-1}(v) = M v - c``.

        ``M`` is the inverse of ``I + gamma B`` assembled from its LU factors.
        """
        gamma = _check_gamma(gamma)
        lu = _lu_factor(np.eye(self.dim) + gamma * self.B)
        M = scipy.linalg.lu_solve(lu, np.eye(self.dim))
        return M, M @ (gamma * self.r)

    def __repr__(self):
        return f"AffineOperator(dim={self.dim})"


class ShiftedScalingOperator:
    """``x -> mu (x - center) + offset`` with ``mu > 0``."""

    kind = "shifted-scaling"

    def __init__(self, mu: float, center, offset):
        mu = float(mu)
        if not mu > 0 or not np.isfinite(mu):
            raise ValueError(f"mu must be positive, got {mu}")
        center = as_vector(center)
        self.mu = mu
        self.center = _frozen(center)
        self.offset = _frozen(as_vector(offset, center.shape[0]))

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def evaluate(self, x) -> np.ndarray:
        return self.mu * (as_vector(x, self.dim) - self.center) + self.offset

    def contains(self, x, u, tol: float = 1e-9) -> bool:
        a = self.evaluate(x)
        return bool(np.linalg.norm(a - as_vector(u, self.dim)) <= tol * (1.0 + np.linalg.norm(a)))

    def resolvent_map(self, gamma: float) -> tuple[np.ndarray, np.ndarray]:
        gamma = _check_gamma(gamma)
        s = 1.0 / (1.0 + gamma * self.mu)
        M = s * np.eye(self.dim)
        c = s * (gamma * self.offset - gamma * self.mu * self.center)
        return M, c

    def __repr__(self):
        return f"ShiftedScalingOperator(mu={self.mu}, dim={self.dim})"


class PiecewiseScalarOperator:
    """Maximally monotone set-valued operator on R made of affine pieces.

    ``breakpoints`` ``b_0 < ... < b_{m-1}`` split R into ``m + 1`` open
    segments; segment ``j`` carries the value ``slopes[j] * x + intercepts[j]``.
    At ``b_j`` the operator takes the whole interval between the left limit
    (segment ``j``) and the right limit (segment ``j + 1``), which is what
    makes the graph maximal.

    Parameters
    ----------
    breakpoints : sequence of float
        Strictly increasing.
    slopes, intercepts : sequence of float
        One entry per segment, ``len(breakpoints) + 1`` each. Slopes must be
        nonnegative and the left limit may not exceed the right limit at any
        breakpoint.
    jumps : sequence of (lo, hi), optional
        Explicit intervals at the breakpoints. Only accepted if they agree
        with the limits of the neighbouring pieces.
    """

    kind = "piecewise"
    dim = 1

    def __init__(self, breakpoints, slopes, intercepts, jumps=None):
        b = np.asarray(breakpoints, dtype=float).ravel()
        s = np.asarray(slopes, dtype=float).ravel()
        c = np.asarray(intercepts, dtype=float).ravel()
        if s.shape != (b.size + 1,) or c.shape != (b.size + 1,):
            raise ValueError("need len(breakpoints) + 1 slopes and intercepts")
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(s)) and np.all(np.isfinite(c))):
            raise ValueError("non-finite piece data")
        if np.any(np.diff(b) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if np.any(s < 0):
            raise ValueError("non-monotone graph: negative slope")
        lo = s[:-1] * b + c[:-1]
        hi = s[1:] * b + c[1:]
        if np.any(lo > hi):
            j = int(np.argmax(lo > hi))
            raise ValueError(f"non-monotone graph: downward jump at x={b[j]}")
        if jumps is not None:
            jumps = np.asarray(jumps, dtype=float).reshape(-1, 2)
            if jumps.shape[0] != b.size or not np.allclose(jumps, np.column_stack([lo, hi]), rtol=0, atol=1e-12):
                raise ValueError("jump intervals must equal the one-sided limits of the pieces")
        self.breakpoints = _frozen(b)
        self.slopes = _frozen(s)
        self.intercepts = _frozen(c)
        self.jumps = _frozen(np.column_stack([lo, hi]) if b.size else np.empty((0, 2)))
        self._bp = b.tolist()

    def _locate(self, t: float) -> tuple[int, bool]:
        """Segment index for ``t`` and whether ``t`` sits on a breakpoint."""
        j = bisect.bisect_left(self._bp, t)
        if j < len(self._bp) and self._bp[j] == t:
            return j, True
        return j, False

    def interval(self, x) -> tuple[float, float]:
        """Return the image ``A(x)`` as a closed interval ``(lo, hi)``."""
        t = float(as_vector(x, 1)[0])
        j, on_bp = self._locate(t)
        if on_bp:
            return float(self.jumps[j, 0]), float(self.jumps[j, 1])
        v = self.slopes[j] * t + self.intercepts[j]
        return float(v), float(v)

    def is_breakpoint(self, x) -> bool:
        return self._locate(float(as_vector(x, 1)[0]))[1]

    def evaluate(self, x) -> np.ndarray:
        # midpoint of the jump interval is the canonical selection
        lo, hi = self.interval(x)
        return np.array([0.5 * (lo + hi)])

    def contains(self, x, u, tol: float = 0.0) -> bool:
        lo, hi = self.interval(x)
        u = float(as_vector(u, 1)[0])
        return lo - tol <= u <= hi + tol

    def min_slope(self) -> float:
        return float(self.slopes.min())

    def resolve(self, gamma: float, v) -> np.ndarray:
        """Solve ``v in x + gamma A(x)`` by scanning images of the pieces."""
        gamma = _check_gamma(gamma)
        t = float(as_vector(v, 1)[0])
        for j, bj in enumerate(self._bp):
            lo, hi = self.jumps[j]
            if t < bj + gamma * lo:
                return np.array([(t - gamma * self.intercepts[j]) / (1.0 + gamma * self.slopes[j])])
            if t <= bj + gamma * hi:
                return np.array([bj])
        return np.array([(t - gamma * self.intercepts[-1]) / (1.0 + gamma * self.slopes[-1])])

    def __repr__(self):
        return f"PiecewiseScalarOperator(breakpoints={self._bp})"


Operator = Union[AffineOperator, PiecewiseScalarOperator, ShiftedScalingOperator]


def _lu_factor(K: np.ndarray):
    with warnings.catch_warnings():
        # singularity is reported below as SingularResolventError
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(K, check_finite=False)
    d = np.abs(np.diag(lu))
    if d.min() <= np.finfo(float).eps * max(1.0, d.max()) * K.shape[0]:
        raise SingularResolventError("I + gamma B is numerically singular")
    return lu, piv


def evaluate_element(op: Operator, x) -> np.ndarray:
    """Canonical element of ``op(x)``.

    Single-valued operators return their value; at a breakpoint of a
    :class:`PiecewiseScalarOperator` the midpoint of the jump interval is used.
    """
    return op.evaluate(x)


def resolvent(op: Operator, gamma: float, v) -> np.ndarray:
    """Evaluate ``(I + gamma op)^{-1}(v)``.

    Examples
    --------
    >>> resolvent(ShiftedScalingOperator(1.0, [0.0], [0.0]), 1.0, [4.0])
    array([2.])
    """
    gamma = _check_gamma(gamma)
    v = as_vector(v, op.dim)
    if isinstance(op, AffineOperator):
        lu = _lu_factor(np.eye(op.dim) + gamma * op.B)
        return scipy.linalg.lu_solve(lu, v - gamma * op.r, check_finite=False)
    if isinstance(op, ShiftedScalingOperator):
        return (v + gamma * op.mu * op.center - gamma * op.offset) / (1.0 + gamma * op.mu)
    if isinstance(op, PiecewiseScalarOperator):
        return op.resolve(gamma, v)
    raise TypeError(f"unsupported operator {type(op).__name__}")


def strong_monotonicity_modulus(op: Operator) -> float:
    """Largest ``mu`` with ``<u - v, x - y> >= mu |x - y|^2`` on the graph.

    For affine operators this is the smallest eigenvalue of ``(B + B^T) / 2``;
    the result may be ``<= 0``.
    """
    if isinstance(op, AffineOperator):
        return float(np.linalg.eigvalsh(0.5 * (op.B + op.B.T))[0])
    if isinstance(op, ShiftedScalingOperator):
        return op.mu
    if isinstance(op, PiecewiseScalarOperator):
        return op.min_slope()
    raise TypeError(f"unsupported operator {type(op).__name__}")


def lipschitz_constant(op: AffineOperator) -> float:
    """Largest singular value of the linear part."""
    if isinstance(op, ShiftedScalingOperator):
        return op.mu
    if not isinstance(op, AffineOperator):
        raise TypeError("Lipschitz constant is only defined for affine operators")
    return float(np.linalg.norm(op.B, 2))


class OperatorEnsemble:
    """Finite family of operators with sampling weights.

    The mean operator is ``A = sum_i w_i A_i``. An optional known root
    ``x_star`` can be attached; for all-affine ensembles it is otherwise
    computed on demand by :func:`ensemble_root`.

    Resolvents of affine-like members are cached per ``(member, gamma)`` as an
    explicit affine map. The cache is guarded by a lock, and the cached arrays
    are computed deterministically, so concurrent callers see identical bits.
    """

    def __init__(self, members: Sequence[Operator], weights=None, x_star=None):
        members = list(members)
        if not members:
            raise ValueError("an ensemble needs at least one member")
        dims = {m.dim for m in members}
        if len(dims) != 1:
            raise DimensionError(f"members disagree on dimension: {sorted(dims)}")
        n = len(members)
        if weights is None:
            w = np.full(n, 1.0 / n)
        else:
            w = np.asarray(weights, dtype=float).ravel()
            if w.shape != (n,):
                raise ValueError("need one weight per member")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("weights must be a probability vector")
        self.members = tuple(members)
        self.weights = _frozen(w)
        self.uniform = bool(np.all(w == w[0]))
        cdf = np.cumsum(w)
        cdf[-1] = 1.0
        self._cdf = cdf.tolist()
        self.x_star = None if x_star is None else _frozen(as_vector(x_star, self.dim))

        self.affine = all(isinstance(m, AffineOperator) for m in members)
        if self.affine:
            self.B = _frozen(np.stack([m.B for m in members]))
            self.r = _frozen(np.stack([m.r for m in members]))
            self.B_mean = _frozen(np.einsum("i,ijk->jk", w, self.B))
            self.r_mean = _frozen(w @ self.r)
        self._lock = threading.Lock()
        self._resolvers: dict[float, list[Callable[[np.ndarray], np.ndarray]]] = {}
        self._maps: dict[float, tuple[np.ndarray, np.ndarray] | None] = {}
        self._root: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.members)

    @property
    def dim(self) -> int:
        return self.members[0].dim

    def __len__(self):
        return self.n

    def sample(self, u: float) -> int:
        """Member index for a uniform draw ``u`` in [0, 1) by inverse CDF."""
        return min(bisect.bisect_right(self._cdf, u), self.n - 1)

    def member_element(self, i: int, x: np.ndarray) -> np.ndarray:
        m = self.members[i]
        if self.affine:
            return m.B @ x + m.r
        return m.evaluate(x)

    def member_elements(self, x: np.ndarray) -> np.ndarray:
        """Canonical elements of every member at ``x``, shape ``(n, d)``."""
        if self.affine:
            return self.B @ x + self.r
        return np.stack([m.evaluate(x) for m in self.members])

    def mean_element(self, x: np.ndarray) -> np.ndarray:
        if self.affine:
            return self.B_mean @ x + self.r_mean
        return self.weights @ self.member_elements(x)

    def _prepare(self, gamma: float):
        gamma = _check_gamma(gamma)
        with self._lock:
            fns = self._resolvers.get(gamma)
            if fns is not None:
                return fns
            fns = []
            maps = []
            for m in self.members:
                if isinstance(m, PiecewiseScalarOperator):
                    fns.append(lambda v, m=m: m.resolve(gamma, v))
                    maps.append(None)
                else:
                    M, c = m.resolvent_map(gamma)
                    M.setflags(write=False)
                    c.setflags(write=False)
                    fns.append(lambda v, M=M, c=c: M @ v - c)
                    maps.append((M, c))
            if all(mp is not None for mp in maps):
                self._maps[gamma] = (
                    _frozen(np.stack([mp[0] for mp in maps])),
                    _frozen(np.stack([mp[1] for mp in maps])),
                )
            else:
                self._maps[gamma] = None
            self._resolvers[gamma] = fns
            return fns

    def resolve(self, i: int, gamma: float, v: np.ndarray) -> np.ndarray:
        """``(I + gamma A_i)^{-1}(v)`` through the per-gamma cache."""
        return self._prepare(gamma)[i](v)

    def resolve_all(self, gamma: float, V: np.ndarray) -> np.ndarray:
        """Row ``i`` of the result is ``(I + gamma A_i)^{-1}(V[i])``."""
        fns = self._prepare(gamma)
        maps = self._maps[float(gamma)]
        if maps is not None:
            M, c = maps
            return np.einsum("nij,nj->ni", M, V) - c
        return np.stack([f(v) for f, v in zip(fns, V)])

    def resolvent_maps(self, gamma: float):
        """Stacked ``(M, c)`` of all members, or None if some member is not affine-like."""
        self._prepare(gamma)
        return self._maps[float(gamma)]

    def solution(self) -> np.ndarray:
        """The attached root, or the computed one for all-affine ensembles."""
        if self.x_star is not None:
            return self.x_star
        if self._root is None:
            root = _frozen(ensemble_root(self))
            with self._lock:
                if self._root is None:
                    self._root = root
        return self._root

    def __repr__(self):
        return f"OperatorEnsemble(n={self.n}, dim={self.dim})"


def ensemble_mean_element(ens: OperatorEnsemble, x) -> np.ndarray:
    """Weighted mean of the canonical member elements at ``x``."""
    return ens.mean_element(as_vector(x, ens.dim))


def ensemble_root(ens: OperatorEnsemble) -> np.ndarray:
    """Solve ``sum_i w_i (B_i x + r_i) = 0`` for an all-affine ensemble."""
    if not ens.affine:
        raise TypeError("ensemble_root needs an all-affine ensemble")
    lu = _lu_factor(np.asarray(ens.B_mean))
    x = scipy.linalg.lu_solve(lu, -ens.r_mean, check_finite=False)
    # one step of iterative refinement
    x = x + scipy.linalg.lu_solve(lu, -(ens.B_mean @ x + ens.r_mean), check_finite=False)
    return x
