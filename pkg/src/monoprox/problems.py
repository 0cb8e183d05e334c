"""Seeded test problems.

* :func:`generate_saddle_instance` -- a finite sum of quadratic saddle
  operators ``A_i(y, z) = [[M_i, Q_i^T], [-Q_i, N_i]] (y, z) + (b_i, c_i)``.
* :func:`build_two_piece_example` -- two set-valued operators on R whose mean
  has the root 1.
* :func:`build_tightness_instance` -- shifted scalings ``mu (x - x*) + a_i*``
  for which the SPPM error recursion holds with equality.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .operators import AffineOperator, OperatorEnsemble, PiecewiseScalarOperator, ShiftedScalingOperator, as_vector

__all__ = [
    "SaddleSpec",
    "random_matrix_with_spectrum",
    "generate_saddle_instance",
    "build_two_piece_example",
    "build_tightness_instance",
    "identical_members_instance",
]


def random_matrix_with_spectrum(d: int, eigenvalues, rng: np.random.Generator) -> np.ndarray:
    """``Q diag(eigenvalues) Q^T`` for a Haar-random orthogonal ``Q``.

    ``Q`` comes from the QR factorization of a standard-normal matrix with the
    signs of ``diag(R)`` moved into ``Q``, which makes it Haar distributed.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    eig = np.asarray(eigenvalues, dtype=float).ravel()
    if eig.shape != (d,):
        raise ValueError(f"need {d} eigenvalues, got {eig.size}")
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    Q = Q * signs
    A = (Q * eig) @ Q.T
    return 0.5 * (A + A.T)


@dataclass(frozen=True)
class SaddleSpec:
    n: int = 200
    d_y: int = 3
    d_z: int = 4
    seed: int = 0
    eig_base: float = 10.0
    normal_mean: float = 1.0
    normal_var: float = 5.0

    def __post_init__(self):
        for name in ("n", "d_y", "d_z"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if not self.eig_base > 0:
            raise ValueError("eig_base must be positive")
        if not self.normal_var >= 0:
            raise ValueError("normal_var must be nonnegative")

    @property
    def dim(self) -> int:
        return self.d_y + self.d_z

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SaddleSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SaddleSpec keys: {sorted(unknown)}")
        return cls(**data)


def generate_saddle_instance(spec: SaddleSpec) -> OperatorEnsemble:
    """Build the ``n``-member quadratic saddle ensemble described by ``spec``.

    Draw order per member, from one ``PCG64`` stream seeded with
    ``spec.seed``: ``M_i``, ``N_i``, ``Q_i``, ``b_i``, ``c_i``. Normals come
    from ``Generator.standard_normal`` (ziggurat).
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    dy, dz = spec.d_y, spec.d_z
    eig_y = spec.eig_base ** np.arange(dy, dtype=float)
    eig_z = spec.eig_base ** np.arange(dz, dtype=float)
    sd = float(np.sqrt(spec.normal_var))
    members = []
    for _ in range(spec.n):
        M = random_matrix_with_spectrum(dy, eig_y, rng)
        N = random_matrix_with_spectrum(dz, eig_z, rng)
        Q = rng.standard_normal((dz, dy))
        Q /= np.linalg.norm(Q, axis=0)
        b = spec.normal_mean + sd * rng.standard_normal(dy)
        c = spec.normal_mean + sd * rng.standard_normal(dz)
        B = np.block([[M, Q.T], [-Q, N]])
        members.append(AffineOperator(B, np.concatenate([b, c])))
    return OperatorEnsemble(members)


def build_two_piece_example() -> OperatorEnsemble:
    """Two piecewise operators on R with a jump at 1.

    ``A_1`` is 1 left of 1, 3 right of it and ``[1, 3]`` at 1. ``A_2`` is
    ``4x - 7`` / ``[-3, -1]`` / ``4x - 5``. Their mean is ``2x - 3`` for
    ``x < 1``, ``[-1, 1]`` at 1 and ``2x - 1`` for ``x > 1``; the root is 1.
    """
    a1 = PiecewiseScalarOperator([1.0], slopes=[0.0, 0.0], intercepts=[1.0, 3.0])
    a2 = PiecewiseScalarOperator([1.0], slopes=[4.0, 4.0], intercepts=[-7.0, -5.0])
    return OperatorEnsemble([a1, a2], x_star=[1.0])


def build_tightness_instance(mu: float, x_star, offsets) -> OperatorEnsemble:
    """Members ``x -> mu (x - x_star) + offsets[i]``, uniformly weighted.

    ``offsets`` is a list of scalars (for ``x_star`` in R) or an ``(m, d)``
    array; it must average to zero so that ``x_star`` is the root.
    """
    x_star = as_vector(x_star)
    d = x_star.shape[0]
    off = np.asarray(offsets, dtype=float)
    off = off.reshape(-1, 1) if off.ndim <= 1 and d == 1 else off.reshape(-1, d)
    if off.shape[0] < 1:
        raise ValueError("need at least one offset")
    scale = 1.0 + np.abs(off).max()
    if np.abs(off.mean(axis=0)).max() > 1e-12 * scale:
        raise ValueError("offsets must average to zero")
    return OperatorEnsemble([ShiftedScalingOperator(mu, x_star, o) for o in off], x_star=x_star)


def identical_members_instance(n: int, B, r) -> OperatorEnsemble:
    """``n`` copies of the same affine operator (zero similarity constants)."""
    return OperatorEnsemble([AffineOperator(B, r) for _ in range(n)])
