import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monoprox.operators import (
    AffineOperator,
    DimensionError,
    OperatorEnsemble,
    PiecewiseScalarOperator,
    ShiftedScalingOperator,
    SingularResolventError,
    ensemble_root,
    evaluate_element,
    lipschitz_constant,
    resolvent,
    strong_monotonicity_modulus,
)


def random_monotone(rng, d, mu=0.5):
    """Affine operator with symmetric part >= mu I plus a random skew part."""
    G = rng.normal(size=(d, d))
    S = G @ G.T + mu * np.eye(d)
    K = rng.normal(size=(d, d))
    return AffineOperator(S + K - K.T, rng.normal(size=d))


seeds = st.integers(0, 2**32 - 1)


class TestAffine:
    def test_evaluate(self):
        op = AffineOperator([[2.0, 1.0], [-1.0, 3.0]], [1.0, -1.0])
        np.testing.assert_allclose(evaluate_element(op, [1.0, 2.0]), [5.0, 4.0])

    def test_modulus_and_lipschitz(self):
        op = AffineOperator(np.diag([1.0, 5.0]) + np.array([[0, 2.0], [-2.0, 0]]), np.zeros(2))
        assert strong_monotonicity_modulus(op) == pytest.approx(1.0)
        # singular values of [[1,2],[-2,5]]
        assert lipschitz_constant(op) == pytest.approx(np.linalg.norm([[1, 2], [-2, 5]], 2))

    def test_resolvent_scalar_closed_form(self):
        op = AffineOperator([[3.0]], [1.0])
        # x + 2(3x + 1) = 5  ->  x = 3/7
        np.testing.assert_allclose(resolvent(op, 2.0, [5.0]), [3.0 / 7.0])

    @pytest.mark.parametrize("gamma", [0.0, -1.0, float("nan"), float("inf")])
    def test_bad_gamma(self, gamma):
        op = AffineOperator(np.eye(2), np.zeros(2))
        with pytest.raises(ValueError):
            resolvent(op, gamma, np.zeros(2))

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            AffineOperator(np.ones((2, 3)), np.zeros(2))
        with pytest.raises(DimensionError):
            OperatorEnsemble([AffineOperator(np.eye(2), np.zeros(2)), AffineOperator(np.eye(3), np.zeros(3))])

    def test_singular_resolvent(self):
        # I + B singular for B = -I (not monotone, rejected at solve time)
        op = AffineOperator(-np.eye(2), np.zeros(2))
        with pytest.raises(SingularResolventError):
            resolvent(op, 1.0, np.ones(2))

    @settings(max_examples=200, deadline=None)
    @given(seed=seeds, d=st.integers(1, 6), log_gamma=st.floats(-3, 2))
    def test_inverse_consistency(self, seed, d, log_gamma):
        rng = np.random.default_rng(seed)
        op = random_monotone(rng, d)
        g = 10.0**log_gamma
        v = rng.normal(size=d)
        x = resolvent(op, g, v)
        np.testing.assert_allclose(x + g * op.evaluate(x), v, atol=1e-9 * (1 + np.abs(v).max()))
        assert op.contains(x, (v - x) / g, tol=1e-8)

    @settings(max_examples=200, deadline=None)
    @given(seed=seeds, d=st.integers(1, 6), log_gamma=st.floats(-3, 2))
    def test_contraction(self, seed, d, log_gamma):
        rng = np.random.default_rng(seed)
        op = random_monotone(rng, d)
        mu = strong_monotonicity_modulus(op)
        g = 10.0**log_gamma
        x, y = rng.normal(size=(2, d))
        lhs = np.linalg.norm(resolvent(op, g, x) - resolvent(op, g, y))
        assert lhs <= np.linalg.norm(x - y) / (1 + g * mu) + 1e-12


class TestShiftedScaling:
    def test_resolvent_closed_form(self):
        op = ShiftedScalingOperator(2.0, [1.0], [3.0])
        # (v + g mu x* - g a*) / (1 + g mu) with v=4, g=0.5
        np.testing.assert_allclose(resolvent(op, 0.5, [4.0]), [(4 + 1 - 1.5) / 2])

    def test_rejects_nonpositive_mu(self):
        with pytest.raises(ValueError):
            ShiftedScalingOperator(0.0, [0.0], [0.0])

    def test_modulus(self):
        assert strong_monotonicity_modulus(ShiftedScalingOperator(3.0, [0.0, 0.0], [1.0, 1.0])) == 3.0


class TestPiecewise:
    def test_interval_and_selection(self, two_piece):
        a1, a2 = two_piece.members
        assert a1.interval([1.0]) == (1.0, 3.0)
        assert a2.interval([1.0]) == (-3.0, -1.0)
        assert a1.evaluate([1.0])[0] == 2.0
        assert a2.evaluate([0.0])[0] == -7.0
        assert a1.contains([1.0], [3.0]) and not a1.contains([1.0], [3.5])

    def test_rejects_non_monotone(self):
        with pytest.raises(ValueError, match="negative slope"):
            PiecewiseScalarOperator([], [-1.0], [0.0])
        with pytest.raises(ValueError, match="downward jump"):
            PiecewiseScalarOperator([0.0], [0.0, 0.0], [1.0, 0.0])
        with pytest.raises(ValueError, match="increasing"):
            PiecewiseScalarOperator([1.0, 0.0], [0.0] * 3, [0.0, 1.0, 2.0])

    def test_explicit_jumps_must_match(self):
        PiecewiseScalarOperator([1.0], [0.0, 0.0], [1.0, 3.0], jumps=[(1.0, 3.0)])
        with pytest.raises(ValueError):
            PiecewiseScalarOperator([1.0], [0.0, 0.0], [1.0, 3.0], jumps=[(0.0, 3.0)])

    def test_resolvent_lands_on_breakpoint(self, two_piece):
        a1 = two_piece.members[0]
        # v in [1 + g*1, 1 + g*3] maps to the breakpoint
        for v in (1.25, 1.5, 1.75):
            assert resolvent(a1, 0.25, [v])[0] == 1.0
        assert resolvent(a1, 0.25, [1.0])[0] == pytest.approx(0.75)
        assert resolvent(a1, 0.25, [2.0])[0] == pytest.approx(1.25)

    @settings(max_examples=300, deadline=None)
    @given(
        seed=seeds,
        m=st.integers(0, 4),
        log_gamma=st.floats(-2, 2),
        v=st.floats(-20, 20),
    )
    def test_membership(self, seed, m, log_gamma, v):
        rng = np.random.default_rng(seed)
        b = np.sort(rng.uniform(-5, 5, size=m))
        if m and np.any(np.diff(b) == 0):
            return
        slopes = rng.uniform(0, 3, size=m + 1)
        inter = np.empty(m + 1)
        inter[0] = rng.normal()
        for j in range(m):
            left = slopes[j] * b[j] + inter[j]
            inter[j + 1] = left + rng.uniform(0, 2) - slopes[j + 1] * b[j]
        op = PiecewiseScalarOperator(b, slopes, inter)
        g = 10.0**log_gamma
        x = resolvent(op, g, [v])
        assert op.contains(x, [(v - x[0]) / g], tol=1e-9 * (1 + abs(v) / g))


class TestEnsemble:
    def test_weights_validation(self):
        ops = [AffineOperator(np.eye(1), [0.0])] * 2
        with pytest.raises(ValueError):
            OperatorEnsemble(ops, weights=[0.7, 0.7])
        with pytest.raises(ValueError):
            OperatorEnsemble([])

    def test_sample_inverse_cdf(self):
        ops = [AffineOperator(np.eye(1), [float(i)]) for i in range(3)]
        ens = OperatorEnsemble(ops, weights=[0.2, 0.5, 0.3])
        assert [ens.sample(u) for u in (0.0, 0.19, 0.2, 0.69, 0.7, 0.999999)] == [0, 0, 1, 1, 2, 2]

    def test_two_piece_mean(self, two_piece):
        for x in np.linspace(-3, 3, 61):
            if x == 1.0:
                continue
            expected = 2 * x - 3 if x < 1 else 2 * x - 1
            assert two_piece.mean_element(np.array([x]))[0] == pytest.approx(expected, abs=1e-12)

    def test_root(self, small_saddle):
        x = ensemble_root(small_saddle)
        assert np.linalg.norm(small_saddle.mean_element(x)) < 1e-10

    def test_resolve_all_matches_resolve(self, small_saddle, rng):
        V = rng.normal(size=(small_saddle.n, small_saddle.dim))
        R = small_saddle.resolve_all(0.3, V)
        for i in range(small_saddle.n):
            np.testing.assert_allclose(R[i], small_saddle.resolve(i, 0.3, V[i]), rtol=1e-13, atol=1e-13)

    def test_cached_map_matches_lu(self, small_saddle, rng):
        v = rng.normal(size=small_saddle.dim)
        for i, m in enumerate(small_saddle.members):
            np.testing.assert_allclose(small_saddle.resolve(i, 0.7, v), resolvent(m, 0.7, v), rtol=1e-11, atol=1e-12)

    def test_concurrent_resolves_identical(self, rng):
        ops = [random_monotone(rng, 4) for _ in range(20)]
        ens = OperatorEnsemble(ops)
        v = rng.normal(size=4)
        results = [None] * 8

        def work(t):
            results[t] = np.stack([ens.resolve(i, 0.123, v) for i in range(ens.n)])

        threads = [threading.Thread(target=work, args=(t,)) for t in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for r in results[1:]:
            assert np.array_equal(r, results[0])
