import numpy as np
import pytest

from rvampss.data import SynthSpec, make_synthetic
from rvampss.exceptions import DomainError, NumericalError
from rvampss.glm_model import Likelihood
from rvampss.rvamp import Dataset, MessageState, Moments, RvampConfig, run_rvamp
from rvampss.sa_rvamp import (
    MacroObservables,
    SaMessageState,
    SpectralOperator,
    macroscopic_observables,
    run_sa_rvamp,
)


def random_matrix(rng, M, N):
    return rng.normal(size=(M, N)) / np.sqrt(N)


class TestSpectralOperator:
    @pytest.mark.parametrize("shape", [(10, 30), (30, 10), (64, 64), (1, 5)])
    def test_traces_match_explicit_inverse(self, shape):
        rng = np.random.default_rng(sum(shape))
        A = random_matrix(rng, *shape)
        M, N = shape
        qx, qz, vx, vz = 0.7, 1.9, 0.4, 1.3
        X = np.linalg.inv(qx * np.eye(N) + qz * A.T @ A)
        V = X @ (vx * np.eye(N) + vz * A.T @ A) @ X
        want = (np.trace(X) / N, np.trace(A @ X @ A.T) / M, np.trace(V) / N, np.trace(A @ V @ A.T) / M)
        got = SpectralOperator(A).traces(qx, qz, vx, vz)
        np.testing.assert_allclose(got, want, rtol=1e-10)

    def test_solve(self):
        rng = np.random.default_rng(0)
        A = random_matrix(rng, 12, 40)
        b = rng.normal(size=40)
        X = np.linalg.inv(0.3 * np.eye(40) + 2.0 * A.T @ A)
        np.testing.assert_allclose(SpectralOperator(A).solve(b, 0.3, 2.0), X @ b, rtol=1e-10)

    def test_row_orthogonal_formula(self):
        ds, _ = make_synthetic(SynthSpec(N=100, alpha=0.2, rho=0.1, seed=1))
        qx, qz = 0.8, 2.5
        chi_x, chi_z, _, _ = SpectralOperator(ds.A).traces(qx, qz, 0.0, 0.0)
        assert chi_x == pytest.approx(0.2 / (qx + qz) + 0.8 / qx, abs=1e-10)
        assert chi_z == pytest.approx(1 / (qx + qz), abs=1e-10)

    def test_nonpositive_denominator(self):
        with pytest.raises(NumericalError):
            SpectralOperator(np.eye(2)).traces(-1.0, 0.5, 0.0, 0.0)


class TestMacroscopicObservables:
    def _mom(self, x, z, sus=0.5, var=0.1):
        return Moments(x, sus, var, z, sus, var)

    def test_perfect_estimate(self):
        rng = np.random.default_rng(2)
        x0 = rng.normal(size=50)
        z0 = rng.normal(size=20)
        o = macroscopic_observables(self._mom(x0, z0), self._mom(x0, z0), x0, z0)
        assert o.m1x == pytest.approx(o.T_x) and o.q1x == pytest.approx(o.T_x)
        assert o.m1z == pytest.approx(o.T_z) and o.q2z == pytest.approx(o.T_z)

    def test_zero_estimate(self):
        x0, z0 = np.ones(5), np.ones(3)
        o = macroscopic_observables(self._mom(np.zeros(5), np.zeros(3)), self._mom(x0, z0), x0, z0)
        assert o.m1x == 0 and o.q1x == 0 and o.m1z == 0

    def test_definitions(self):
        rng = np.random.default_rng(3)
        x0, xh = rng.normal(size=40), rng.normal(size=40)
        z0, zh = rng.normal(size=10), rng.normal(size=10)
        sus = rng.uniform(size=40)
        fm = Moments(xh, sus, rng.uniform(size=40), zh, 0.3, 0.2)
        o = macroscopic_observables(fm, fm, x0, z0)
        assert o.q1x == pytest.approx(np.linalg.norm(xh) ** 2 / 40, rel=1e-14)
        assert o.m1x == pytest.approx(x0 @ xh / 40, rel=1e-14)
        assert o.chi1x == pytest.approx(sus.sum() / 40, rel=1e-14)
        assert o.q1z == pytest.approx(zh @ zh / 10, rel=1e-14)
        assert set(o.as_dict()) == set(MacroObservables.NAMES) | {"T_x", "T_z"}

    def test_shape_mismatch(self):
        m = self._mom(np.zeros(5), np.zeros(3))
        with pytest.raises(DomainError):
            macroscopic_observables(m, m, np.zeros(4), np.zeros(3))


class TestRunSaRvamp:
    @pytest.mark.parametrize("lik,y", [(Likelihood.logistic(), 1.0), (Likelihood.gaussian(1.0), 0.7)])
    def test_scalar_problem_matches_rvamp(self, lik, y):
        ds = Dataset(np.array([[1.3]]), [y])
        cfg = RvampConfig(gamma0=0.2, likelihood=lik, eps_tol=1e-14, t_max=60)
        a = run_rvamp(ds, cfg)
        b = run_sa_rvamp(ds, cfg)
        assert a.iterations == b.iterations
        np.testing.assert_allclose(b.h1x, a.h1x, rtol=1e-12, atol=1e-14)
        assert b.qhat1x == pytest.approx(a.qhat1x[0], rel=1e-12)
        assert b.vhat1x == pytest.approx(a.vhat1x[0], rel=1e-12)
        np.testing.assert_allclose(b.pi, a.pi, atol=1e-12)
        np.testing.assert_allclose(b.criterion, a.criterion, rtol=1e-9, atol=1e-20)

    def test_tracks_rvamp_on_row_orthogonal(self):
        ds, _ = make_synthetic(SynthSpec(N=1000, alpha=0.2, rho=0.01, seed=4))
        cfg = RvampConfig(gamma0=0.3)
        a, b = run_rvamp(ds, cfg), run_sa_rvamp(ds, cfg)
        assert a.converged and b.converged
        assert np.median(np.abs(a.pi - b.pi)) <= 0.02

    @pytest.mark.slow
    def test_tracks_rvamp_at_n4000(self):
        ds, _ = make_synthetic(SynthSpec(N=4000, alpha=0.2, rho=0.01, seed=5))
        cfg = RvampConfig(gamma0=0.3)
        a, b = run_rvamp(ds, cfg), run_sa_rvamp(ds, cfg)
        assert a.converged and b.converged
        assert np.median(np.abs(a.pi - b.pi)) <= 0.02

    def test_observables_recorded(self):
        ds, x0 = make_synthetic(SynthSpec(N=300, alpha=0.3, rho=0.05, seed=6))
        res = run_sa_rvamp(ds, RvampConfig(gamma0=0.3, t_max=5, eps_tol=0.0), x0=x0)
        assert len(res.observables) == 5 == len(res.params)
        for o in res.observables:
            assert o.q1x >= 0 and o.v1x >= 0 and o.chi1x >= 0
            assert o.T_x == pytest.approx(np.mean(x0**2))

    def test_deterministic(self):
        ds, x0 = make_synthetic(SynthSpec(N=200, alpha=0.3, rho=0.05, seed=7))
        a = run_sa_rvamp(ds, RvampConfig(gamma0=0.3), x0=x0)
        b = run_sa_rvamp(ds, RvampConfig(gamma0=0.3), x0=x0)
        assert np.array_equal(a.h1x, b.h1x) and np.array_equal(a.criterion, b.criterion)

    def test_state_check(self):
        s = SaMessageState.default(2, 1)
        s.check()
        s.qhat2x = 0.0
        with pytest.raises(NumericalError):
            s.check()
