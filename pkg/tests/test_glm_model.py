import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, optimize, stats

from rvampss.exceptions import DomainError, NumericalError
from rvampss.glm_model import (
    Likelihood,
    OccupationLaw,
    PenaltyLaw,
    Quadrature,
    avg_x_moments,
    avg_z_moments,
    g1x,
    g1x_prime,
    g1z,
    g1z_prime,
    selection_probability,
    soft_threshold,
    solve_g1z,
)

LOGIT = Likelihood.logistic()
GAUSS = Likelihood.gaussian(1.0)


def brentq_g1z(u, q, c, y, lik):
    """Independent root-finder for the z-side stationarity condition."""
    if c == 0:
        return u / q
    f = lambda z: q * z - u - c * float(lik.dlog_prob(y, z))
    lo, hi = (u - 50 * (c + 1)) / q - 1, (u + 50 * (c + 1)) / q + 1
    return optimize.brentq(f, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=500)


def quad_normal(f, breaks=()):
    """E[f(eta)] for standard normal eta with adaptive quadrature split at kinks."""
    pts = sorted(b for b in breaks if -40 < b < 40)
    edges = [-40.0] + pts + [40.0]
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        total += integrate.quad(lambda e: f(e) * stats.norm.pdf(e), a, b, epsabs=1e-14, epsrel=1e-13, limit=200)[0]
    return total


class TestLikelihood:
    def test_logistic_normalised(self):
        z = np.linspace(-30, 30, 101)
        p = np.exp(LOGIT.log_prob(1, z)) + np.exp(LOGIT.log_prob(-1, z))
        np.testing.assert_allclose(p, 1.0, rtol=1e-14)

    def test_gaussian_normalised(self):
        lik = Likelihood.gaussian(2.5)
        val = integrate.quad(lambda y: np.exp(lik.log_prob(y, 0.7)), -40, 40)[0]
        assert val == pytest.approx(1.0, abs=1e-10)

    @given(st.floats(-20, 20), st.sampled_from([-1.0, 1.0]))
    def test_logistic_derivatives_match_finite_differences(self, z, y):
        h = 1e-5
        fd1 = (LOGIT.log_prob(y, z + h) - LOGIT.log_prob(y, z - h)) / (2 * h)
        fd2 = (LOGIT.dlog_prob(y, z + h) - LOGIT.dlog_prob(y, z - h)) / (2 * h)
        assert float(LOGIT.dlog_prob(y, z)) == pytest.approx(float(fd1), abs=1e-8)
        assert float(LOGIT.d2log_prob(y, z)) == pytest.approx(float(fd2), abs=1e-8)
        assert LOGIT.d2log_prob(y, z) <= 0

    def test_invalid(self):
        with pytest.raises(DomainError):
            Likelihood("poisson")
        with pytest.raises(DomainError):
            Likelihood.gaussian(0.0)
        with pytest.raises(DomainError):
            LOGIT.check_responses([1.0, 0.5])
        GAUSS.check_responses([0.3, -2.0])


class TestLaws:
    def test_two_point_atoms(self):
        g, p = PenaltyLaw(0.7).atoms()
        np.testing.assert_allclose(g, [0.7, 1.4])
        assert p.sum() == pytest.approx(1.0, abs=1e-15)

    def test_penalty_sample(self):
        rng = np.random.default_rng(0)
        mask = np.zeros(10000, dtype=bool)
        mask[:3] = True
        gam = PenaltyLaw(0.5, unpenalized=mask).sample(10000, rng)
        assert np.all(gam[:3] == 0)
        assert set(np.unique(gam[3:])) == {0.5, 1.0}
        assert abs(np.mean(gam[3:] == 1.0) - 0.5) < 4 * 0.5 / np.sqrt(10000)

    def test_bad_penalty(self):
        with pytest.raises(DomainError):
            PenaltyLaw(0.0)
        with pytest.raises(DomainError):
            PenaltyLaw(1.0, "uniform")

    def test_poisson_weights(self):
        law = OccupationLaw.poisson()
        assert law.weights.sum() == pytest.approx(1.0, abs=1e-12)
        tail = law.truncated_tail()
        assert tail < 1e-8
        assert tail == pytest.approx(stats.poisson.sf(12, 1.0), rel=1e-6)
        raw = stats.poisson.pmf(np.arange(13), 1.0)
        np.testing.assert_allclose(law.weights, raw / raw.sum(), rtol=1e-12)

    def test_poisson_needs_c_max(self):
        with pytest.raises(DomainError):
            OccupationLaw.poisson(c_max=5)

    def test_fixed(self):
        law = OccupationLaw.fixed(3)
        assert law.values.tolist() == [3] and law.weights.tolist() == [1.0]
        assert law.truncated_tail() == 0.0


class TestQuadrature:
    @pytest.mark.parametrize("order", [15, 33, 64])
    def test_normal_moments(self, order):
        q = Quadrature.gauss_hermite(order)
        assert q.expect(lambda e: np.ones_like(e)) == pytest.approx(1.0, abs=1e-12)
        assert q.expect(lambda e: e**2) == pytest.approx(1.0, abs=1e-10)
        assert q.expect(lambda e: e**4) == pytest.approx(3.0, abs=1e-9)


class TestSoftThreshold:
    @pytest.mark.parametrize("u,g,out", [(2.0, 1.0, 1.0), (0.5, 1.0, 0.0), (-3.0, 1.0, -2.0)])
    def test_examples(self, u, g, out):
        assert soft_threshold(u, g) == out

    @pytest.mark.parametrize(
        "args,out", [((2, 2, 0, 1, 0.3), 0.5), ((0, 1, 0, 1, -1.0), 0.0), ((1, 1, 4, 1, 1.0), 2.0)]
    )
    def test_g1x_examples(self, args, out):
        assert g1x(*args) == pytest.approx(out)

    def test_g1x_rejects_bad_qhat(self):
        with pytest.raises(DomainError):
            g1x(1.0, 0.0, 1.0, 1.0, 0.0)

    @given(st.floats(-5, 5), st.floats(0.1, 5), st.floats(0, 4), st.floats(0, 3), st.floats(-4, 4))
    def test_g1x_odd_symmetry(self, h, q, v, g, eta):
        assert g1x(-h, q, v, g, -eta) == pytest.approx(-g1x(h, q, v, g, eta), abs=1e-12)


class TestAvgXMoments:
    def test_dead_zone(self):
        m, s, v = avg_x_moments(0.0, 1.0, 0.0, PenaltyLaw(1.0, "deterministic"))
        assert (m, s, v) == (0.0, 0.0, 0.0)

    def test_active_branch_small_vhat(self):
        m, s, v = avg_x_moments(5.0, 1.0, 1e-14, PenaltyLaw(1.0, "deterministic"))
        assert m == pytest.approx(4.0, abs=1e-6)
        assert s == pytest.approx(1.0, abs=1e-12)
        assert v == pytest.approx(0.0, abs=1e-10)

    def test_unit_noise_example(self):
        # oracle: adaptive quadrature split at the kinks, then frozen
        law = PenaltyLaw(1.0, "deterministic")
        m, s, v = avg_x_moments(0.0, 1.0, 1.0, law)
        sus_oracle = 2 * stats.norm.sf(1.0)
        var_oracle = quad_normal(lambda e: soft_threshold(e, 1.0) ** 2, (-1.0, 1.0))
        assert m == pytest.approx(0.0, abs=1e-15)
        assert s == pytest.approx(sus_oracle, abs=1e-14)
        assert s == pytest.approx(0.31731, abs=5e-6)
        assert v == pytest.approx(var_oracle, abs=1e-12)
        assert v == pytest.approx(0.15067957, abs=1e-8)

    def test_unit_noise_variance_monte_carlo(self):
        rng = np.random.default_rng(1)
        eta = rng.standard_normal(4_000_000)
        sq = soft_threshold(eta, 1.0) ** 2
        v = avg_x_moments(0.0, 1.0, 1.0, PenaltyLaw(1.0, "deterministic"))[2]
        assert abs(sq.mean() - v) < 3 * sq.std() / np.sqrt(sq.size)

    def test_matches_adaptive_quadrature(self):
        rng = np.random.default_rng(2)
        for _ in range(40):
            h, q, v, g = rng.normal(0, 2), rng.uniform(0.2, 3), rng.uniform(0.01, 4), rng.uniform(0.05, 3)
            law = PenaltyLaw(g)
            m, s, var = avg_x_moments(h, q, v, law)
            gs, ps = law.atoms()
            sd = np.sqrt(v)
            br = [b for gg in gs for b in ((gg - h) / sd, (-gg - h) / sd)]
            mq = sum(p * quad_normal(lambda e: float(g1x(h, q, v, gg, e)), br) for gg, p in zip(gs, ps))
            sq = sum(p * quad_normal(lambda e: float(g1x_prime(h, q, v, gg, e)), br) for gg, p in zip(gs, ps))
            m2 = sum(p * quad_normal(lambda e: float(g1x(h, q, v, gg, e)) ** 2, br) for gg, p in zip(gs, ps))
            assert m == pytest.approx(mq, abs=1e-10)
            assert s == pytest.approx(sq, abs=1e-10)
            assert var == pytest.approx(m2 - mq**2, abs=1e-10)

    @given(st.floats(-4, 4), st.floats(0.2, 3), st.floats(0.05, 3), st.floats(0.05, 2))
    @settings(max_examples=60)
    def test_susceptibility_is_derivative_of_mean(self, h, q, v, g):
        law = PenaltyLaw(g)
        d = 1e-6
        fd = (avg_x_moments(h + d, q, v, law)[0] - avg_x_moments(h - d, q, v, law)[0]) / (2 * d)
        assert avg_x_moments(h, q, v, law)[1] == pytest.approx(fd, abs=1e-6)

    def test_unpenalized_is_linear(self):
        law = PenaltyLaw(1.0, unpenalized=np.array([True, False]))
        m, s, v = avg_x_moments(np.array([2.0, 2.0]), np.array([4.0, 4.0]), np.array([0.0, 0.0]), law)
        assert (m[0], s[0], v[0]) == (0.5, 0.25, 0.0)
        assert m[1] == pytest.approx(0.5 * (2.0 - 1.0) / 4.0)

    def test_nonnegative_outputs(self):
        rng = np.random.default_rng(3)
        h = rng.normal(0, 3, 5000)
        m, s, v = avg_x_moments(h, rng.uniform(0.1, 3, 5000), rng.uniform(0, 3, 5000), PenaltyLaw(0.8))
        assert np.all(s >= 0) and np.all(v >= 0)

    def test_rejects_bad_qhat(self):
        with pytest.raises(DomainError):
            avg_x_moments(0.0, -1.0, 1.0, PenaltyLaw(1.0))


class TestSelectionProbability:
    @pytest.mark.parametrize("h,v,out", [(0.0, 0.0, 0.0), (5.0, 0.0, 1.0)])
    def test_trivial(self, h, v, out):
        assert selection_probability(h, v, PenaltyLaw(1.0)) == out

    def test_unit_noise_example(self):
        oracle = 0.5 * (2 * stats.norm.sf(1.0) + 2 * stats.norm.sf(2.0))
        val = selection_probability(0.0, 1.0, PenaltyLaw(1.0))
        assert val == pytest.approx(oracle, abs=1e-14)
        assert val == pytest.approx(0.18141, abs=5e-6)

    def test_monte_carlo(self):
        rng = np.random.default_rng(4)
        for h, v, g in [(0.3, 0.8, 0.5), (-1.2, 0.2, 1.0), (2.0, 1.5, 1.5)]:
            n = 1_000_000
            eta = rng.standard_normal(n)
            gam = PenaltyLaw(g).sample(n, rng)
            hit = np.abs(h + np.sqrt(v) * eta) > gam
            p = selection_probability(h, v, PenaltyLaw(g))
            assert abs(hit.mean() - p) < 3 * np.sqrt(p * (1 - p) / n)

    @given(st.floats(-5, 5), st.floats(0, 4), st.floats(0.01, 3), st.floats(0.01, 3))
    def test_in_unit_interval_and_monotone_in_gamma0(self, h, v, g1, g2):
        lo, hi = min(g1, g2), max(g1, g2)
        p_lo = selection_probability(h, v, PenaltyLaw(lo))
        p_hi = selection_probability(h, v, PenaltyLaw(hi))
        assert 0.0 <= p_hi <= p_lo + 1e-15 <= 1.0 + 1e-15

    def test_unpenalized(self):
        law = PenaltyLaw(1.0, unpenalized=np.array([True, False]))
        p = selection_probability(np.zeros(2), np.zeros(2), law)
        assert p.tolist() == [1.0, 0.0]


class TestG1z:
    def test_quadratic_only(self):
        assert g1z(3.0, 2.0, 0.0, 0, 0.0, 1.0, LOGIT) == 1.5

    def test_logistic_unit_example(self):
        oracle = optimize.brentq(lambda z: z - 1.0 / (1.0 + np.exp(z)), 0.0, 1.0, xtol=1e-15)
        val = g1z(0.0, 1.0, 0.0, 1, 0.0, 1.0, LOGIT)
        assert val == pytest.approx(oracle, abs=1e-12)
        assert val == pytest.approx(0.4010581, abs=1e-7)

    def test_gaussian_example(self):
        assert g1z(1.0, 1.0, 0.0, 1, 0.0, 2.0, GAUSS) == pytest.approx(1.5)

    def test_matches_root_finder(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            u, q, c, y = rng.normal(0, 5), rng.uniform(0.05, 5), rng.integers(0, 13), rng.choice([-1.0, 1.0])
            assert solve_g1z(u, q, c, y, LOGIT) == pytest.approx(brentq_g1z(u, q, c, y, LOGIT), abs=1e-10)
            yg = rng.normal(0, 2)
            assert solve_g1z(u, q, c, yg, GAUSS) == pytest.approx(brentq_g1z(u, q, c, yg, GAUSS), abs=1e-10)

    def test_stationarity_residual_random_draws(self):
        rng = np.random.default_rng(6)
        n = 10_000
        h, q, v = rng.normal(0, 5, n), rng.uniform(0.01, 10, n), rng.uniform(0, 5, n)
        c, eta, y = rng.integers(0, 13, n), rng.standard_normal(n), rng.choice([-1.0, 1.0], n)
        z = g1z(h, q, v, c, eta, y, LOGIT)
        u = h + np.sqrt(v) * eta
        res = np.abs(q * z - u - c * LOGIT.dlog_prob(y, z))
        assert res.max() < 1e-10

    def test_stationarity_extreme_scales(self):
        u = np.linspace(-200, 200, 801)[:, None, None]
        c = np.arange(13.0)[None, :, None]
        q = np.array([1e-9, 1e-3, 1.0, 1e3, 1e9])[None, None, :]
        for y in (1.0, -1.0):
            z = solve_g1z(u, q, c, y, LOGIT)
            res = np.abs(q * z - u - c * LOGIT.dlog_prob(y, z))
            assert np.all(np.isfinite(z))
            assert np.all(res < 1e-10 * (1 + np.abs(u) + c))

    def test_failure_raises(self, monkeypatch):
        import rvampss.glm_model as gm

        monkeypatch.setattr(gm, "G1Z_MAX_ITER", 1)
        with pytest.raises(NumericalError):
            gm.solve_g1z(np.array([50.0]), 1.0, 12.0, -1.0, LOGIT)

    @given(st.floats(-5, 5), st.floats(0.1, 5), st.floats(0, 3), st.integers(0, 12), st.floats(-3, 3),
           st.sampled_from([-1.0, 1.0]))
    def test_logistic_odd_symmetry(self, h, q, v, c, eta, y):
        a = g1z(h, q, v, c, eta, y, LOGIT)
        b = g1z(-h, q, v, c, -eta, -y, LOGIT)
        assert b == pytest.approx(-a, abs=1e-11)

    def test_rejects_negative_c(self):
        with pytest.raises(DomainError):
            g1z(0.0, 1.0, 0.0, -1, 0.0, 1.0, LOGIT)


class TestG1zPrime:
    def test_no_curvature(self):
        assert g1z_prime(0.3, 2.0, 1.0, 0, 0.5, 1.0, LOGIT) == 0.5

    def test_gaussian_curvature(self):
        assert g1z_prime(0.3, 1.0, 0.0, 1, 0.0, 0.7, GAUSS) == pytest.approx(0.5)

    def test_logistic_unit_example(self):
        d = 1e-6
        fd = (g1z(d, 1.0, 0.0, 1, 0.0, 1.0, LOGIT) - g1z(-d, 1.0, 0.0, 1, 0.0, 1.0, LOGIT)) / (2 * d)
        z = g1z(0.0, 1.0, 0.0, 1, 0.0, 1.0, LOGIT)
        closed = 1.0 / (1.0 + 1.0 / (4 * np.cosh(z / 2) ** 2))
        val = g1z_prime(0.0, 1.0, 0.0, 1, 0.0, 1.0, LOGIT)
        assert val == pytest.approx(closed, abs=1e-14)
        assert val == pytest.approx(fd, abs=1e-8)
        assert val == pytest.approx(0.806315, abs=1e-6)

    def test_finite_differences_random(self):
        rng = np.random.default_rng(7)
        d = 1e-6
        for _ in range(1000):
            lik = LOGIT if rng.random() < 0.5 else Likelihood.gaussian(rng.uniform(0.2, 3))
            h, q, v, eta = rng.normal(0, 3), rng.uniform(0.1, 5), rng.uniform(0, 3), rng.standard_normal()
            c = rng.choice([0, 1, 2, 5])
            y = rng.choice([-1.0, 1.0]) if lik.kind == "logistic" else rng.normal()
            fd = (g1z(h + d, q, v, c, eta, y, lik) - g1z(h - d, q, v, c, eta, y, lik)) / (2 * d)
            val = g1z_prime(h, q, v, c, eta, y, lik)
            assert val == pytest.approx(fd, abs=1e-5)
            assert 0 < val <= 1 / q + 1e-15


class TestAvgZMoments:
    quad = Quadrature.gauss_hermite(33)

    def test_quadratic_channel(self):
        m, s, v = avg_z_moments(np.array([1.2]), 2.0, 0.0, np.array([1.0]), OccupationLaw.fixed(0), self.quad, LOGIT)
        np.testing.assert_allclose([m[0], s[0], v[0]], [0.6, 0.5, 0.0], atol=1e-15)
        m, s, v = avg_z_moments(np.array([1.2]), 2.0, 1.0, np.array([-1.0]), OccupationLaw.fixed(0), self.quad, LOGIT)
        np.testing.assert_allclose([m[0], s[0], v[0]], [0.6, 0.5, 0.25], atol=1e-12)

    def test_poisson_sum_example(self):
        law = OccupationLaw.poisson()
        m = avg_z_moments(np.zeros(1), 1.0, 0.0, np.ones(1), law, self.quad, LOGIT)[0][0]
        zs = [optimize.brentq(lambda z: z - c / (1 + np.exp(z)), -1, c + 1, xtol=1e-15) if c else 0.0
              for c in range(13)]
        oracle = float(np.dot(law.weights, zs))
        assert m == pytest.approx(oracle, abs=1e-12)
        assert m == pytest.approx(0.3459756, abs=1e-6)

    def test_matches_adaptive_quadrature(self):
        rng = np.random.default_rng(8)
        law = OccupationLaw.poisson()
        for _ in range(6):
            h, q, v, y = rng.normal(0, 2), rng.uniform(0.3, 3), rng.uniform(0.1, 3), rng.choice([-1.0, 1.0])
            m, s, var = avg_z_moments(np.array([h]), q, v, np.array([y]), law, self.quad, LOGIT)
            mean = sec = sus = 0.0
            for c, p in zip(law.values, law.weights):
                if p < 1e-9:
                    continue
                gz = lambda e: brentq_g1z(h + np.sqrt(v) * e, q, c, y, LOGIT)
                mean += p * quad_normal(gz)
                sec += p * quad_normal(lambda e: gz(e) ** 2)
                sus += p * quad_normal(lambda e: float(g1z_prime(h, q, v, c, e, y, LOGIT)))
            assert m[0] == pytest.approx(mean, abs=1e-7)
            assert s[0] == pytest.approx(sus, abs=1e-7)
            assert var[0] == pytest.approx(sec - mean**2, abs=1e-7)

    def test_susceptibility_is_derivative_of_mean(self):
        rng = np.random.default_rng(9)
        law = OccupationLaw.poisson()
        h = rng.normal(0, 2, 20)
        q, v, y = 1.3, 0.7, rng.choice([-1.0, 1.0], 20)
        d = 1e-6
        fd = (avg_z_moments(h + d, q, v, y, law, self.quad, LOGIT)[0]
              - avg_z_moments(h - d, q, v, y, law, self.quad, LOGIT)[0]) / (2 * d)
        np.testing.assert_allclose(avg_z_moments(h, q, v, y, law, self.quad, LOGIT)[1], fd, atol=1e-6)

    def test_variance_nonnegative(self):
        rng = np.random.default_rng(10)
        h = rng.normal(0, 3, 300)
        _, s, v = avg_z_moments(h, rng.uniform(0.1, 2, 300), rng.uniform(0, 2, 300),
                                rng.choice([-1.0, 1.0], 300), OccupationLaw.poisson(), self.quad, LOGIT)
        assert np.all(v >= 0) and np.all(s > 0)
