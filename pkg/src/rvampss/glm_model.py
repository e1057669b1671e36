"""Likelihoods, resampling laws and the scalar denoisers.

Everything here is vectorised over numpy arrays and free of state, so the
same functions drive the per-coordinate iteration, its self-averaging
variant and the state evolution.

Conventions
-----------
A coordinate receives the randomised field ``u = h + sqrt(vhat) * eta`` with
``eta ~ N(0, 1)``.  The x-side denoiser is the soft threshold of ``u``
divided by ``qhat``; the z-side denoiser maximises
``-qhat/2 z^2 + u z + c log p(y|z)``.
"""

from dataclasses import dataclass, field
from math import factorial

import numpy as np
from scipy.special import expit, ndtr

from .exceptions import DomainError, NumericalError

_SQRT_2PI = np.sqrt(2.0 * np.pi)

G1Z_TOL = 1e-12
G1Z_MAX_ITER = 200
G1Z_RESIDUAL_MAX = 1e-10


def _npdf(x):
    # the density underflows to 0 well before |x| = 40; clipping avoids x*x overflow
    x = np.clip(x, -40.0, 40.0)
    return np.exp(-0.5 * x * x) / _SQRT_2PI


# ---------------------------------------------------------------------------
# Laws and likelihoods
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Likelihood:
    """Observation model ``p(y | z)``.

    ``kind`` is ``"logistic"`` (labels in {-1, +1}) or ``"gaussian"`` with
    the given ``noise_variance``.
    """

    kind: str = "logistic"
    noise_variance: float = 1.0

    def __post_init__(self):
        if self.kind not in ("logistic", "gaussian"):
            raise DomainError(f"unknown likelihood kind {self.kind!r}")
        if self.kind == "gaussian" and not self.noise_variance > 0:
            raise DomainError("gaussian noise_variance must be positive")

    @classmethod
    def logistic(cls):
        return cls("logistic")

    @classmethod
    def gaussian(cls, noise_variance=1.0):
        return cls("gaussian", float(noise_variance))

    def log_prob(self, y, z):
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        if self.kind == "logistic":
            return -np.logaddexp(0.0, -y * z)
        s2 = self.noise_variance
        return -((y - z) ** 2) / (2 * s2) - 0.5 * np.log(2 * np.pi * s2)

    def dlog_prob(self, y, z):
        """First derivative of ``log p(y|z)`` in ``z``."""
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        if self.kind == "logistic":
            return y * expit(-y * z)
        return (y - z) / self.noise_variance

    def d2log_prob(self, y, z):
        """Second derivative of ``log p(y|z)`` in ``z`` (always <= 0)."""
        z = np.asarray(z, dtype=float)
        if self.kind == "logistic":
            return -expit(z) * expit(-z)
        return np.full(np.broadcast(np.asarray(y), z).shape, -1.0 / self.noise_variance)

    def check_responses(self, y):
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise DomainError("responses contain NaN or Inf")
        if self.kind == "logistic" and not np.all(np.isin(y, (-1.0, 1.0))):
            bad = int(np.flatnonzero(~np.isin(y, (-1.0, 1.0)))[0])
            raise DomainError(f"logistic responses must be -1 or +1 (row {bad} is {y[bad]!r})")


@dataclass(frozen=True, eq=False)
class PenaltyLaw:
    """Distribution of the per-feature penalty strength.

    ``two_point`` puts mass 1/2 on ``gamma0`` and on ``2*gamma0``;
    ``deterministic`` puts all mass on ``gamma0``.  Coordinates flagged in the
    boolean ``unpenalized`` mask get ``gamma = 0`` deterministically.
    """

    gamma0: float
    variant: str = "two_point"
    unpenalized: np.ndarray | None = None

    def __post_init__(self):
        if not self.gamma0 > 0:
            raise DomainError(f"gamma0 must be positive, got {self.gamma0!r}")
        if self.variant not in ("two_point", "deterministic"):
            raise DomainError(f"unknown penalty variant {self.variant!r}")
        if self.unpenalized is not None:
            object.__setattr__(self, "unpenalized", np.asarray(self.unpenalized, dtype=bool))

    def atoms(self):
        """Return ``(gammas, probabilities)`` for a penalised coordinate."""
        if self.variant == "two_point":
            return np.array([self.gamma0, 2.0 * self.gamma0]), np.array([0.5, 0.5])
        return np.array([self.gamma0]), np.array([1.0])

    def with_gamma0(self, gamma0):
        return PenaltyLaw(gamma0, self.variant, self.unpenalized)

    def sample(self, n, rng):
        """Draw one penalty vector of length ``n``."""
        if self.variant == "two_point":
            gam = self.gamma0 * (1.0 + rng.integers(0, 2, size=n))
        else:
            gam = np.full(n, float(self.gamma0))
        if self.unpenalized is not None:
            gam = np.where(self.unpenalized, 0.0, gam)
        return gam


@dataclass(frozen=True)
class OccupationLaw:
    """Distribution of the per-sample occupation number ``c``.

    ``poisson`` is Poisson(1) truncated at ``c_max`` and renormalised;
    ``fixed`` puts all mass on ``c``.
    """

    variant: str = "poisson"
    c_max: int = 12
    c: int = 1
    values: np.ndarray = field(init=False, repr=False, compare=False)
    weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.variant == "poisson":
            if self.c_max < 8:
                raise DomainError("poisson occupation needs c_max >= 8")
            values = np.arange(self.c_max + 1)
            raw = np.array([np.exp(-1.0) / factorial(k) for k in values])
            weights = raw / raw.sum()
        elif self.variant == "fixed":
            if self.c < 0:
                raise DomainError("fixed occupation must be a non-negative integer")
            values = np.array([int(self.c)])
            weights = np.array([1.0])
        else:
            raise DomainError(f"unknown occupation variant {self.variant!r}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def poisson(cls, c_max=12):
        return cls("poisson", c_max=int(c_max))

    @classmethod
    def fixed(cls, c):
        return cls("fixed", c=int(c))

    def truncated_tail(self):
        """Untruncated Poisson(1) mass beyond ``c_max`` (0 for fixed laws)."""
        if self.variant != "poisson":
            return 0.0
        # summed directly; 1 - sum(head) cancels
        tail = 0.0
        k = self.c_max + 1
        term = np.exp(-1.0) / factorial(k)
        while term > 1e-300:
            tail += term
            k += 1
            term /= k
        return tail


@dataclass(frozen=True, eq=False)
class Quadrature:
    """Gauss-Hermite rule for expectations under the standard normal."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def order(self):
        return len(self.nodes)

    @classmethod
    def gauss_hermite(cls, order=33):
        if order < 1:
            raise DomainError("quadrature order must be >= 1")
        x, w = np.polynomial.hermite_e.hermegauss(order)
        return cls(x, w / w.sum())

    def expect(self, f):
        return float(np.dot(self.weights, f(self.nodes)))


# ---------------------------------------------------------------------------
# x-side denoiser
# ---------------------------------------------------------------------------


def soft_threshold(u, gamma):
    u = np.asarray(u, dtype=float)
    return np.sign(u) * np.maximum(np.abs(u) - gamma, 0.0)


def _check_qhat(qhat):
    qhat = np.asarray(qhat, dtype=float)
    if np.any(~(qhat > 0)):
        raise DomainError("qhat must be strictly positive")
    return qhat


def g1x(h, qhat, vhat, gamma, eta):
    """Soft-threshold denoiser evaluated at one noise realisation."""
    qhat = _check_qhat(qhat)
    u = np.asarray(h, dtype=float) + np.sqrt(vhat) * np.asarray(eta, dtype=float)
    return soft_threshold(u, gamma) / qhat


def g1x_prime(h, qhat, vhat, gamma, eta):
    qhat = _check_qhat(qhat)
    u = np.asarray(h, dtype=float) + np.sqrt(vhat) * np.asarray(eta, dtype=float)
    return (np.abs(u) > gamma) / qhat


def _soft_moments(h, vhat, gamma):
    """Gaussian moments of the soft threshold of ``u ~ N(h, vhat)``.

    Returns ``(E[1(|u|>gamma)], E[soft(u)], E[soft(u)^2])``.  ``vhat == 0``
    entries are evaluated pointwise.
    """
    h, vhat, gamma = np.broadcast_arrays(
        np.asarray(h, float), np.asarray(vhat, float), np.asarray(gamma, float)
    )
    s = np.sqrt(vhat)
    pos = s > 0
    s_safe = np.where(pos, s, 1.0)
    lo = h - gamma
    hi = h + gamma
    a = lo / s_safe
    b = hi / s_safe
    pa, pb = ndtr(a), ndtr(-b)
    fa, fb = _npdf(a), _npdf(b)
    prob = pa + pb
    m1 = lo * pa + s * fa + hi * pb - s * fb
    m2 = (lo * lo + vhat) * pa + lo * s * fa + (hi * hi + vhat) * pb - hi * s * fb

    active = np.abs(h) > gamma
    st = np.where(active, h - gamma * np.sign(h), 0.0)
    prob = np.where(pos, prob, active.astype(float))
    m1 = np.where(pos, m1, st)
    m2 = np.where(pos, m2, st * st)
    return prob, m1, m2


def avg_x_moments(h, qhat, vhat, law):
    """Average the x-side denoiser over the penalty law and the noise.

    Returns ``(mean, susceptibility, variance)`` per coordinate, using exact
    Gaussian integrals of the piecewise-linear soft threshold.
    """
    h = np.asarray(h, dtype=float)
    qhat = _check_qhat(qhat)
    vhat = np.asarray(vhat, dtype=float)
    if np.any(vhat < 0):
        raise DomainError("vhat must be non-negative")
    gammas, probs = law.atoms()
    shape = np.broadcast(h, qhat, vhat).shape
    h_b, q_b, v_b = (np.broadcast_to(a, shape) for a in (h, qhat, vhat))

    prob = np.zeros(shape)
    m1 = np.zeros(shape)
    m2 = np.zeros(shape)
    firsts = []
    for g, p in zip(gammas, probs):
        pr, a1, a2 = _soft_moments(h_b, v_b, g)
        prob += p * pr
        m1 += p * a1
        m2 += p * a2
        firsts.append(a1)

    mean = m1 / q_b
    sus = prob / q_b
    var = np.maximum(m2 / q_b**2 - mean**2, 0.0)
    det = v_b == 0
    if np.any(det):
        # centred form so a single penalty atom gives exactly zero
        centred = sum(p * (a1 / q_b - mean) ** 2 for a1, p in zip(firsts, probs))
        var = np.where(det, centred, var)

    if law.unpenalized is not None and np.any(law.unpenalized):
        mask = np.broadcast_to(law.unpenalized, shape)
        mean = np.where(mask, h_b / q_b, mean)
        sus = np.where(mask, 1.0 / q_b, sus)
        var = np.where(mask, v_b / q_b**2, var)
    return mean, sus, var


def selection_probability(h, vhat, law):
    """Probability that the randomised soft threshold is non-zero."""
    h = np.asarray(h, dtype=float)
    vhat = np.asarray(vhat, dtype=float)
    if np.any(vhat < 0):
        raise DomainError("vhat must be non-negative")
    gammas, probs = law.atoms()
    out = np.zeros(np.broadcast(h, vhat).shape)
    for g, p in zip(gammas, probs):
        out += p * _soft_moments(h, vhat, g)[0]
    if law.unpenalized is not None and np.any(law.unpenalized):
        out = np.where(np.broadcast_to(law.unpenalized, out.shape), 1.0, out)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# z-side denoiser
# ---------------------------------------------------------------------------


def _stationarity(z, u, qhat, c, y, lik):
    return qhat * z - u - c * lik.dlog_prob(y, z)


def solve_g1z(u, qhat, c, y, lik):
    """Maximiser of ``-qhat/2 z^2 + u z + c log p(y|z)``, elementwise.

    Safeguarded Newton on the (strictly increasing) stationarity function,
    started at ``u/qhat`` and falling back to bisection whenever a step
    leaves the current bracket.
    """
    u, qhat, c, y = np.broadcast_arrays(
        np.asarray(u, float), np.asarray(qhat, float), np.asarray(c, float), np.asarray(y, float)
    )
    if lik.kind == "gaussian":
        s2 = lik.noise_variance
        return (u + c * y / s2) / (qhat + c / s2)

    shape = u.shape
    u, qhat, c, y = (a.ravel() for a in (u, qhat, c, y))
    # |d log p / dz| < 1 for the logistic model, which brackets the root
    lo = (u - c) / qhat
    hi = (u + c) / qhat
    z = u / qhat
    dx_old = hi - lo
    act = np.flatnonzero(c != 0)
    for _ in range(G1Z_MAX_ITER):
        if act.size == 0:
            break
        za, ua, qa, ca, ya = z[act], u[act], qhat[act], c[act], y[act]
        sg = expit(-ya * za)
        f = qa * za - ua - ca * ya * sg
        fp = qa + ca * sg * (1.0 - sg)
        conv = np.abs(f) <= G1Z_TOL * (1.0 + np.abs(ua))
        hi_a = np.where(f > 0, za, hi[act])
        lo_a = np.where(f < 0, za, lo[act])
        newton = za - f / fp
        # bisect when Newton leaves the bracket or fails to halve the step
        slow = (newton <= lo_a) | (newton >= hi_a) | (np.abs(2.0 * f) > np.abs(dx_old[act] * fp))
        step = np.where(slow, 0.5 * (lo_a + hi_a), newton)
        stalled = np.abs(step - za) <= G1Z_TOL * (1.0 + np.abs(za))
        move = ~conv
        z[act[move]] = step[move]
        dx_old[act] = step - za
        hi[act], lo[act] = hi_a, lo_a
        act = act[~(conv | stalled)]
    z = z.reshape(shape)
    u, qhat, c, y = (a.reshape(shape) for a in (u, qhat, c, y))
    res = np.abs(_stationarity(z, u, qhat, c, y, lik))
    # residual measured relative to the scale of the terms being balanced
    bad = ~(res < G1Z_RESIDUAL_MAX * (1.0 + np.abs(u) + c))
    if np.any(bad):
        idx = np.unravel_index(int(np.flatnonzero(bad)[0]), bad.shape)
        raise NumericalError(
            f"g1z solver did not converge (residual {res[idx]:.3e})",
            index=tuple(int(i) for i in idx),
        )
    return z


def g1z(h, qhat, vhat, c, eta, y, lik):
    qhat = _check_qhat(qhat)
    if np.any(np.asarray(c) < 0):
        raise DomainError("occupation c must be non-negative")
    u = np.asarray(h, dtype=float) + np.sqrt(vhat) * np.asarray(eta, dtype=float)
    return solve_g1z(u, qhat, c, y, lik)


def _g1z_prime_at(z, qhat, c, y, lik):
    return 1.0 / (qhat - c * lik.d2log_prob(y, z))


def g1z_prime(h, qhat, vhat, c, eta, y, lik):
    """Derivative of :func:`g1z` in ``h`` (implicit-function form)."""
    z = g1z(h, qhat, vhat, c, eta, y, lik)
    return _g1z_prime_at(z, np.asarray(qhat, float), np.asarray(c, float), y, lik)


def avg_z_moments(h, qhat, vhat, y, law, quad, lik):
    """Average the z-side denoiser over the occupation law and the noise.

    The noise integral uses ``quad`` (Gauss-Hermite); rows with ``vhat == 0``
    are evaluated at the single point ``eta = 0``.
    """
    h = np.atleast_1d(np.asarray(h, dtype=float))
    qhat = np.broadcast_to(_check_qhat(qhat), h.shape)
    vhat = np.broadcast_to(np.asarray(vhat, dtype=float), h.shape)
    y = np.broadcast_to(np.asarray(y, dtype=float), h.shape)
    if np.any(vhat < 0):
        raise DomainError("vhat must be non-negative")

    cs = law.values.astype(float)
    pc = law.weights
    eta = quad.nodes
    w = quad.weights
    u = h[:, None, None] + np.sqrt(vhat)[:, None, None] * eta[None, None, :]
    qq = qhat[:, None, None]
    cc = cs[None, :, None]
    yy = y[:, None, None]
    z = solve_g1z(u, qq, cc, yy, lik)
    dz = _g1z_prime_at(z, qq, cc, yy, lik)

    mean_c = z @ w
    sus_c = dz @ w
    sec_c = (z * z) @ w
    det = vhat == 0
    if np.any(det):
        mean_c[det] = z[det, :, 0]
        sus_c[det] = dz[det, :, 0]
        sec_c[det] = z[det, :, 0] ** 2

    mean = mean_c @ pc
    sus = sus_c @ pc
    var = np.maximum(sec_c @ pc - mean**2, 0.0)
    if np.any(det):
        # centred form so a single occupation value gives exactly zero
        var[det] = ((mean_c[det] - mean[det, None]) ** 2) @ pc
    return mean, sus, var
