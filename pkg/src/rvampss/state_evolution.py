"""State evolution of self-averaging rVAMP for rotation-invariant designs.

Scalar recursion over conjugate order parameters.  A coordinate's field is
modelled as ``h = mhat * x0 + sqrt(chihat) * xi`` on each side; the
factorized part averages the denoisers over that field, the teacher and the
resampling laws, and the Gaussian part is a set of expectations over the
limiting spectrum of ``A^T A``.
"""

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .exceptions import DomainError, NumericalError
from .glm_model import PenaltyLaw, Quadrature, _soft_moments, avg_z_moments
from .rvamp import RvampConfig

# Panel rule for the x-side field integral.
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)
_FIELD_HALF_WIDTH = 12.0


@dataclass(frozen=True, eq=False)
class SpectralMeasure:
    """Discrete measure on the eigenvalues of ``A^T A``."""

    lambdas: np.ndarray
    masses: np.ndarray
    kind: str = "atoms"

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float).ravel()
        mass = np.asarray(self.masses, dtype=float).ravel()
        if lam.shape != mass.shape or lam.size == 0:
            raise DomainError("spectral measure needs matching, non-empty atoms and masses")
        if np.any(lam < 0) or np.any(mass < 0):
            raise DomainError("eigenvalues and masses must be non-negative")
        if abs(mass.sum() - 1.0) > 1e-12:
            raise DomainError(f"masses sum to {mass.sum()!r}, expected 1")
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "masses", mass)

    @classmethod
    def atoms(cls, pairs):
        """From ``[(lambda, mass), ...]``."""
        lam, mass = zip(*pairs)
        return cls(np.array(lam), np.array(mass), "atoms")

    @classmethod
    def empirical(cls, samples):
        samples = np.asarray(samples, dtype=float).ravel()
        return cls(np.clip(samples, 0.0, None), np.full(samples.size, 1.0 / samples.size), "empirical")

    @classmethod
    def from_matrix(cls, A):
        """Empirical measure of all N eigenvalues of ``A^T A`` (zeros included)."""
        A = np.asarray(A, dtype=float)
        s = np.linalg.svd(A, compute_uv=False)
        lam = np.concatenate([s**2, np.zeros(A.shape[1] - s.size)])
        return cls.empirical(lam)

    def expect(self, f):
        return float(np.dot(self.masses, f(self.lambdas)))

    def mean(self):
        return float(np.dot(self.masses, self.lambdas))


def row_orthogonal_spectrum(alpha):
    """``alpha * delta(lambda - 1) + (1 - alpha) * delta(lambda)``."""
    if not 0.0 < alpha <= 1.0:
        raise DomainError(f"row-orthogonal spectrum needs 0 < alpha <= 1, got {alpha!r}")
    if alpha == 1.0:
        return SpectralMeasure.atoms([(1.0, 1.0)])
    return SpectralMeasure.atoms([(1.0, alpha), (0.0, 1.0 - alpha)])


@dataclass(frozen=True)
class TeacherModel:
    """Bernoulli-Gaussian signal prior and the channel generating ``y``.

    Nonzero signal entries have variance ``slab_variance`` (default ``1/rho``,
    so that ``T_x = 1``).
    """

    rho: float
    alpha: float
    channel: str = "logistic"
    noise_variance: float = 1.0
    slab_variance: float | None = None

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise DomainError("rho must lie in (0, 1]")
        if not self.alpha > 0:
            raise DomainError("alpha must be positive")
        if self.channel not in ("logistic", "gaussian"):
            raise DomainError(f"unknown channel {self.channel!r}")
        if self.slab_variance is None:
            object.__setattr__(self, "slab_variance", 1.0 / self.rho)

    @property
    def T_x(self):
        return self.rho * self.slab_variance

    def T_z(self, spectrum):
        return spectrum.mean() * self.T_x / self.alpha

    def That_z(self, spectrum):
        return self.alpha / (spectrum.mean() * self.T_x)


_HAT_FIELDS = ("mhat", "chihat", "Qhat", "vhat")


@dataclass
class SeState:
    """Conjugate order parameters of both approximations."""

    mhat1x: float = 0.0
    chihat1x: float = 0.0
    Qhat1x: float = 1.0
    vhat1x: float = 1.0
    mhat1z: float = 0.0
    chihat1z: float = 0.0
    Qhat1z: float = 1.0
    vhat1z: float = 1.0
    mhat2x: float = 0.0
    chihat2x: float = 0.0
    Qhat2x: float = 1.0
    vhat2x: float = 0.0
    mhat2z: float = 0.0
    chihat2z: float = 0.0
    Qhat2z: float = 1.0
    vhat2z: float = 0.0

    def side(self, k, s):
        return tuple(getattr(self, f"{f}{k}{s}") for f in _HAT_FIELDS)

    def as_dict(self):
        return dataclasses.asdict(self)


class SeMoments(NamedTuple):
    """``(q, chi, v, m)`` on the x-side and the z-side of one approximation."""

    qx: float
    chix: float
    vx: float
    mx: float
    qz: float
    chiz: float
    vz: float
    mz: float


# ---------------------------------------------------------------------------
# Factorized part
# ---------------------------------------------------------------------------


def _field_panels(sigma, gammas, vhat):
    """Breakpoints (in standard units) where the x-side mean has kinks or bends."""
    pts = [-_FIELD_HALF_WIDTH, _FIELD_HALF_WIDTH]
    w = np.sqrt(vhat)
    for g in gammas:
        for c in (g, g - 4 * w, g + 4 * w):
            for sgn in (-1.0, 1.0):
                t = sgn * c / sigma
                if -_FIELD_HALF_WIDTH < t < _FIELD_HALF_WIDTH:
                    pts.append(t)
    return np.unique(pts)


def _expect_normal_panels(f, sigma, gammas, vhat):
    """``E[f(sigma * t)]`` for standard normal ``t`` by panelled Gauss-Legendre."""
    br = _field_panels(sigma, gammas, vhat)
    a, b = br[:-1, None], br[1:, None]
    t = 0.5 * (b - a) * _GL_NODES[None, :] + 0.5 * (a + b)
    w = 0.5 * (b - a) * _GL_WEIGHTS[None, :] * np.exp(-0.5 * t * t) / np.sqrt(2 * np.pi)
    return float(np.sum(w * f(sigma * t)))


def se_factorized_x(state, teacher, law):
    """``(q1x, chi1x, v1x, m1x)`` from the side-1 x parameters.

    The signal prior is split into its point mass and Gaussian slab; within
    each component the field is Gaussian, so the susceptibility and second
    moment are closed forms and only ``q1x`` needs a 1-D integral.
    """
    mhat, chihat, Q, vhat = state.side(1, "x")
    if not Q > 0:
        raise DomainError("Qhat1x must be positive")
    if chihat < 0 or vhat < 0:
        raise DomainError("chihat1x and vhat1x must be non-negative")
    gammas, probs = law.atoms()
    s0 = teacher.slab_variance
    comps = [(1.0 - teacher.rho, chihat), (teacher.rho, mhat * mhat * s0 + chihat)]

    def mean_field(h):
        out = np.zeros_like(h)
        for g, p in zip(gammas, probs):
            out += p * _soft_moments(h, vhat, g)[1]
        return out / Q

    q = chi = sec = 0.0
    chi_slab = 0.0
    for weight, var_h in comps:
        if weight == 0:
            continue
        tot = var_h + vhat
        pr = m2 = 0.0
        for g, p in zip(gammas, probs):
            a = _soft_moments(0.0, tot, g)
            pr += p * float(a[0])
            m2 += p * float(a[2])
        if var_h > 0:
            qq = _expect_normal_panels(lambda h: mean_field(h) ** 2, np.sqrt(var_h), gammas, vhat)
        else:
            qq = float(mean_field(np.zeros(1))[0] ** 2)
        chi_c = pr / Q
        q += weight * qq
        chi += weight * chi_c
        sec += weight * m2 / Q**2
        chi_slab = chi_c
    # Stein: E[x0 G(h)] = Cov(x0, h) E[G'(h)] on the slab
    m = teacher.rho * mhat * s0 * chi_slab
    return q, chi, max(sec - q, 0.0), m


def se_factorized_z(state, teacher, spectrum, occupation, quad, lik):
    """``(q1z, chi1z, v1z, m1z)`` from the side-1 z parameters.

    The field ``h = mhat z0 + sqrt(chihat) xi`` is integrated directly;
    the teacher enters through ``p(y | h)`` and ``E[z0 | h, y]``.
    """
    mhat, chihat, Q, vhat = state.side(1, "z")
    if not Q > 0:
        raise DomainError("Qhat1z must be positive")
    if chihat < 0 or vhat < 0:
        raise DomainError("chihat1z and vhat1z must be non-negative")
    Tz = teacher.T_z(spectrum)
    t, w = quad.nodes, quad.weights
    var_h = mhat * mhat * Tz + chihat
    if var_h > 0:
        h = np.sqrt(var_h) * t
        wh = w
        mu = mhat * Tz / var_h
        tau2 = max(Tz - mhat * mhat * Tz * Tz / var_h, 0.0)
    else:
        h = np.zeros(1)
        wh = np.ones(1)
        mu, tau2 = 0.0, Tz

    if teacher.channel == "logistic":
        z0 = mu * h[:, None] + np.sqrt(tau2) * t[None, :]
        ys = np.array([1.0, -1.0])
        p_y = np.stack([(expit(y * z0)) @ w for y in ys], axis=1)
        r_y = np.stack([(z0 * expit(y * z0)) @ w for y in ys], axis=1)
        H = np.repeat(h[:, None], 2, axis=1)
        Y = np.broadcast_to(ys, H.shape)
        wt = wh[:, None] * p_y
        wm = wh[:, None] * r_y
    else:
        s2y = tau2 + teacher.noise_variance
        Y = mu * h[:, None] + np.sqrt(s2y) * t[None, :]
        H = np.broadcast_to(h[:, None], Y.shape)
        ez0 = mu * H + (tau2 / s2y) * (Y - mu * H)
        wt = wh[:, None] * w[None, :]
        wm = wt * ez0

    G, S, V = avg_z_moments(H.ravel(), Q, vhat, Y.ravel(), occupation, quad, lik)
    wt, wm = wt.ravel(), wm.ravel()
    q = float(wt @ (G * G))
    return q, float(wt @ S), float(wt @ V), float(wm @ G)


# ---------------------------------------------------------------------------
# Gaussian part
# ---------------------------------------------------------------------------


def se_gaussian(state, spectrum, T_x, alpha):
    """``SeMoments`` of the Gaussian approximation from side-2 parameters."""
    mx, cx, Qx, vx = state.side(2, "x")
    mz, cz, Qz, vz = state.side(2, "z")
    lam = spectrum.lambdas
    den = Qx + lam * Qz
    support = spectrum.masses > 0
    if np.any(~(den[support] > 0)):
        raise NumericalError("Qhat2x + lambda Qhat2z vanishes on the spectrum support")
    den = np.where(support, den, 1.0)
    mm = mx + lam * mz
    cc = cx + lam * cz
    vv = vx + lam * vz
    E = spectrum.masses.__matmul__
    return SeMoments(
        qx=T_x * E(mm**2 / den**2) + E(cc / den**2),
        chix=E(1.0 / den),
        vx=E(vv / den**2),
        mx=T_x * E(mm / den),
        qz=(T_x * E(lam * mm**2 / den**2) + E(lam * cc / den**2)) / alpha,
        chiz=E(lam / den) / alpha,
        vz=E(lam * vv / den**2) / alpha,
        mz=T_x * E(lam * mm / den) / alpha,
    )


# ---------------------------------------------------------------------------
# Moment matching
# ---------------------------------------------------------------------------


def _se_match(q, chi, v, m, T, other, q_bounds, v_bounds, side):
    m_o, c_o, Q_o, v_o = other
    if not (np.isfinite(q) and np.isfinite(v) and np.isfinite(m)):
        raise NumericalError(f"non-finite {side} moments")
    if not (np.isfinite(chi) and chi >= 0):
        raise NumericalError(f"invalid {side} susceptibility {chi!r}")
    Q_raw = 1.0 / chi - Q_o if chi > 0 else np.inf
    Q_new = float(np.clip(Q_raw, *q_bounds))
    chi_eff = chi if Q_new == Q_raw else 1.0 / (Q_new + Q_o)
    v_new = float(np.clip(v / chi_eff**2 - v_o, *v_bounds))
    m_new = (m / (T * chi_eff) if T > 0 else 0.0) - m_o
    c_raw = (q - (m * m / T if T > 0 else 0.0)) / chi_eff**2 - c_o
    c_new = float(np.clip(c_raw, *v_bounds))
    return m_new, c_new, Q_new, v_new


def se_moment_match(state, moments, direction, T_x, T_z, config, *, damping=1.0):
    """Apply the ``"1to2"`` or ``"2to1"`` hatted updates.

    ``damping`` mixes new side-1 values with the old ones (``"2to1"`` only).
    """
    if direction == "1to2":
        src, dst = 1, 2
    elif direction == "2to1":
        src, dst = 2, 1
    else:
        raise DomainError(f"direction must be '1to2' or '2to1', got {direction!r}")
    qb, vb = config.q_bounds, config.v_bounds
    new_x = _se_match(moments.qx, moments.chix, moments.vx, moments.mx, T_x,
                      state.side(src, "x"), qb, vb, "x")
    new_z = _se_match(moments.qz, moments.chiz, moments.vz, moments.mz, T_z,
                      state.side(src, "z"), qb, vb, "z")
    upd = {}
    for s, vals in (("x", new_x), ("z", new_z)):
        old = state.side(dst, s)
        for f, new, prev in zip(_HAT_FIELDS, vals, old):
            if dst == 1 and damping != 1.0:
                new = damping * new + (1.0 - damping) * prev
            upd[f"{f}{dst}{s}"] = float(new)
    return dataclasses.replace(state, **upd)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

SE_COLUMNS = ("m1x", "q1x", "chi1x", "v1x", "m1z", "q1z", "chi1z", "v1z",
              "m2x", "q2x", "chi2x", "v2x", "m2z", "q2z", "chi2z", "v2z")


@dataclass
class SeTrajectory:
    states: list = field(default_factory=list)
    moments1: list = field(default_factory=list)
    moments2: list = field(default_factory=list)
    converged: bool = False
    T_x: float = 1.0
    T_z: float = 1.0

    @property
    def iterations(self):
        return len(self.moments1)

    def rows(self):
        """One dict per iteration with the 16 macroscopic quantities."""
        out = []
        for t, (a, b) in enumerate(zip(self.moments1, self.moments2), start=1):
            out.append({
                "iteration": t,
                "m1x": a.mx, "q1x": a.qx, "chi1x": a.chix, "v1x": a.vx,
                "m1z": a.mz, "q1z": a.qz, "chi1z": a.chiz, "v1z": a.vz,
                "m2x": b.mx, "q2x": b.qx, "chi2x": b.chix, "v2x": b.vx,
                "m2z": b.mz, "q2z": b.qz, "chi2z": b.chiz, "v2z": b.vz,
            })
        return out

    def series(self, name):
        return np.array([r[name] for r in self.rows()])


def run_se(teacher, spectrum, config: RvampConfig, *, init=None, eps_tol=None, t_max=None):
    """Iterate the state evolution with the laws and policies of ``config``.

    Stops when no side-1 hatted field moves by more than ``eps_tol``
    (default ``config.eps_tol``) or after ``t_max`` iterations.
    """
    eps = config.eps_tol if eps_tol is None else eps_tol
    t_max = config.t_max if t_max is None else t_max
    law = PenaltyLaw(config.gamma0, config.penalty_variant)
    quad = Quadrature.gauss_hermite(config.quad_order)
    T_x = teacher.T_x
    T_z = teacher.T_z(spectrum)
    state = dataclasses.replace(init) if init is not None else SeState()
    traj = SeTrajectory(T_x=T_x, T_z=T_z)
    for t in range(1, t_max + 1):
        traj.states.append(state)
        try:
            m1 = SeMoments(*se_factorized_x(state, teacher, law),
                           *se_factorized_z(state, teacher, spectrum, config.occupation, quad,
                                            config.likelihood))
            state = se_moment_match(state, m1, "1to2", T_x, T_z, config)
            m2 = se_gaussian(state, spectrum, T_x, teacher.alpha)
            new = se_moment_match(state, m2, "2to1", T_x, T_z, config, damping=config.damping)
        except NumericalError as err:
            raise NumericalError(err.base_message, iteration=t) from err
        traj.moments1.append(m1)
        traj.moments2.append(m2)
        delta = max(abs(getattr(new, f"{f}1{s}") - getattr(state, f"{f}1{s}"))
                    for f in _HAT_FIELDS for s in "xz")
        state = new
        if delta < eps:
            traj.converged = True
            break
    traj.states.append(state)
    return traj
