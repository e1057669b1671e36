"""Self-averaging rVAMP: site-independent precisions and trace susceptibilities.

Precision-like parameters (``qhat``, ``vhat``) are scalars shared by all
coordinates of a side; only the linear fields ``h`` remain vectors.  The
Gaussian part is then a spectral function of ``A^T A`` and is evaluated from
a thin SVD computed once per dataset.
"""

import dataclasses
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from .exceptions import DomainError, NumericalError
from .rvamp import Moments, RvampConfig, _match, convergence_criterion, factorized_step
from .glm_model import selection_probability


@dataclass(eq=False)
class SaMessageState:
    h1x: np.ndarray
    h1z: np.ndarray
    h2x: np.ndarray
    h2z: np.ndarray
    qhat1x: float = 1.0
    vhat1x: float = 1.0
    qhat1z: float = 1.0
    vhat1z: float = 1.0
    qhat2x: float = 1.0
    vhat2x: float = 0.0
    qhat2z: float = 1.0
    vhat2z: float = 0.0

    @classmethod
    def default(cls, N, M, *, qhat=1.0, vhat=1.0):
        return cls(np.zeros(N), np.zeros(M), np.zeros(N), np.zeros(M),
                   qhat1x=qhat, vhat1x=vhat, qhat1z=qhat, vhat1z=vhat,
                   qhat2x=qhat, qhat2z=qhat)

    def copy(self):
        return dataclasses.replace(
            self, h1x=self.h1x.copy(), h1z=self.h1z.copy(), h2x=self.h2x.copy(), h2z=self.h2z.copy()
        )

    def check(self):
        for name in ("qhat1x", "qhat1z", "qhat2x", "qhat2z"):
            if not getattr(self, name) > 0:
                raise NumericalError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("vhat1x", "vhat1z", "vhat2x", "vhat2z"):
            if not getattr(self, name) >= 0:
                raise NumericalError(f"{name} must be non-negative, got {getattr(self, name)!r}")


class SpectralOperator:
    """Thin SVD of ``A`` used for every ``(qx I + qz A^T A)^{-1}`` evaluation."""

    def __init__(self, A):
        A = np.asarray(A, dtype=float)
        self.M, self.N = A.shape
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
        self.U, self.s, self.Vt = U, s, Vt
        lam = s**2
        # eigenvalues of A^T A, zeros included
        self.eigenvalues = np.concatenate([lam, np.zeros(self.N - lam.size)])

    def solve(self, b, qx, qz):
        """``(qx I + qz A^T A)^{-1} b``."""
        coef = 1.0 / (qx + qz * self.s**2) - 1.0 / qx
        return b / qx + self.Vt.T @ (coef * (self.Vt @ b))

    def traces(self, qx, qz, vx, vz):
        """``(chi2x, chi2z, v2x, v2z)`` as normalised traces."""
        lam = self.eigenvalues
        den = qx + qz * lam
        if np.any(~(den > 0)):
            raise NumericalError("qhat2x + lambda qhat2z must be positive on the spectrum")
        chi_x = np.mean(1.0 / den)
        chi_z = np.sum(lam / den) / self.M
        num = vx + vz * lam
        v_x = np.mean(num / den**2)
        v_z = np.sum(lam * num / den**2) / self.M
        return chi_x, chi_z, v_x, v_z


@dataclass
class MacroObservables:
    """Overlaps, norms, susceptibilities and variances of both approximations.

    ``m = x0.x_hat / N``, ``q = |x_hat|^2 / N``; the z-side uses ``z0 = A x0``
    and ``1/M``.
    """

    m1x: float
    q1x: float
    chi1x: float
    v1x: float
    m1z: float
    q1z: float
    chi1z: float
    v1z: float
    m2x: float
    q2x: float
    chi2x: float
    v2x: float
    m2z: float
    q2z: float
    chi2z: float
    v2z: float
    T_x: float
    T_z: float

    NAMES = ("m1x", "q1x", "chi1x", "v1x", "m1z", "q1z", "chi1z", "v1z",
             "m2x", "q2x", "chi2x", "v2x", "m2z", "q2z", "chi2z", "v2z")

    def as_dict(self):
        return dataclasses.asdict(self)


def macroscopic_observables(factorized, gaussian, x0, z0):
    """Measure :class:`MacroObservables` from the moments of both parts.

    Susceptibilities and variances may be scalars or per-coordinate vectors;
    vectors are averaged.
    """
    x0 = np.asarray(x0, dtype=float)
    z0 = np.asarray(z0, dtype=float)
    if x0.shape != np.shape(factorized.x_mean) or x0.shape != np.shape(gaussian.x_mean):
        raise DomainError(f"x0 has shape {x0.shape}, estimates have {np.shape(factorized.x_mean)}")
    if z0.shape != np.shape(factorized.z_mean) or z0.shape != np.shape(gaussian.z_mean):
        raise DomainError(f"z0 has shape {z0.shape}, estimates have {np.shape(factorized.z_mean)}")

    def side(mom, suffix):
        return {
            f"m{suffix}x": float(np.mean(x0 * mom.x_mean)),
            f"q{suffix}x": float(np.mean(mom.x_mean**2)),
            f"chi{suffix}x": float(np.mean(mom.x_sus)),
            f"v{suffix}x": float(np.mean(mom.x_var)),
            f"m{suffix}z": float(np.mean(z0 * mom.z_mean)),
            f"q{suffix}z": float(np.mean(mom.z_mean**2)),
            f"chi{suffix}z": float(np.mean(mom.z_sus)),
            f"v{suffix}z": float(np.mean(mom.z_var)),
        }

    return MacroObservables(
        **side(factorized, "1"), **side(gaussian, "2"),
        T_x=float(np.mean(x0**2)), T_z=float(np.mean(z0**2)),
    )


@dataclass(eq=False)
class SaRvampResult:
    h1x: np.ndarray
    qhat1x: float
    vhat1x: float
    pi: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    iterations: int
    criterion: np.ndarray
    converged: bool
    state: SaMessageState
    clamp_events: int = 0
    intercept: float | None = None
    params: list = field(default_factory=list)
    observables: list = field(default_factory=list)


def _scalar_match(mean, sus, var, h_other, q_other, v_other, config, side):
    h, q, v, n = _match(
        mean, np.atleast_1d(float(sus)), np.atleast_1d(float(var)),
        h_other, np.atleast_1d(float(q_other)), np.atleast_1d(float(v_other)),
        config.q_bounds, config.v_bounds, side,
    )
    return h, float(q[0]), float(v[0]), n


def _sa_factorized(state, dataset, penalty, occupation, quad, lik):
    N, M = dataset.N, dataset.M
    full = SimpleNamespace(
        h1x=state.h1x, qhat1x=np.full(N, state.qhat1x), vhat1x=np.full(N, state.vhat1x),
        h1z=state.h1z, qhat1z=np.full(M, state.qhat1z), vhat1z=np.full(M, state.vhat1z),
    )
    fm = factorized_step(full, dataset, penalty, occupation, quad, lik)
    return Moments(fm.x_mean, float(np.mean(fm.x_sus)), float(np.mean(fm.x_var)),
                   fm.z_mean, float(np.mean(fm.z_sus)), float(np.mean(fm.z_var)))


def _sa_gaussian(state, dataset, spec):
    state.check()
    b = state.h2x + dataset.A.T @ state.h2z
    x2 = spec.solve(b, state.qhat2x, state.qhat2z)
    z2 = dataset.A @ x2
    chi_x, chi_z, v_x, v_z = spec.traces(state.qhat2x, state.qhat2z, state.vhat2x, state.vhat2z)
    return Moments(x2, chi_x, v_x, z2, chi_z, v_z)


def run_sa_rvamp(dataset, config: RvampConfig, init=None, *, x0=None, spectral=None):
    """Self-averaging iteration; same loop and policies as ``run_rvamp``.

    With the teacher ``x0`` given, macroscopic observables are recorded at
    every iteration in ``result.observables``.  ``spectral`` may carry a
    precomputed :class:`SpectralOperator` for ``dataset.A``.
    """
    lik = config.likelihood
    lik.check_responses(dataset.y)
    penalty = config.penalty_law(dataset)
    quad = config.quadrature()
    spec = spectral if spectral is not None else SpectralOperator(dataset.A)
    z0 = dataset.A @ x0 if x0 is not None else None
    if init is not None:
        state = init.copy()
    else:
        base = config.initial_state(dataset.N, dataset.M)
        state = SaMessageState.default(dataset.N, dataset.M)
        state.h1x, state.h1z = base.h1x, base.h1z
    eta = config.damping

    trace, params, observables = [], [], []
    clamps = 0
    converged = False
    fm = gm = None
    t = 0
    for t in range(1, config.t_max + 1):
        try:
            fm = _sa_factorized(state, dataset, penalty, config.occupation, quad, lik)
            h2x, q2x, v2x, n1 = _scalar_match(fm.x_mean, fm.x_sus, fm.x_var, state.h1x,
                                              state.qhat1x, state.vhat1x, config, "x")
            h2z, q2z, v2z, n2 = _scalar_match(fm.z_mean, fm.z_sus, fm.z_var, state.h1z,
                                              state.qhat1z, state.vhat1z, config, "z")
            state = dataclasses.replace(state, h2x=h2x, qhat2x=q2x, vhat2x=v2x,
                                        h2z=h2z, qhat2z=q2z, vhat2z=v2z)
            gm = _sa_gaussian(state, dataset, spec)
            crit = convergence_criterion(fm, gm)
            h1x, q1x, v1x, n3 = _scalar_match(gm.x_mean, gm.x_sus, gm.x_var, state.h2x,
                                              state.qhat2x, state.vhat2x, config, "x")
            h1z, q1z, v1z, n4 = _scalar_match(gm.z_mean, gm.z_sus, gm.z_var, state.h2z,
                                              state.qhat2z, state.vhat2z, config, "z")
        except NumericalError as err:
            raise NumericalError(err.base_message, iteration=t, index=err.index) from err
        if eta != 1.0:
            h1x = eta * h1x + (1 - eta) * state.h1x
            h1z = eta * h1z + (1 - eta) * state.h1z
            q1x = eta * q1x + (1 - eta) * state.qhat1x
            q1z = eta * q1z + (1 - eta) * state.qhat1z
            v1x = eta * v1x + (1 - eta) * state.vhat1x
            v1z = eta * v1z + (1 - eta) * state.vhat1z
        state = dataclasses.replace(state, h1x=h1x, qhat1x=q1x, vhat1x=v1x,
                                    h1z=h1z, qhat1z=q1z, vhat1z=v1z)
        if not np.isfinite(crit):
            raise NumericalError("convergence criterion is not finite", iteration=t)
        clamps += n1 + n2 + n3 + n4
        trace.append(crit)
        params.append({k: getattr(state, k) for k in (
            "qhat1x", "vhat1x", "qhat1z", "vhat1z", "qhat2x", "vhat2x", "qhat2z", "vhat2z")})
        if x0 is not None:
            observables.append(macroscopic_observables(fm, gm, x0, z0))
        if crit < config.eps_tol:
            converged = True
            break

    pi = selection_probability(state.h1x, state.vhat1x, penalty)
    return SaRvampResult(
        h1x=state.h1x.copy(), qhat1x=state.qhat1x, vhat1x=state.vhat1x, pi=pi,
        x1=fm.x_mean.copy(), x2=gm.x_mean.copy(), iterations=t,
        criterion=np.asarray(trace), converged=converged, state=state,
        clamp_events=clamps,
        intercept=float(fm.x_mean[0]) if dataset.has_intercept else None,
        params=params, observables=observables,
    )
