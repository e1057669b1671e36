"""Replicated VAMP: per-coordinate iteration producing selection probabilities.

The iteration alternates between a factorized approximation (scalar
denoisers averaged over penalty and occupation randomness) and a Gaussian
approximation coupled through the feature matrix.  Messages between them are
exchanged by moment matching in natural-parameter form ``(h, qhat, vhat)``.
"""

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .exceptions import DomainError, NumericalError
from .glm_model import (
    Likelihood,
    OccupationLaw,
    PenaltyLaw,
    Quadrature,
    avg_x_moments,
    avg_z_moments,
    selection_probability,
)


@dataclass(eq=False)
class Dataset:
    """Feature matrix ``A`` (M x N) and responses ``y``.

    With ``has_intercept`` column 0 of ``A`` must be all ones; that
    coordinate is never penalised.
    """

    A: np.ndarray
    y: np.ndarray
    has_intercept: bool = False
    feature_names: list | None = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.A.ndim != 2:
            raise DomainError("A must be a 2-D matrix")
        M, N = self.A.shape
        if M < 1 or N < 1:
            raise DomainError("A must have at least one row and one column")
        if self.y.shape != (M,):
            raise DomainError(f"y has length {self.y.size}, expected {M}")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.y))):
            raise DomainError("dataset contains NaN or Inf")
        if self.has_intercept and not np.all(self.A[:, 0] == 1.0):
            raise DomainError("intercept column (column 0) must be all ones")

    @property
    def M(self):
        return self.A.shape[0]

    @property
    def N(self):
        return self.A.shape[1]

    def unpenalized_mask(self):
        mask = np.zeros(self.N, dtype=bool)
        if self.has_intercept:
            mask[0] = True
        return mask


@dataclass(eq=False)
class MessageState:
    """Natural parameters of both approximations, x-side and z-side."""

    h1x: np.ndarray
    qhat1x: np.ndarray
    vhat1x: np.ndarray
    h1z: np.ndarray
    qhat1z: np.ndarray
    vhat1z: np.ndarray
    h2x: np.ndarray
    qhat2x: np.ndarray
    vhat2x: np.ndarray
    h2z: np.ndarray
    qhat2z: np.ndarray
    vhat2z: np.ndarray

    @classmethod
    def default(cls, N, M, *, h=0.0, qhat=1.0, vhat=1.0):
        def full(n, v):
            return np.full(n, float(v))

        return cls(
            full(N, h), full(N, qhat), full(N, vhat),
            full(M, h), full(M, qhat), full(M, vhat),
            full(N, 0.0), full(N, qhat), full(N, 0.0),
            full(M, 0.0), full(M, qhat), full(M, 0.0),
        )

    def copy(self):
        return MessageState(**{f.name: getattr(self, f.name).copy() for f in dataclasses.fields(self)})


class Moments(NamedTuple):
    """Means, susceptibilities and variances on both sides."""

    x_mean: np.ndarray
    x_sus: np.ndarray
    x_var: np.ndarray
    z_mean: np.ndarray
    z_sus: np.ndarray
    z_var: np.ndarray


@dataclass
class RvampConfig:
    gamma0: float = 1.0
    penalty_variant: str = "two_point"
    occupation: OccupationLaw = field(default_factory=OccupationLaw.poisson)
    likelihood: Likelihood = field(default_factory=Likelihood.logistic)
    eps_tol: float = 1e-8
    t_max: int = 500
    damping: float = 1.0
    q_bounds: tuple = (1e-9, 1e9)
    v_bounds: tuple = (0.0, 1e9)
    quad_order: int = 33
    init_jitter: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise DomainError("damping must lie in (0, 1]")
        if not (0 < self.q_bounds[0] < self.q_bounds[1]):
            raise DomainError("q_bounds must satisfy 0 < lower < upper")
        if not (0 <= self.v_bounds[0] < self.v_bounds[1]):
            raise DomainError("v_bounds must satisfy 0 <= lower < upper")
        if self.eps_tol < 0 or self.t_max < 1:
            raise DomainError("eps_tol must be >= 0 and t_max >= 1")

    def penalty_law(self, dataset):
        unpen = dataset.unpenalized_mask() if dataset.has_intercept else None
        return PenaltyLaw(self.gamma0, self.penalty_variant, unpen)

    def quadrature(self):
        return Quadrature.gauss_hermite(self.quad_order)

    def initial_state(self, N, M):
        state = MessageState.default(N, M)
        if self.init_jitter > 0:
            rng = np.random.default_rng(self.seed)
            state.h1x = self.init_jitter * rng.standard_normal(N)
            state.h1z = self.init_jitter * rng.standard_normal(M)
        return state


@dataclass(eq=False)
class RvampResult:
    h1x: np.ndarray
    qhat1x: np.ndarray
    vhat1x: np.ndarray
    pi: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    iterations: int
    criterion: np.ndarray
    converged: bool
    state: MessageState
    clamp_events: int = 0
    intercept: float | None = None


# ---------------------------------------------------------------------------
# Factorized part
# ---------------------------------------------------------------------------


def factorized_step(state, dataset, penalty, occupation, quad, lik):
    """Moments of the factorized approximation for every coordinate."""
    x_mean, x_sus, x_var = avg_x_moments(state.h1x, state.qhat1x, state.vhat1x, penalty)
    try:
        z_mean, z_sus, z_var = avg_z_moments(
            state.h1z, state.qhat1z, state.vhat1z, dataset.y, occupation, quad, lik
        )
    except NumericalError as err:
        row = err.index[0] if err.index else None
        raise NumericalError(f"z-side denoiser failed: {err.base_message}", index=row) from err
    return Moments(x_mean, x_sus, x_var, z_mean, z_sus, z_var)


def _match(mean, sus, var, h_other, q_other, v_other, q_bounds, v_bounds, side):
    """Natural parameters whose product with ``(h_other, q_other, v_other)``
    reproduces the given moments.  Returns ``(h, q, v, n_clamped)``.

    A clamped precision is propagated into the mean and variance updates
    through the effective susceptibility ``1/(q + q_other)``, so a
    zero-susceptibility coordinate becomes a (nearly) hard constraint at its
    mean instead of a 0/0.
    """
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
        bad = int(np.flatnonzero(~(np.isfinite(mean) & np.isfinite(var)))[0])
        raise NumericalError(f"non-finite {side} moments", index=bad)
    if np.any(~(sus >= 0)) or np.any(~np.isfinite(sus)):
        bad = int(np.flatnonzero(~((sus >= 0) & np.isfinite(sus)))[0])
        raise NumericalError(f"invalid {side} susceptibility {sus[bad]!r}", index=bad)
    with np.errstate(divide="ignore"):
        q_raw = 1.0 / sus - q_other
    q_new = np.clip(q_raw, *q_bounds)
    clamped = q_new != q_raw
    sus_eff = np.where(clamped, 1.0 / (q_new + q_other), sus)
    h_new = mean / sus_eff - h_other
    v_raw = var / sus_eff**2 - v_other
    v_new = np.clip(v_raw, *v_bounds)
    n = int(np.count_nonzero(clamped) + np.count_nonzero(v_new != v_raw))
    return h_new, q_new, v_new, n


def moment_match_1to2(state, moments, config):
    """Update the Gaussian-side parameters from factorized moments."""
    h2x, q2x, v2x, nx = _match(
        moments.x_mean, moments.x_sus, moments.x_var,
        state.h1x, state.qhat1x, state.vhat1x, config.q_bounds, config.v_bounds, "x",
    )
    h2z, q2z, v2z, nz = _match(
        moments.z_mean, moments.z_sus, moments.z_var,
        state.h1z, state.qhat1z, state.vhat1z, config.q_bounds, config.v_bounds, "z",
    )
    new = dataclasses.replace(
        state, h2x=h2x, qhat2x=q2x, vhat2x=v2x, h2z=h2z, qhat2z=q2z, vhat2z=v2z
    )
    return new, nx + nz


def moment_match_2to1(state, moments, config):
    """Damped update of the factorized-side parameters from Gaussian moments."""
    eta = config.damping
    h1x, q1x, v1x, nx = _match(
        moments.x_mean, moments.x_sus, moments.x_var,
        state.h2x, state.qhat2x, state.vhat2x, config.q_bounds, config.v_bounds, "x",
    )
    h1z, q1z, v1z, nz = _match(
        moments.z_mean, moments.z_sus, moments.z_var,
        state.h2z, state.qhat2z, state.vhat2z, config.q_bounds, config.v_bounds, "z",
    )
    if eta != 1.0:
        def mix(new, old):
            return eta * new + (1.0 - eta) * old

        h1x, q1x, v1x = mix(h1x, state.h1x), mix(q1x, state.qhat1x), mix(v1x, state.vhat1x)
        h1z, q1z, v1z = mix(h1z, state.h1z), mix(q1z, state.qhat1z), mix(v1z, state.vhat1z)
    new = dataclasses.replace(
        state, h1x=h1x, qhat1x=q1x, vhat1x=v1x, h1z=h1z, qhat1z=q1z, vhat1z=v1z
    )
    return new, nx + nz


# ---------------------------------------------------------------------------
# Gaussian part
# ---------------------------------------------------------------------------


def _cholesky(K, what):
    try:
        return cho_factor(K, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as err:
        raise NumericalError(
            f"{what} is not positive definite ({err}); tighten the precision "
            "clamps or add damping"
        ) from err


class WoodburyOperator:
    """``X = (diag(qx) + A^T diag(qz) A)^{-1}`` through an M x M factorization.

    ``X = D - D A^T (diag(1/qz) + A D A^T)^{-1} A D`` with ``D = diag(1/qx)``.
    """

    def __init__(self, A, qhat2x, qhat2z):
        qhat2x = np.asarray(qhat2x, dtype=float)
        qhat2z = np.asarray(qhat2z, dtype=float)
        if np.any(~(qhat2x > 0)):
            raise NumericalError("Woodbury form needs qhat2x > 0", index=int(np.argmin(qhat2x)))
        if np.any(~(qhat2z > 0)):
            raise NumericalError("Woodbury form needs qhat2z > 0", index=int(np.argmin(qhat2z)))
        self.A = A
        self.qz = qhat2z
        self.d = 1.0 / qhat2x
        self.W = A * self.d
        self.P = self.W @ A.T
        K = self.P.copy()
        K[np.diag_indices_from(K)] += 1.0 / qhat2z
        self._cho = _cholesky(K, "inner Woodbury matrix")
        self.R = cho_solve(self._cho, self.W)

    def matvec(self, b):
        return self.d * b - self.W.T @ cho_solve(self._cho, self.W @ b)

    def diag(self):
        return self.d - np.einsum("mi,mi->i", self.W, self.R)

    def XAt(self):
        return self.R.T / self.qz

    def AXAt(self):
        G = cho_solve(self._cho, self.P).T / self.qz
        return 0.5 * (G + G.T)

    def diag_XDX(self, v):
        """``diag(X diag(v) X)``."""
        S = (self.W * v) @ self.W.T
        cross = np.einsum("mi,mi->i", self.W, self.R)
        quad = np.einsum("mi,mi->i", self.R, S @ self.R)
        return self.d**2 * v - 2.0 * self.d * v * cross + quad


class DirectOperator:
    """Same interface as :class:`WoodburyOperator` with an explicit N x N inverse."""

    def __init__(self, A, qhat2x, qhat2z):
        self.A = A
        prec = (A.T * qhat2z) @ A
        prec[np.diag_indices_from(prec)] += qhat2x
        cho = _cholesky(prec, "Gaussian-part precision")
        X = cho_solve(cho, np.eye(A.shape[1]))
        self.X = 0.5 * (X + X.T)

    def matvec(self, b):
        return self.X @ b

    def diag(self):
        return np.diag(self.X).copy()

    def XAt(self):
        return self.X @ self.A.T

    def AXAt(self):
        G = self.A @ self.XAt()
        return 0.5 * (G + G.T)

    def diag_XDX(self, v):
        return (self.X**2) @ v


def woodbury_apply(A, qhat2x, qhat2z):
    return WoodburyOperator(np.asarray(A, dtype=float), qhat2x, qhat2z)


def gaussian_step(state, dataset, method="auto"):
    """Moments of the Gaussian approximation.

    ``method`` is ``"woodbury"``, ``"direct"`` or ``"auto"`` (Woodbury when
    M < N).
    """
    A = dataset.A
    M, N = A.shape
    if method == "auto":
        method = "woodbury" if M < N else "direct"
    if method == "woodbury":
        op = WoodburyOperator(A, state.qhat2x, state.qhat2z)
    elif method == "direct":
        op = DirectOperator(A, state.qhat2x, state.qhat2z)
    else:
        raise DomainError(f"unknown Gaussian-part method {method!r}")

    x2 = op.matvec(state.h2x + A.T @ state.h2z)
    z2 = A @ x2
    chi2x = op.diag()
    G = op.AXAt()
    chi2z = np.diag(G).copy()
    XAt = op.XAt()
    v2x = op.diag_XDX(state.vhat2x) + (XAt**2) @ state.vhat2z
    v2z = (XAt.T**2) @ state.vhat2x + (G**2) @ state.vhat2z
    return Moments(x2, chi2x, v2x, z2, chi2z, v2z)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def convergence_criterion(fm, gm):
    dx = np.mean((fm.x_mean - gm.x_mean) ** 2)
    dz = np.mean((fm.z_mean - gm.z_mean) ** 2)
    return max(dx, dz)


def run_rvamp(dataset, config, init=None, *, method="auto", callback=None):
    """Iterate to a fixed point and return selection probabilities.

    ``callback(t, state, factorized_moments, gaussian_moments)`` is invoked
    after every iteration when given.
    """
    lik = config.likelihood
    lik.check_responses(dataset.y)
    penalty = config.penalty_law(dataset)
    quad = config.quadrature()
    state = init.copy() if init is not None else config.initial_state(dataset.N, dataset.M)

    trace = []
    clamps = 0
    converged = False
    fm = gm = None
    t = 0
    for t in range(1, config.t_max + 1):
        try:
            fm = factorized_step(state, dataset, penalty, config.occupation, quad, lik)
            state, n1 = moment_match_1to2(state, fm, config)
            gm = gaussian_step(state, dataset, method)
            crit = convergence_criterion(fm, gm)
            state, n2 = moment_match_2to1(state, gm, config)
        except NumericalError as err:
            raise NumericalError(err.base_message, iteration=t, index=err.index) from err
        if not np.isfinite(crit):
            raise NumericalError("convergence criterion is not finite", iteration=t)
        clamps += n1 + n2
        trace.append(crit)
        if callback is not None:
            callback(t, state, fm, gm)
        if crit < config.eps_tol:
            converged = True
            break

    pi = selection_probability(state.h1x, state.vhat1x, penalty)
    intercept = float(fm.x_mean[0]) if dataset.has_intercept else None
    return RvampResult(
        h1x=state.h1x.copy(),
        qhat1x=state.qhat1x.copy(),
        vhat1x=state.vhat1x.copy(),
        pi=pi,
        x1=fm.x_mean.copy(),
        x2=gm.x_mean.copy(),
        iterations=t,
        criterion=np.asarray(trace),
        converged=converged,
        state=state,
        clamp_events=clamps,
        intercept=intercept,
    )


def default_gamma_grid(dataset, n=50, ratio=100.0):
    """``n`` log-spaced values from ``||A^T y||_inf`` (penalised columns) down
    to that value divided by ``ratio``."""
    corr = np.abs(dataset.A.T @ dataset.y)
    corr = corr[~dataset.unpenalized_mask()]
    gmax = float(corr.max()) if corr.size else 1.0
    if not gmax > 0:
        raise DomainError("A^T y vanishes; cannot build a default penalty grid")
    return np.geomspace(gmax, gmax / ratio, n)


@dataclass(eq=False)
class SelectionPath:
    gammas: np.ndarray
    pi: np.ndarray
    h1x: np.ndarray
    vhat1x: np.ndarray
    x1: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    failed: np.ndarray
    errors: list
    intercept: np.ndarray | None = None


def selection_path(dataset, gammas, config, *, warm_start=True, method="auto"):
    """Selection probabilities along a strictly decreasing penalty grid.

    Each point starts from the previous converged fixed point.  A point that
    raises is recorded as failed and the next one restarts from the default
    initialisation.
    """
    gammas = np.asarray(gammas, dtype=float).ravel()
    if gammas.size == 0:
        raise DomainError("penalty grid is empty")
    if np.any(~(gammas > 0)):
        raise DomainError("penalty grid values must be positive")
    if np.any(np.diff(gammas) >= 0):
        raise DomainError("penalty grid must be strictly decreasing")

    G, N = gammas.size, dataset.N
    pi = np.full((G, N), np.nan)
    h1x = np.full((G, N), np.nan)
    vhat1x = np.full((G, N), np.nan)
    x1 = np.full((G, N), np.nan)
    converged = np.zeros(G, dtype=bool)
    iterations = np.zeros(G, dtype=int)
    failed = np.zeros(G, dtype=bool)
    intercept = np.full(G, np.nan) if dataset.has_intercept else None
    errors = [None] * G

    init = None
    for k, g in enumerate(gammas):
        cfg = dataclasses.replace(config, gamma0=float(g))
        try:
            res = run_rvamp(dataset, cfg, init if warm_start else None, method=method)
        except NumericalError as err:
            failed[k] = True
            errors[k] = str(err)
            init = None
            continue
        pi[k], h1x[k], vhat1x[k], x1[k] = res.pi, res.h1x, res.vhat1x, res.x1
        converged[k] = res.converged
        iterations[k] = res.iterations
        if intercept is not None:
            intercept[k] = res.intercept
        init = res.state if res.converged else None
    return SelectionPath(gammas, pi, h1x, vhat1x, x1, converged, iterations, failed, errors, intercept)
