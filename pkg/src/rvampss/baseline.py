"""Brute-force stability selection: weighted l1 GLM fits over resamples.

The solver is a monotone accelerated proximal gradient method (MFISTA) with
backtracking and function-value restarts.  It is batched: many independent
problems sharing the design ``A`` are advanced together, and each one is
frozen as soon as it meets the stopping rule.
"""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DomainError, NumericalError
from .glm_model import Likelihood, PenaltyLaw

SUPPORT_REL_THRESHOLD = 1e-10
MAX_FAILURE_FRACTION = 0.01


@dataclass
class SolverConfig:
    """Stopping and step-size controls.

    A problem stops once the relative objective decrease of an iteration is
    below ``tol`` and the optimality residual is below ``opt_tol`` times
    ``max(1, max(gamma))``.
    """

    max_iters: int = 20000
    tol: float = 1e-10
    opt_tol: float = 1e-8
    backtrack_factor: float = 2.0
    max_backtracks: int = 60
    power_iters: int = 30
    penalize_intercept: bool = False

    def __post_init__(self):
        if not (self.tol > 0 and self.opt_tol > 0):
            raise DomainError("solver tolerances must be positive")
        if self.backtrack_factor <= 1:
            raise DomainError("backtrack_factor must exceed 1")
        if self.max_iters < 1:
            raise DomainError("max_iters must be >= 1")


@dataclass
class FitResult:
    x: np.ndarray
    objective: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    residual: np.ndarray
    history: list = field(default_factory=list)


def _as_2d(v, n, name):
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        v = v[None, :]
    if v.ndim != 2 or v.shape[1] != n:
        raise DomainError(f"{name} must have length {n}")
    return v


class _Smooth:
    """``f(x) = -sum_mu c_mu log p(y_mu | a_mu^T x)`` for a batch of weight rows."""

    def __init__(self, A, y, lik):
        self.A = A
        self.y = y
        self.lik = lik

    def value(self, X, C):
        Z = X @ self.A.T
        if self.lik.kind == "logistic":
            return np.sum(C * np.logaddexp(0.0, -self.y * Z), axis=1)
        return np.sum(C * (self.y - Z) ** 2, axis=1) / (2.0 * self.lik.noise_variance)

    def value_grad(self, X, C):
        Z = X @ self.A.T
        if self.lik.kind == "logistic":
            f = np.sum(C * np.logaddexp(0.0, -self.y * Z), axis=1)
        else:
            f = np.sum(C * (self.y - Z) ** 2, axis=1) / (2.0 * self.lik.noise_variance)
        g = -(C * self.lik.dlog_prob(self.y, Z)) @ self.A
        return f, g

    def curvature(self):
        return 0.25 if self.lik.kind == "logistic" else 1.0 / self.lik.noise_variance


def _prox(V, T):
    return np.sign(V) * np.maximum(np.abs(V) - T, 0.0)


def optimality_residual(grad, x, gamma):
    """Per-coordinate subgradient residual of the weighted l1 problem."""
    active = x != 0
    return np.where(active, np.abs(grad + gamma * np.sign(x)), np.maximum(np.abs(grad) - gamma, 0.0))


def _lipschitz_guess(A, C, iters):
    """Batched power iteration for ``lambda_max(A^T diag(c) A)``."""
    rng = np.random.default_rng(0)
    v = rng.standard_normal(A.shape[1])
    V = np.tile(v / np.linalg.norm(v), (C.shape[0], 1))
    lam = np.ones(C.shape[0])
    for _ in range(iters):
        W = ((V @ A.T) * C) @ A
        lam = np.linalg.norm(W, axis=1)
        V = W / np.where(lam > 0, lam, 1.0)[:, None]
    return lam


def fit_batch(A, y, C, Gam, lik, config=None, *, record_history=False):
    """Solve independent weighted l1 problems, one per row of ``C``/``Gam``."""
    config = config or SolverConfig()
    A = np.asarray(A, dtype=float)
    M, N = A.shape
    C = _as_2d(C, M, "c")
    Gam = _as_2d(Gam, N, "gamma")
    if C.shape[0] != Gam.shape[0]:
        raise DomainError("c and gamma batches differ in size")
    if np.any(C < 0) or np.any(Gam < 0):
        raise DomainError("occupation weights and penalties must be non-negative")
    lik.check_responses(y)
    B = C.shape[0]
    sm = _Smooth(A, np.asarray(y, dtype=float), lik)
    scale = np.maximum(1.0, Gam.max(axis=1))

    L = np.maximum(sm.curvature() * _lipschitz_guess(A, C, config.power_iters), 1e-12)
    X = np.zeros((B, N))
    F = sm.value(X, C)
    Yv = X.copy()
    t = np.ones(B)
    iters = np.zeros(B, dtype=int)
    converged = np.zeros(B, dtype=bool)
    residual = np.full(B, np.inf)
    history = [F.copy()] if record_history else []
    live = np.arange(B)

    for it in range(1, config.max_iters + 1):
        if live.size == 0:
            break
        c, g_ = C[live], Gam[live]
        x, yv, Fx, tl, Ll = X[live], Yv[live], F[live], t[live], L[live]
        fy, gy = sm.value_grad(yv, c)
        todo = np.arange(live.size)
        Zc = np.empty_like(x)
        fz = np.empty(live.size)
        for _ in range(config.max_backtracks):
            z = _prox(yv[todo] - gy[todo] / Ll[todo, None], g_[todo] / Ll[todo, None])
            f_new = sm.value(z, c[todo])
            d = z - yv[todo]
            bound = fy[todo] + np.sum(gy[todo] * d, axis=1) + 0.5 * Ll[todo] * np.sum(d * d, axis=1)
            ok = f_new <= bound + 1e-12 * np.abs(fy[todo])
            Zc[todo[ok]] = z[ok]
            fz[todo[ok]] = f_new[ok]
            todo = todo[~ok]
            if todo.size == 0:
                break
            Ll[todo] *= config.backtrack_factor
        else:
            raise NumericalError("backtracking line search failed", iteration=it, index=int(live[todo[0]]))

        Fz = fz + np.sum(g_ * np.abs(Zc), axis=1)
        if not np.all(np.isfinite(Fz)):
            bad = int(live[np.flatnonzero(~np.isfinite(Fz))[0]])
            raise NumericalError("objective is not finite", iteration=it, index=bad)
        # ties within rounding still take the proximal step, else the
        # iterate can stall once decreases fall below float resolution
        accept = Fz <= Fx + 1e-14 * np.maximum(1.0, np.abs(Fx))
        x_new = np.where(accept[:, None], Zc, x)
        F_new = np.where(accept, Fz, Fx)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tl * tl))
        y_new = x_new + (tl / t_new)[:, None] * (Zc - x_new) + ((tl - 1.0) / t_new)[:, None] * (x_new - x)
        # restart momentum where the proximal point did not decrease F
        y_new = np.where(accept[:, None], y_new, x_new)
        t_new = np.where(accept, t_new, 1.0)

        rel = (Fx - F_new) / np.maximum(1.0, np.abs(F_new))
        done = np.zeros(live.size, dtype=bool)
        cand = np.flatnonzero(rel < config.tol)
        if cand.size:
            _, gx = sm.value_grad(x_new[cand], c[cand])
            r = optimality_residual(gx, x_new[cand], g_[cand]).max(axis=1)
            residual[live[cand]] = r
            done[cand] = r <= config.opt_tol * scale[live[cand]]

        X[live], F[live], Yv[live], t[live], L[live] = x_new, F_new, y_new, t_new, Ll
        iters[live] = it
        if record_history:
            history.append(F.copy())
        converged[live[done]] = True
        live = live[~done]

    if live.size:
        _, gx = sm.value_grad(X[live], C[live])
        residual[live] = optimality_residual(gx, X[live], Gam[live]).max(axis=1)
    return FitResult(X, F, iters, converged, residual, history)


def objective(A, y, c, gamma, x, lik):
    """Weighted l1 GLM objective at ``x``."""
    sm = _Smooth(np.asarray(A, float), np.asarray(y, float), lik)
    return float(sm.value(np.asarray(x, float)[None, :], np.asarray(c, float)[None, :])[0]
                 + np.sum(np.asarray(gamma) * np.abs(x)))


def _penalty_vector(dataset, gamma, config):
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (dataset.N,)).copy()
    if dataset.has_intercept and not config.penalize_intercept:
        gamma[0] = 0.0
    return gamma


def fit_weighted_l1_glm(dataset, c, gamma, lik, solver_config=None):
    """Minimise ``-sum c_mu log p(y_mu|a_mu^T x) + sum gamma_i |x_i|``.

    Raises :class:`NumericalError` if the stopping rule is not met.
    """
    cfg = solver_config or SolverConfig()
    c = np.broadcast_to(np.asarray(c, dtype=float), (dataset.M,))
    gamma = _penalty_vector(dataset, gamma, cfg)
    res = fit_batch(dataset.A, dataset.y, c, gamma, lik, cfg)
    if not res.converged[0]:
        raise NumericalError(
            f"solver did not converge in {cfg.max_iters} iterations "
            f"(optimality residual {res.residual[0]:.3e})"
        )
    return res.x[0]


@dataclass
class BootstrapConfig:
    """Resampling plan.

    ``occupation`` is ``"poisson"`` (untruncated Poisson(1) counts),
    ``"multinomial"`` (M draws with replacement) or ``"fixed"`` (all ones).
    """

    B: int = 1000
    gamma0: float = 1.0
    penalty_variant: str = "two_point"
    occupation: str = "poisson"
    likelihood: Likelihood = field(default_factory=Likelihood.logistic)
    seed: int = 0
    chunk_size: int = 256

    def __post_init__(self):
        if self.B < 1:
            raise DomainError("B must be >= 1")
        if self.occupation not in ("poisson", "multinomial", "fixed"):
            raise DomainError(f"unknown occupation {self.occupation!r}")
        if self.chunk_size < 1:
            raise DomainError("chunk_size must be >= 1")


@dataclass
class BootstrapResult:
    pi: np.ndarray
    counts: np.ndarray
    standard_error: np.ndarray
    n_fits: int
    n_failed: int


def draw_resample(b, dataset, config, penalty):
    """Occupation and penalty vectors for resample ``b`` (seeded by ``(seed, b)``)."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, b]))
    M = dataset.M
    if config.occupation == "poisson":
        c = rng.poisson(1.0, size=M).astype(float)
    elif config.occupation == "multinomial":
        c = rng.multinomial(M, np.full(M, 1.0 / M)).astype(float)
    else:
        c = np.ones(M)
    return c, penalty.sample(dataset.N, rng)


def _run_chunk(args):
    dataset, config, solver_config, start, stop = args
    unpen = dataset.unpenalized_mask() if (dataset.has_intercept and not solver_config.penalize_intercept) else None
    penalty = PenaltyLaw(config.gamma0, config.penalty_variant, unpen)
    draws = [draw_resample(b, dataset, config, penalty) for b in range(start, stop)]
    C = np.array([d[0] for d in draws])
    G = np.array([d[1] for d in draws])
    try:
        res = fit_batch(dataset.A, dataset.y, C, G, config.likelihood, solver_config)
    except NumericalError:
        # isolate the failing resample(s) by refitting one at a time
        sel = np.zeros((stop - start, dataset.N), dtype=bool)
        ok = np.zeros(stop - start, dtype=bool)
        for k in range(stop - start):
            try:
                r = fit_batch(dataset.A, dataset.y, C[k], G[k], config.likelihood, solver_config)
            except NumericalError:
                continue
            ok[k] = r.converged[0]
            sel[k] = _support(r.x[0])
        return sel, ok
    sel = np.array([_support(x) for x in res.x])
    return sel, res.converged


def _support(x):
    return np.abs(x) > SUPPORT_REL_THRESHOLD * max(1.0, float(np.max(np.abs(x), initial=0.0)))


def default_workers():
    try:
        return max(1, int(os.environ.get("RVAMPSS_WORKERS", "1")))
    except ValueError:
        return 1


def bootstrap_selection_probability(dataset, config, solver_config=None, *, workers=None):
    """Selection frequencies over ``config.B`` resampled, re-penalised fits.

    Resamples are processed in fixed chunks so the result does not depend on
    ``workers``.  Failed fits are excluded; more than 1% failures raise.
    """
    solver_config = solver_config or SolverConfig()
    config.likelihood.check_responses(dataset.y)
    workers = default_workers() if workers is None else max(1, int(workers))
    bounds = [(s, min(s + config.chunk_size, config.B)) for s in range(0, config.B, config.chunk_size)]
    jobs = [(dataset, config, solver_config, s, e) for s, e in bounds]
    if workers == 1 or len(jobs) == 1:
        outs = [_run_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(_run_chunk, jobs))
    sel = np.concatenate([o[0] for o in outs])
    ok = np.concatenate([o[1] for o in outs])
    n_fail = int(np.count_nonzero(~ok))
    if n_fail > MAX_FAILURE_FRACTION * config.B:
        raise NumericalError(f"{n_fail} of {config.B} resampled fits failed (more than 1%)")
    counts = sel[ok].sum(axis=0)
    n = int(np.count_nonzero(ok))
    pi = counts / n
    if dataset.has_intercept and not solver_config.penalize_intercept:
        pi[0] = 1.0
    se = np.sqrt(pi * (1.0 - pi) / n)
    return BootstrapResult(pi, counts.astype(int), se, n, n_fail)
