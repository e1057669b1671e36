"""Synthetic teacher-student instances and CSV ingestion."""

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import DomainError
from .rvamp import Dataset

ENSEMBLES = ("row_orthogonal", "iid_gaussian")
CHANNELS = ("logistic", "gaussian")


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic instance; ``M = round(alpha * N)``."""

    N: int
    alpha: float
    rho: float
    ensemble: str = "row_orthogonal"
    channel: str = "logistic"
    noise_variance: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.N < 1:
            raise DomainError("N must be positive")
        if not self.alpha > 0:
            raise DomainError("alpha must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise DomainError("rho must lie in [0, 1]")
        if self.ensemble not in ENSEMBLES:
            raise DomainError(f"ensemble must be one of {ENSEMBLES}, got {self.ensemble!r}")
        if self.channel not in CHANNELS:
            raise DomainError(f"channel must be one of {CHANNELS}, got {self.channel!r}")
        if self.M < 1:
            raise DomainError("alpha * N rounds to zero rows")

    @property
    def M(self):
        return int(round(self.alpha * self.N))


def generate_signal(N, rho, rng):
    """Bernoulli-Gaussian signal: nonzero w.p. ``rho``, nonzero entries N(0, 1/rho)."""
    if not 0.0 <= rho <= 1.0:
        raise DomainError("rho must lie in [0, 1]")
    if rho == 0:
        warnings.warn("rho = 0 gives a zero teacher signal", RuntimeWarning, stacklevel=2)
        return np.zeros(N)
    support = rng.random(N) < rho
    return np.where(support, rng.standard_normal(N) / np.sqrt(rho), 0.0)


def haar_orthogonal(n, rng, cols=None):
    """Haar-distributed ``n x cols`` matrix with orthonormal columns (QR with sign fix)."""
    cols = n if cols is None else cols
    Q, R = np.linalg.qr(rng.standard_normal((n, cols)))
    return Q * np.sign(np.diag(R))


def generate_row_orthogonal(M, N, rng):
    """Row-orthogonal ensemble ``A = U V_M^T`` with ``A A^T = I_M``.

    ``V_M`` holds the first M columns of a Haar orthogonal N x N matrix,
    obtained directly as the sign-fixed thin QR of an N x M Gaussian.
    """
    if M > N:
        raise DomainError(f"row-orthogonal ensemble needs M <= N (got M={M}, N={N})")
    U = haar_orthogonal(M, rng)
    V = haar_orthogonal(N, rng, M)
    return U @ V.T


def generate_iid_gaussian(M, N, rng):
    """Entries i.i.d. N(0, 1/N)."""
    return rng.standard_normal((M, N)) / np.sqrt(N)


def generate_responses(A, x0, channel, rng, noise_variance=1.0):
    """Draw responses from the teacher channel at ``z0 = A x0``."""
    z0 = np.asarray(A) @ np.asarray(x0)
    if channel == "logistic":
        p = 1.0 / (1.0 + np.exp(-z0))
        return np.where(rng.random(z0.shape) < p, 1.0, -1.0)
    if channel == "gaussian":
        return z0 + np.sqrt(noise_variance) * rng.standard_normal(z0.shape)
    raise DomainError(f"unknown channel {channel!r}")


def make_synthetic(spec: SynthSpec):
    """Return ``(dataset, x0)``; a pure function of the ``SynthSpec``."""
    rng = np.random.default_rng(spec.seed)
    x0 = generate_signal(spec.N, spec.rho, rng)
    if spec.ensemble == "row_orthogonal":
        A = generate_row_orthogonal(spec.M, spec.N, rng)
    else:
        A = generate_iid_gaussian(spec.M, spec.N, rng)
    y = generate_responses(A, x0, spec.channel, rng, spec.noise_variance)
    return Dataset(A, y), x0


def _parse_label(raw, row, col):
    try:
        v = float(raw)
    except ValueError:
        raise DomainError(f"non-numeric label {raw!r} at row {row}, column {col!r}") from None
    if v in (1.0, -1.0):
        return v
    if v == 0.0:
        return -1.0
    raise DomainError(f"label {raw!r} at row {row}, column {col!r} is not in {{-1, 0, 1}}")


def load_and_preprocess(path, *, log10=False, standardize=False, add_intercept=False,
                        label_column="label"):
    """Read a CSV with a header row into a :class:`Dataset`.

    Transformations run in the order log10, standardize (population variance),
    intercept prepend.  Row numbers in error messages count data rows from 1.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DomainError(f"{path}: file is empty") from None
        if label_column not in header:
            raise DomainError(f"{path}: label column {label_column!r} not found in header")
        li = header.index(label_column)
        names = [h for j, h in enumerate(header) if j != li]
        if not names:
            raise DomainError(f"{path}: no feature columns")
        rows, labels = [], []
        for r, rec in enumerate(reader, start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DomainError(f"{path}: row {r} has {len(rec)} cells, header has {len(header)}")
            labels.append(_parse_label(rec[li].strip(), r, label_column))
            vals = []
            for j, cell in enumerate(rec):
                if j == li:
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DomainError(
                        f"{path}: non-numeric value {cell!r} at row {r}, column {header[j]!r}"
                    ) from None
            rows.append(vals)
    if not rows:
        raise DomainError(f"{path}: no data rows")
    X = np.asarray(rows, dtype=float)
    y = np.asarray(labels)
    bad = ~np.isfinite(X)
    if np.any(bad):
        r, j = np.argwhere(bad)[0]
        raise DomainError(f"{path}: non-finite value at row {r + 1}, column {names[j]!r}")

    if log10:
        bad = X <= 0
        if np.any(bad):
            r, j = np.argwhere(bad)[0]
            raise DomainError(
                f"{path}: log10 needs positive values; row {r + 1}, column {names[j]!r} is {X[r, j]!r}"
            )
        X = np.log10(X)
    if standardize:
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        flat = ~(sd > 1e-12 * np.maximum(1.0, np.abs(mu)))
        if np.any(flat):
            j = int(np.flatnonzero(flat)[0])
            raise DomainError(f"{path}: column {names[j]!r} has zero variance")
        X = (X - mu) / sd
    if add_intercept:
        X = np.hstack([np.ones((X.shape[0], 1)), X])
        names = ["(intercept)"] + names
    return Dataset(X, y, has_intercept=add_intercept, feature_names=names)
