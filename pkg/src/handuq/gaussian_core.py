"""Multivariate Gaussian beliefs over flattened joint coordinates.

A belief is a mean vector plus one of three covariance parameterizations:

* ``Diagonal(var)``          -- independent per-dimension variances,
* ``PrecisionFactor(a)``     -- the precision matrix is A @ A.T (the
  covariance is its inverse),
* ``Structured(w, var)``     -- W @ diag(var) @ W.T, per-dimension
  variances mixed through a shared square matrix W.

The canonical joint space is 63-dimensional (21 joints x 3 coordinates,
joint-major layout), but every operation here works for any dimension so
small test variants stay cheap.  All math is float64; values are
immutable after construction and safe to share across threads.
"""

from dataclasses import dataclass
from typing import Union

import numpy as np
import scipy.linalg

from .errors import NonInvertiblePrecision, NotPositiveDefinite, ShapeError

JOINT_DIM = 3
NUM_JOINTS = 21
FLAT_DIM = NUM_JOINTS * JOINT_DIM  # 63

LOG_2PI = float(np.log(2.0 * np.pi))


def _freeze(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


def as_flat_joints(values) -> np.ndarray:
    """Validate a 63-vector of joint coordinates (finite, joint-major)."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (FLAT_DIM,):
        raise ShapeError(f"expected shape ({FLAT_DIM},), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("joint vector contains non-finite values")
    return v


@dataclass(frozen=True)
class Diagonal:
    """Covariance diag(var); var must be strictly positive."""

    var: np.ndarray

    def __post_init__(self):
        var = _freeze(self.var)
        if var.ndim != 1:
            raise ShapeError(f"var must be a vector, got shape {var.shape}")
        if not np.all(np.isfinite(var)) or np.any(var <= 0.0):
            raise ValueError("diagonal variances must be finite and > 0")
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.var.shape[0]


@dataclass(frozen=True)
class PrecisionFactor:
    """Precision matrix A @ A.T; density needs A nonsingular."""

    a: np.ndarray

    def __post_init__(self):
        a = _freeze(self.a)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"a must be square, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("precision factor contains non-finite values")
        object.__setattr__(self, "a", a)

    @property
    def dim(self) -> int:
        return self.a.shape[0]


@dataclass(frozen=True)
class Structured:
    """Covariance W @ diag(var) @ W.T; positive definite iff W is nonsingular."""

    w: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        w = _freeze(self.w)
        var = _freeze(self.var)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ShapeError(f"w must be square, got shape {w.shape}")
        if var.shape != (w.shape[0],):
            raise ShapeError(f"var shape {var.shape} does not match w {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("w contains non-finite values")
        if not np.all(np.isfinite(var)) or np.any(var <= 0.0):
            raise ValueError("variances must be finite and > 0")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.var.shape[0]


CovarianceParam = Union[Diagonal, PrecisionFactor, Structured]


@dataclass(frozen=True)
class GaussianBelief:
    """Mean vector plus covariance. ``cov=None`` marks a mean-only output."""

    mean: np.ndarray
    cov: CovarianceParam | None

    def __post_init__(self):
        mean = _freeze(self.mean)
        if mean.ndim != 1:
            raise ShapeError(f"mean must be a vector, got shape {mean.shape}")
        if not np.all(np.isfinite(mean)):
            raise ValueError("mean contains non-finite values")
        if self.cov is not None and self.cov.dim != mean.shape[0]:
            raise ShapeError(
                f"mean dim {mean.shape[0]} does not match covariance dim {self.cov.dim}"
            )
        object.__setattr__(self, "mean", mean)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def dense_covariance(cov: CovarianceParam) -> np.ndarray:
    """Materialize the full covariance matrix, symmetrized on return.

    For ``PrecisionFactor`` this inverts A @ A.T through a dense
    factorization and raises ``NonInvertiblePrecision`` when singular.
    """
    if isinstance(cov, Diagonal):
        dense = np.diag(cov.var)
    elif isinstance(cov, Structured):
        dense = (cov.w * cov.var) @ cov.w.T
    elif isinstance(cov, PrecisionFactor):
        psi = cov.a @ cov.a.T
        try:
            cho = scipy.linalg.cho_factor(psi, lower=True)
            dense = scipy.linalg.cho_solve(cho, np.eye(cov.dim))
        except scipy.linalg.LinAlgError as exc:
            raise NonInvertiblePrecision("A @ A.T is singular") from exc
    else:
        raise TypeError(f"unknown covariance parameterization: {type(cov)!r}")
    return 0.5 * (dense + dense.T)


def log_density(belief: GaussianBelief, y) -> float:
    """log N(y; mean, cov), including the -(d/2) log(2 pi) constant.

    The structured form never materializes the covariance: it solves
    through W and uses log det = 2 log|det W| + sum(log var).
    """
    if belief.cov is None:
        raise ValueError("mean-only belief has no density")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != belief.mean.shape:
        raise ShapeError(f"y shape {y.shape} does not match mean {belief.mean.shape}")
    d = belief.dim
    r = y - belief.mean
    cov = belief.cov
    if isinstance(cov, Diagonal):
        quad = float(np.sum(r * r / cov.var))
        log_det = float(np.sum(np.log(cov.var)))
    elif isinstance(cov, Structured):
        sign, logabs = np.linalg.slogdet(cov.w)
        if sign == 0:
            raise NotPositiveDefinite("structured covariance has singular W")
        u = scipy.linalg.lu_solve(scipy.linalg.lu_factor(cov.w), r)
        quad = float(np.sum(u * u / cov.var))
        log_det = 2.0 * float(logabs) + float(np.sum(np.log(cov.var)))
    elif isinstance(cov, PrecisionFactor):
        sign, logabs = np.linalg.slogdet(cov.a)
        if sign == 0:
            raise NotPositiveDefinite("precision factor A is singular")
        t = cov.a.T @ r
        quad = float(np.sum(t * t))
        log_det = -2.0 * float(logabs)
    else:
        raise TypeError(f"unknown covariance parameterization: {type(cov)!r}")
    return -0.5 * (d * LOG_2PI + log_det + quad)


def sample(belief: GaussianBelief, n: int, seed: int) -> np.ndarray:
    """Draw n reparameterized samples, shape (n, d); bit-reproducible per seed.

    Diagonal:   y_i = mean + sigma * eps_i
    Structured: y_i = mean + W @ (sigma * eps_i)
    with eps_i ~ N(0, I), so gradients can flow through sigma and W.
    """
    if belief.cov is None:
        raise ValueError("mean-only belief cannot be sampled")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, belief.dim))
    cov = belief.cov
    if isinstance(cov, Diagonal):
        return belief.mean + np.sqrt(cov.var) * eps
    if isinstance(cov, Structured):
        return belief.mean + (np.sqrt(cov.var) * eps) @ cov.w.T
    if isinstance(cov, PrecisionFactor):
        # cov = (A A^T)^-1, so y = mean + A^-T eps has the right covariance
        sign, _ = np.linalg.slogdet(cov.a)
        if sign == 0:
            raise NonInvertiblePrecision("precision factor A is singular")
        return belief.mean + scipy.linalg.solve(cov.a.T, eps.T).T
    raise TypeError(f"unknown covariance parameterization: {type(cov)!r}")


def block_traces(dense: np.ndarray, block: int = JOINT_DIM) -> np.ndarray:
    """Trace of each consecutive ``block x block`` diagonal block."""
    dense = np.asarray(dense, dtype=np.float64)
    d = dense.shape[0]
    if dense.shape != (d, d) or d % block != 0:
        raise ShapeError(f"expected square matrix with dim divisible by {block}")
    diag = np.diagonal(dense)
    return diag.reshape(d // block, block).sum(axis=1)


def joint_trace_uncertainty(cov: CovarianceParam) -> np.ndarray:
    """Per-joint uncertainty: trace of each joint's 3x3 covariance block.

    Only diagonal blocks contribute, so the result is invariant to
    off-block covariance entries.
    """
    if isinstance(cov, Diagonal):
        return block_traces(np.diag(cov.var))
    return block_traces(dense_covariance(cov))
