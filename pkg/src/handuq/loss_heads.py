"""Training losses with analytic gradients.

Three losses drive the uncertainty heads:

* ``diag_nll``           -- per-dimension Gaussian NLL on (mean, log-variance),
* ``full_nll_precision`` -- full-covariance NLL parameterized by a
  precision factor A (precision = A @ A.T),
* ``sampled_mse``        -- mean squared error of reparameterized samples
  drawn from the predicted distribution.

Both NLL losses omit the (d/2) log(2 pi) constant, which does not affect
optimization; `gaussian_core.log_density` includes it for evaluation.
Variance is carried in log space and clamped to [-20, 10] before
exponentiation; gradients are zero where the clamp is active.
Every gradient is checked against central finite differences in tests.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBatch, NotPositiveDefinite

LOG_VAR_MIN = -20.0
LOG_VAR_MAX = 10.0


def clamp_log_var(log_var: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamp log-variances; also return the mask where gradients still flow."""
    s = np.asarray(log_var, dtype=np.float64)
    clamped = np.clip(s, LOG_VAR_MIN, LOG_VAR_MAX)
    interior = (s > LOG_VAR_MIN) & (s < LOG_VAR_MAX)
    return clamped, interior.astype(np.float64)


@dataclass
class LossGrad:
    """A scalar loss value plus gradients for whichever inputs apply."""

    value: float
    d_mu: np.ndarray
    d_log_var: np.ndarray | None = None
    d_w: np.ndarray | None = None
    d_a: np.ndarray | None = None


def diag_nll(mu, log_var, y) -> LossGrad:
    """Independent-Gaussian NLL, summed over dimensions.

    value = sum_i (y_i - mu_i)^2 / (2 exp(s_i)) + 0.5 s_i  with s = log_var.
    """
    mu = np.asarray(mu, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    s, interior = clamp_log_var(log_var)
    var = np.exp(s)
    r = y - mu
    value = float(np.sum(r * r / (2.0 * var) + 0.5 * s))
    d_mu = -r / var
    d_log_var = (0.5 - r * r / (2.0 * var)) * interior
    return LossGrad(value=value, d_mu=d_mu, d_log_var=d_log_var)


def full_nll_precision(mu, a, y) -> LossGrad:
    """Full-covariance NLL via the precision factor: psi = A @ A.T.

    value = 0.5 r^T psi r - 0.5 log det psi, with r = y - mu.
    Gradients: d_mu = -psi r; d_a = r r^T A - A^{-T}.
    """
    mu = np.asarray(mu, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sign, logabs = np.linalg.slogdet(a)
    if sign == 0:
        raise NotPositiveDefinite("precision factor A is singular")
    r = y - mu
    t = a.T @ r
    value = float(0.5 * np.dot(t, t) - logabs)
    d_mu = -(a @ t)
    d_a = np.outer(r, t) - np.linalg.inv(a).T
    return LossGrad(value=value, d_mu=d_mu, d_a=d_a)


@dataclass
class ReparamSamples:
    """Samples paired with the noise and parameters that produced them.

    samples[n] = mu + W @ (sigma * eps[n]), sigma = exp(log_var / 2)
    clamped as usual; ``w=None`` means the identity (no mixing layer).
    Keeping eps alongside the samples lets `sampled_mse` chain gradients
    back into mu, log_var and W.
    """

    mu: np.ndarray
    log_var: np.ndarray
    eps: np.ndarray
    w: np.ndarray | None = None
    samples: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        self.eps = np.atleast_2d(np.asarray(self.eps, dtype=np.float64))
        s, _ = clamp_log_var(self.log_var)
        z = np.exp(0.5 * s) * self.eps
        if self.w is not None:
            self.w = np.asarray(self.w, dtype=np.float64)
            z = z @ self.w.T
        self.samples = self.mu + z

    @classmethod
    def draw(cls, mu, log_var, w, n: int, seed: int) -> "ReparamSamples":
        mu = np.asarray(mu, dtype=np.float64)
        eps = np.random.default_rng(seed).standard_normal((n, mu.shape[0]))
        return cls(mu=mu, log_var=log_var, eps=eps, w=w)


def sampled_mse(y, draws: ReparamSamples) -> LossGrad:
    """Mean squared error of reparameterized samples against the target.

    value = (1/N) sum_n ||y - samples_n||^2.  Gradients reach mu, log_var
    and W through the sample construction (eps held fixed).
    """
    y = np.asarray(y, dtype=np.float64)
    n = draws.eps.shape[0]
    if n == 0:
        raise EmptyBatch("sampled_mse needs at least one sample")
    s, interior = clamp_log_var(draws.log_var)
    sigma = np.exp(0.5 * s)
    r = draws.samples - y  # (n, d)
    value = float(np.sum(r * r) / n)
    d_mu = 2.0 * r.mean(axis=0)
    if draws.w is not None:
        d_w = (2.0 / n) * r.T @ (sigma * draws.eps)
        t = r @ draws.w
    else:
        d_w = None
        t = r
    d_sigma = (2.0 / n) * np.sum(t * draws.eps, axis=0)
    d_log_var = d_sigma * (0.5 * sigma) * interior
    return LossGrad(value=value, d_mu=d_mu, d_log_var=d_log_var, d_w=d_w)


DEFAULT_LAMBDA_NLL = 5e-4
DEFAULT_LAMBDA_MSE = 5e-4


def combined_loss(
    deter: float,
    nll: float,
    mse: float,
    lambda_nll: float = DEFAULT_LAMBDA_NLL,
    lambda_mse: float = DEFAULT_LAMBDA_MSE,
) -> float:
    """Total objective: deter + lambda_nll * nll + lambda_mse * mse."""
    if lambda_nll < 0 or lambda_mse < 0:
        raise ValueError("loss weights must be >= 0")
    return deter + lambda_nll * nll + lambda_mse * mse
