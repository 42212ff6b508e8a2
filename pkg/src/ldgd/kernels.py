"""ARD squared-exponential kernel and Gram-matrix construction.

Lengthscales and signal variance live in log space so optimizers can take
unconstrained steps; the exponentiated accessors recover the constrained
values. A large lengthscale switches a latent dimension off, which is what
the relevance reports exploit (relevance = 1 / lengthscale^2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, ValidationError


@dataclass
class KernelParams:
    """Log-space ARD kernel parameters for one output path."""

    log_lengthscales: np.ndarray
    log_signal_variance: float

    def __post_init__(self):
        self.log_lengthscales = np.asarray(self.log_lengthscales, dtype=float)
        if self.log_lengthscales.ndim != 1:
            raise ValidationError("log_lengthscales must be a 1-D vector")
        self.log_signal_variance = float(self.log_signal_variance)
        if not np.all(np.isfinite(self.log_lengthscales)) or not np.isfinite(
            self.log_signal_variance
        ):
            raise ValidationError("kernel log-parameters must be finite")
        if not np.all(np.isfinite(np.exp(self.log_lengthscales))) or not np.isfinite(
            np.exp(self.log_signal_variance)
        ):
            raise ValidationError("kernel parameters overflow when exponentiated")

    @classmethod
    def create(cls, lengthscales, signal_variance: float) -> "KernelParams":
        """Build from constrained values; both must be strictly positive."""
        ls = np.asarray(lengthscales, dtype=float)
        if np.any(ls <= 0.0):
            raise ValidationError("lengthscales must be strictly positive")
        if signal_variance <= 0.0:
            raise ValidationError("signal_variance must be strictly positive")
        return cls(np.log(ls), float(np.log(signal_variance)))

    @property
    def q(self) -> int:
        return self.log_lengthscales.shape[0]

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def signal_variance(self) -> float:
        return float(np.exp(self.log_signal_variance))

    def clone(self) -> "KernelParams":
        return KernelParams(self.log_lengthscales.copy(), self.log_signal_variance)


@dataclass
class GramMatrix:
    """Kernel matrix plus the latent points it was evaluated on."""

    values: np.ndarray
    row_inputs: np.ndarray
    col_inputs: np.ndarray

    @property
    def is_self(self) -> bool:
        return self.row_inputs.shape == self.col_inputs.shape and np.array_equal(
            self.row_inputs, self.col_inputs
        )


def ard_rbf(x1, x2, params: KernelParams) -> float:
    """Evaluate the ARD squared-exponential kernel at a pair of points.

    k(x1, x2) = signal_variance * exp(-1/2 sum_q ((x1_q - x2_q) / ls_q)^2)
    """
    x1 = np.asarray(x1, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if x1.shape[0] != x2.shape[0]:
        raise DimensionMismatch(
            f"x1 has length {x1.shape[0]} but x2 has length {x2.shape[0]}"
        )
    if x1.shape[0] != params.q:
        raise DimensionMismatch(
            f"points have length {x1.shape[0]} but lengthscales have length {params.q}"
        )
    d = (x1 - x2) / params.lengthscales
    return float(params.signal_variance * np.exp(-0.5 * np.sum(d * d)))


def ard_rbf_grad_log_lengthscales(x1, x2, params: KernelParams) -> np.ndarray:
    """Gradient of ard_rbf with respect to the log-lengthscales.

    d k / d log(ls_q) = k * ((x1_q - x2_q) / ls_q)^2
    """
    x1 = np.asarray(x1, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    k = ard_rbf(x1, x2, params)
    d = (x1 - x2) / params.lengthscales
    return k * d * d


def _as_points(a, q: int, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2 or a.shape[1] != q:
        raise DimensionMismatch(
            f"{name} has shape {a.shape} but points of dimension {q} were expected"
        )
    return a


def gram(rows, cols, params: KernelParams) -> GramMatrix:
    """Kernel matrix with entry (i, j) = ard_rbf(rows_i, cols_j, params).

    Self-Grams (rows == cols) are exactly symmetric with the signal variance
    on the diagonal, because identical points give a bitwise-zero distance.
    """
    rows = _as_points(rows, params.q, "rows")
    cols = _as_points(cols, params.q, "cols")
    inv = 1.0 / params.lengthscales
    rs = rows * inv
    cs = cols * inv
    diff = rs[:, None, :] - cs[None, :, :]
    d2 = np.sum(diff * diff, axis=2)
    values = params.signal_variance * np.exp(-0.5 * d2)
    return GramMatrix(values=values, row_inputs=rows.copy(), col_inputs=cols.copy())
