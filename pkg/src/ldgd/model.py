"""Model state and the five-term evidence lower bound.

A shared latent variable X (one low-dimensional row per trial) drives two
sparse-GP output paths: a Gaussian-noise path for the continuous features and
a Bernoulli/sigmoid path for the one-hot labels. The training objective is

    total = ell_disc + ell_cont - kl_u_disc - kl_u_cont - kl_x

where the expected log-likelihood terms are estimated with one reparameterized
draw of X per evaluation (the discrete path additionally averages over
``mc_samples_discrete`` function draws) and the three KL penalties are exact.

All public operations route through the same autodiff graph builders the
trainer differentiates, so evaluated values and trained values can never
drift apart.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .errors import DimensionMismatch, NumericalError, ValidationError
from .kernels import KernelParams
from .linalg import find_jitter

LOG_2PI = math.log(2.0 * math.pi)

#: Floor applied to marginal variances; keeps sqrt/grad finite when a point
#: sits numerically on an inducing location.
VARIANCE_FLOOR = 1e-12

MODEL_FORMAT = "ldgd.model"
MODEL_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Continuous observations plus one-hot labels for N trials."""

    y_continuous: np.ndarray
    y_discrete: np.ndarray
    feature_names: list[str] | None = None

    def __post_init__(self):
        self.y_continuous = np.asarray(self.y_continuous, dtype=float)
        self.y_discrete = np.asarray(self.y_discrete, dtype=float)
        if self.y_continuous.ndim != 2 or self.y_discrete.ndim != 2:
            raise ValidationError("y_continuous and y_discrete must be 2-D")
        n, d = self.y_continuous.shape
        n2, k = self.y_discrete.shape
        if n != n2:
            raise DimensionMismatch(
                f"y_continuous has {n} rows but y_discrete has {n2}"
            )
        if n < 2 or d < 1 or k < 2:
            raise ValidationError(f"need N >= 2, D >= 1, K >= 2; got N={n}, D={d}, K={k}")
        if not np.all(np.isfinite(self.y_continuous)):
            raise ValidationError("y_continuous contains non-finite entries")
        if not np.all((self.y_discrete == 0.0) | (self.y_discrete == 1.0)):
            raise ValidationError("y_discrete entries must be 0 or 1")
        if not np.all(self.y_discrete.sum(axis=1) == 1.0):
            raise ValidationError("each y_discrete row must have exactly one 1 (one-hot)")
        if self.feature_names is not None and len(self.feature_names) != d:
            raise ValidationError(
                f"feature_names has {len(self.feature_names)} entries for {d} features"
            )

    @property
    def n(self) -> int:
        return self.y_continuous.shape[0]

    @property
    def d(self) -> int:
        return self.y_continuous.shape[1]

    @property
    def k(self) -> int:
        return self.y_discrete.shape[1]

    def labels(self) -> np.ndarray:
        return np.argmax(self.y_discrete, axis=1)

    @classmethod
    def from_labels(cls, y_continuous, labels, k: int | None = None, feature_names=None):
        labels = np.asarray(labels, dtype=int)
        n_classes = int(labels.max()) + 1 if k is None else int(k)
        if labels.min() < 0 or labels.max() >= n_classes:
            raise ValidationError(
                f"labels must lie in [0, {n_classes}); got range "
                f"[{labels.min()}, {labels.max()}]"
            )
        onehot = np.zeros((labels.shape[0], n_classes))
        onehot[np.arange(labels.shape[0]), labels] = 1.0
        return cls(y_continuous, onehot, feature_names=feature_names)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(
            self.y_continuous[idx].copy(),
            self.y_discrete[idx].copy(),
            feature_names=self.feature_names,
        )


@dataclass
class LatentVariational:
    """Per-trial Gaussian posterior over the latent rows."""

    mu: np.ndarray
    log_scale: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.log_scale = np.asarray(self.log_scale, dtype=float)
        if self.mu.ndim != 2 or self.mu.shape != self.log_scale.shape:
            raise ValidationError(
                f"mu {self.mu.shape} and log_scale {self.log_scale.shape} must be "
                "matching 2-D arrays"
            )
        if not np.all(np.isfinite(self.mu)) or not np.all(np.isfinite(self.log_scale)):
            raise ValidationError("latent parameters must be finite")
        if not np.all(np.isfinite(np.exp(self.log_scale))):
            raise ValidationError("latent scales overflow when exponentiated")

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def clone(self) -> "LatentVariational":
        return LatentVariational(self.mu.copy(), self.log_scale.copy())


@dataclass
class InducingVariational:
    """Inducing locations plus a Gaussian q(U) per output column.

    ``s_raw`` parameterizes each covariance Cholesky factor: strict lower
    triangle stored as-is, diagonal stored in log space, so S_c stays
    positive definite under unconstrained gradient steps.
    """

    z: np.ndarray
    m: np.ndarray
    s_raw: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.m = np.asarray(self.m, dtype=float)
        self.s_raw = np.asarray(self.s_raw, dtype=float)
        mm = self.z.shape[0] if self.z.ndim == 2 else -1
        if self.z.ndim != 2 or self.m.ndim != 2 or self.m.shape[0] != mm:
            raise ValidationError(
                f"z {self.z.shape} must be (M, Q) and m {self.m.shape} must be (M, C)"
            )
        c = self.m.shape[1]
        if self.s_raw.shape != (c, mm, mm):
            raise ValidationError(
                f"s_raw has shape {self.s_raw.shape}; expected ({c}, {mm}, {mm})"
            )
        for a in (self.z, self.m, self.s_raw):
            if not np.all(np.isfinite(a)):
                raise ValidationError("inducing parameters must be finite")

    @property
    def n_inducing(self) -> int:
        return self.z.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.m.shape[1]

    @property
    def s_factors(self) -> np.ndarray:
        """Realized lower-triangular Cholesky factors, one per output."""
        mm = self.n_inducing
        strict = np.tril(np.ones((mm, mm)), k=-1)
        eye = np.eye(mm)
        return self.s_raw * strict + eye * np.exp(self.s_raw * eye)

    @classmethod
    def from_factors(cls, z, m, factors) -> "InducingVariational":
        """Build from realized lower factors with strictly positive diagonals."""
        factors = np.asarray(factors, dtype=float)
        if factors.ndim != 3:
            raise ValidationError("factors must be a (C, M, M) stack")
        mm = factors.shape[1]
        diags = np.diagonal(factors, axis1=1, axis2=2)
        if np.any(diags <= 0.0):
            raise ValidationError("factor diagonals must be strictly positive")
        strict = np.tril(np.ones((mm, mm)), k=-1)
        raw = factors * strict + np.eye(mm) * np.log(
            np.where(np.eye(mm, dtype=bool), factors, 1.0)
        )
        return cls(np.asarray(z, dtype=float), np.asarray(m, dtype=float), raw)

    def clone(self) -> "InducingVariational":
        return InducingVariational(self.z.copy(), self.m.copy(), self.s_raw.copy())


@dataclass
class NoiseParams:
    """Per-feature observation noise, stored as log standard deviations."""

    log_sigma: np.ndarray

    def __post_init__(self):
        self.log_sigma = np.asarray(self.log_sigma, dtype=float).ravel()
        if not np.all(np.isfinite(self.log_sigma)):
            raise ValidationError("log_sigma must be finite")
        if not np.all(np.isfinite(np.exp(self.log_sigma))):
            raise ValidationError("noise scales overflow when exponentiated")

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def clone(self) -> "NoiseParams":
        return NoiseParams(self.log_sigma.copy())


@dataclass
class ModelConfig:
    """Structural snapshot: latent dimension, inducing count, sampling setup."""

    q: int
    m: int
    mc_samples_discrete: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.q < 1 or self.m < 1 or self.mc_samples_discrete < 1:
            raise ValidationError("q, m, and mc_samples_discrete must be positive")


@dataclass
class ModelState:
    """Everything the decoder owns: variational posteriors plus kernel/noise."""

    latent: LatentVariational
    inducing_cont: InducingVariational
    inducing_disc: InducingVariational
    kernel_cont: KernelParams
    kernel_disc: KernelParams
    noise: NoiseParams
    config: ModelConfig

    def __post_init__(self):
        self.validate()

    def validate(self):
        q = self.config.q
        if self.latent.mu.shape[1] != q:
            raise ValidationError(
                f"latent has {self.latent.mu.shape[1]} columns but config.q = {q}"
            )
        for name, ind in (("continuous", self.inducing_cont), ("discrete", self.inducing_disc)):
            if ind.z.shape[1] != q:
                raise ValidationError(f"{name} inducing locations disagree with q = {q}")
            if ind.n_inducing != self.config.m:
                raise ValidationError(
                    f"{name} path has {ind.n_inducing} inducing points; config.m = "
                    f"{self.config.m}"
                )
        for name, kern in (("continuous", self.kernel_cont), ("discrete", self.kernel_disc)):
            if kern.q != q:
                raise ValidationError(f"{name} kernel has {kern.q} lengthscales; q = {q}")
        if self.noise.log_sigma.shape[0] != self.inducing_cont.n_outputs:
            raise ValidationError(
                f"noise has {self.noise.log_sigma.shape[0]} entries but the continuous "
                f"path has {self.inducing_cont.n_outputs} outputs"
            )

    @property
    def n(self) -> int:
        return self.latent.mu.shape[0]

    @property
    def d(self) -> int:
        return self.inducing_cont.n_outputs

    @property
    def k(self) -> int:
        return self.inducing_disc.n_outputs

    def clone(self) -> "ModelState":
        return ModelState(
            latent=self.latent.clone(),
            inducing_cont=self.inducing_cont.clone(),
            inducing_disc=self.inducing_disc.clone(),
            kernel_cont=self.kernel_cont.clone(),
            kernel_disc=self.kernel_disc.clone(),
            noise=self.noise.clone(),
            config=ModelConfig(**vars(self.config)),
        )

    # -- serialization ------------------------------------------------------

    def to_document(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_FORMAT_VERSION,
            "config": {
                "q": self.config.q,
                "m": self.config.m,
                "mc_samples_discrete": self.config.mc_samples_discrete,
                "seed": self.config.seed,
            },
            "latent": {
                "mu": _encode_array(self.latent.mu),
                "log_scale": _encode_array(self.latent.log_scale),
            },
            "inducing_continuous": _encode_inducing(self.inducing_cont),
            "inducing_discrete": _encode_inducing(self.inducing_disc),
            "kernel_continuous": _encode_kernel(self.kernel_cont),
            "kernel_discrete": _encode_kernel(self.kernel_disc),
            "noise": {"log_sigma": _encode_array(self.noise.log_sigma)},
        }

    @classmethod
    def from_document(cls, doc: dict) -> "ModelState":
        if doc.get("format") != MODEL_FORMAT:
            raise ValidationError(f"unrecognized model document format: {doc.get('format')!r}")
        if doc.get("version") != MODEL_FORMAT_VERSION:
            raise ValidationError(f"unsupported model document version: {doc.get('version')!r}")
        cfg = doc["config"]
        return cls(
            latent=LatentVariational(
                _decode_array(doc["latent"]["mu"]),
                _decode_array(doc["latent"]["log_scale"]),
            ),
            inducing_cont=_decode_inducing(doc["inducing_continuous"]),
            inducing_disc=_decode_inducing(doc["inducing_discrete"]),
            kernel_cont=_decode_kernel(doc["kernel_continuous"]),
            kernel_disc=_decode_kernel(doc["kernel_discrete"]),
            noise=NoiseParams(_decode_array(doc["noise"]["log_sigma"])),
            config=ModelConfig(
                q=int(cfg["q"]),
                m=int(cfg["m"]),
                mc_samples_discrete=int(cfg["mc_samples_discrete"]),
                seed=int(cfg["seed"]),
            ),
        )

    def to_json(self) -> str:
        """Canonical JSON rendering; byte-stable for a given state."""
        return json.dumps(self.to_document(), sort_keys=True, separators=(",", ":"))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ModelState":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_document(json.load(fh))


def _encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _decode_array(doc: dict) -> np.ndarray:
    return np.asarray(doc["data"], dtype=float).reshape(doc["shape"])


def _encode_inducing(ind: InducingVariational) -> dict:
    return {
        "z": _encode_array(ind.z),
        "m": _encode_array(ind.m),
        "s_raw": _encode_array(ind.s_raw),
    }


def _decode_inducing(doc: dict) -> InducingVariational:
    return InducingVariational(
        _decode_array(doc["z"]), _decode_array(doc["m"]), _decode_array(doc["s_raw"])
    )


def _encode_kernel(k: KernelParams) -> dict:
    return {
        "log_lengthscales": _encode_array(k.log_lengthscales),
        "log_signal_variance": float(k.log_signal_variance),
    }


def _decode_kernel(doc: dict) -> KernelParams:
    return KernelParams(
        _decode_array(doc["log_lengthscales"]), float(doc["log_signal_variance"])
    )


@dataclass(frozen=True)
class ElboBreakdown:
    """The five signed objective terms plus their total."""

    ell_disc: float
    ell_cont: float
    kl_u_disc: float
    kl_u_cont: float
    kl_x: float
    total: float

    @classmethod
    def from_terms(cls, ell_disc, ell_cont, kl_u_disc, kl_u_cont, kl_x) -> "ElboBreakdown":
        total = ell_disc + ell_cont - kl_u_disc - kl_u_cont - kl_x
        return cls(ell_disc, ell_cont, kl_u_disc, kl_u_cont, kl_x, total)

    def validate(self):
        recomposed = self.ell_disc + self.ell_cont - self.kl_u_disc - self.kl_u_cont - self.kl_x
        if abs(recomposed - self.total) > 1e-10:
            raise ValidationError("breakdown total does not match its terms")
        if min(self.kl_u_disc, self.kl_u_cont, self.kl_x) < 0.0:
            raise ValidationError("KL terms must be nonnegative")


@dataclass
class MarginalGaussians:
    """Per-point, per-output moments of the marginalized function posterior."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.variance = np.asarray(self.variance, dtype=float)
        if self.mean.shape != self.variance.shape or self.mean.ndim != 2:
            raise ValidationError(
                f"mean {self.mean.shape} and variance {self.variance.shape} must be "
                "matching 2-D arrays"
            )
        if not np.all(self.variance > 0.0):
            raise ValidationError("marginal variances must be strictly positive")


# ---------------------------------------------------------------------------
# Parameter packing (one leaf per optimizable array)
# ---------------------------------------------------------------------------

PARAM_NAMES = (
    "latent.mu",
    "latent.log_scale",
    "inducing_cont.z",
    "inducing_cont.m",
    "inducing_cont.s_raw",
    "inducing_disc.z",
    "inducing_disc.m",
    "inducing_disc.s_raw",
    "kernel_cont.log_lengthscales",
    "kernel_cont.log_variance",
    "kernel_disc.log_lengthscales",
    "kernel_disc.log_variance",
    "noise.log_sigma",
)


def state_to_arrays(state: ModelState) -> dict[str, np.ndarray]:
    return {
        "latent.mu": state.latent.mu.copy(),
        "latent.log_scale": state.latent.log_scale.copy(),
        "inducing_cont.z": state.inducing_cont.z.copy(),
        "inducing_cont.m": state.inducing_cont.m.copy(),
        "inducing_cont.s_raw": state.inducing_cont.s_raw.copy(),
        "inducing_disc.z": state.inducing_disc.z.copy(),
        "inducing_disc.m": state.inducing_disc.m.copy(),
        "inducing_disc.s_raw": state.inducing_disc.s_raw.copy(),
        "kernel_cont.log_lengthscales": state.kernel_cont.log_lengthscales.copy(),
        "kernel_cont.log_variance": np.asarray(state.kernel_cont.log_signal_variance),
        "kernel_disc.log_lengthscales": state.kernel_disc.log_lengthscales.copy(),
        "kernel_disc.log_variance": np.asarray(state.kernel_disc.log_signal_variance),
        "noise.log_sigma": state.noise.log_sigma.copy(),
    }


def arrays_to_state(arrays: dict[str, np.ndarray], config: ModelConfig) -> ModelState:
    return ModelState(
        latent=LatentVariational(arrays["latent.mu"], arrays["latent.log_scale"]),
        inducing_cont=InducingVariational(
            arrays["inducing_cont.z"], arrays["inducing_cont.m"], arrays["inducing_cont.s_raw"]
        ),
        inducing_disc=InducingVariational(
            arrays["inducing_disc.z"], arrays["inducing_disc.m"], arrays["inducing_disc.s_raw"]
        ),
        kernel_cont=KernelParams(
            arrays["kernel_cont.log_lengthscales"], float(arrays["kernel_cont.log_variance"])
        ),
        kernel_disc=KernelParams(
            arrays["kernel_disc.log_lengthscales"], float(arrays["kernel_disc.log_variance"])
        ),
        noise=NoiseParams(arrays["noise.log_sigma"]),
        config=ModelConfig(**vars(config)),
    )


def make_leaves(arrays: dict[str, np.ndarray]) -> dict[str, ad.Var]:
    return {name: ad.Var(value) for name, value in arrays.items()}


# ---------------------------------------------------------------------------
# Graph builders
# ---------------------------------------------------------------------------


def _kernel_matrix_nodes(a: ad.Var, b: ad.Var, log_ls: ad.Var, log_var: ad.Var) -> ad.Var:
    """ARD squared-exponential Gram between point sets a (R,Q) and b (C,Q)."""
    r, q = a.value.shape
    c = b.value.shape[0]
    inv = ad.exp(-log_ls)
    asc = a * inv
    bsc = b * inv
    d2 = ((asc.reshape((r, 1, q)) - bsc.reshape((1, c, q))) ** 2).sum(axis=2)
    return ad.exp(log_var) * ad.exp(-0.5 * d2)


def _realized_factors_nodes(s_raw: ad.Var) -> ad.Var:
    """(C, M, M) lower factors: strict-lower passthrough, exp on the diagonal."""
    mm = s_raw.value.shape[1]
    strict = np.tril(np.ones((mm, mm)), k=-1)
    eye = np.eye(mm)
    # Mask before exponentiating so large off-diagonal entries cannot overflow.
    return s_raw * strict + ad.exp(s_raw * eye) * eye


def _path_nodes(
    x: ad.Var,
    z: ad.Var,
    m: ad.Var,
    s_raw: ad.Var,
    log_ls: ad.Var,
    log_var: ad.Var,
) -> tuple[ad.Var, ad.Var, ad.Var]:
    """Sparse-GP marginal moments and inducing KL for one output path.

    Returns (mean (B,C), variance (B,C), kl_u scalar). The marginal follows
    the standard conditioning of p(F|U, X) against q(U) = N(m_c, S_c):

        mean_c = k_xM Kmm^-1 m_c
        var_c  = k_xx - k_xM Kmm^-1 k_Mx + k_xM Kmm^-1 S_c Kmm^-1 k_Mx

    computed entirely through triangular solves on chol(Kmm + jitter I).
    """
    bsz = x.value.shape[0]
    mm, c = m.value.shape

    k_xm = _kernel_matrix_nodes(x, z, log_ls, log_var)
    k_mm = _kernel_matrix_nodes(z, z, log_ls, log_var)
    jitter = find_jitter(k_mm.value)
    l_mm = ad.cholesky(k_mm, jitter=jitter)

    a = ad.solve_tri(l_mm, k_xm.T)  # (M, B) = L^-1 K_Mx
    b = ad.solve_tri(l_mm, a, trans=True)  # (M, B) = Kmm^-1 K_Mx
    mean = b.T @ m  # (B, C)

    factors = _realized_factors_nodes(s_raw)  # (C, M, M)
    # Stack the transposed factors row-wise: rows c*M..(c+1)*M hold L_c^T.
    lst = ad.transpose_axes(factors, (0, 2, 1)).reshape((c * mm, mm))
    t = lst @ b  # (C*M, B)
    s_bb = (t**2).reshape((c, mm, bsz)).sum(axis=1)  # (C, B)

    q_bb = (a**2).sum(axis=0)  # (B,)
    k_xx = ad.exp(log_var)
    variance = ad.clip_min((k_xx - q_bb.reshape((1, bsz)) + s_bb).T, VARIANCE_FLOOR)

    # KL(q(U) || N(0, Kmm)) summed over output columns.
    alpha = ad.solve_tri(l_mm, m)  # (M, C)
    maha = (alpha**2).sum()
    lh = ad.transpose_axes(factors, (1, 0, 2)).reshape((mm, c * mm))
    w = ad.solve_tri(l_mm, lh)
    trace = (w**2).sum()
    logdet_prior = 2.0 * ad.log(ad.diag_part(l_mm)).sum()
    # The factor diagonals are stored in log space, so the q(U) log-dets are
    # just the raw diagonal entries.
    logdet_q = 2.0 * (s_raw * np.eye(mm)).sum()
    kl_u = 0.5 * (trace + maha - float(c * mm) + float(c) * logdet_prior - logdet_q)

    return mean, variance, kl_u


def _gaussian_ell_nodes(y: np.ndarray, mean: ad.Var, var: ad.Var, log_sigma: ad.Var) -> ad.Var:
    """Closed-form E_q[log N(y | f, sigma^2)] summed over points and features."""
    bsz, d = y.shape
    sig2 = ad.exp(2.0 * log_sigma)
    quad = (((mean - y) ** 2 + var) / (2.0 * sig2)).sum()
    return -quad - float(bsz) * log_sigma.sum() - 0.5 * bsz * d * LOG_2PI


def _gaussian_ell_mc_nodes(
    y: np.ndarray, mean: ad.Var, var: ad.Var, log_sigma: ad.Var, f_eps: np.ndarray
) -> ad.Var:
    """Monte-Carlo version of the Gaussian expected log-likelihood."""
    s, bsz, d = f_eps.shape
    f = mean.reshape((1, bsz, d)) + ad.sqrt(var).reshape((1, bsz, d)) * f_eps
    sig2 = ad.exp(2.0 * log_sigma)
    quad = (((f - y) ** 2) / (2.0 * sig2)).sum() / float(s)
    return -quad - float(bsz) * log_sigma.sum() - 0.5 * bsz * d * LOG_2PI


def _bernoulli_ell_nodes(y: np.ndarray, mean: ad.Var, var: ad.Var, f_eps: np.ndarray) -> ad.Var:
    """MC estimate of E_q[log Bernoulli(y | sigmoid(f))] over one-hot columns."""
    s, bsz, k = f_eps.shape
    f = mean.reshape((1, bsz, k)) + ad.sqrt(var).reshape((1, bsz, k)) * f_eps
    # log sigmoid(f) = -softplus(-f); log(1 - sigmoid(f)) = -softplus(f)
    loglik = -(y * ad.softplus(-f) + (1.0 - y) * ad.softplus(f))
    return loglik.sum() / float(s)


def _kl_diag_nodes(mu: ad.Var, log_scale: ad.Var) -> ad.Var:
    """KL of the diagonal latent posterior against the standard-normal prior."""
    s2 = ad.exp(2.0 * log_scale)
    return 0.5 * (mu**2 + s2 - 1.0 - 2.0 * log_scale).sum()


def _elbo_nodes(
    leaves: dict[str, ad.Var],
    y_cont_batch: np.ndarray,
    y_disc_batch: np.ndarray,
    batch_idx: np.ndarray,
    eps_x: np.ndarray,
    f_eps_disc: np.ndarray,
    scale_factor: float,
) -> dict[str, ad.Var]:
    """Assemble the five ELBO terms for a batch; returns named nodes."""
    mu_b = ad.take_rows(leaves["latent.mu"], batch_idx)
    ls_b = ad.take_rows(leaves["latent.log_scale"], batch_idx)
    x = mu_b + ad.exp(ls_b) * eps_x

    mean_n, var_n, kl_u_cont = _path_nodes(
        x,
        leaves["inducing_cont.z"],
        leaves["inducing_cont.m"],
        leaves["inducing_cont.s_raw"],
        leaves["kernel_cont.log_lengthscales"],
        leaves["kernel_cont.log_variance"],
    )
    ell_cont = scale_factor * _gaussian_ell_nodes(
        y_cont_batch, mean_n, var_n, leaves["noise.log_sigma"]
    )

    mean_s, var_s, kl_u_disc = _path_nodes(
        x,
        leaves["inducing_disc.z"],
        leaves["inducing_disc.m"],
        leaves["inducing_disc.s_raw"],
        leaves["kernel_disc.log_lengthscales"],
        leaves["kernel_disc.log_variance"],
    )
    ell_disc = scale_factor * _bernoulli_ell_nodes(y_disc_batch, mean_s, var_s, f_eps_disc)

    kl_x = _kl_diag_nodes(leaves["latent.mu"], leaves["latent.log_scale"])

    total = ell_disc + ell_cont - kl_u_disc - kl_u_cont - kl_x
    return {
        "ell_disc": ell_disc,
        "ell_cont": ell_cont,
        "kl_u_disc": kl_u_disc,
        "kl_u_cont": kl_u_cont,
        "kl_x": kl_x,
        "total": total,
    }


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def sample_latent(latent: LatentVariational, eps) -> np.ndarray:
    """Reparameterized draw of latent points: mu + scale * eps, elementwise."""
    eps = np.asarray(eps, dtype=float)
    if eps.shape != latent.mu.shape:
        raise DimensionMismatch(
            f"eps has shape {eps.shape} but the latent posterior has {latent.mu.shape}"
        )
    return latent.mu + latent.scale * eps


def svgp_marginal(x_batch, inducing: InducingVariational, params: KernelParams) -> MarginalGaussians:
    """Marginal Gaussian moments of the sparse-GP posterior at a point batch."""
    x_batch = np.asarray(x_batch, dtype=float)
    if x_batch.ndim == 1:
        x_batch = x_batch.reshape(1, -1)
    if x_batch.shape[1] != inducing.z.shape[1] or x_batch.shape[1] != params.q:
        raise DimensionMismatch(
            f"points of dimension {x_batch.shape[1]} against inducing locations of "
            f"dimension {inducing.z.shape[1]} and {params.q} lengthscales"
        )
    mean, var, _ = _path_nodes(
        ad.Var(x_batch),
        ad.Var(inducing.z),
        ad.Var(inducing.m),
        ad.Var(inducing.s_raw),
        ad.Var(params.log_lengthscales),
        ad.Var(np.asarray(params.log_signal_variance)),
    )
    return MarginalGaussians(mean.value.copy(), var.value.copy())


def ell_continuous(
    y, marginals: MarginalGaussians, noise: NoiseParams, f_eps=None
) -> float:
    """Expected Gaussian log-likelihood; closed form unless ``f_eps`` is given.

    The closed form is exact for this likelihood; the sampled path exists to
    cross-validate it.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != marginals.mean.shape:
        raise DimensionMismatch(
            f"y has shape {y.shape} but marginals have shape {marginals.mean.shape}"
        )
    if noise.log_sigma.shape[0] != y.shape[1]:
        raise DimensionMismatch(
            f"noise has {noise.log_sigma.shape[0]} entries for {y.shape[1]} features"
        )
    mean = ad.Var(marginals.mean)
    var = ad.Var(marginals.variance)
    log_sigma = ad.Var(noise.log_sigma)
    if f_eps is None:
        return float(_gaussian_ell_nodes(y, mean, var, log_sigma).value)
    f_eps = np.asarray(f_eps, dtype=float)
    if f_eps.ndim == 2:
        f_eps = f_eps[None, :, :]
    if f_eps.shape[1:] != y.shape:
        raise DimensionMismatch(f"f_eps has shape {f_eps.shape} for data {y.shape}")
    return float(_gaussian_ell_mc_nodes(y, mean, var, log_sigma, f_eps).value)


def ell_discrete(y, marginals: MarginalGaussians, f_eps, n_samples: int | None = None) -> float:
    """MC estimate of the Bernoulli expected log-likelihood on one-hot targets."""
    y = np.asarray(y, dtype=float)
    if not np.all(y.sum(axis=1) == 1.0) or not np.all((y == 0.0) | (y == 1.0)):
        raise ValidationError("y must have one-hot rows")
    if y.shape != marginals.mean.shape:
        raise DimensionMismatch(
            f"y has shape {y.shape} but marginals have shape {marginals.mean.shape}"
        )
    f_eps = np.asarray(f_eps, dtype=float)
    if f_eps.ndim == 2:
        f_eps = f_eps[None, :, :]
    if f_eps.shape[1:] != y.shape:
        raise DimensionMismatch(f"f_eps has shape {f_eps.shape} for data {y.shape}")
    if n_samples is not None and f_eps.shape[0] != n_samples:
        raise ValidationError(
            f"f_eps provides {f_eps.shape[0]} samples but n_samples = {n_samples}"
        )
    return float(
        _bernoulli_ell_nodes(y, ad.Var(marginals.mean), ad.Var(marginals.variance), f_eps).value
    )


def draw_elbo_noise(rng: np.random.Generator, batch_size: int, q: int, k: int, mc_samples: int):
    """Noise draws consumed by one ELBO evaluation, in their pinned order."""
    eps_x = rng.standard_normal((batch_size, q))
    f_eps_disc = rng.standard_normal((mc_samples, batch_size, k))
    return eps_x, f_eps_disc


def elbo(state: ModelState, data: Dataset, batch, rng_seed: int) -> ElboBreakdown:
    """Evaluate the five-term objective on a batch; deterministic given seed.

    The expected log-likelihood terms are rescaled by N/|batch|; the KL terms
    never are.
    """
    batch_idx = np.asarray(batch, dtype=int)
    if batch_idx.ndim != 1 or batch_idx.size == 0:
        raise ValidationError("batch must be a nonempty 1-D index set")
    if batch_idx.min() < 0 or batch_idx.max() >= data.n:
        raise ValidationError(
            f"batch indices must lie in [0, {data.n}); got "
            f"[{batch_idx.min()}, {batch_idx.max()}]"
        )
    if data.n != state.n or data.d != state.d or data.k != state.k:
        raise DimensionMismatch(
            f"dataset (N={data.n}, D={data.d}, K={data.k}) does not match model "
            f"(N={state.n}, D={state.d}, K={state.k})"
        )
    rng = np.random.default_rng(rng_seed)
    eps_x, f_eps = draw_elbo_noise(
        rng, batch_idx.size, state.config.q, data.k, state.config.mc_samples_discrete
    )
    terms = _elbo_nodes(
        make_leaves(state_to_arrays(state)),
        data.y_continuous[batch_idx],
        data.y_discrete[batch_idx],
        batch_idx,
        eps_x,
        f_eps,
        scale_factor=data.n / batch_idx.size,
    )
    values = {name: float(node.value) for name, node in terms.items()}
    if not all(np.isfinite(v) for v in values.values()):
        raise NumericalError(f"non-finite objective terms: {values}")
    return ElboBreakdown(**values)


def generate(state: ModelState, x, rng_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Run the generative path at latent points x.

    Draws function values from both sparse-GP marginals, adds observation
    noise on the continuous path, and squeezes the discrete path through the
    sigmoid. Returns (y_continuous, label probabilities per class column).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[1] != state.config.q:
        raise DimensionMismatch(
            f"x has {x.shape[1]} columns but the model latent dimension is {state.config.q}"
        )
    rng = np.random.default_rng(rng_seed)
    marg_n = svgp_marginal(x, state.inducing_cont, state.kernel_cont)
    f_n = marg_n.mean + np.sqrt(marg_n.variance) * rng.standard_normal(marg_n.mean.shape)
    y_cont = f_n + state.noise.sigma * rng.standard_normal(f_n.shape)
    marg_s = svgp_marginal(x, state.inducing_disc, state.kernel_disc)
    f_s = marg_s.mean + np.sqrt(marg_s.variance) * rng.standard_normal(marg_s.mean.shape)
    return y_cont, expit(f_s)
