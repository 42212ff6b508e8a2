"""Test-point latent inference and label decoding against a frozen model.

Both operations optimize only the test points' variational parameters
(means and scales); every model parameter stays constant. Inference uses the
full objective (continuous + discrete likelihood terms); decoding drops the
label term entirely and never receives label input, matching the situation
where the labels are the thing being predicted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .errors import DimensionMismatch, NumericalError, ValidationError
from .linalg import single_thread_blas
from .model import (
    ModelState,
    _bernoulli_ell_nodes,
    _gaussian_ell_nodes,
    _kl_diag_nodes,
    _path_nodes,
    svgp_marginal,
)
from .training import AdamMoments, TrainConfig, adam_step

INIT_SCALE = 0.1


@dataclass
class TestLatent:
    """Variational posterior over test-point latents for a frozen model."""

    __test__ = False  # not a pytest class, despite the name

    mu_star: np.ndarray
    log_scale_star: np.ndarray

    def __post_init__(self):
        self.mu_star = np.asarray(self.mu_star, dtype=float)
        self.log_scale_star = np.asarray(self.log_scale_star, dtype=float)
        if self.mu_star.ndim != 2 or self.mu_star.shape != self.log_scale_star.shape:
            raise ValidationError(
                f"mu_star {self.mu_star.shape} and log_scale_star "
                f"{self.log_scale_star.shape} must be matching 2-D arrays"
            )

    @property
    def scale_star(self) -> np.ndarray:
        return np.exp(self.log_scale_star)


@dataclass
class DecodeResult:
    """Per-trial class probabilities, hard predictions, and the latent used."""

    class_probs: np.ndarray
    predicted: np.ndarray
    latent: TestLatent

    def __post_init__(self):
        self.class_probs = np.asarray(self.class_probs, dtype=float)
        self.predicted = np.asarray(self.predicted, dtype=int)
        rowsums = self.class_probs.sum(axis=1)
        if np.any(np.abs(rowsums - 1.0) > 1e-9):
            raise ValidationError("class probability rows must sum to 1")
        if np.any((self.class_probs < 0.0) | (self.class_probs > 1.0)):
            raise ValidationError("class probabilities must lie in [0, 1]")

    def to_rows(self, trial_ids=None, truth=None) -> tuple[list[str], list[list]]:
        """Delimited-table form: trial id, per-class probabilities, predicted
        [, truth when provided]."""
        n, k = self.class_probs.shape
        ids = np.arange(n) if trial_ids is None else np.asarray(trial_ids, dtype=int)
        if ids.shape[0] != n:
            raise ValidationError(f"{ids.shape[0]} trial ids for {n} rows")
        header = ["trial_id"] + [f"prob_{c}" for c in range(k)] + ["predicted"]
        if truth is not None:
            truth = np.asarray(truth, dtype=int)
            if truth.shape[0] != n:
                raise ValidationError(f"{truth.shape[0]} truth labels for {n} rows")
            header.append("truth")
        rows = []
        for i in range(n):
            row = [int(ids[i]), *[float(p) for p in self.class_probs[i]],
                   int(self.predicted[i])]
            if truth is not None:
                row.append(int(truth[i]))
            rows.append(row)
        return header, rows


@dataclass(frozen=True)
class Metrics:
    """Accuracy plus per-class and macro-averaged F-measure."""

    accuracy: float
    per_class_f: tuple[float, ...]
    macro_f: float


def _model_leaves(state: ModelState, path: str) -> dict[str, ad.Var]:
    ind = state.inducing_cont if path == "cont" else state.inducing_disc
    kern = state.kernel_cont if path == "cont" else state.kernel_disc
    return {
        "z": ad.Var(ind.z),
        "m": ad.Var(ind.m),
        "s_raw": ad.Var(ind.s_raw),
        "log_ls": ad.Var(kern.log_lengthscales),
        "log_var": ad.Var(np.asarray(kern.log_signal_variance)),
    }


def _objective_nodes(
    state_leaves: dict[str, dict[str, ad.Var]],
    log_sigma: ad.Var,
    mu: ad.Var,
    log_scale: ad.Var,
    y_cont: np.ndarray,
    y_disc: np.ndarray | None,
    eps_x: np.ndarray,
    f_eps: np.ndarray | None,
) -> ad.Var:
    """Test objective: data terms minus the latent KL (labels optional)."""
    x = mu + ad.exp(log_scale) * eps_x
    cont = state_leaves["cont"]
    mean_n, var_n, _ = _path_nodes(
        x, cont["z"], cont["m"], cont["s_raw"], cont["log_ls"], cont["log_var"]
    )
    objective = _gaussian_ell_nodes(y_cont, mean_n, var_n, log_sigma)
    if y_disc is not None:
        disc = state_leaves["disc"]
        mean_s, var_s, _ = _path_nodes(
            x, disc["z"], disc["m"], disc["s_raw"], disc["log_ls"], disc["log_var"]
        )
        objective = objective + _bernoulli_ell_nodes(y_disc, mean_s, var_s, f_eps)
    return objective - _kl_diag_nodes(mu, log_scale)


def _initial_latent(
    model: ModelState,
    y_cont_star: np.ndarray,
    init_mode: str,
    train_features: np.ndarray | None,
    rng: np.random.Generator,
) -> TestLatent:
    n_star = y_cont_star.shape[0]
    q = model.config.q
    if init_mode == "nearest":
        if train_features is None:
            raise ValidationError(
                "nearest-neighbor initialization needs train_features; "
                "use init_mode='random' otherwise"
            )
        train_features = np.asarray(train_features, dtype=float)
        if train_features.shape != (model.n, model.d):
            raise DimensionMismatch(
                f"train_features has shape {train_features.shape}; expected "
                f"({model.n}, {model.d})"
            )
        d2 = ((y_cont_star[:, None, :] - train_features[None, :, :]) ** 2).sum(axis=2)
        mu0 = model.latent.mu[np.argmin(d2, axis=1)].copy()
    elif init_mode == "random":
        mu0 = rng.standard_normal((n_star, q))
    elif init_mode == "zero":
        mu0 = np.zeros((n_star, q))
    else:
        raise ValidationError(f"unknown init_mode {init_mode!r}")
    return TestLatent(mu0, np.full((n_star, q), np.log(INIT_SCALE)))


def _optimize_test_latent(
    model: ModelState,
    y_cont_star: np.ndarray,
    y_disc_star: np.ndarray | None,
    opt: TrainConfig,
    init_mode: str,
    train_features: np.ndarray | None,
) -> TestLatent:
    y_cont_star = np.asarray(y_cont_star, dtype=float)
    if y_cont_star.ndim != 2 or y_cont_star.shape[1] != model.d:
        raise DimensionMismatch(
            f"y_cont_star has shape {y_cont_star.shape}; the model expects "
            f"(*, {model.d})"
        )
    if y_disc_star is not None:
        y_disc_star = np.asarray(y_disc_star, dtype=float)
        if y_disc_star.shape != (y_cont_star.shape[0], model.k):
            raise DimensionMismatch(
                f"y_disc_star has shape {y_disc_star.shape}; expected "
                f"({y_cont_star.shape[0]}, {model.k})"
            )

    rng = np.random.default_rng(opt.seed)
    latent = _initial_latent(model, y_cont_star, init_mode, train_features, rng)
    if opt.max_iters == 0:
        return latent

    n_star, q = latent.mu_star.shape
    state_leaves = {"cont": _model_leaves(model, "cont")}
    if y_disc_star is not None:
        state_leaves["disc"] = _model_leaves(model, "disc")
    log_sigma = ad.Var(model.noise.log_sigma)

    mu = latent.mu_star.copy()
    log_scale = latent.log_scale_star.copy()
    theta = np.concatenate([mu.ravel(), log_scale.ravel()])
    moments = AdamMoments.zeros(theta.size)
    half = n_star * q

    with single_thread_blas():
        for t in range(1, opt.max_iters + 1):
            eps_x = rng.standard_normal((n_star, q))
            f_eps = (
                rng.standard_normal((opt.mc_samples_discrete, n_star, model.k))
                if y_disc_star is not None
                else None
            )
            mu_leaf = ad.Var(theta[:half].reshape(n_star, q))
            ls_leaf = ad.Var(theta[half:].reshape(n_star, q))
            objective = _objective_nodes(
                state_leaves, log_sigma, mu_leaf, ls_leaf, y_cont_star, y_disc_star, eps_x, f_eps
            )
            if not np.isfinite(objective.value):
                raise NumericalError(f"non-finite test objective at iteration {t}")
            ad.backward(objective)
            grad = np.concatenate([mu_leaf.grad.ravel(), ls_leaf.grad.ravel()])
            theta, moments = adam_step(theta, -grad, moments, t, opt)

    return TestLatent(theta[:half].reshape(n_star, q), theta[half:].reshape(n_star, q))


def objective_at_latent(
    model: ModelState,
    latent: TestLatent,
    y_cont_star,
    y_disc_star=None,
    n_draws: int = 64,
    seed: int = 0,
) -> float:
    """Deterministic estimate of the test objective at a given latent.

    Averages the stochastic objective over ``n_draws`` frozen draws; used to
    compare inference and decoding optima on a common footing.
    """
    y_cont_star = np.asarray(y_cont_star, dtype=float)
    rng = np.random.default_rng(seed)
    state_leaves = {"cont": _model_leaves(model, "cont")}
    if y_disc_star is not None:
        y_disc_star = np.asarray(y_disc_star, dtype=float)
        state_leaves["disc"] = _model_leaves(model, "disc")
    log_sigma = ad.Var(model.noise.log_sigma)
    n_star, q = latent.mu_star.shape
    values = []
    with single_thread_blas():
        for _ in range(n_draws):
            eps_x = rng.standard_normal((n_star, q))
            f_eps = (
                rng.standard_normal((16, n_star, model.k)) if y_disc_star is not None else None
            )
            node = _objective_nodes(
                state_leaves,
                log_sigma,
                ad.Var(latent.mu_star),
                ad.Var(latent.log_scale_star),
                y_cont_star,
                y_disc_star,
                eps_x,
                f_eps,
            )
            values.append(float(node.value))
    return float(np.mean(values))


def infer_latent(
    model: ModelState,
    y_cont_star,
    y_disc_star,
    opt: TrainConfig,
    init_mode: str = "nearest",
    train_features=None,
) -> TestLatent:
    """Posterior over test latents given both observations and labels.

    Maximizes the continuous and discrete data terms minus the latent KL over
    the test points' means and scales only; the model state is read-only.
    """
    if y_disc_star is None:
        raise ValidationError("infer_latent requires labels; use decode_latent without them")
    return _optimize_test_latent(model, y_cont_star, y_disc_star, opt, init_mode, train_features)


def decode_latent(
    model: ModelState,
    y_cont_star,
    opt: TrainConfig,
    init_mode: str = "nearest",
    train_features=None,
) -> TestLatent:
    """Posterior over test latents from continuous observations alone.

    There is no label input on this path: the objective is the continuous
    data term minus the latent KL.
    """
    return _optimize_test_latent(model, y_cont_star, None, opt, init_mode, train_features)


def normalize_bernoulli_means(bernoulli_means: np.ndarray) -> np.ndarray:
    """Rescale per-class Bernoulli means so each row is a distribution."""
    bernoulli_means = np.asarray(bernoulli_means, dtype=float)
    rowsums = bernoulli_means.sum(axis=1, keepdims=True)
    if np.any(rowsums <= 0.0):
        raise ValidationError("per-class means must have positive row sums")
    return bernoulli_means / rowsums


def predict_labels(
    model: ModelState, latent: TestLatent, n_samples: int = 100, seed: int = 0
) -> DecodeResult:
    """Push latent samples through the discrete generative path.

    Averages sigmoid(f) over ``n_samples`` reparameterized draws per class to
    estimate per-class Bernoulli means, then normalizes across classes. Ties
    in the argmax resolve to the lowest class index.
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be positive")
    if latent.mu_star.shape[1] != model.config.q:
        raise DimensionMismatch(
            f"latent has {latent.mu_star.shape[1]} columns; the model has q = "
            f"{model.config.q}"
        )
    rng = np.random.default_rng(seed)
    n_star = latent.mu_star.shape[0]
    scale = latent.scale_star
    acc = np.zeros((n_star, model.k))
    with single_thread_blas():
        for _ in range(n_samples):
            x = latent.mu_star + scale * rng.standard_normal(latent.mu_star.shape)
            marg = svgp_marginal(x, model.inducing_disc, model.kernel_disc)
            f = marg.mean + np.sqrt(marg.variance) * rng.standard_normal(marg.mean.shape)
            acc += expit(f)
    class_probs = normalize_bernoulli_means(acc / n_samples)
    predicted = np.argmax(class_probs, axis=1)
    return DecodeResult(class_probs=class_probs, predicted=predicted, latent=latent)


def evaluate(predicted, truth) -> Metrics:
    """Accuracy, per-class F-measure, and their unweighted macro average."""
    predicted = np.asarray(predicted, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if predicted.shape != truth.shape or predicted.ndim != 1:
        raise ValidationError(
            f"predicted {predicted.shape} and truth {truth.shape} must be matching vectors"
        )
    if predicted.size == 0:
        raise ValidationError("cannot evaluate empty predictions")
    k = int(max(predicted.max(), truth.max())) + 1
    accuracy = float(np.mean(predicted == truth))
    per_class = []
    for c in range(k):
        tp = float(np.sum((predicted == c) & (truth == c)))
        fp = float(np.sum((predicted == c) & (truth != c)))
        fn = float(np.sum((predicted != c) & (truth == c)))
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per_class.append(f)
    return Metrics(
        accuracy=accuracy,
        per_class_f=tuple(per_class),
        macro_f=float(np.mean(per_class)),
    )
