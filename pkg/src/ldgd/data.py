"""Dataset ingestion, feature selection, synthetic benchmarks, and CV splits.

File format: delimited text with a header row, one trial per row —
``trial_id,label,<feature columns...>`` — plus a JSON sidecar
(``<stem>.meta.json``) recording the class count, feature names, and
provenance. Missing values are forbidden; the loader reports offending rows
and columns by name.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from ._io import write_text_atomic
from .errors import ValidationError
from .model import Dataset


@dataclass
class FeatureRanking:
    """Point-biserial score per feature and the descending-|r| permutation."""

    scores: np.ndarray
    order: np.ndarray

    def top(self, k: int) -> np.ndarray:
        return self.order[:k]


@dataclass
class SynthConfig:
    """Synthetic ground-truth benchmark settings."""

    n: int
    d: int
    k: int = 2
    q_true: int = 2
    noise_sd: float = 0.3
    class_separation: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.q_true > self.d:
            raise ValidationError(f"q_true = {self.q_true} exceeds d = {self.d}")
        if self.k < 2:
            raise ValidationError("k must be at least 2")
        if self.noise_sd < 0.0 or self.class_separation <= 0.0:
            raise ValidationError("noise_sd must be >= 0 and class_separation > 0")
        if self.n < 2 or self.d < 1 or self.q_true < 1:
            raise ValidationError("n, d, and q_true must be positive (n >= 2)")


@dataclass
class FoldSplit:
    """Fold index per trial, values in [0, k_folds)."""

    assignments: np.ndarray
    k_folds: int

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)


def point_biserial(feature, labels) -> float:
    """Point-biserial correlation between a feature and binary labels.

    r = (mean_1 - mean_0) / s_N * sqrt(n0 * n1 / N^2) with s_N the population
    standard deviation. Degenerate inputs (constant feature, single class)
    score 0 with a warning so batch ranking survives dead features.
    """
    feature = np.asarray(feature, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if feature.shape[0] != labels.shape[0]:
        raise ValidationError(
            f"feature has {feature.shape[0]} values for {labels.shape[0]} labels"
        )
    mask1 = labels != 0
    n1 = int(mask1.sum())
    n0 = int(labels.shape[0] - n1)
    if n0 == 0 or n1 == 0:
        warnings.warn("single-class labels; point-biserial set to 0", stacklevel=2)
        return 0.0
    s_n = float(feature.std())
    if s_n == 0.0:
        warnings.warn("constant feature; point-biserial set to 0", stacklevel=2)
        return 0.0
    n = feature.shape[0]
    mean1 = float(feature[mask1].mean())
    mean0 = float(feature[~mask1].mean())
    return (mean1 - mean0) / s_n * float(np.sqrt(n0 * n1 / n**2))


def rank_features(data: Dataset) -> FeatureRanking:
    """Score every feature column; |r| descending, ties to the lower index."""
    if data.k != 2:
        raise ValidationError(
            "point-biserial selection supports binary labels only (K = 2)"
        )
    labels = data.labels() != 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        scores = np.array(
            [point_biserial(data.y_continuous[:, j], labels) for j in range(data.d)]
        )
    order = np.argsort(-np.abs(scores), kind="stable")
    return FeatureRanking(scores=scores, order=order)


def select_top_k(data: Dataset, k_features: int) -> tuple[Dataset, FeatureRanking]:
    """Keep the k most label-correlated feature columns (original order).

    The ranking carries the scores of all original columns; the reduced
    dataset keeps the selected columns in their original positions so that
    ``k_features == D`` is the identity.
    """
    if not (1 <= k_features <= data.d):
        raise ValidationError(f"k_features = {k_features} must lie in [1, {data.d}]")
    ranking = rank_features(data)
    selected = np.sort(ranking.top(k_features))
    names = (
        [data.feature_names[j] for j in selected] if data.feature_names is not None else None
    )
    reduced = Dataset(
        data.y_continuous[:, selected].copy(),
        data.y_discrete.copy(),
        feature_names=names,
    )
    return reduced, ranking


def synth_generate(cfg: SynthConfig) -> tuple[Dataset, np.ndarray]:
    """Draw a ground-truth benchmark: latent rows, labels, and features.

    Latents are standard normal. Labels follow sigmoid(class_separation *
    w . x) Bernoulli draws, with w a random direction of fixed norm
    sqrt(2 * q_true) so the label noise level is governed by
    ``class_separation`` rather than by the luck of the weight draw. Features
    are sinusoid-plus-linear blends of the latent with additive noise, which
    keeps raw column variances near 1.5.

    Unlike lab datasets, where low-confidence trials get filtered out
    upstream, every generated trial is kept: the labels are exact draws from
    the generative model, so there is no "incorrect response" analog to
    exclude.
    """
    rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal((cfg.n, cfg.q_true))

    w_dir = rng.standard_normal((cfg.q_true, cfg.k if cfg.k > 2 else 1))
    w_dir /= np.linalg.norm(w_dir, axis=0, keepdims=True)
    w = np.sqrt(2.0 * cfg.q_true) * w_dir

    v = rng.standard_normal((cfg.d, cfg.q_true))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=cfg.d)
    u = rng.standard_normal((cfg.d, cfg.q_true))
    if cfg.q_true > 1:
        # Orthogonalize the linear direction against the sinusoid direction so
        # the two blend terms stay uncorrelated and column variances stay put.
        u -= (u * v).sum(axis=1, keepdims=True) * v
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    noise = rng.standard_normal((cfg.n, cfg.d))
    features = np.sin(x @ v.T + phases) + x @ u.T + cfg.noise_sd * noise

    if cfg.k == 2:
        p_one = expit(cfg.class_separation * (x @ w[:, 0]))
        labels = (rng.random(cfg.n) < p_one).astype(int)
    else:
        logits = cfg.class_separation * (x @ w)
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        cumulative = probs.cumsum(axis=1)
        draws = rng.random((cfg.n, 1))
        labels = (draws >= cumulative).sum(axis=1)

    names = [f"feat_{j:03d}" for j in range(cfg.d)]
    dataset = Dataset.from_labels(features, labels, k=cfg.k, feature_names=names)
    return dataset, x


def kfold_split(labels, k_folds: int, seed: int) -> FoldSplit:
    """Stratified, seeded, deterministic k-fold assignment.

    Each class is dealt (shuffled) to the currently smallest fold, so fold
    sizes differ by at most one and per-fold class counts stay within one of
    the stratified ideal. A class smaller than ``k_folds`` is an error.
    """
    labels = np.asarray(labels, dtype=int).ravel()
    n = labels.shape[0]
    if not (2 <= k_folds <= n):
        raise ValidationError(f"k_folds = {k_folds} must lie in [2, {n}]")
    classes, counts = np.unique(labels, return_counts=True)
    small = classes[counts < k_folds]
    if small.size:
        raise ValidationError(
            f"class {int(small[0])} has fewer members ({int(counts[classes == small[0]][0])}) "
            f"than k_folds = {k_folds}"
        )
    rng = np.random.default_rng(seed)
    assignments = np.full(n, -1, dtype=int)
    fold_sizes = np.zeros(k_folds, dtype=int)
    for cls in classes:
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        for i in idx:
            fold = int(np.argmin(fold_sizes))  # ties resolve to the lowest fold
            assignments[i] = fold
            fold_sizes[fold] += 1
    return FoldSplit(assignments=assignments, k_folds=k_folds)


def plain_kfold_split(n: int, k_folds: int, seed: int) -> FoldSplit:
    """Unstratified fallback for degenerate configs (e.g. leave-one-out)."""
    if not (2 <= k_folds <= n):
        raise ValidationError(f"k_folds = {k_folds} must lie in [2, {n}]")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    assignments = np.empty(n, dtype=int)
    assignments[order] = np.arange(n) % k_folds
    return FoldSplit(assignments=assignments, k_folds=k_folds)


@dataclass
class FeatureScaler:
    """Per-column z-scoring with statistics fit on training data only."""

    means: np.ndarray
    stds: np.ndarray

    @classmethod
    def fit(cls, features) -> "FeatureScaler":
        features = np.asarray(features, dtype=float)
        return cls(
            means=features.mean(axis=0),
            stds=np.maximum(features.std(axis=0), 1e-12),
        )

    def transform(self, features) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        if features.shape[1] != self.means.shape[0]:
            raise ValidationError(
                f"scaler was fit on {self.means.shape[0]} features, got "
                f"{features.shape[1]}"
            )
        return (features - self.means) / self.stds


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def save_dataset(path, data: Dataset, provenance: str = "") -> None:
    """Write the delimited table and its metadata sidecar."""
    path = Path(path)
    names = data.feature_names or [f"feat_{j:03d}" for j in range(data.d)]
    labels = data.labels()
    lines = ["trial_id,label," + ",".join(names)]
    for i in range(data.n):
        values = ",".join(repr(float(v)) for v in data.y_continuous[i])
        lines.append(f"{i},{int(labels[i])},{values}")
    write_text_atomic(path, "\n".join(lines) + "\n")
    meta = {
        "version": 1,
        "k": data.k,
        "feature_names": names,
        "provenance": provenance,
    }
    write_text_atomic(_sidecar_path(path), json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_dataset(path, k: int | None = None) -> Dataset:
    """Read the delimited table; validates labels, finiteness, and shape.

    The class count comes from (in order): the ``k`` argument, the metadata
    sidecar, or ``max(label) + 1``.
    """
    path = Path(path)
    sidecar = _sidecar_path(path)
    meta = None
    if sidecar.exists():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        if k is None:
            k = int(meta["k"])

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        if len(header) < 3 or header[0] != "trial_id" or header[1] != "label":
            raise ValidationError(
                f"{path}: header must start with 'trial_id,label' and carry at "
                "least one feature column"
            )
        names = header[2:]
        rows = []
        labels = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(
                    f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}"
                )
            try:
                labels.append(int(row[1]))
            except ValueError:
                raise ValidationError(
                    f"{path}:{lineno}: label {row[1]!r} is not an integer"
                ) from None
            values = np.empty(len(names))
            for j, text in enumerate(row[2:]):
                try:
                    values[j] = float(text)
                except ValueError:
                    raise ValidationError(
                        f"{path}:{lineno}: column {names[j]!r} value {text!r} is not a number"
                    ) from None
                if not np.isfinite(values[j]):
                    raise ValidationError(
                        f"{path}:{lineno}: column {names[j]!r} holds a non-finite value"
                    )
            rows.append(values)

    if not rows:
        raise ValidationError(f"{path}: no data rows (header only)")
    labels = np.asarray(labels)
    n_classes = int(labels.max()) + 1 if k is None else int(k)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValidationError(
            f"{path}: labels must lie in [0, {n_classes}); found "
            f"[{labels.min()}, {labels.max()}]"
        )
    return Dataset.from_labels(np.vstack(rows), labels, k=n_classes, feature_names=names)


def save_latents(path, latents: np.ndarray) -> None:
    """Ground-truth latent table: trial_id plus one column per dimension."""
    latents = np.asarray(latents, dtype=float)
    header = "trial_id," + ",".join(f"z_{j}" for j in range(latents.shape[1]))
    lines = [header]
    for i, row in enumerate(latents):
        lines.append(f"{i}," + ",".join(repr(float(v)) for v in row))
    write_text_atomic(path, "\n".join(lines) + "\n")
