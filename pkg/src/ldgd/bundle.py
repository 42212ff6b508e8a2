"""Trained-model bundle: model state plus the preprocessing it was fit under.

Training and decoding run as separate invocations, so the bundle document
carries everything a later decode needs: the selected feature columns, the
training-fold standardization statistics, and the standardized training
features (used for nearest-neighbor initialization of test latents).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ._io import write_text_atomic
from .data import FeatureScaler
from .errors import ValidationError
from .model import ModelState, _decode_array, _encode_array

BUNDLE_FORMAT = "ldgd.bundle"
BUNDLE_FORMAT_VERSION = 1


@dataclass
class ModelBundle:
    state: ModelState
    feature_indices: np.ndarray
    scaler: FeatureScaler
    train_features: np.ndarray  # standardized, post-selection, (N, D_selected)

    def __post_init__(self):
        self.feature_indices = np.asarray(self.feature_indices, dtype=int)
        self.train_features = np.asarray(self.train_features, dtype=float)
        if self.train_features.shape != (self.state.n, self.state.d):
            raise ValidationError(
                f"train_features has shape {self.train_features.shape}; the model "
                f"expects ({self.state.n}, {self.state.d})"
            )
        if self.feature_indices.shape[0] != self.state.d:
            raise ValidationError(
                f"{self.feature_indices.shape[0]} selected features for a model "
                f"with D = {self.state.d}"
            )

    def transform(self, y_continuous: np.ndarray) -> np.ndarray:
        """Apply the training-fold feature selection and standardization."""
        y_continuous = np.asarray(y_continuous, dtype=float)
        if y_continuous.shape[1] <= self.feature_indices.max():
            raise ValidationError(
                f"dataset has {y_continuous.shape[1]} features but the model "
                f"selected column {int(self.feature_indices.max())}"
            )
        return self.scaler.transform(y_continuous[:, self.feature_indices])

    def to_json(self) -> str:
        doc = {
            "format": BUNDLE_FORMAT,
            "version": BUNDLE_FORMAT_VERSION,
            "model": self.state.to_document(),
            "preprocess": {
                "feature_indices": [int(i) for i in self.feature_indices],
                "means": [float(v) for v in self.scaler.means],
                "stds": [float(v) for v in self.scaler.stds],
            },
            "train_features": _encode_array(self.train_features),
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    def save(self, path) -> None:
        write_text_atomic(path, self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "ModelBundle":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format") != BUNDLE_FORMAT:
            raise ValidationError(
                f"unrecognized model bundle format: {doc.get('format')!r}"
            )
        if doc.get("version") != BUNDLE_FORMAT_VERSION:
            raise ValidationError(
                f"unsupported model bundle version: {doc.get('version')!r}"
            )
        pre = doc["preprocess"]
        return cls(
            state=ModelState.from_document(doc["model"]),
            feature_indices=np.asarray(pre["feature_indices"], dtype=int),
            scaler=FeatureScaler(
                means=np.asarray(pre["means"], dtype=float),
                stds=np.asarray(pre["stds"], dtype=float),
            ),
            train_features=_decode_array(doc["train_features"]),
        )
