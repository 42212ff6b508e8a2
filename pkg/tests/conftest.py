"""Shared builders for model-level tests."""

import numpy as np

from ldgd.kernels import KernelParams
from ldgd.model import (
    Dataset,
    InducingVariational,
    LatentVariational,
    ModelConfig,
    ModelState,
    NoiseParams,
)


def random_state(n=8, d=3, k=2, m=4, q=2, seed=0, spread=0.5) -> ModelState:
    """A sane random model state for structural tests."""
    rng = np.random.default_rng(seed)
    s_raw_cont = np.zeros((d, m, m))
    s_raw_disc = np.zeros((k, m, m))
    for raw in (s_raw_cont, s_raw_disc):
        raw += np.tril(rng.standard_normal(raw.shape) * 0.1, k=-1)
        idx = np.arange(m)
        raw[:, idx, idx] = rng.uniform(-2.0, -0.5, size=(raw.shape[0], m))
    return ModelState(
        latent=LatentVariational(
            rng.standard_normal((n, q)) * spread,
            rng.uniform(-2.5, -1.0, size=(n, q)),
        ),
        inducing_cont=InducingVariational(
            rng.standard_normal((m, q)), rng.standard_normal((m, d)) * spread, s_raw_cont
        ),
        inducing_disc=InducingVariational(
            rng.standard_normal((m, q)), rng.standard_normal((m, k)) * spread, s_raw_disc
        ),
        kernel_cont=KernelParams(rng.uniform(-0.3, 0.3, size=q), rng.uniform(-0.2, 0.2)),
        kernel_disc=KernelParams(rng.uniform(-0.3, 0.3, size=q), rng.uniform(-0.2, 0.2)),
        noise=NoiseParams(rng.uniform(-1.0, -0.3, size=d)),
        config=ModelConfig(q=q, m=m, mc_samples_discrete=8, seed=seed),
    )


def random_dataset(n=8, d=3, k=2, seed=0) -> Dataset:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, k, size=n)
    # Ensure both ends of the class range are present.
    labels[0] = 0
    labels[1] = k - 1
    return Dataset.from_labels(rng.standard_normal((n, d)), labels, k=k)
