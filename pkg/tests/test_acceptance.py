"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criterion 1 records that results on the lab EEG recordings this toolkit was
designed around are out of scope (those recordings are not distributed);
criteria 2-8 are the property-based substitutes that gate this artifact.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from conftest import random_dataset, random_state
from ldgd.cli import main
from ldgd.data import FeatureScaler, load_dataset, select_top_k
from ldgd.kernels import KernelParams, gram
from ldgd.linalg import kl_full_vs_prior
from ldgd.model import (
    LOG_2PI,
    Dataset,
    InducingVariational,
    MarginalGaussians,
    NoiseParams,
    elbo,
    ell_continuous,
    ell_discrete,
    svgp_marginal,
)
from ldgd.training import TrainConfig, fit, init_model

BENCH_TRAIN_ITERS = 1500


def _report(number: int, description: str):
    """Context manager printing one PASS/FAIL line per criterion."""

    class _Reporter:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            status = "PASS" if exc_type is None else "FAIL"
            print(f"\nACCEPTANCE {number}: {status} - {description}")
            return False

    return _Reporter()


def _write_benchmark_config(path: Path, outdir: Path) -> Path:
    text = f"""
[paths]
dataset = {outdir}/dataset.csv
model_out = {outdir}/model.json
model_in = {outdir}/model.json
output_dir = {outdir}

[model]
q = 8
m = 15

[train]
max_iters = {BENCH_TRAIN_ITERS}
learning_rate = 0.01
seed = 0

[decode]
iterations = 300
learning_rate = 0.05
n_samples = 100
seed = 0

[cv]
k_folds = 5
seed = 0

[features]
k_features = 25

[synth]
n = 150
d = 25
k = 2
q_true = 2
noise_sd = 0.3
class_separation = 3.0
seed = 7
"""
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    """Run the acceptance benchmark once: synth, cv, and a full-data train."""
    outdir = tmp_path_factory.mktemp("bench")
    config = _write_benchmark_config(outdir / "bench.ini", outdir)

    started = time.perf_counter()
    assert main(["synth", "--config", str(config)]) == 0
    assert main(["cv", "--config", str(config)]) == 0
    cv_runtime = time.perf_counter() - started

    assert main(["train", "--config", str(config)]) == 0

    summary_lines = (outdir / "cv_summary.csv").read_text().strip().splitlines()
    summary = dict(zip(summary_lines[0].split(","), summary_lines[1].split(",")))
    relevance_lines = (outdir / "ard_relevance.csv").read_text().strip().splitlines()
    relevance_disc = np.array([float(line.split(",")[1]) for line in relevance_lines[1:]])
    return {
        "outdir": outdir,
        "config": config,
        "cv_runtime": cv_runtime,
        "summary": summary,
        "relevance_disc": relevance_disc,
    }


def test_criterion_1_source_dataset_out_of_scope():
    with _report(1, "per-participant results on the undistributed lab EEG "
                    "recordings stay out of scope; the synthetic ground-truth "
                    "benchmark stands in"):
        # The lab recordings are not distributed, so nothing in this package
        # claims per-participant numbers; the substitute benchmark machinery
        # must exist instead.
        from ldgd.data import synth_generate, SynthConfig

        data, latents = synth_generate(SynthConfig(n=20, d=5, seed=0))
        assert latents.shape == (20, 2)
        assert data.n == 20


def test_criterion_2_synthetic_decode_benchmark(benchmark):
    with _report(2, "5-fold CV on the seeded benchmark reaches accuracy and "
                    "macro-F >= 0.85 in under 10 minutes"):
        accuracy = float(benchmark["summary"]["accuracy_mean"])
        macro_f = float(benchmark["summary"]["macro_f_mean"])
        assert int(benchmark["summary"]["folds_completed"]) == 5
        assert accuracy >= 0.85, f"aggregate accuracy {accuracy}"
        assert macro_f >= 0.85, f"aggregate macro-F {macro_f}"
        assert benchmark["cv_runtime"] < 600.0, f"runtime {benchmark['cv_runtime']:.1f}s"


def test_criterion_3_ard_dimension_discovery(benchmark):
    with _report(3, "discrete-path ARD relevance: top-2 dimensions >= 5x the "
                    "median of the remaining 6"):
        relevance = np.sort(benchmark["relevance_disc"])[::-1]
        assert relevance.shape[0] == 8
        top_two = relevance[:2]
        median_rest = np.median(relevance[2:])
        assert np.all(top_two >= 5.0 * median_rest), (
            f"top2={top_two}, median rest={median_rest}"
        )


def test_criterion_4_gradient_correctness(tmp_path):
    with _report(4, "gradient check passes at 1e-4 on 10 seeded tiny models "
                    "in under 30 seconds"):
        outdir = tmp_path / "gradcheck"
        outdir.mkdir()
        config = outdir / "g.ini"
        config.write_text(f"[paths]\noutput_dir = {outdir}\n", encoding="utf-8")
        started = time.perf_counter()
        assert main(["gradcheck", "--config", str(config)]) == 0
        runtime = time.perf_counter() - started
        report_lines = (outdir / "gradcheck_report.csv").read_text().strip().splitlines()
        rows = [line.split(",") for line in report_lines[1:]]
        assert len({row[0] for row in rows}) == 10  # 10 seeds
        assert all(row[3] == "ok" for row in rows)
        assert max(float(row[2]) for row in rows) <= 1e-4
        assert runtime < 30.0, f"runtime {runtime:.1f}s"


def test_criterion_5_elbo_structural_invariants(benchmark):
    with _report(5, "breakdown identity exact to 1e-10 and KL terms >= 0 on "
                    "1000 random states; benchmark fit never loses ELBO"):
        rng = np.random.default_rng(0)
        for i in range(1000):
            st = random_state(
                n=6, d=2, k=2, m=3, q=2, seed=int(rng.integers(1 << 31)), spread=1.0
            )
            ds = random_dataset(n=6, d=2, k=2, seed=i)
            bd = elbo(st, ds, np.arange(6), rng_seed=i)
            recomposed = (
                bd.ell_disc + bd.ell_cont - bd.kl_u_disc - bd.kl_u_cont - bd.kl_x
            )
            assert abs(bd.total - recomposed) <= 1e-10
            assert bd.kl_u_disc >= 0.0 and bd.kl_u_cont >= 0.0 and bd.kl_x >= 0.0

        # Full-batch fixed-seed ELBO at the fitted state >= at the init state.
        data = load_dataset(benchmark["outdir"] / "dataset.csv")
        reduced, _ = select_top_k(data, 25)
        scaler = FeatureScaler.fit(reduced.y_continuous)
        standardized = Dataset(scaler.transform(reduced.y_continuous), data.y_discrete)
        cfg = TrainConfig(max_iters=BENCH_TRAIN_ITERS, learning_rate=0.01, seed=0)
        init = init_model(standardized, q=8, m=15, seed=0)
        full = np.arange(standardized.n)
        initial = elbo(init, standardized, full, cfg.seed).total
        fitted, _ = fit(standardized, cfg, init=init)
        final = elbo(fitted, standardized, full, cfg.seed).total
        assert final >= initial


def test_criterion_6_oracle_equivalences():
    with _report(6, "sparse marginals, Gaussian ELL, full-Gaussian KL, and "
                    "Bernoulli ELL all match their independent oracles"):
        rng = np.random.default_rng(123)

        # svgp_marginal vs dense joint-Gaussian conditioning, 100 instances.
        for _ in range(100):
            q = int(rng.integers(1, 4))
            m = int(rng.integers(2, 6))
            b = int(rng.integers(1, 5))
            c = int(rng.integers(1, 4))
            params = KernelParams(rng.uniform(-0.5, 0.5, size=q), rng.uniform(-0.5, 0.5))
            z = rng.standard_normal((m, q)) * 1.5
            factors = np.tril(rng.standard_normal((c, m, m)) * 0.3)
            idx = np.arange(m)
            factors[:, idx, idx] = np.abs(factors[:, idx, idx]) + 0.4
            mvals = rng.standard_normal((m, c))
            ind = InducingVariational.from_factors(z, mvals, factors)
            x = rng.standard_normal((b, q))
            marg = svgp_marginal(x, ind, params)
            kmm = gram(z, z, params).values
            kxm = gram(x, z, params).values
            kxx = gram(x, x, params).values
            kmm_inv = np.linalg.inv(kmm)
            for ci in range(c):
                s = factors[ci] @ factors[ci].T
                mean = kxm @ kmm_inv @ mvals[:, ci]
                cov = kxx - kxm @ kmm_inv @ kxm.T + kxm @ kmm_inv @ s @ kmm_inv @ kxm.T
                assert np.allclose(marg.mean[:, ci], mean, atol=1e-8)
                assert np.allclose(marg.variance[:, ci], np.diag(cov), atol=1e-8)

        # Closed-form Gaussian ELL vs a 1e6-sample MC estimate.
        marg = MarginalGaussians(rng.standard_normal((1, 1)), np.array([[0.6]]))
        y = rng.standard_normal((1, 1))
        noise = NoiseParams(np.array([-0.1]))
        closed = ell_continuous(y, marg, noise)
        n_samples = 1_000_000
        f_eps = rng.standard_normal((n_samples, 1, 1))
        f = marg.mean + np.sqrt(marg.variance) * f_eps
        sigma = noise.sigma[0]
        per_sample = (-0.5 * LOG_2PI - np.log(sigma) - (y - f) ** 2 / (2 * sigma**2))[:, 0, 0]
        se = per_sample.std(ddof=1) / np.sqrt(n_samples)
        assert abs(closed - per_sample.mean()) < 3.0 * se

        # Full-Gaussian KL vs a 1e6-sample MC estimate.
        b1 = rng.standard_normal((3, 3))
        b2 = rng.standard_normal((3, 3))
        s_mat = b1 @ b1.T + 0.5 * np.eye(3)
        k_mat = b2 @ b2.T + 0.5 * np.eye(3)
        m_vec = rng.standard_normal(3)
        draws = rng.multivariate_normal(m_vec, s_mat, size=n_samples)
        diffs = stats.multivariate_normal(m_vec, s_mat).logpdf(draws) - stats.multivariate_normal(
            np.zeros(3), k_mat
        ).logpdf(draws)
        se_kl = diffs.std(ddof=1) / np.sqrt(n_samples)
        assert abs(kl_full_vs_prior(m_vec, s_mat, k_mat) - diffs.mean()) < 3.0 * se_kl

        # Bernoulli ELL vs 50-node Gauss-Hermite quadrature (scalar instances).
        for _ in range(3):
            y_disc = np.array([[1.0, 0.0]])
            mean = rng.standard_normal((1, 2))
            var = rng.uniform(0.2, 2.0, size=(1, 2))
            marg_d = MarginalGaussians(mean, var)
            f_eps_d = rng.standard_normal((n_samples, 1, 2))
            mc = ell_discrete(y_disc, marg_d, f_eps_d)
            f_d = mean + np.sqrt(var) * f_eps_d
            per = -(y_disc * np.logaddexp(0.0, -f_d)
                    + (1.0 - y_disc) * np.logaddexp(0.0, f_d)).sum(axis=(1, 2))
            se_d = per.std(ddof=1) / np.sqrt(n_samples)
            nodes, weights = np.polynomial.hermite.hermgauss(50)
            quad = 0.0
            for kcol in range(2):
                fvals = mean[0, kcol] + np.sqrt(2.0 * var[0, kcol]) * nodes
                loglik = -(y_disc[0, kcol] * np.logaddexp(0.0, -fvals)
                           + (1.0 - y_disc[0, kcol]) * np.logaddexp(0.0, fvals))
                quad += float(weights @ loglik) / np.sqrt(np.pi)
            assert abs(mc - quad) < 3.0 * se_d


def test_criterion_7_label_blind_decoding(benchmark):
    with _report(7, "shuffling test labels leaves the decode predictions file "
                    "byte-identical"):
        outdir = benchmark["outdir"]
        config = str(benchmark["config"])
        assert main(["decode", "--config", config]) == 0
        baseline = (outdir / "predictions.csv").read_bytes()

        dataset_path = outdir / "dataset.csv"
        original = dataset_path.read_bytes()
        try:
            lines = dataset_path.read_text().strip().splitlines()
            rows = [line.split(",") for line in lines[1:]]
            labels = [row[1] for row in rows]
            shuffled = labels[::-1]
            for row, lab in zip(rows, shuffled):
                row[1] = lab
            dataset_path.write_text(
                "\n".join([lines[0]] + [",".join(row) for row in rows]) + "\n"
            )
            assert main(["decode", "--config", config]) == 0
            assert (outdir / "predictions.csv").read_bytes() == baseline
        finally:
            dataset_path.write_bytes(original)


def test_criterion_8_cli_determinism(tmp_path):
    with _report(8, "every subcommand writes byte-identical outputs across two "
                    "seeded runs"):
        outdir = tmp_path / "det"
        outdir.mkdir()
        config = outdir / "det.ini"
        config.write_text(
            f"""
[paths]
dataset = {outdir}/dataset.csv
model_out = {outdir}/model.json
model_in = {outdir}/model.json
output_dir = {outdir}

[model]
q = 3
m = 8
mc_samples_discrete = 8

[train]
max_iters = 60
learning_rate = 0.02
seed = 1

[decode]
iterations = 40
n_samples = 40
seed = 2

[cv]
k_folds = 3
seed = 3

[features]
k_features = 6

[synth]
n = 48
d = 6
k = 2
q_true = 2
noise_sd = 0.2
class_separation = 3.0
seed = 5

[gradcheck]
seeds = 2
""",
            encoding="utf-8",
        )

        def snapshot():
            return {
                p.name: p.read_bytes()
                for p in sorted(outdir.iterdir())
                if p.suffix in (".csv", ".json", ".png", ".ini") and p != config
            }

        # Commands ordered so inputs exist when needed; each runs twice.
        for command in ("synth", "train", "decode", "infer", "eval", "gradcheck", "cv"):
            assert main([command, "--config", str(config)]) == 0, command
            first = snapshot()
            assert main([command, "--config", str(config)]) == 0, command
            second = snapshot()
            assert first.keys() == second.keys()
            for name in first:
                assert first[name] == second[name], f"{command}: {name} differs"
