"""Command-line interface.

One executable with subcommands: synth, train, infer, decode, eval,
gradcheck, cv. Everything is driven by an INI config (``--config``); a
``--seed`` flag overrides every section seed at once and ``--output-dir``
redirects the report files. Exit codes: 0 success, 1 validation error,
2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ._io import write_table_atomic, write_text_atomic
from .bundle import ModelBundle
from .config import RunConfig, check_write_conflicts, load_config
from .data import (
    FeatureScaler,
    kfold_split,
    load_dataset,
    plain_kfold_split,
    save_dataset,
    save_latents,
    select_top_k,
    synth_generate,
)
from .decoding import decode_latent, evaluate, infer_latent, predict_labels
from .errors import NumericalError, ValidationError
from .model import Dataset
from .report import (
    save_cv_figure,
    save_relevance_figure,
    save_scatter_figure,
    save_trace_figure,
)
from .training import fit, grad_check, gradcheck_instance, init_model

log = logging.getLogger("ldgd.cli")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are validation errors (exit 1)
        raise ValidationError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="ldgd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "synth": "generate a synthetic benchmark dataset with known latents",
        "train": "fit the model and write the trained bundle plus reports",
        "infer": "infer test-point latents from features and labels",
        "decode": "decode labels from features alone",
        "eval": "score a predictions table against dataset labels",
        "gradcheck": "validate analytic gradients against finite differences",
        "cv": "stratified cross-validation: select, fit, decode, score",
    }
    for name, help_text in commands.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, help="path to the INI config file")
        sp.add_argument("--seed", type=int, default=None,
                        help="override every section seed in the config")
        sp.add_argument("--output-dir", default=None, help="override [paths] output_dir")
        sp.add_argument("--verbose", action="store_true", help="log at INFO level")
        if name == "gradcheck":
            sp.add_argument(
                "--corrupt-gradient", action="store_true",
                help="perturb the analytic gradient (self-test hook; must fail)",
            )
    return parser


def _setup_logging(verbose: bool) -> None:
    level_name = os.environ.get("LDGD_LOG", "").upper()
    level = getattr(logging, level_name, None) if level_name else None
    if not isinstance(level, int):
        level = logging.INFO if verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _dump_effective_config(cfg: RunConfig, outdir: Path) -> None:
    write_text_atomic(outdir / "effective_config.ini", cfg.to_ini())


def _prepare_training_data(cfg: RunConfig, data: Dataset):
    """Feature selection (binary labels only) then train-set standardization."""
    k_features = min(cfg.get("features", "k_features"), data.d)
    if data.k == 2:
        reduced, ranking = select_top_k(data, k_features)
        indices = np.sort(ranking.top(k_features))
    else:
        log.info("feature selection skipped: point-biserial needs binary labels")
        reduced, indices = data, np.arange(data.d)
    scaler = FeatureScaler.fit(reduced.y_continuous)
    standardized = Dataset(
        scaler.transform(reduced.y_continuous),
        data.y_discrete,
        feature_names=reduced.feature_names,
    )
    return standardized, indices, scaler


def _fit_bundle(cfg: RunConfig, data: Dataset, seed_shift: int = 0):
    standardized, indices, scaler = _prepare_training_data(cfg, data)
    train_cfg = cfg.train_config()
    if seed_shift:
        train_cfg.seed = train_cfg.seed + seed_shift
    ms = cfg.values["model"]
    init = init_model(
        standardized,
        q=ms["q"],
        m=ms["m"],
        seed=train_cfg.seed,
        mc_samples_discrete=ms["mc_samples_discrete"],
        lengthscale_init=ms["lengthscale_init"],
        variance_init=ms["variance_init"],
        noise_scale=ms["noise_scale_init"],
    )
    model, trace = fit(standardized, train_cfg, init=init)
    bundle = ModelBundle(
        state=model,
        feature_indices=indices,
        scaler=scaler,
        train_features=standardized.y_continuous,
    )
    return bundle, trace


def _relevance(model) -> tuple[np.ndarray, np.ndarray]:
    return 1.0 / model.kernel_cont.lengthscales**2, 1.0 / model.kernel_disc.lengthscales**2


def cmd_synth(cfg: RunConfig, args) -> None:
    synth_cfg = cfg.synth_config()
    data, latents = synth_generate(synth_cfg)
    outdir = cfg.output_dir()
    dataset_path = cfg.path("dataset") or outdir / "dataset.csv"
    latents_path = cfg.path("latents_true") or outdir / "latents_true.csv"
    check_write_conflicts([], [dataset_path, latents_path])
    save_dataset(dataset_path, data, provenance=f"synthetic benchmark, seed={synth_cfg.seed}")
    save_latents(latents_path, latents)
    _dump_effective_config(cfg, outdir)
    print(f"wrote {dataset_path}: N={data.n}, D={data.d}, K={data.k}")


def cmd_train(cfg: RunConfig, args) -> None:
    dataset_path = cfg.require_path("dataset")
    data = load_dataset(dataset_path)
    outdir = cfg.output_dir()
    model_path = cfg.path("model_out") or outdir / "model.json"
    trace_path = outdir / "train_trace.csv"
    relevance_path = outdir / "ard_relevance.csv"
    check_write_conflicts(
        [dataset_path],
        [model_path, trace_path, relevance_path,
         outdir / "train_trace.png", outdir / "ard_relevance.png"],
    )

    bundle, trace = _fit_bundle(cfg, data)
    bundle.save(model_path)

    header, rows = trace.to_rows(include_timing=False)
    write_table_atomic(trace_path, header, rows)

    rel_cont, rel_disc = _relevance(bundle.state)
    write_table_atomic(
        relevance_path,
        ["relevance_continuous", "relevance_discrete"],
        [[float(rel_cont[i]), float(rel_disc[i])] for i in range(rel_cont.shape[0])],
    )

    totals = trace.totals()
    terms = {
        name: [getattr(b, name) for b in trace.breakdowns]
        for name in ("ell_disc", "ell_cont", "kl_u_disc", "kl_u_cont", "kl_x")
    }
    save_trace_figure(totals, terms, outdir / "train_trace.png")
    save_relevance_figure(rel_cont, rel_disc, outdir / "ard_relevance.png")
    _dump_effective_config(cfg, outdir)
    final = totals[-1] if totals.size else float("nan")
    print(f"wrote {model_path}: {len(trace)} iterations, final objective {final:.4f}")


def _load_bundle_and_features(cfg: RunConfig):
    model_path = cfg.path("model_in") or cfg.output_dir() / "model.json"
    bundle = ModelBundle.load(model_path)
    data = load_dataset(cfg.require_path("dataset"))
    features = bundle.transform(data.y_continuous)
    return bundle, data, features


def _top_dims(relevance: np.ndarray, count: int) -> np.ndarray:
    return np.argsort(-relevance, kind="stable")[: min(count, relevance.shape[0])]


def cmd_decode(cfg: RunConfig, args) -> None:
    bundle, data, features = _load_bundle_and_features(cfg)
    outdir = cfg.output_dir()
    predictions_path = cfg.path("predictions") or outdir / "predictions.csv"
    scatter_path = outdir / "latent_scatter.csv"
    check_write_conflicts(
        [cfg.path("dataset"), cfg.path("model_in")],
        [predictions_path, scatter_path, outdir / "latent_scatter.png"],
    )

    decode_cfg = cfg.decode_config()
    latent = decode_latent(
        bundle.state,
        features,
        decode_cfg,
        init_mode=cfg.get("decode", "init"),
        train_features=bundle.train_features,
    )
    result = predict_labels(
        bundle.state, latent, n_samples=cfg.get("decode", "n_samples"), seed=decode_cfg.seed
    )

    # Predictions are written without the truth column so the file depends on
    # the features alone (decoding is label-blind).
    header, rows = result.to_rows()
    write_table_atomic(predictions_path, header, rows)

    _, rel_disc = _relevance(bundle.state)
    dims = _top_dims(rel_disc, 3)
    truth = data.labels()
    scatter_header = ["trial_id"] + [f"latent_{d}" for d in dims] + ["truth"]
    scatter_rows = [
        [i, *[float(latent.mu_star[i, d]) for d in dims], int(truth[i])]
        for i in range(features.shape[0])
    ]
    write_table_atomic(scatter_path, scatter_header, scatter_rows)

    plot_dims = dims if dims.shape[0] >= 2 else np.array([0, 0])
    save_scatter_figure(
        latent.mu_star[:, plot_dims[:2]],
        truth,
        (f"latent_{plot_dims[0]}", f"latent_{plot_dims[1]}"),
        outdir / "latent_scatter.png",
        title="decoded test latents",
    )
    _dump_effective_config(cfg, outdir)
    print(f"wrote {predictions_path}: {features.shape[0]} trials decoded")


def cmd_infer(cfg: RunConfig, args) -> None:
    bundle, data, features = _load_bundle_and_features(cfg)
    outdir = cfg.output_dir()
    latents_path = outdir / "test_latents.csv"
    check_write_conflicts(
        [cfg.path("dataset"), cfg.path("model_in")],
        [latents_path, outdir / "test_latents.png"],
    )
    decode_cfg = cfg.decode_config()
    latent = infer_latent(
        bundle.state,
        features,
        data.y_discrete,
        decode_cfg,
        init_mode=cfg.get("decode", "init"),
        train_features=bundle.train_features,
    )
    q = bundle.state.config.q
    header = [f"mu_{d}" for d in range(q)] + [f"scale_{d}" for d in range(q)]
    scales = latent.scale_star
    rows = [
        [*[float(v) for v in latent.mu_star[i]], *[float(v) for v in scales[i]]]
        for i in range(features.shape[0])
    ]
    write_table_atomic(latents_path, header, rows)

    _, rel_disc = _relevance(bundle.state)
    dims = _top_dims(rel_disc, 2)
    plot_dims = dims if dims.shape[0] >= 2 else np.array([0, 0])
    save_scatter_figure(
        latent.mu_star[:, plot_dims[:2]],
        data.labels(),
        (f"latent_{plot_dims[0]}", f"latent_{plot_dims[1]}"),
        outdir / "test_latents.png",
        title="inferred test latents",
    )
    _dump_effective_config(cfg, outdir)
    print(f"wrote {latents_path}: {features.shape[0]} trials inferred")


def cmd_eval(cfg: RunConfig, args) -> None:
    predictions_path = cfg.path("predictions") or cfg.output_dir() / "predictions.csv"
    data = load_dataset(cfg.require_path("dataset"))
    predicted = _read_predictions(predictions_path)
    if predicted.shape[0] != data.n:
        raise ValidationError(
            f"{predictions_path} has {predicted.shape[0]} rows but the dataset has {data.n}"
        )
    metrics = evaluate(predicted, data.labels())
    outdir = cfg.output_dir()
    rows = [["accuracy", metrics.accuracy], ["macro_f", metrics.macro_f]]
    rows += [[f"f_class_{c}", f_val] for c, f_val in enumerate(metrics.per_class_f)]
    write_table_atomic(outdir / "eval_metrics.csv", ["metric", "value"], rows)
    _dump_effective_config(cfg, outdir)
    print(f"accuracy {metrics.accuracy:.4f}, macro-F {metrics.macro_f:.4f}")


def _read_predictions(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"predictions file not found: {path}")
    lines = path.read_text(encoding="utf-8").strip().splitlines()
    header = lines[0].split(",")
    if "predicted" not in header:
        raise ValidationError(f"{path}: missing 'predicted' column")
    col = header.index("predicted")
    try:
        return np.array([int(line.split(",")[col]) for line in lines[1:]])
    except ValueError as exc:
        raise ValidationError(f"{path}: bad predicted value ({exc})") from None


def cmd_cv(cfg: RunConfig, args) -> None:
    dataset_path = cfg.require_path("dataset")
    data = load_dataset(dataset_path)
    outdir = cfg.output_dir()
    folds_path = outdir / "cv_folds.csv"
    summary_path = outdir / "cv_summary.csv"
    check_write_conflicts(
        [dataset_path], [folds_path, summary_path, outdir / "cv_metrics.png"]
    )

    k_folds = cfg.get("cv", "k_folds")
    cv_seed = cfg.get("cv", "seed")
    labels = data.labels()
    try:
        split = kfold_split(labels, k_folds, cv_seed)
    except ValidationError as exc:
        log.warning("stratified split impossible (%s); using a plain split", exc)
        split = plain_kfold_split(data.n, k_folds, cv_seed)

    fold_rows = []
    accuracies, macro_fs = [], []
    n_failed = 0
    for fold in range(k_folds):
        train_idx = split.train_indices(fold)
        test_idx = split.test_indices(fold)
        try:
            bundle, _ = _fit_bundle(cfg, data.subset(train_idx), seed_shift=fold)
            test_features = bundle.transform(data.y_continuous[test_idx])
            decode_cfg = cfg.decode_config()
            decode_cfg.seed = decode_cfg.seed + fold
            latent = decode_latent(
                bundle.state,
                test_features,
                decode_cfg,
                init_mode=cfg.get("decode", "init"),
                train_features=bundle.train_features,
            )
            result = predict_labels(
                bundle.state,
                latent,
                n_samples=cfg.get("decode", "n_samples"),
                seed=decode_cfg.seed + 10_000,
            )
            metrics = evaluate(result.predicted, labels[test_idx])
        except NumericalError as exc:
            log.warning("fold %d failed: %s", fold, exc)
            n_failed += 1
            fold_rows.append([fold, int(test_idx.size), "failed", "", ""])
            continue
        accuracies.append(metrics.accuracy)
        macro_fs.append(metrics.macro_f)
        fold_rows.append(
            [fold, int(test_idx.size), "ok", metrics.accuracy, metrics.macro_f]
        )
        log.info("fold %d: accuracy %.4f macro-F %.4f", fold, metrics.accuracy, metrics.macro_f)

    write_table_atomic(
        folds_path, ["fold", "n_test", "status", "accuracy", "macro_f"], fold_rows
    )
    acc = np.asarray(accuracies)
    mf = np.asarray(macro_fs)
    acc_sd = float(acc.std(ddof=1)) if acc.size > 1 else 0.0
    mf_sd = float(mf.std(ddof=1)) if mf.size > 1 else 0.0
    summary_rows = [
        [
            float(acc.mean()) if acc.size else "",
            acc_sd if acc.size else "",
            float(mf.mean()) if mf.size else "",
            mf_sd if mf.size else "",
            int(k_folds - n_failed),
            n_failed,
        ]
    ]
    write_table_atomic(
        summary_path,
        ["accuracy_mean", "accuracy_sd", "macro_f_mean", "macro_f_sd",
         "folds_completed", "folds_failed"],
        summary_rows,
    )
    save_cv_figure(acc, mf, outdir / "cv_metrics.png")
    _dump_effective_config(cfg, outdir)
    if acc.size:
        print(
            f"cv ({int(acc.size)}/{k_folds} folds): accuracy "
            f"{acc.mean():.4f} ± {acc_sd:.4f}, macro-F {mf.mean():.4f} ± {mf_sd:.4f}"
        )
    else:
        print("cv: all folds failed")


def cmd_gradcheck(cfg: RunConfig, args) -> None:
    h = cfg.get("gradcheck", "h")
    tol = cfg.get("gradcheck", "tol")
    n_seeds = cfg.get("gradcheck", "seeds")
    corrupt = bool(getattr(args, "corrupt_gradient", False))
    outdir = cfg.output_dir()

    rows = []
    worst: dict[str, float] = {}
    any_failed = False
    for seed in range(n_seeds):
        state, data = gradcheck_instance(seed)
        report = grad_check(state, data, h=h, tol=tol, seed=seed, corrupt_gradient=corrupt)
        for group, err in report.group_errors.items():
            status = "ok" if np.isfinite(err) and err <= tol else "FAIL"
            rows.append([seed, group, err, status])
            worst[group] = max(worst.get(group, 0.0), err)
        any_failed = any_failed or not report.passed

    write_table_atomic(
        outdir / "gradcheck_report.csv", ["seed", "group", "max_rel_error", "status"], rows
    )
    _dump_effective_config(cfg, outdir)
    for group, err in worst.items():
        print(f"{group}: max relative error {err:.3e} "
              f"{'ok' if err <= tol else 'FAIL'}")
    if any_failed:
        raise NumericalError(
            f"gradient check failed: at least one group above tolerance {tol:g}"
        )
    print(f"gradient check passed on {n_seeds} seeds (h={h:g}, tol={tol:g})")


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "cv": cmd_cv,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        _setup_logging(args.verbose)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.override_seed(args.seed)
        if args.output_dir is not None:
            cfg.override_output_dir(args.output_dir)
        cfg.output_dir().mkdir(parents=True, exist_ok=True)
        _COMMANDS[args.command](cfg, args)
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
