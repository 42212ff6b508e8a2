"""Figure rendering for the report paths.

Every figure is rendered next to its delimited table so results can be read
without extra tooling. Rendering goes through the object-oriented matplotlib
API (no pyplot state) with pinned metadata, keeping output bytes reproducible
run to run.
"""

from __future__ import annotations

import io

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from ._io import write_bytes_atomic

DPI = 110
_PNG_METADATA = {"Software": "ldgd"}

CLASS_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")


def _save(fig: Figure, path) -> None:
    buffer = io.BytesIO()
    fig.savefig(buffer, format="png", dpi=DPI, metadata=_PNG_METADATA)
    write_bytes_atomic(path, buffer.getvalue())


def save_trace_figure(totals, terms: dict[str, list[float]], path) -> None:
    """Objective history: total on the left, signed terms on the right."""
    fig = Figure(figsize=(9.0, 3.6))
    FigureCanvasAgg(fig)
    ax_total, ax_terms = fig.subplots(1, 2)
    iterations = np.arange(len(totals))
    ax_total.plot(iterations, totals, color=CLASS_COLORS[0], lw=1.2)
    ax_total.set_xlabel("iteration")
    ax_total.set_ylabel("objective total")
    ax_total.set_title("training objective")
    for i, (name, series) in enumerate(sorted(terms.items())):
        ax_terms.plot(iterations, series, lw=0.9, label=name,
                      color=CLASS_COLORS[i % len(CLASS_COLORS)])
    ax_terms.set_xlabel("iteration")
    ax_terms.set_title("objective terms")
    ax_terms.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def save_relevance_figure(relevance_cont, relevance_disc, path) -> None:
    """Per-dimension ARD relevance (1 / lengthscale^2) for both paths."""
    relevance_cont = np.asarray(relevance_cont, dtype=float)
    relevance_disc = np.asarray(relevance_disc, dtype=float)
    q = relevance_cont.shape[0]
    fig = Figure(figsize=(7.0, 3.2))
    FigureCanvasAgg(fig)
    ax = fig.subplots()
    dims = np.arange(q)
    width = 0.4
    ax.bar(dims - width / 2, relevance_cont, width, label="continuous path",
           color=CLASS_COLORS[0])
    ax.bar(dims + width / 2, relevance_disc, width, label="discrete path",
           color=CLASS_COLORS[1])
    ax.set_xticks(dims)
    ax.set_xlabel("latent dimension")
    ax.set_ylabel("relevance (1 / lengthscale$^2$)")
    ax.set_title("ARD relevance per latent dimension")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def save_scatter_figure(points, labels, dim_names: tuple[str, str], path,
                        title: str = "latent means") -> None:
    """2-D scatter of latent means, colored by class when labels are given."""
    points = np.asarray(points, dtype=float)
    fig = Figure(figsize=(4.6, 4.2))
    FigureCanvasAgg(fig)
    ax = fig.subplots()
    if labels is None:
        ax.scatter(points[:, 0], points[:, 1], s=18, color=CLASS_COLORS[0],
                   edgecolors="none")
    else:
        labels = np.asarray(labels, dtype=int)
        for cls in np.unique(labels):
            mask = labels == cls
            ax.scatter(points[mask, 0], points[mask, 1], s=18,
                       color=CLASS_COLORS[cls % len(CLASS_COLORS)],
                       edgecolors="none", label=f"class {cls}")
        ax.legend(fontsize=8)
    ax.set_xlabel(dim_names[0])
    ax.set_ylabel(dim_names[1])
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def save_cv_figure(fold_accuracies, fold_macro_f, path) -> None:
    """Per-fold accuracy and macro-F bars."""
    acc = np.asarray(fold_accuracies, dtype=float)
    mf = np.asarray(fold_macro_f, dtype=float)
    folds = np.arange(acc.shape[0])
    fig = Figure(figsize=(6.4, 3.2))
    FigureCanvasAgg(fig)
    ax = fig.subplots()
    width = 0.4
    ax.bar(folds - width / 2, acc, width, label="accuracy", color=CLASS_COLORS[0])
    ax.bar(folds + width / 2, mf, width, label="macro F", color=CLASS_COLORS[1])
    ax.set_xticks(folds)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("fold")
    ax.set_title("cross-validation metrics per fold")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
