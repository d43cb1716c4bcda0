"""Matplotlib renderings of the report tables, written next to the CSV output."""

from __future__ import annotations

import os
import tempfile

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save_atomic(fig, path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=os.path.splitext(path)[1])
    os.close(fd)
    try:
        fig.savefig(tmp, dpi=150, bbox_inches="tight")
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)


def save_coverage_figure(rows, path: str, initial_countries: int | None = None) -> None:
    """Scatter of average exporters vs importers per dataset after pruning."""
    ok = [r for r in rows if r.error is None]
    fig, ax = plt.subplots(figsize=(7, 6))
    if ok:
        ax.scatter([r.I_bar for r in ok], [r.J_bar for r in ok], s=28, zorder=3)
        for r in ok:
            ax.annotate(
                r.label, (r.I_bar, r.J_bar), fontsize=7,
                xytext=(3, 3), textcoords="offset points",
            )
    if initial_countries is not None:
        ax.axhline(initial_countries, color="gray", lw=0.8)
        ax.axvline(initial_countries, color="gray", lw=0.8)
    lim = max(
        [initial_countries or 0]
        + [max(r.I_bar, r.J_bar) for r in ok] if ok else [1.0]
    )
    ax.plot([0, lim * 1.05], [0, lim * 1.05], color="lightgray", lw=0.8, zorder=1)
    ax.set_xlabel("average exporters per importer-time cell")
    ax.set_ylabel("average importers per exporter-time cell")
    ax.set_title("Effective country coverage after pruning")
    _save_atomic(fig, path)


def save_pair_presence_figure(presence, path: str, title: str = "") -> None:
    """Pairs colored by how many periods survive pruning."""
    fig, ax = plt.subplots(figsize=(6.5, 6))
    sc = ax.scatter(
        presence.exporters,
        presence.importers,
        c=presence.counts,
        s=4,
        cmap="viridis",
        marker="s",
    )
    fig.colorbar(sc, ax=ax, label="surviving periods")
    ax.set_xlabel("exporter")
    ax.set_ylabel("importer")
    if title:
        ax.set_title(title)
    _save_atomic(fig, path)


def save_simulation_figure(rows: list[dict], estimators: list[str], path: str) -> None:
    """Relative bias and bias/SD against the attrition fraction, per estimator."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    psis = [r["psi"] for r in rows]
    for label in estimators:
        axes[0].plot(psis, [r[f"{label}_bias_pct"] for r in rows], marker="o", label=label)
        axes[1].plot(psis, [r[f"{label}_bias_over_sd"] for r in rows], marker="o", label=label)
    axes[0].set_xlabel("attrition fraction")
    axes[0].set_ylabel("relative bias (%)")
    axes[1].set_xlabel("attrition fraction")
    axes[1].set_ylabel("bias / SD")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    _save_atomic(fig, path)
