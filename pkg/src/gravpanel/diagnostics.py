"""Bias-order diagnostics for implicitly unbalanced panels.

After pruning, the effective sample is characterized by the average number of
exporters per importer-time cell (I_bar = n*/p_gamma*) and importers per
exporter-time cell (J_bar = n*/p_alpha*). The leading order of the incidental
parameter bias of the slope estimate is 1/min(I_bar, J_bar); comparing it with
the naive 1/min(I, J) of the raw panel shows how much the uninformative
observations amplify the inference problem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GravpanelError
from .panel import GravityPanel, PanelDims
from .pruning import PruneReport, prune


@dataclass(frozen=True)
class UnbalancednessDiagnostic:
    I_bar: float
    J_bar: float
    leading_order: float
    naive_order: float
    amplification: float
    n_star: int
    p_alpha_star: int
    p_gamma_star: int

    def to_dict(self) -> dict:
        return {
            "I_bar": self.I_bar,
            "J_bar": self.J_bar,
            "leading_order": self.leading_order,
            "naive_order": self.naive_order,
            "amplification": self.amplification,
            "n_star": self.n_star,
            "p_alpha_star": self.p_alpha_star,
            "p_gamma_star": self.p_gamma_star,
        }


@dataclass(frozen=True, eq=False)
class PairPresence:
    """Surviving period count per pair of the original panel (0 = fully dropped)."""

    exporters: np.ndarray
    importers: np.ndarray
    counts: np.ndarray


def heuristic_bias_order(
    dims_after: PanelDims, dims_before: PanelDims
) -> UnbalancednessDiagnostic:
    """Bias-order summary from pre- and post-prune dimension counts."""
    if dims_after.n <= 0 or dims_after.p_alpha <= 0 or dims_after.p_gamma <= 0:
        raise GravpanelError("starred counts are zero; the panel was fully pruned")
    i_bar = dims_after.n / dims_after.p_gamma
    j_bar = dims_after.n / dims_after.p_alpha
    leading = 1.0 / min(i_bar, j_bar)
    naive = 1.0 / min(dims_before.I, dims_before.J)
    return UnbalancednessDiagnostic(
        I_bar=i_bar,
        J_bar=j_bar,
        leading_order=leading,
        naive_order=naive,
        amplification=leading / naive,
        n_star=dims_after.n,
        p_alpha_star=dims_after.p_alpha,
        p_gamma_star=dims_after.p_gamma,
    )


def round_half_away(value: float) -> int:
    """Round to the nearest integer with ties away from zero (display rule)."""
    return int(math.floor(value + 0.5)) if value >= 0 else -int(math.floor(-value + 0.5))


@dataclass(frozen=True)
class IndustryRow:
    label: str
    n: int | None = None
    n_star: int | None = None
    share: float | None = None
    I_bar: float | None = None
    J_bar: float | None = None
    I_bar_display: int | None = None
    J_bar_display: int | None = None
    leading_order: float | None = None
    amplification: float | None = None
    error: str | None = None


def industry_report(panels) -> list[IndustryRow]:
    """One diagnostic row per (label, panel). Failures are reported inline.

    Display columns round I_bar/J_bar half away from zero; the float columns
    keep full precision for machine use.
    """
    rows = []
    for label, panel in panels:
        try:
            pruned, report = prune(panel)
            diag = heuristic_bias_order(report.dims_after, report.dims_before)
        except GravpanelError as exc:
            rows.append(IndustryRow(label=str(label), error=str(exc)))
            continue
        rows.append(
            IndustryRow(
                label=str(label),
                n=report.dims_before.n,
                n_star=diag.n_star,
                share=diag.n_star / report.dims_before.n,
                I_bar=diag.I_bar,
                J_bar=diag.J_bar,
                I_bar_display=round_half_away(diag.I_bar),
                J_bar_display=round_half_away(diag.J_bar),
                leading_order=diag.leading_order,
                amplification=diag.amplification,
            )
        )
    return rows


def leading_order_summary(
    rows: list[IndustryRow], aggregate_prefixes: tuple[str, ...] = ("agg",)
) -> dict:
    """Average leading bias order across report rows.

    Returns 1/mean(min(I_bar, J_bar)) once over all successful rows and once
    excluding rows whose label starts with an aggregate prefix
    (case-insensitive).
    """
    ok = [r for r in rows if r.error is None]

    def _avg(subset):
        if not subset:
            return None
        return 1.0 / (sum(min(r.I_bar, r.J_bar) for r in subset) / len(subset))

    non_agg = [
        r for r in ok if not any(r.label.lower().startswith(p) for p in aggregate_prefixes)
    ]
    return {
        "average_leading_order_excluding_aggregates": _avg(non_agg),
        "average_leading_order_all_rows": _avg(ok),
    }


def pair_presence_map(
    panel_before: GravityPanel, panel_after: GravityPanel
) -> PairPresence:
    """Surviving period counts for every pair of the original panel.

    ``panel_after`` must be derived from ``panel_before`` (same label tables),
    normally by pruning.
    """
    if len(panel_before.importers) != len(panel_after.importers) or not np.array_equal(
        panel_before.importers, panel_after.importers
    ):
        raise GravpanelError("panels do not share label tables")
    span = len(panel_before.importers)
    before = panel_before.pair
    after_keys = (
        panel_after.exporter_idx.astype(np.int64) * span + panel_after.importer_idx
    )
    uniq_after, counts_after = np.unique(after_keys, return_counts=True)
    before_keys = before.first * span + before.second
    counts = np.zeros(before.n_cells, dtype=np.int64)
    pos = np.searchsorted(uniq_after, before_keys)
    pos = np.clip(pos, 0, max(uniq_after.size - 1, 0))
    if uniq_after.size:
        match = uniq_after[pos] == before_keys
        counts[match] = counts_after[pos[match]]
    return PairPresence(
        exporters=panel_before.exporters[before.first],
        importers=panel_before.importers[before.second],
        counts=counts,
    )


def diagnose(panel: GravityPanel) -> tuple[UnbalancednessDiagnostic, PruneReport]:
    """Prune a panel and summarize the resulting bias order."""
    _, report = prune(panel)
    return heuristic_bias_order(report.dims_after, report.dims_before), report
