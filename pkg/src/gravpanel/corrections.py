"""Bias corrections for the slope estimates.

Ships the split-panel jackknife: the panel is split into two temporal halves,
each half is re-pruned (restricting periods creates fresh uninformative cells,
most often pair singletons) and re-fitted, and the corrected estimate is

    2 * beta_full - (beta_half1 + beta_half2) / 2.

Other corrections can be registered by name and become selectable from the
command line; only the jackknife ships with the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import (
    DuplicateCorrectionError,
    GravpanelError,
    SubfitError,
    UnknownCorrectionError,
)
from .estimation import EstimateConfig, FitResult, fit
from .panel import GravityPanel, _pylabel
from .pruning import PruneReport, prune


@dataclass(frozen=True)
class HalfPanelSplit:
    """Two period sets covering the panel; each half needs >= 2 periods.

    For even T the halves partition the ordered periods; for odd T they share
    exactly the middle period.
    """

    first_half: tuple
    second_half: tuple

    def __post_init__(self):
        if len(self.first_half) < 2 or len(self.second_half) < 2:
            raise ValueError("each half must contain at least two periods")


@dataclass(frozen=True)
class SubfitReport:
    part: str
    prune_report: PruneReport | None
    fit: FitResult


@dataclass(frozen=True, eq=False)
class CorrectionResult:
    method: str
    beta_corrected: np.ndarray
    beta_uncorrected: np.ndarray
    half_estimates: tuple[np.ndarray, np.ndarray] | None = None
    subfit_reports: tuple[SubfitReport, ...] = ()
    split: HalfPanelSplit | None = None


def default_split(panel: GravityPanel) -> HalfPanelSplit:
    """Halves of the panel's ordered periods, overlapping the middle one when
    the period count is odd."""
    periods = [_pylabel(p) for p in panel.periods[np.unique(panel.period_idx)]]
    T = len(periods)
    half = (T + 1) // 2
    return HalfPanelSplit(tuple(periods[:half]), tuple(periods[T - half:]))


def split_panel(
    panel: GravityPanel, scheme: HalfPanelSplit | None = None
) -> tuple[GravityPanel, GravityPanel]:
    """Restrict the panel to each half's periods. Needs T >= 4 so both halves
    keep at least two periods and pair effects stay estimable."""
    T = panel.dims.T
    if T < 4:
        raise GravpanelError(f"split-panel correction needs T >= 4 (panel has T={T})")
    scheme = scheme or default_split(panel)
    present = {_pylabel(p) for p in panel.periods[np.unique(panel.period_idx)]}
    covered = set(scheme.first_half) | set(scheme.second_half)
    if not present <= covered:
        raise GravpanelError(
            f"halves do not cover every period (missing {sorted(present - covered)})"
        )
    labels = panel.periods[panel.period_idx]
    first_mask = np.isin(labels, np.array(list(scheme.first_half), dtype=labels.dtype))
    second_mask = np.isin(labels, np.array(list(scheme.second_half), dtype=labels.dtype))
    return panel.subset_mask(first_mask), panel.subset_mask(second_mask)


def spj_combine(beta_full, beta_half1, beta_half2) -> np.ndarray:
    """The jackknife recombination, componentwise."""
    return (
        2.0 * np.asarray(beta_full, dtype=np.float64)
        - 0.5 * (np.asarray(beta_half1, np.float64) + np.asarray(beta_half2, np.float64))
    )


def spj(
    panel: GravityPanel,
    config: EstimateConfig | None = None,
    scheme: HalfPanelSplit | None = None,
    full_fit: FitResult | None = None,
) -> CorrectionResult:
    """Split-panel jackknife corrected estimate, with all three subfits attached.

    ``full_fit`` may pass in an already computed fit of ``panel`` under the
    same config to avoid refitting.
    """
    scheme = scheme or default_split(panel)
    if full_fit is not None:
        full = full_fit
    else:
        try:
            full = fit(panel, config)
        except GravpanelError as exc:
            raise SubfitError("full", exc) from exc
    first, second = split_panel(panel, scheme)
    halves = []
    reports: list[SubfitReport] = [SubfitReport("full", None, full)]
    for part, sub in (("first-half", first), ("second-half", second)):
        try:
            sub_pruned, sub_report = prune(sub)
            sub_fit = fit(sub_pruned, config)
        except GravpanelError as exc:
            raise SubfitError(part, exc) from exc
        halves.append(sub_fit.beta)
        reports.append(SubfitReport(part, sub_report, sub_fit))
    corrected = spj_combine(full.beta, halves[0], halves[1])
    return CorrectionResult(
        method="spj",
        beta_corrected=corrected,
        beta_uncorrected=full.beta,
        half_estimates=(halves[0], halves[1]),
        subfit_reports=tuple(reports),
        split=scheme,
    )


# -- registry -------------------------------------------------------------------

Correction = Callable[[GravityPanel, EstimateConfig | None], CorrectionResult]

_REGISTRY: dict[str, Correction] = {}


def register_correction(name: str, procedure: Correction) -> None:
    """Make a correction selectable by name. Names must be unique."""
    if name in _REGISTRY:
        raise DuplicateCorrectionError(f"correction {name!r} is already registered")
    _REGISTRY[name] = procedure


def get_correction(name: str) -> Correction:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise UnknownCorrectionError(
            f"unknown correction {name!r} (registered: {', '.join(sorted(_REGISTRY))})"
        ) from None


def correction_names() -> tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


register_correction("spj", spj)
