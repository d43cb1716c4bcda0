"""Iterative removal of uninformative observations.

An observation is uninformative for the slope parameters when a fixed effect
alone can reproduce it: every observation of an exporter-time, importer-time
or pair cell whose flows sum to zero (the cell's effect diverges to minus
infinity), and every observation that is the only member left in one of its
cells (the cell's effect fits it exactly). Removing such observations leaves
the slope estimate unchanged, so they are dropped until a fixed point.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import UninformativePanelError
from .panel import GravityPanel, PanelDims, _pylabel


class PruneRule(enum.Enum):
    EXPORTER_TIME_ZERO = "exporter-time-zero"
    IMPORTER_TIME_ZERO = "importer-time-zero"
    PAIR_ZERO = "pair-zero"
    EXPORTER_TIME_SINGLETON = "exporter-time-singleton"
    IMPORTER_TIME_SINGLETON = "importer-time-singleton"
    PAIR_SINGLETON = "pair-singleton"


_ZERO_RULES = (
    (PruneRule.EXPORTER_TIME_ZERO, "exporter_time"),
    (PruneRule.IMPORTER_TIME_ZERO, "importer_time"),
    (PruneRule.PAIR_ZERO, "pair"),
)
_SINGLETON_RULES = (
    (PruneRule.EXPORTER_TIME_SINGLETON, "exporter_time"),
    (PruneRule.IMPORTER_TIME_SINGLETON, "importer_time"),
    (PruneRule.PAIR_SINGLETON, "pair"),
)


@dataclass(frozen=True)
class DropRecord:
    """One dropped observation: its original labels, the rule, and the round."""

    exporter: object
    importer: object
    period: object
    rule: PruneRule
    round: int


@dataclass(frozen=True, eq=False)
class PruneReport:
    """Full provenance of a pruning run.

    ``rounds`` counts fixed-point passes including the final pass that finds
    nothing. ``dropped_rows`` indexes into the original panel's row order.
    """

    rounds: int
    dims_before: PanelDims
    dims_after: PanelDims
    dropped_rows: np.ndarray = field(repr=False)
    dropped_rules: np.ndarray = field(repr=False)
    dropped_rounds: np.ndarray = field(repr=False)
    _labels: tuple = field(repr=False)

    @cached_property
    def dropped(self) -> tuple[DropRecord, ...]:
        exp, imp, per = self._labels
        return tuple(
            DropRecord(
                _pylabel(e),
                _pylabel(i),
                _pylabel(p),
                PruneRule(_RULE_BY_CODE[int(c)]),
                int(rnd),
            )
            for e, i, p, c, rnd in zip(
                exp, imp, per, self.dropped_rules, self.dropped_rounds
            )
        )

    @property
    def n_dropped(self) -> int:
        return int(self.dropped_rows.size)

    def counts_by_rule(self) -> dict[str, int]:
        out = {rule.value: 0 for rule in PruneRule}
        for c in self.dropped_rules:
            out[_RULE_BY_CODE[int(c)]] += 1
        return out

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "n_dropped": self.n_dropped,
            "drops_by_rule": self.counts_by_rule(),
            "dims_before": self.dims_before.to_dict(),
            "dims_after": self.dims_after.to_dict(),
        }


_RULE_ORDER = tuple(rule for rule, _ in _ZERO_RULES + _SINGLETON_RULES)
_RULE_BY_CODE = {k: rule.value for k, rule in enumerate(_RULE_ORDER)}
_CODE_BY_RULE = {rule: k for k, rule in enumerate(_RULE_ORDER)}


def cell_sums(panel: GravityPanel, grouping: str) -> dict:
    """Flow sum and observation count per cell of one grouping.

    ``grouping`` is one of ``"exporter-time"``, ``"importer-time"``, ``"pair"``.
    Keys are original label pairs. A cell is a zero cell iff its sum equals
    0.0 (flows are nonnegative, so this is exact), and a singleton iff its
    count equals 1.
    """
    attr = {"exporter-time": "exporter_time", "importer-time": "importer_time", "pair": "pair"}
    if grouping not in attr:
        raise ValueError(f"unknown grouping {grouping!r}")
    cells = getattr(panel, attr[grouping])
    sums = np.bincount(cells.codes, weights=panel.flow, minlength=cells.n_cells)
    pos = np.bincount(
        cells.codes[panel.flow > 0], minlength=cells.n_cells
    )
    counts = np.bincount(cells.codes, minlength=cells.n_cells)
    first_labels = {
        "exporter-time": panel.exporters,
        "importer-time": panel.importers,
        "pair": panel.exporters,
    }[grouping]
    second_labels = panel.periods if grouping != "pair" else panel.importers
    out = {}
    for c in range(cells.n_cells):
        key = (_pylabel(first_labels[cells.first[c]]), _pylabel(second_labels[cells.second[c]]))
        total = 0.0 if pos[c] == 0 else float(sums[c])
        out[key] = (total, int(counts[c]))
    return out


def prune(panel: GravityPanel) -> tuple[GravityPanel, PruneReport]:
    """Drop uninformative observations until a fixed point.

    Each round applies, in order and each on the panel left by the previous
    rule: exporter-time zero cells, importer-time zero cells, pair zero
    cells, then singleton checks for the three groupings. Rounds repeat until
    one drops nothing. Raises :class:`UninformativePanelError` if everything
    would be removed.
    """
    n = panel.dims.n
    groups = (panel.exporter_time, panel.importer_time, panel.pair)
    by_name = {"exporter_time": 0, "importer_time": 1, "pair": 2}
    positive = panel.flow > 0

    alive = np.ones(n, dtype=bool)
    rows: list[np.ndarray] = []
    rules: list[np.ndarray] = []
    rounds_of: list[np.ndarray] = []

    rounds = 0
    while True:
        rounds += 1
        dropped_this_round = 0
        for rule, name in _ZERO_RULES:
            g = groups[by_name[name]]
            live_pos = np.bincount(
                g.codes[alive & positive], minlength=g.n_cells
            )
            hit = alive & (live_pos[g.codes] == 0)
            k = int(hit.sum())
            if k:
                idx = np.nonzero(hit)[0]
                rows.append(idx)
                rules.append(np.full(k, _CODE_BY_RULE[rule], dtype=np.int8))
                rounds_of.append(np.full(k, rounds, dtype=np.int32))
                alive[idx] = False
                dropped_this_round += k
        for rule, name in _SINGLETON_RULES:
            g = groups[by_name[name]]
            live_count = np.bincount(g.codes[alive], minlength=g.n_cells)
            hit = alive & (live_count[g.codes] == 1)
            k = int(hit.sum())
            if k:
                idx = np.nonzero(hit)[0]
                rows.append(idx)
                rules.append(np.full(k, _CODE_BY_RULE[rule], dtype=np.int8))
                rounds_of.append(np.full(k, rounds, dtype=np.int32))
                alive[idx] = False
                dropped_this_round += k
        if dropped_this_round == 0:
            break
        if not alive.any():
            raise UninformativePanelError(
                "every observation is uninformative; nothing identifies the slopes"
            )

    pruned = panel.subset_mask(alive)
    dropped_rows = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
    report = PruneReport(
        rounds=rounds,
        dims_before=panel.dims,
        dims_after=pruned.dims,
        dropped_rows=dropped_rows,
        dropped_rules=np.concatenate(rules) if rules else np.empty(0, dtype=np.int8),
        dropped_rounds=np.concatenate(rounds_of) if rounds_of else np.empty(0, dtype=np.int32),
        _labels=(
            panel.exporters[panel.exporter_idx[dropped_rows]],
            panel.importers[panel.importer_idx[dropped_rows]],
            panel.periods[panel.period_idx[dropped_rows]],
        ),
    )
    return pruned, report


def pruned_panel(panel: GravityPanel, report: PruneReport) -> GravityPanel:
    """Reconstruct the pruned panel a report was produced from."""
    mask = np.ones(panel.dims.n, dtype=bool)
    mask[report.dropped_rows] = False
    return panel.subset_mask(mask)


def verify_uninformative(
    original: GravityPanel,
    report: PruneReport,
    tolerance: float = 1e-6,
    config=None,
) -> bool | None:
    """Cross-check that pruning left the slope estimate unchanged.

    Fits the model on the original and on the pruned panel and compares the
    slope vectors componentwise. Returns True/False, or None when the fit on
    the unpruned panel does not converge (the check is then inconclusive
    rather than failed, since unpruned zero cells are known to cause
    convergence trouble). Slow; intended as an audit, not a hot-path step.
    """
    from .estimation import fit
    from .errors import EstimationError

    if original.x.shape[1] == 0:
        return True
    pruned = pruned_panel(original, report)
    try:
        full = fit(original, config)
    except EstimationError:
        return None
    restricted = fit(pruned, config)
    return bool(np.all(np.abs(full.beta - restricted.beta) <= tolerance))
