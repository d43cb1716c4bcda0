"""Data model and delimited-file IO for three-way trade panels.

A panel is a set of (exporter, importer, period) keyed observations, each
carrying a nonnegative flow and a fixed-length covariate vector. Identifiers
are remapped to dense 0-based indices at construction; the original labels
are kept for reporting. Subsetting preserves the label tables, so dense
indices stay comparable across panels derived from the same source.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import DataError, DuplicateKeyError, EmptyPanelError


class ObsKey(NamedTuple):
    """Dense (exporter, importer, period) index triple of one observation."""

    exporter: int
    importer: int
    period: int


class Observation(NamedTuple):
    key: ObsKey
    flow: float
    covariates: tuple[float, ...]


@dataclass(frozen=True)
class ColumnSchema:
    """Column layout of a delimited panel file.

    ``covariates=None`` means "every header column that is not one of the
    four key columns, in file order".
    """

    exporter: str = "exporter"
    importer: str = "importer"
    period: str = "year"
    flow: str = "trade"
    covariates: tuple[str, ...] | None = None
    delimiter: str = ","


@dataclass(frozen=True)
class PanelDims:
    """Observation and fixed-effect cell counts, always recounted from data."""

    n: int
    p_alpha: int
    p_gamma: int
    p_eta: int
    I: int
    J: int
    T: int

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "p_alpha": self.p_alpha,
            "p_gamma": self.p_gamma,
            "p_eta": self.p_eta,
            "I": self.I,
            "J": self.J,
            "T": self.T,
        }


@dataclass(frozen=True)
class GroupCells:
    """Observation-to-cell assignment for one fixed-effect grouping.

    ``codes[r]`` is the dense cell index of observation r; ``first``/``second``
    give each cell's identifying pair of panel-level dense indices (for
    exporter-time cells: exporter index and period index, and so on).
    """

    codes: np.ndarray
    n_cells: int
    first: np.ndarray
    second: np.ndarray


def _as_label_array(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise DataError("identifier columns must be one-dimensional")
    return arr


def _ordered_labels(values: np.ndarray, numeric_order: bool) -> np.ndarray:
    """Unique labels, sorted; string labels that all parse as numbers are
    sorted numerically when numeric_order is set (so '10' follows '5')."""
    uniq = np.unique(values)
    if numeric_order and uniq.dtype.kind in ("U", "S", "O"):
        try:
            keys = [float(v) for v in uniq]
        except (TypeError, ValueError):
            return uniq
        return uniq[np.argsort(keys, kind="stable")]
    return uniq


def _codes(values: np.ndarray, labels: np.ndarray) -> np.ndarray:
    order = np.argsort(labels, kind="stable")
    pos = np.searchsorted(labels[order], values)
    return order[pos].astype(np.int64)


def _group(a: np.ndarray, b: np.ndarray, span_b: int) -> GroupCells:
    key = a.astype(np.int64) * span_b + b
    uniq, codes = np.unique(key, return_inverse=True)
    return GroupCells(
        codes=codes.astype(np.int64),
        n_cells=int(uniq.size),
        first=(uniq // span_b).astype(np.int64),
        second=(uniq % span_b).astype(np.int64),
    )


def _pylabel(value):
    return value.item() if isinstance(value, np.generic) else value


@dataclass(frozen=True, eq=False)
class GravityPanel:
    """Immutable observation set with dense indices and label tables.

    Construct via :meth:`from_arrays` or :func:`load_panel`; do not mutate the
    arrays. All derived panels (subset, prune) share the label tables of the
    source panel.
    """

    exporter_idx: np.ndarray
    importer_idx: np.ndarray
    period_idx: np.ndarray
    flow: np.ndarray
    x: np.ndarray
    exporters: np.ndarray
    importers: np.ndarray
    periods: np.ndarray
    covariate_names: tuple[str, ...]

    @classmethod
    def from_arrays(
        cls,
        exporters,
        importers,
        periods,
        flows,
        covariates=None,
        covariate_names: Sequence[str] | None = None,
    ) -> "GravityPanel":
        """Build a panel from parallel arrays of labels, flows and covariates."""
        exp = _as_label_array(exporters)
        imp = _as_label_array(importers)
        per = _as_label_array(periods)
        flow = np.asarray(flows, dtype=np.float64)
        n = flow.size
        if not (exp.size == imp.size == per.size == n):
            raise DataError("exporter, importer, period and flow columns differ in length")
        if covariates is None:
            x = np.empty((n, 0), dtype=np.float64)
        else:
            x = np.asarray(covariates, dtype=np.float64)
            if x.ndim == 1:
                x = x[:, None]
            if x.shape[0] != n:
                raise DataError("covariate rows do not match the number of observations")
        if covariate_names is None:
            names = tuple(f"x{k + 1}" for k in range(x.shape[1]))
        else:
            names = tuple(covariate_names)
            if len(names) != x.shape[1]:
                raise DataError("covariate_names does not match the covariate count")

        exp_labels = _ordered_labels(exp, numeric_order=False)
        imp_labels = _ordered_labels(imp, numeric_order=False)
        per_labels = _ordered_labels(per, numeric_order=True)
        panel = cls(
            exporter_idx=_codes(exp, exp_labels),
            importer_idx=_codes(imp, imp_labels),
            period_idx=_codes(per, per_labels),
            flow=flow,
            x=x,
            exporters=exp_labels,
            importers=imp_labels,
            periods=per_labels,
            covariate_names=names,
        )
        panel._validate()
        return panel

    def _validate(self) -> None:
        if self.flow.size == 0:
            raise EmptyPanelError("panel has no observations")
        if not np.all(np.isfinite(self.flow)):
            raise DataError("flows must be finite")
        if np.any(self.flow < 0):
            raise DataError("flows must be nonnegative")
        if self.x.size and not np.all(np.isfinite(self.x)):
            raise DataError("covariates must be finite")
        key = (
            self.exporter_idx * len(self.importers) + self.importer_idx
        ) * len(self.periods) + self.period_idx
        uniq, counts = np.unique(key, return_counts=True)
        if np.any(counts > 1):
            k = uniq[counts > 1][0]
            t = int(k % len(self.periods))
            ij = k // len(self.periods)
            j = int(ij % len(self.importers))
            i = int(ij // len(self.importers))
            raise DuplicateKeyError(
                _pylabel(self.exporters[i]),
                _pylabel(self.importers[j]),
                _pylabel(self.periods[t]),
            )

    # -- derived bookkeeping -------------------------------------------------

    @cached_property
    def dims(self) -> PanelDims:
        return PanelDims(
            n=int(self.flow.size),
            p_alpha=self.exporter_time.n_cells,
            p_gamma=self.importer_time.n_cells,
            p_eta=self.pair.n_cells,
            I=int(np.unique(self.exporter_idx).size),
            J=int(np.unique(self.importer_idx).size),
            T=int(np.unique(self.period_idx).size),
        )

    @cached_property
    def exporter_time(self) -> GroupCells:
        return _group(self.exporter_idx, self.period_idx, len(self.periods))

    @cached_property
    def importer_time(self) -> GroupCells:
        return _group(self.importer_idx, self.period_idx, len(self.periods))

    @cached_property
    def pair(self) -> GroupCells:
        return _group(self.exporter_idx, self.importer_idx, len(self.importers))

    # -- accessors -----------------------------------------------------------

    def key(self, row: int) -> ObsKey:
        return ObsKey(
            int(self.exporter_idx[row]),
            int(self.importer_idx[row]),
            int(self.period_idx[row]),
        )

    def labels_for(self, key: ObsKey) -> tuple:
        return (
            _pylabel(self.exporters[key.exporter]),
            _pylabel(self.importers[key.importer]),
            _pylabel(self.periods[key.period]),
        )

    def iter_keys(self) -> Iterator[ObsKey]:
        for e, i, p in zip(self.exporter_idx, self.importer_idx, self.period_idx):
            yield ObsKey(int(e), int(i), int(p))

    def observation(self, row: int) -> Observation:
        return Observation(
            self.key(row), float(self.flow[row]), tuple(float(v) for v in self.x[row])
        )

    def subset_mask(self, mask: np.ndarray) -> "GravityPanel":
        """Panel restricted to rows where mask is true; label tables are kept."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.flow.shape:
            raise DataError("mask length does not match the panel")
        if not mask.any():
            raise EmptyPanelError("subset would remove every observation")
        return GravityPanel(
            exporter_idx=self.exporter_idx[mask],
            importer_idx=self.importer_idx[mask],
            period_idx=self.period_idx[mask],
            flow=self.flow[mask],
            x=self.x[mask],
            exporters=self.exporters,
            importers=self.importers,
            periods=self.periods,
            covariate_names=self.covariate_names,
        )

    def with_flows(self, flows: np.ndarray) -> "GravityPanel":
        """Same keys and covariates, new flow values."""
        flows = np.asarray(flows, dtype=np.float64)
        if flows.shape != self.flow.shape:
            raise DataError("replacement flows do not match the panel length")
        if not np.all(np.isfinite(flows)) or np.any(flows < 0):
            raise DataError("flows must be finite and nonnegative")
        return GravityPanel(
            exporter_idx=self.exporter_idx,
            importer_idx=self.importer_idx,
            period_idx=self.period_idx,
            flow=flows,
            x=self.x,
            exporters=self.exporters,
            importers=self.importers,
            periods=self.periods,
            covariate_names=self.covariate_names,
        )


def compute_dims(panel: GravityPanel) -> PanelDims:
    """Exact distinct-cell counts of the panel (empty panels cannot exist)."""
    return panel.dims


def subset(panel: GravityPanel, keep: Callable[[ObsKey], bool]) -> GravityPanel:
    """Panel containing exactly the observations whose key satisfies ``keep``."""
    mask = np.fromiter(
        (bool(keep(k)) for k in panel.iter_keys()), dtype=bool, count=panel.dims.n
    )
    return panel.subset_mask(mask)


# -- delimited IO --------------------------------------------------------------


def _open_text(source):
    if hasattr(source, "read"):
        data = source.read()
        if isinstance(data, bytes):
            data = data.decode("utf-8")
        return io.StringIO(data)
    return open(source, "r", encoding="utf-8", newline="")


def load_panel(source, schema: ColumnSchema | None = None) -> GravityPanel:
    """Read a delimited table with a header row into a :class:`GravityPanel`.

    ``source`` may be a path or a readable (text or byte) stream. Identifier
    columns are kept as strings; flow and covariate columns must parse as
    finite numbers, with flows nonnegative. Errors name the offending file
    line (the header is line 1).
    """
    schema = schema or ColumnSchema()
    fh = _open_text(source)
    try:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("input file is empty (no header row)") from None
        header = [h.strip() for h in header]
        positions = {}
        for role, name in (
            ("exporter", schema.exporter),
            ("importer", schema.importer),
            ("period", schema.period),
            ("flow", schema.flow),
        ):
            if name not in header:
                raise DataError(f"missing required column {name!r} for {role}")
            positions[role] = header.index(name)
        if schema.covariates is None:
            used = set(positions.values())
            cov_names = [h for k, h in enumerate(header) if k not in used]
        else:
            cov_names = list(schema.covariates)
            for name in cov_names:
                if name not in header:
                    raise DataError(f"missing covariate column {name!r}")
        cov_pos = [header.index(name) for name in cov_names]
        width = len(header)

        exporters, importers, periods = [], [], []
        flows = []
        covs = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataError(
                    f"line {lineno}: expected {width} fields, found {len(row)} "
                    "(ragged covariates)"
                )
            exporters.append(row[positions["exporter"]])
            importers.append(row[positions["importer"]])
            periods.append(row[positions["period"]])
            raw_flow = row[positions["flow"]]
            try:
                value = float(raw_flow)
            except ValueError:
                raise DataError(f"line {lineno}: non-numeric flow {raw_flow!r}") from None
            if not math.isfinite(value):
                raise DataError(f"line {lineno}: flow is not finite ({raw_flow!r})")
            if value < 0:
                raise DataError(f"line {lineno}: negative flow {raw_flow!r}")
            flows.append(value)
            row_cov = []
            for name, pos in zip(cov_names, cov_pos):
                raw = row[pos]
                try:
                    v = float(raw)
                except ValueError:
                    raise DataError(
                        f"line {lineno}: non-numeric value {raw!r} in column {name!r}"
                    ) from None
                if not math.isfinite(v):
                    raise DataError(f"line {lineno}: non-finite value in column {name!r}")
                row_cov.append(v)
            covs.append(row_cov)
    finally:
        fh.close()

    if not flows:
        raise EmptyPanelError("input file holds a header but no observations")
    x = np.asarray(covs, dtype=np.float64) if cov_names else None
    return GravityPanel.from_arrays(
        np.asarray(exporters),
        np.asarray(importers),
        np.asarray(periods),
        np.asarray(flows),
        covariates=x,
        covariate_names=tuple(cov_names),
    )


def write_panel(panel: GravityPanel, dest, schema: ColumnSchema | None = None) -> None:
    """Write the panel back out in the same delimited layout.

    Numeric fields use shortest round-trip formatting, so a write/load cycle
    reproduces every value exactly.
    """
    schema = schema or ColumnSchema()
    cov_names = (
        list(schema.covariates) if schema.covariates is not None else list(panel.covariate_names)
    )
    if len(cov_names) != len(panel.covariate_names):
        raise DataError("schema covariate names do not match the panel")

    own = not hasattr(dest, "write")
    fh = open(dest, "w", encoding="utf-8", newline="") if own else dest
    try:
        writer = csv.writer(fh, delimiter=schema.delimiter, lineterminator="\n")
        writer.writerow([schema.exporter, schema.importer, schema.period, schema.flow] + cov_names)
        exp = panel.exporters[panel.exporter_idx]
        imp = panel.importers[panel.importer_idx]
        per = panel.periods[panel.period_idx]
        for r in range(panel.dims.n):
            row = [str(_pylabel(exp[r])), str(_pylabel(imp[r])), str(_pylabel(per[r]))]
            row.append(repr(float(panel.flow[r])))
            row.extend(repr(float(v)) for v in panel.x[r])
            writer.writerow(row)
    finally:
        if own:
            fh.close()
