"""Pseudo-Poisson estimation of three-way gravity panels.

The conditional mean is exp(beta'x + alpha_it + gamma_jt + eta_ij). The
estimator solves the first-order conditions

    sum_ijt (y - lam) x      = 0          (slopes, over the whole sample)
    sum_j   (y - lam)        = 0          per exporter-time cell
    sum_i   (y - lam)        = 0          per importer-time cell
    sum_t   (y - lam)        = 0          per pair cell

by concentrating the fixed effects out with cyclic closed-form multiplicative
updates and taking Newton steps on the concentrated slope problem, where the
covariates are projected onto the orthogonal complement of the fixed effects
in the lam-weighted inner product (alternating weighted demeaning).

Convergence is declared on scaled residuals of the four condition families,
not on parameter changes. Only the slopes and the fitted means are identified;
the fixed-effect values returned are one arbitrary converged representative.

Panels should be pruned first. Unpruned zero cells are tolerated: their fixed
effects are reported as -inf, the affected observations get fitted mean 0 and
drop out of every sum, and a warning is attached to the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Mapping

import numpy as np

from .errors import (
    ConcentrationError,
    EstimationError,
    IdentificationError,
    NonConvergenceError,
    SeparationError,
    UninformativePanelError,
)
from .panel import GravityPanel, _pylabel

FOC_FAMILIES = ("beta", "exporter_time", "importer_time", "pair")
CLUSTER_GROUPINGS = ("pair", "exporter", "importer", "none")

_MAX_STEP = 5.0  # cap on one Newton step in log space
_LOOSE_INNER = 1e-3  # concentration tolerance while the slopes are still far off


@dataclass(frozen=True)
class EstimateConfig:
    foc_tolerance: float = 1e-8
    max_outer_iterations: int = 200
    max_inner_iterations: int = 10_000
    exponent_cap: float = 30.0

    def __post_init__(self):
        if not (self.foc_tolerance > 0):
            raise ValueError("foc_tolerance must be positive")
        if self.max_outer_iterations < 1 or self.max_inner_iterations < 1:
            raise ValueError("iteration caps must be at least 1")
        if not (self.exponent_cap > 0):
            raise ValueError("exponent_cap must be positive")


@dataclass(frozen=True, eq=False)
class FitResult:
    """Converged estimates plus convergence diagnostics.

    ``fitted`` and ``fe_offset`` are aligned with the panel's row order;
    ``fe_offset`` holds alpha+gamma+eta per observation (-inf where a zero
    cell forces the fitted mean to 0). The fixed-effect maps ``alpha``,
    ``gamma`` and ``eta`` are keyed by original label pairs and cover exactly
    the cells present in the fitted panel.
    """

    beta: np.ndarray
    outer_iterations: int
    foc_residuals: dict
    converged: bool
    fitted: np.ndarray
    fe_offset: np.ndarray
    warnings: tuple[str, ...] = ()
    _panel: GravityPanel = field(default=None, repr=False)
    _fe: tuple = field(default=None, repr=False)

    @cached_property
    def alpha(self) -> dict:
        return _fe_map(self._panel.exporter_time, self._fe[0],
                       self._panel.exporters, self._panel.periods)

    @cached_property
    def gamma(self) -> dict:
        return _fe_map(self._panel.importer_time, self._fe[1],
                       self._panel.importers, self._panel.periods)

    @cached_property
    def eta(self) -> dict:
        return _fe_map(self._panel.pair, self._fe[2],
                       self._panel.exporters, self._panel.importers)


def _fe_map(cells, values, first_labels, second_labels) -> dict:
    return {
        (_pylabel(first_labels[a]), _pylabel(second_labels[b])): float(v)
        for a, b, v in zip(cells.first, cells.second, values)
    }


class _Workspace:
    """Live-observation views and cell bookkeeping for one panel."""

    def __init__(self, panel: GravityPanel):
        self.panel = panel
        groups = (panel.exporter_time, panel.importer_time, panel.pair)
        self.groups = groups
        self.sums_y = [
            np.bincount(g.codes, weights=panel.flow, minlength=g.n_cells) for g in groups
        ]
        positive = panel.flow > 0
        self.pos_counts = [
            np.bincount(g.codes[positive], minlength=g.n_cells) for g in groups
        ]
        self.counts = [np.bincount(g.codes, minlength=g.n_cells) for g in groups]
        self.alive_cells = [p > 0 for p in self.pos_counts]
        dead = np.zeros(panel.dims.n, dtype=bool)
        for g, alive in zip(groups, self.alive_cells):
            dead |= ~alive[g.codes]
        self.live = ~dead
        if not self.live.any():
            raise UninformativePanelError("all cells have zero flow sums")
        self.y = panel.flow[self.live]
        self.x = panel.x[self.live]
        self.codes = [g.codes[self.live] for g in groups]
        self.n_cells = [g.n_cells for g in groups]
        self.y_total = float(self.y.sum())

    def zero_cell_counts(self):
        return [int((~a).sum()) for a in self.alive_cells]

    def singleton_cell_counts(self):
        return [
            int(((c == 1) & a).sum()) for c, a in zip(self.counts, self.alive_cells)
        ]

    def initial_fe(self):
        """Log cell-mean warm start; dead cells start (and stay) at -inf."""
        ybar = self.y_total / self.y.size
        out = []
        for k, (sy, cnt) in enumerate(zip(self.sums_y, self.counts)):
            fe = np.full(sy.size, -np.inf)
            a = self.alive_cells[k]
            with np.errstate(divide="ignore"):
                fe[a] = np.log(sy[a] / cnt[a])
            fe[a] -= np.log(ybar)
            out.append(fe)
        out[2][self.alive_cells[2]] += np.log(ybar)
        return out


def _scaled_residual(sy, sl, alive):
    if not alive.any():
        return 0.0
    d = np.abs(sy[alive] - sl[alive]) / (1.0 + sy[alive])
    return float(d.max())


def _guarded_exp(lin, cap):
    """exp(lin), clamping only when some entry actually exceeds the cap."""
    if lin.size and (lin.max() > cap or lin.min() < -cap):
        return np.exp(np.clip(lin, -cap, cap))
    return np.exp(lin)


def _concentrate(ws: _Workspace, lin, fe, cfg: EstimateConfig, inner_tol):
    """Sweep multiplicative updates until the three FE families' scaled
    residuals fall below inner_tol from a consistent state. Mutates lin/fe
    in place; returns the fitted means and the exit residuals.

    Within one sweep the means are updated multiplicatively (post-update cell
    sums equal the data sums exactly, so they cannot overflow); each sweep
    restarts from exp(lin) to avoid drift. When successive sweep updates
    align (the iteration has entered its linear regime), the geometric tail
    of the update sequence is added in one extrapolation step; this rescues
    nearly-disconnected panels whose contraction rate is close to one.
    """
    codes = ws.codes
    sums_y = ws.sums_y
    alive = ws.alive_cells
    sweeps = 0
    last_delta = np.inf
    prev_step = None
    while True:
        lam = _guarded_exp(lin, cfg.exponent_cap)
        sl0 = np.bincount(codes[0], weights=lam, minlength=ws.n_cells[0])
        r0 = _scaled_residual(sums_y[0], sl0, alive[0])
        if r0 <= inner_tol:
            sl1 = np.bincount(codes[1], weights=lam, minlength=ws.n_cells[1])
            r1 = _scaled_residual(sums_y[1], sl1, alive[1])
            if r1 <= inner_tol:
                sl2 = np.bincount(codes[2], weights=lam, minlength=ws.n_cells[2])
                r2 = _scaled_residual(sums_y[2], sl2, alive[2])
                if r2 <= inner_tol:
                    return lam, sweeps, (r0, r1, r2)
        if sweeps >= cfg.max_inner_iterations:
            raise ConcentrationError(
                f"fixed-effect concentration did not settle within "
                f"{cfg.max_inner_iterations} sweeps (last update {last_delta:.3e})",
                last_delta=last_delta,
            )
        sweeps += 1
        last_delta = 0.0
        deltas = []
        sl = sl0
        for f in range(3):
            if f:
                sl = np.bincount(codes[f], weights=lam, minlength=ws.n_cells[f])
            a = alive[f]
            delta = np.zeros(ws.n_cells[f])
            delta[a] = np.log(sums_y[f][a]) - np.log(sl[a])
            fe[f][a] += delta[a]
            lin += delta[codes[f]]
            if f < 2:
                lam = lam * np.exp(delta)[codes[f]]
            deltas.append(delta)
            last_delta = max(last_delta, float(np.abs(delta[a]).max(initial=0.0)))
        step = np.concatenate(deltas)
        if prev_step is not None:
            den = float(prev_step @ prev_step)
            cur = float(step @ step)
            num = float(step @ prev_step)
            if den > 0.0 and cur > 0.0:
                rho = num / den
                align = num / math.sqrt(den * cur)
                if 0.5 < rho < 0.99995 and align > 0.999:
                    factor = min(rho / (1.0 - rho), 1e4)
                    for f in range(3):
                        tail = deltas[f] * factor
                        fe[f][alive[f]] += tail[alive[f]]
                        lin += tail[codes[f]]
                    prev_step = None
                    continue
        prev_step = step


def _demean(x, w, codes, n_cells, tol, max_passes, start=None):
    """Project columns of x onto the complement of the three groupings in the
    w-weighted inner product, by alternating weighted demeaning."""
    xt = np.array(x if start is None else start, dtype=np.float64, copy=True)
    sw = [np.bincount(c, weights=w, minlength=m) for c, m in zip(codes, n_cells)]
    scale = np.maximum(1.0, np.abs(x).max(axis=0, initial=0.0))
    for _ in range(max_passes):
        worst = 0.0
        for c, m, s in zip(codes, n_cells, sw):
            for k in range(xt.shape[1]):
                mean = np.bincount(c, weights=w * xt[:, k], minlength=m)
                nz = s > 0
                mean[nz] /= s[nz]
                xt[:, k] -= mean[c]
                worst = max(worst, float(np.abs(mean).max(initial=0.0)) / scale[k])
        if worst <= tol:
            break
    return xt


def _check_absorbed(ws: _Workspace, xt, lam):
    raw = np.einsum("i,ik,ik->k", lam, ws.x, ws.x)
    proj = np.einsum("i,ik,ik->k", lam, xt, xt)
    bad = proj <= 1e-12 * np.maximum(raw, 1e-300)
    if bad.any():
        name = ws.panel.covariate_names[int(np.nonzero(bad)[0][0])]
        raise IdentificationError(
            f"covariate {name!r} is absorbed by the fixed effects "
            "(within-transformed column is numerically zero)"
        )


def _newton_step(ws: _Workspace, xt, lam):
    H = (xt * lam[:, None]).T @ xt
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        raise IdentificationError("singular weighted Gram matrix") from None
    score = (ws.y - lam) @ xt
    step = np.linalg.solve(H, score)
    worst = float(np.abs(step).max(initial=0.0))
    if worst > _MAX_STEP:
        step *= _MAX_STEP / worst
    return step


def _beta_residual(ws: _Workspace, lam):
    if ws.x.shape[1] == 0:
        return 0.0
    score = (ws.y - lam) @ ws.x
    return float(np.abs(score).max() / (1.0 + ws.y_total))


def fit(
    panel: GravityPanel,
    config: EstimateConfig | None = None,
    fe_start: tuple[Mapping, Mapping, Mapping] | None = None,
) -> FitResult:
    """Fit the three-way pseudo-Poisson model.

    Returns a :class:`FitResult` whose parameters satisfy all four
    first-order-condition families within ``config.foc_tolerance`` (scaled by
    1 + the relevant flow sum). Raises :class:`NonConvergenceError` (carrying
    the partial result) when the outer cap is exhausted,
    :class:`IdentificationError` on absorbed covariates, and
    :class:`SeparationError` if the overflow clamp is still active at the
    solution. ``fe_start`` optionally warm-starts the fixed effects from maps
    keyed like the result's.
    """
    cfg = config or EstimateConfig()
    ws = _Workspace(panel)
    K = panel.x.shape[1]

    warnings = []
    zeros = ws.zero_cell_counts()
    singles = ws.singleton_cell_counts()
    for name, z, s in zip(("exporter-time", "importer-time", "pair"), zeros, singles):
        if z:
            warnings.append(
                f"{z} {name} cells have zero flow sums; their observations are "
                "uninformative and were held out of the fit"
            )
        if s:
            warnings.append(
                f"{s} {name} cells are singletons; each is fitted exactly by its own effect"
            )

    fe = ws.initial_fe()
    if fe_start is not None:
        _apply_fe_start(panel, fe, fe_start)
    beta = np.zeros(K)
    lin = ws.x @ beta
    for f in range(3):
        lin = lin + fe[f][ws.codes[f]]

    tight = 0.5 * cfg.foc_tolerance
    inner_tol = tight if K == 0 else min(_LOOSE_INNER, tight * 1e3)
    xt = None
    residuals = None
    converged = False
    outer = 0
    while outer < cfg.max_outer_iterations:
        outer += 1
        lam, _, fe_res = _concentrate(ws, lin, fe, cfg, inner_tol)
        beta_res = _beta_residual(ws, lam)
        residuals = dict(zip(FOC_FAMILIES, (beta_res, *fe_res)))
        if all(v <= cfg.foc_tolerance for v in residuals.values()):
            if np.abs(lin).max(initial=0.0) >= cfg.exponent_cap:
                raise SeparationError(
                    "linear-predictor clamp active at the solution; the panel "
                    "likely contains unpruned separated cells"
                )
            converged = True
            break
        # solve the fixed effects only as tightly as the slopes warrant
        inner_tol = max(tight, min(_LOOSE_INNER, 0.05 * beta_res))
        if K == 0:
            continue
        xt = _demean(
            ws.x,
            lam,
            ws.codes,
            ws.n_cells,
            tol=max(0.01 * cfg.foc_tolerance, min(1e-6, 0.01 * beta_res)),
            max_passes=cfg.max_inner_iterations,
            start=xt,
        )
        _check_absorbed(ws, xt, lam)
        step = _newton_step(ws, xt, lam)
        beta = beta + step
        lin += ws.x @ step

    fe_off_live = np.zeros(ws.y.size)
    for f in range(3):
        fe_off_live += fe[f][ws.codes[f]]
    n = panel.dims.n
    fitted = np.zeros(n)
    fitted[ws.live] = lam
    fe_offset = np.full(n, -np.inf)
    fe_offset[ws.live] = fe_off_live

    result = FitResult(
        beta=beta,
        outer_iterations=outer,
        foc_residuals=residuals,
        converged=converged,
        fitted=fitted,
        fe_offset=fe_offset,
        warnings=tuple(warnings),
        _panel=panel,
        _fe=tuple(fe),
    )
    if not converged:
        raise NonConvergenceError(
            f"no convergence within {cfg.max_outer_iterations} outer iterations "
            f"(residuals {residuals})",
            residuals=residuals,
            result=result,
        )
    return result


def _apply_fe_start(panel: GravityPanel, fe, fe_start):
    label_pairs = (
        (panel.exporters, panel.periods),
        (panel.importers, panel.periods),
        (panel.exporters, panel.importers),
    )
    for f, (g, (first, second), mapping) in enumerate(
        zip((panel.exporter_time, panel.importer_time, panel.pair), label_pairs, fe_start)
    ):
        if mapping is None:
            continue
        for c in range(g.n_cells):
            key = (_pylabel(first[g.first[c]]), _pylabel(second[g.second[c]]))
            if key in mapping and np.isfinite(fe[f][c]):
                fe[f][c] = float(mapping[key])


def concentrate_fixed_effects(
    panel: GravityPanel,
    beta: np.ndarray,
    warm_start: tuple[Mapping, Mapping, Mapping] | None = None,
    config: EstimateConfig | None = None,
) -> tuple[dict, dict, dict]:
    """Solve the three fixed-effect condition families at fixed slopes.

    Returns (alpha, gamma, eta) maps keyed by original labels. The solution
    is one representative of the (non-unique) fixed-effect normalization;
    the implied fitted means are unique.
    """
    cfg = config or EstimateConfig()
    ws = _Workspace(panel)
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (panel.x.shape[1],):
        raise EstimationError(
            f"beta has shape {beta.shape}, expected ({panel.x.shape[1]},)"
        )
    fe = ws.initial_fe()
    if warm_start is not None:
        _apply_fe_start(panel, fe, warm_start)
    lin = ws.x @ beta
    for f in range(3):
        lin = lin + fe[f][ws.codes[f]]
    _concentrate(ws, lin, fe, cfg, 0.5 * cfg.foc_tolerance)
    return (
        _fe_map(panel.exporter_time, fe[0], panel.exporters, panel.periods),
        _fe_map(panel.importer_time, fe[1], panel.importers, panel.periods),
        _fe_map(panel.pair, fe[2], panel.exporters, panel.importers),
    )


def predicted_means(
    panel: GravityPanel, beta, alpha: Mapping, gamma: Mapping, eta: Mapping
) -> np.ndarray:
    """Fitted means exp(beta'x + alpha + gamma + eta) in panel row order."""
    beta = np.asarray(beta, dtype=np.float64)
    lin = panel.x @ beta
    label_pairs = (
        (panel.exporters, panel.periods, alpha),
        (panel.importers, panel.periods, gamma),
        (panel.exporters, panel.importers, eta),
    )
    for g, (first, second, mapping) in zip(
        (panel.exporter_time, panel.importer_time, panel.pair), label_pairs
    ):
        values = np.array(
            [
                float(mapping[(_pylabel(first[a]), _pylabel(second[b]))])
                for a, b in zip(g.first, g.second)
            ]
        )
        lin = lin + values[g.codes]
    with np.errstate(over="ignore"):
        return np.exp(lin)


def fit_beta_step(
    panel: GravityPanel, current: FitResult, config: EstimateConfig | None = None
) -> np.ndarray:
    """One Newton step on the concentrated slope problem, given a result whose
    fixed effects are current for its slopes. Returns the updated slope vector."""
    cfg = config or EstimateConfig()
    ws = _Workspace(panel)
    lam = current.fitted[ws.live]
    xt = _demean(
        ws.x,
        lam,
        ws.codes,
        ws.n_cells,
        tol=0.01 * cfg.foc_tolerance,
        max_passes=cfg.max_inner_iterations,
    )
    _check_absorbed(ws, xt, lam)
    return current.beta + _newton_step(ws, xt, lam)


def foc_residuals(panel: GravityPanel, result: FitResult) -> dict:
    """Scaled first-order-condition residuals of a (possibly perturbed) result.

    Recomputes the fitted means from ``result.beta`` and the per-observation
    fixed-effect offsets, so the audit reflects the parameters as given.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        lam = np.exp(panel.x @ result.beta + result.fe_offset)
    lam = np.where(np.isnan(lam), 0.0, lam)
    y = panel.flow
    out = {}
    if panel.x.shape[1]:
        score = (y - lam) @ panel.x
        out["beta"] = float(np.abs(score).max() / (1.0 + y.sum()))
    else:
        out["beta"] = 0.0
    for name, g in zip(
        FOC_FAMILIES[1:], (panel.exporter_time, panel.importer_time, panel.pair)
    ):
        sy = np.bincount(g.codes, weights=y, minlength=g.n_cells)
        sl = np.bincount(g.codes, weights=lam, minlength=g.n_cells)
        with np.errstate(invalid="ignore"):
            d = np.abs(sy - sl) / (1.0 + sy)
        out[name] = float(np.nanmax(d)) if d.size else 0.0
    return out


def cluster_robust_vcov(
    panel: GravityPanel, result: FitResult, grouping: str = "pair"
) -> np.ndarray:
    """Sandwich covariance of the slopes on the concentrated score.

    H^{-1} (sum_g s_g s_g') H^{-1}, with s_g the within-group sum of
    (y - lam) x~ and H = sum lam x~ x~'. ``grouping`` is one of
    ``pair``, ``exporter``, ``importer``, ``none`` (one group per observation).
    """
    if grouping not in CLUSTER_GROUPINGS:
        raise ValueError(f"unknown cluster grouping {grouping!r}")
    if not result.converged:
        raise EstimationError("covariance requires a converged fit")
    K = panel.x.shape[1]
    if K == 0:
        return np.zeros((0, 0))
    ws = _Workspace(panel)
    lam = result.fitted[ws.live]
    cfg = EstimateConfig()
    xt_live = _demean(
        ws.x,
        lam,
        ws.codes,
        ws.n_cells,
        tol=0.01 * cfg.foc_tolerance,
        max_passes=cfg.max_inner_iterations,
    )
    H = (xt_live * lam[:, None]).T @ xt_live
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        raise IdentificationError("singular weighted Gram matrix") from None

    u = ws.y - lam
    if grouping == "pair":
        g_codes = ws.codes[2]
        n_groups = ws.n_cells[2]
    elif grouping == "exporter":
        g_codes = panel.exporter_idx[ws.live]
        n_groups = len(panel.exporters)
    elif grouping == "importer":
        g_codes = panel.importer_idx[ws.live]
        n_groups = len(panel.importers)
    else:
        g_codes = np.arange(u.size)
        n_groups = u.size
    S = np.empty((n_groups, K))
    for k in range(K):
        S[:, k] = np.bincount(g_codes, weights=u * xt_live[:, k], minlength=n_groups)
    meat = S.T @ S
    V = np.linalg.solve(H, meat)
    V = np.linalg.solve(H, V.T).T
    return (V + V.T) / 2.0


def perturbed(result: FitResult, beta: np.ndarray) -> FitResult:
    """Copy of a result with the slope vector replaced (for residual audits)."""
    return replace(result, beta=np.asarray(beta, dtype=np.float64))
