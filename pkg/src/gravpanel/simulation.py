"""Synthetic panel generation and Monte Carlo studies.

The generator draws balanced N x N x T panels (self-pairs included) with

    y_ijt   = lam_ijt * omega_ijt,    lam_ijt = exp(beta * x_ijt + a_it + g_jt + e_ij)
    x_ijt   = 0.5 x_ijt-1 + a_it + g_jt + nu_ijt,            x_ij0 = e_ij + nu_ij0
    z_ijt   = 0.3 z_ijt-1 + xi_ijt,                          z_ij0 ~ N(0, 1)

with a_it, g_jt, e_ij iid normal with standard deviation 1/4, nu_ijt iid
normal with variance 1/2, and xi_ijt iid normal with variance 0.91 (which
makes z_ij0 ~ N(0, 1) the stationary start of the shock recursion). The pair
effect seeds the covariate's initial condition and enters the mean directly;
it is not re-added by the recursion, so the initial condition is also the
covariate's stationary pair level.

The multiplicative error omega is lognormal in z with
sigma^2 = log(1 + lam^-2); in the default "unit-mean" mode
omega = exp(-sigma^2/2 + sigma z), which gives E[omega] = 1 and
Var(omega) = lam^-2 when z is standard normal, i.e. Var(y | x) = 1. The
"literal" mode uses exp(-sigma^2/2 + z/sigma) instead (noise scale
reciprocal to sigma); it does not have unit mean, can overflow for large
lam, and exists for side-by-side comparison only.

Attrition either zeroes all flows of the floor(psi N^2) pairs with the
smallest pair effects (making them uninformative, to be removed by pruning)
or deletes that many uniformly chosen pairs outright.

All randomness flows through counter-based Philox substreams keyed by
(seed, replication), with normals drawn by inverse CDF from open-interval
uniforms, so results are identical across platforms, runs, and degrees of
parallelism.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from .corrections import correction_names, get_correction
from .errors import GravpanelError
from .estimation import EstimateConfig, fit
from .panel import GravityPanel
from .pruning import prune

ATTRITION_MODES = ("eta-smallest", "random-pairs", "none")
ERROR_MODES = ("unit-mean", "literal")

FE_SD = 0.25  # fixed-effect draws: variance 1/16
NU_SD = 0.5 ** 0.5  # covariate innovations: variance 1/2
XI_SD = math.sqrt(0.91)  # shock innovations: variance 0.91 = 1 - 0.3^2
X_AR = 0.5
Z_AR = 0.3


@dataclass(frozen=True)
class DgpConfig:
    N: int
    T: int
    beta_true: float = 1.0
    psi: float = 0.0
    attrition: str = "eta-smallest"
    error_mode: str = "unit-mean"
    seed: int = 0

    def __post_init__(self):
        if self.N < 2 or self.T < 2:
            raise ValueError("need N >= 2 and T >= 2")
        if not (0.0 <= self.psi < 1.0):
            raise ValueError("psi must lie in [0, 1)")
        if self.attrition not in ATTRITION_MODES:
            raise ValueError(f"attrition must be one of {ATTRITION_MODES}")
        if self.error_mode not in ERROR_MODES:
            raise ValueError(f"error_mode must be one of {ERROR_MODES}")

    @property
    def attrited_pairs(self) -> int:
        # tiny epsilon absorbs representation error in psi * N^2
        return int(math.floor(self.psi * self.N * self.N + 1e-9))


@dataclass(frozen=True, eq=False)
class DgpDraw:
    panel: GravityPanel
    latent: dict
    config: DgpConfig
    replication: int = 0


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))
    )


def _uniform_open(gen: np.random.Generator, shape) -> np.ndarray:
    """Uniforms strictly inside (0, 1), built from raw 64-bit Philox words."""
    bits = gen.integers(0, 2**64 - 1, size=shape, dtype=np.uint64, endpoint=True)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def standard_normals(gen: np.random.Generator, shape) -> np.ndarray:
    """Inverse-CDF normals; fixed method, stable across platforms."""
    return ndtri(_uniform_open(gen, shape))


def lognormal_error(lam: np.ndarray, z: np.ndarray, mode: str = "unit-mean") -> np.ndarray:
    """Multiplicative error given the mean level and a (standard normal) shock."""
    sigma2 = np.log1p(np.asarray(lam, dtype=np.float64) ** -2.0)
    z = np.asarray(z, dtype=np.float64)
    if mode == "unit-mean":
        return np.exp(-0.5 * sigma2 + np.sqrt(sigma2) * z)
    if mode == "literal":
        with np.errstate(over="ignore"):
            return np.exp(-0.5 * sigma2 + z / np.sqrt(sigma2))
    raise ValueError(f"error_mode must be one of {ERROR_MODES}")


def generate_dgp1(config: DgpConfig, replication: int = 0) -> DgpDraw:
    """One balanced draw; deterministic given (config.seed, replication).

    Draws are consumed from a single substream in a fixed order: the three
    fixed-effect blocks, then the covariate innovations (including the t=0
    start), the shock start z_0, and the shock innovations.
    """
    gen = _stream(config.seed, replication, 0)
    N, T = config.N, config.T
    alpha = FE_SD * standard_normals(gen, (N, T))
    gamma = FE_SD * standard_normals(gen, (N, T))
    eta = FE_SD * standard_normals(gen, (N, N))
    nu = NU_SD * standard_normals(gen, (N, N, T + 1))
    z0 = standard_normals(gen, (N, N))
    xi = XI_SD * standard_normals(gen, (N, N, T))

    x = np.empty((N, N, T + 1))
    x[:, :, 0] = eta + nu[:, :, 0]
    z = np.empty((N, N, T + 1))
    z[:, :, 0] = z0
    for t in range(1, T + 1):
        fe_t = alpha[:, None, t - 1] + gamma[None, :, t - 1]
        x[:, :, t] = X_AR * x[:, :, t - 1] + fe_t + nu[:, :, t]
        z[:, :, t] = Z_AR * z[:, :, t - 1] + xi[:, :, t - 1]

    fe = alpha[:, None, :] + gamma[None, :, :] + eta[:, :, None]
    lam = np.exp(config.beta_true * x[:, :, 1:] + fe)
    omega = lognormal_error(lam, z[:, :, 1:], config.error_mode)
    y = lam * omega

    countries = np.arange(1, N + 1)
    period_labels = np.arange(1, T + 1)
    exp_idx = np.repeat(np.arange(N), N * T)
    imp_idx = np.tile(np.repeat(np.arange(N), T), N)
    per_idx = np.tile(np.arange(T), N * N)
    panel = GravityPanel(
        exporter_idx=exp_idx.astype(np.int64),
        importer_idx=imp_idx.astype(np.int64),
        period_idx=per_idx.astype(np.int64),
        flow=y.ravel(),
        x=x[:, :, 1:].reshape(-1, 1),
        exporters=countries,
        importers=countries,
        periods=period_labels,
        covariate_names=("x1",),
    )
    panel._validate()
    latent = {
        "alpha": alpha,
        "gamma": gamma,
        "eta": eta,
        "nu": nu,
        "z": z,
        "xi": xi,
        "x": x,
        "lam": lam,
        "omega": omega,
    }
    return DgpDraw(panel=panel, latent=latent, config=config, replication=replication)


def apply_attrition(draw: DgpDraw, config: DgpConfig | None = None) -> GravityPanel:
    """Apply the configured attrition scheme to a balanced draw.

    "eta-smallest" zeroes all T flows of the floor(psi N^2) pairs with the
    smallest pair effects (ties broken by pair index); "random-pairs" deletes
    that many uniformly chosen pairs outright; "none" returns the panel as is.
    """
    cfg = config or draw.config
    k = cfg.attrited_pairs
    if k >= cfg.N * cfg.N:
        raise GravpanelError("attrition would remove every pair")
    if cfg.attrition == "none" or k == 0:
        return draw.panel
    N, T = cfg.N, cfg.T
    if cfg.attrition == "eta-smallest":
        order = np.argsort(draw.latent["eta"].ravel(), kind="stable")
        chosen = order[:k]
        flows = draw.panel.flow.copy()
        rows = (chosen[:, None] * T + np.arange(T)[None, :]).ravel()
        flows[rows] = 0.0
        return draw.panel.with_flows(flows)
    # random-pairs: rank pairs by an independent uniform substream
    gen = _stream(cfg.seed, draw.replication, 1)
    u = _uniform_open(gen, N * N)
    chosen = np.argsort(u, kind="stable")[:k]
    drop = np.zeros(N * N, dtype=bool)
    drop[chosen] = True
    keep_rows = ~np.repeat(drop, T)
    return draw.panel.subset_mask(keep_rows)


def heuristic_validation_design(psi: float) -> int:
    """Country count floor(20 / (1 - psi)), keeping the post-attrition average
    number of trading partners near 20 across psi."""
    if not (0.0 <= psi <= 0.95):
        raise ValueError("psi must lie in [0, 0.95]")
    return int(math.floor(20.0 / (1.0 - psi)))


# -- Monte Carlo ------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorStats:
    bias_pct: float
    sd: float
    bias_over_sd: float
    n_ok: int

    def mc_se_pct(self, beta_true: float) -> float:
        """Monte Carlo standard error of the mean relative bias, in percent."""
        return 100.0 * self.sd / abs(beta_true) / math.sqrt(self.n_ok)


@dataclass(frozen=True, eq=False)
class MonteCarloSummary:
    config: DgpConfig
    replications: int
    estimators: dict
    mean_n_star: float
    failures: int
    failure_messages: tuple[str, ...] = field(default=(), repr=False)

    @property
    def failure_rate(self) -> float:
        return self.failures / (self.replications * max(len(self.estimators), 1))

    @property
    def flagged(self) -> bool:
        return self.failure_rate > 0.001


def _resolve_estimator(label: str):
    if label == "feppml":
        return None
    return get_correction(label)


def _run_replication(args):
    config, rep, labels, est_config = args
    draw = generate_dgp1(config, replication=rep)
    panel = apply_attrition(draw, config)
    pruned, _ = prune(panel)
    betas = {}
    errors = []
    full_fit = None  # the jackknife's full-panel fit doubles as "feppml"
    for label in labels:
        try:
            if label == "feppml":
                if full_fit is None:
                    full_fit = fit(pruned, est_config)
                beta = full_fit.beta
            elif label == "spj":
                from .corrections import spj

                result = spj(pruned, est_config, full_fit=full_fit)
                full_fit = result.subfit_reports[0].fit
                beta = result.beta_corrected
            else:
                beta = get_correction(label)(pruned, est_config).beta_corrected
            betas[label] = float(np.asarray(beta).ravel()[0])
        except GravpanelError as exc:
            betas[label] = math.nan
            errors.append(f"rep {rep} {label}: {exc}")
    return rep, pruned.dims.n, betas, errors


def run_monte_carlo(
    config: DgpConfig,
    replications: int,
    estimators: Sequence[str] = ("feppml",),
    est_config: EstimateConfig | None = None,
    threads: int = 1,
) -> MonteCarloSummary:
    """Replicate generate -> attrit -> prune -> fit and aggregate.

    Per-replication substreams are derived from (config.seed, replication),
    and aggregation runs in replication order, so the summary is identical
    for any worker count. Estimator labels are "feppml" or any registered
    correction name.
    """
    if replications < 2:
        raise ValueError("need at least two replications")
    labels = tuple(estimators)
    for label in labels:
        _resolve_estimator(label)  # raises on unknown labels up front

    tasks = [(config, rep, labels, est_config) for rep in range(replications)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            raw = list(pool.map(_run_replication, tasks, chunksize=8))
    else:
        raw = [_run_replication(t) for t in tasks]
    raw.sort(key=lambda item: item[0])

    n_stars = np.array([item[1] for item in raw], dtype=np.float64)
    messages: list[str] = []
    stats = {}
    for label in labels:
        values = np.array([item[2][label] for item in raw])
        ok = values[~np.isnan(values)]
        mean = float(ok.mean()) if ok.size else math.nan
        sd = float(ok.std(ddof=1)) if ok.size > 1 else 0.0
        bias_pct = 100.0 * (mean / config.beta_true - 1.0)
        ratio = 0.0 if sd == 0.0 else (mean - config.beta_true) / sd
        stats[label] = EstimatorStats(
            bias_pct=bias_pct, sd=sd, bias_over_sd=ratio, n_ok=int(ok.size)
        )
    for item in raw:
        messages.extend(item[3])
    return MonteCarloSummary(
        config=config,
        replications=replications,
        estimators=stats,
        mean_n_star=float(n_stars.mean()),
        failures=len(messages),
        failure_messages=tuple(messages),
    )


def available_estimators() -> tuple[str, ...]:
    return ("feppml",) + correction_names()
