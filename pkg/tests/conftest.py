import numpy as np
import pytest

import gravpanel as gp


def balanced_panel(N, T, flows, covariates=None, self_pairs=True):
    """Balanced N x N x T panel (row order: exporter, importer, period)."""
    exp = np.repeat(np.arange(1, N + 1), N * T)
    imp = np.tile(np.repeat(np.arange(1, N + 1), T), N)
    per = np.tile(np.arange(1, T + 1), N * N)
    flows = np.asarray(flows, dtype=float).ravel()
    x = None if covariates is None else np.asarray(covariates, dtype=float).reshape(len(flows), -1)
    if not self_pairs:
        keep = exp != imp
        exp, imp, per, flows = exp[keep], imp[keep], per[keep], flows[keep]
        if x is not None:
            x = x[keep]
    return gp.GravityPanel.from_arrays(exp, imp, per, flows, x)


def random_positive_panel(rng, I, J, T, K=1):
    """All-positive balanced I x J x T panel with standard normal covariates."""
    n = I * J * T
    exp = np.repeat(np.arange(I), J * T)
    imp = np.tile(np.repeat(np.arange(J), T), I)
    per = np.tile(np.arange(T), I * J)
    x = rng.normal(0.0, 1.0, (n, K))
    flow = rng.lognormal(0.0, 1.0, n)
    return gp.GravityPanel.from_arrays(exp, imp, per, flow, x)


def random_sparse_panel(rng, I, J, T, K=1, zero_frac=0.3):
    panel = random_positive_panel(rng, I, J, T, K)
    flow = panel.flow.copy()
    flow[rng.random(flow.size) < zero_frac] = 0.0
    return panel.with_flows(flow)


@pytest.fixture
def rng():
    return np.random.default_rng(20260808)


def hand_instance():
    """3 x 3 x 2 balanced panel with self-pairs where pair (1,2) never trades.

    Running the removal rules by hand: the exporter-time and importer-time
    sums all stay positive, pair (1,2) has flow sum zero so its two rows drop
    in round 1, and no cell becomes a singleton afterwards (each exporter-time
    and importer-time cell keeps at least two members, each pair both periods).
    Round 2 finds nothing.
    """
    flows = np.arange(1.0, 19.0)
    # rows ordered (i, j, t); pair (1,2) occupies rows 2 and 3
    flows[2] = 0.0
    flows[3] = 0.0
    x = np.random.default_rng(99).normal(0.0, 1.0, 18)
    return balanced_panel(3, 2, flows, x), (2, 3)
