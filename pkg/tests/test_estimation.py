import numpy as np
import pytest

import gravpanel as gp
from gravpanel.estimation import perturbed
from conftest import balanced_panel, random_positive_panel, random_sparse_panel
from glm_oracle import cluster_vcov_dense, fit_dense


def noiseless_panel(rng, N=4, T=3, beta=0.7):
    alpha = rng.normal(0, 0.3, (N, T))
    gamma = rng.normal(0, 0.3, (N, T))
    eta = rng.normal(0, 0.3, (N, N))
    x = rng.normal(0, 1, (N, N, T))
    lam = np.exp(beta * x + alpha[:, None, :] + gamma[None, :, :] + eta[:, :, None])
    return balanced_panel(N, T, lam, x), beta


def test_noiseless_recovery(rng):
    panel, beta = noiseless_panel(rng)
    result = gp.fit(panel)
    assert result.converged
    assert abs(result.beta[0] - beta) <= 1e-8
    assert max(result.foc_residuals.values()) <= 1e-8
    assert result.warnings == ()


def test_oracle_equivalence_4x4x2(rng):
    panel = random_sparse_panel(rng, 4, 4, 2, K=1, zero_frac=0.2)
    pruned, _ = gp.prune(panel)
    result = gp.fit(pruned)
    beta_oracle, _, lam_oracle = fit_dense(pruned)
    assert abs(result.beta[0] - beta_oracle[0]) <= 1e-6
    assert result.outer_iterations <= 25
    assert np.allclose(result.fitted, lam_oracle, rtol=1e-6, atol=1e-9)


def test_fe_maps_cover_cells_and_are_finite(rng):
    panel = random_positive_panel(rng, 4, 3, 2)
    result = gp.fit(panel)
    assert set(result.alpha) == set(gp.cell_sums(panel, "exporter-time"))
    assert set(result.gamma) == set(gp.cell_sums(panel, "importer-time"))
    assert set(result.eta) == set(gp.cell_sums(panel, "pair"))
    for mapping in (result.alpha, result.gamma, result.eta):
        assert all(np.isfinite(v) for v in mapping.values())


def test_concentrate_constant_panel():
    panel = balanced_panel(3, 2, np.full(18, 4.0))
    alpha, gamma, eta = gp.concentrate_fixed_effects(panel, np.zeros(0))
    lam = gp.predicted_means(panel, np.zeros(0), alpha, gamma, eta)
    assert np.allclose(lam, 4.0, atol=1e-8)


def test_concentrate_reproduces_group_sums(rng):
    panel = random_positive_panel(rng, 3, 3, 2, K=0)
    alpha, gamma, eta = gp.concentrate_fixed_effects(panel, np.zeros(0))
    lam = gp.predicted_means(panel, np.zeros(0), alpha, gamma, eta)
    for grouping, cells in (
        ("exporter-time", panel.exporter_time),
        ("importer-time", panel.importer_time),
        ("pair", panel.pair),
    ):
        sums_y = np.bincount(cells.codes, weights=panel.flow, minlength=cells.n_cells)
        sums_lam = np.bincount(cells.codes, weights=lam, minlength=cells.n_cells)
        assert np.max(np.abs(sums_y - sums_lam) / (1 + sums_y)) <= 1e-8


def test_single_pair_update_is_cell_mean():
    # one pair observed twice; with alpha = gamma = 0 the pair condition alone
    # sets exp(eta) to the mean flow
    panel = gp.GravityPanel.from_arrays([1, 1], [2, 2], [1, 2], [2.0, 4.0])
    ws = gp.estimation._Workspace(panel)
    lam = np.ones(2)
    sums = np.bincount(ws.codes[2], weights=lam, minlength=ws.n_cells[2])
    delta = np.log(ws.sums_y[2]) - np.log(sums)
    lam_new = lam * np.exp(delta)[ws.codes[2]]
    assert np.allclose(lam_new, 3.0)
    assert abs((panel.flow - lam_new).sum()) <= 1e-12


def test_k0_panel_fits_fe_only(rng):
    panel = random_positive_panel(rng, 3, 3, 3, K=0)
    result = gp.fit(panel)
    assert result.beta.shape == (0,)
    assert result.converged
    assert max(result.foc_residuals.values()) <= 1e-8


def test_foc_residuals_perturbation(rng):
    panel = random_positive_panel(rng, 4, 4, 2)
    result = gp.fit(panel)
    clean = gp.foc_residuals(panel, result)
    assert all(v <= 1e-8 for v in clean.values())
    bumped = gp.foc_residuals(panel, perturbed(result, result.beta + 0.1))
    assert bumped["beta"] > 1e-8


def test_fit_beta_step_zero_at_root_and_oracle_instance(rng):
    panel = random_positive_panel(rng, 4, 4, 2)
    result = gp.fit(panel)
    stepped = gp.fit_beta_step(panel, result)
    assert np.allclose(stepped, result.beta, atol=1e-7)


def test_constant_covariate_identification_error(rng):
    panel = random_positive_panel(rng, 3, 3, 2, K=1)
    x = np.ones_like(panel.x)
    bad = gp.GravityPanel.from_arrays(
        panel.exporters[panel.exporter_idx],
        panel.importers[panel.importer_idx],
        panel.periods[panel.period_idx],
        panel.flow,
        x,
    )
    with pytest.raises(gp.IdentificationError, match="x1"):
        gp.fit(bad)


def test_normalization_invariance_shuffle_and_warm_start(rng):
    panel = random_positive_panel(rng, 4, 3, 3)
    base = gp.fit(panel)

    perm = rng.permutation(panel.dims.n)
    shuffled = gp.GravityPanel.from_arrays(
        panel.exporters[panel.exporter_idx[perm]],
        panel.importers[panel.importer_idx[perm]],
        panel.periods[panel.period_idx[perm]],
        panel.flow[perm],
        panel.x[perm],
    )
    other = gp.fit(shuffled)
    assert np.allclose(base.beta, other.beta, atol=1e-8)

    zero_start = (
        {k: 0.0 for k in base.alpha},
        {k: 0.0 for k in base.gamma},
        {k: 0.0 for k in base.eta},
    )
    warm = gp.fit(panel, fe_start=zero_start)
    assert np.allclose(base.beta, warm.beta, atol=1e-8)
    assert np.allclose(base.fitted, warm.fitted, rtol=1e-7, atol=1e-10)


def test_scale_equivariance(rng):
    panel = random_positive_panel(rng, 4, 4, 2)
    base = gp.fit(panel)
    scaled_panel = panel.with_flows(panel.flow * 7.5)
    scaled = gp.fit(scaled_panel)
    assert np.allclose(base.beta, scaled.beta, atol=1e-7)
    assert np.allclose(scaled.fitted, 7.5 * base.fitted, rtol=1e-6)


def test_unpruned_zero_cells_warn_and_match_pruned(rng):
    panel = random_positive_panel(rng, 4, 4, 3)
    flows = panel.flow.copy()
    pair_mask = (panel.exporter_idx == 0) & (panel.importer_idx == 1)
    flows[pair_mask] = 0.0
    unpruned = panel.with_flows(flows)

    full = gp.fit(unpruned)
    assert any("zero flow sums" in w for w in full.warnings)
    assert np.all(full.fitted[pair_mask] == 0.0)
    assert full.eta[(0, 1)] == -np.inf

    pruned, _ = gp.prune(unpruned)
    restricted = gp.fit(pruned)
    assert np.allclose(full.beta, restricted.beta, atol=1e-6)


def test_nonconvergence_error_carries_result(rng):
    panel = random_positive_panel(rng, 4, 4, 2)
    config = gp.EstimateConfig(max_outer_iterations=1, foc_tolerance=1e-12)
    with pytest.raises(gp.NonConvergenceError) as err:
        gp.fit(panel, config)
    assert err.value.result is not None
    assert not err.value.result.converged
    assert err.value.residuals is not None


def test_cluster_vcov_matches_dense_oracle(rng):
    panel = random_positive_panel(rng, 4, 4, 2, K=1)
    result = gp.fit(panel)
    for grouping in ("pair", "none", "exporter"):
        mine = gp.cluster_robust_vcov(panel, result, grouping)
        oracle, beta_oracle = cluster_vcov_dense(panel, grouping)
        assert abs(result.beta[0] - beta_oracle[0]) <= 1e-7
        assert np.allclose(mine, oracle, rtol=1e-6)
        assert mine[0, 0] > 0.0


def test_cluster_vcov_symmetric_psd(rng):
    panel = random_positive_panel(rng, 5, 4, 3, K=2)
    result = gp.fit(panel)
    V = gp.cluster_robust_vcov(panel, result, "pair")
    assert np.allclose(V, V.T)
    assert np.all(np.linalg.eigvalsh(V) >= -1e-12)


def test_vcov_requires_convergence(rng):
    panel = random_positive_panel(rng, 3, 3, 2)
    try:
        gp.fit(panel, gp.EstimateConfig(max_outer_iterations=1, foc_tolerance=1e-13))
    except gp.NonConvergenceError as err:
        with pytest.raises(gp.EstimationError):
            gp.cluster_robust_vcov(panel, err.result, "pair")


def test_config_validation():
    with pytest.raises(ValueError):
        gp.EstimateConfig(foc_tolerance=0.0)
    with pytest.raises(ValueError):
        gp.EstimateConfig(max_outer_iterations=0)
    with pytest.raises(ValueError):
        gp.EstimateConfig(exponent_cap=-1.0)
