import numpy as np
import pytest

import gravpanel as gp
from gravpanel import corrections
from conftest import random_positive_panel


def test_default_split_even_and_odd(rng):
    p4 = random_positive_panel(rng, 3, 3, 4)
    s4 = gp.default_split(p4)
    assert s4.first_half == (0, 1)
    assert s4.second_half == (2, 3)

    p5 = random_positive_panel(rng, 3, 3, 5)
    s5 = gp.default_split(p5)
    assert s5.first_half == (0, 1, 2)
    assert s5.second_half == (2, 3, 4)


def test_split_panel_restricts_periods(rng):
    panel = random_positive_panel(rng, 3, 3, 5)
    first, second = gp.split_panel(panel)
    assert first.dims.T == 3 and second.dims.T == 3
    assert first.dims.n + second.dims.n == panel.dims.n + panel.dims.n // 5


def test_split_panel_t3_errors(rng):
    panel = random_positive_panel(rng, 3, 3, 3)
    with pytest.raises(gp.GravpanelError, match="T >= 4"):
        gp.split_panel(panel)


def test_half_split_validation():
    with pytest.raises(ValueError):
        gp.HalfPanelSplit((1,), (2, 3))


def test_split_must_cover_all_periods(rng):
    panel = random_positive_panel(rng, 3, 3, 5)
    with pytest.raises(gp.GravpanelError, match="cover"):
        gp.split_panel(panel, gp.HalfPanelSplit((0, 1), (2, 3)))


def test_spj_combine_arithmetic():
    assert np.allclose(gp.spj_combine([1.10], [1.12], [1.16]), [1.06])
    v = np.array([0.4, -2.0])
    assert np.allclose(gp.spj_combine(v, v, v), v)


def test_spj_on_panel(rng):
    panel = random_positive_panel(rng, 5, 5, 4, K=1)
    result = gp.spj(panel)
    assert result.method == "spj"
    expected = gp.spj_combine(
        result.beta_uncorrected, result.half_estimates[0], result.half_estimates[1]
    )
    assert np.allclose(result.beta_corrected, expected)
    parts = [rep.part for rep in result.subfit_reports]
    assert parts == ["full", "first-half", "second-half"]
    # halves were re-pruned before fitting
    for rep in result.subfit_reports[1:]:
        assert rep.prune_report is not None
        assert rep.fit.converged


def test_spj_halves_are_repruned(rng):
    # a pair observed only in the first half becomes a pair singleton there
    panel = random_positive_panel(rng, 4, 4, 4, K=1)
    keep = ~(
        (panel.exporter_idx == 0)
        & (panel.importer_idx == 1)
        & (panel.period_idx != 0)
    )
    ragged = panel.subset_mask(keep)
    result = gp.spj(ragged)
    first_report = result.subfit_reports[1].prune_report
    assert first_report.n_dropped >= 1
    rules = {rec.rule for rec in first_report.dropped}
    assert gp.PruneRule.PAIR_SINGLETON in rules


def test_spj_failure_names_part(rng):
    panel = random_positive_panel(rng, 3, 3, 4, K=1)
    bad_config = gp.EstimateConfig(max_outer_iterations=1, foc_tolerance=1e-14)
    with pytest.raises(gp.SubfitError) as err:
        gp.spj(panel, bad_config)
    assert err.value.part == "full"


def test_registry_contains_spj_and_rejects_duplicates():
    assert "spj" in gp.correction_names()
    with pytest.raises(gp.DuplicateCorrectionError):
        gp.register_correction("spj", gp.spj)
    with pytest.raises(gp.UnknownCorrectionError):
        gp.get_correction("nope")


def test_registered_stub_passthrough(rng):
    panel = random_positive_panel(rng, 4, 4, 4, K=1)

    def passthrough(p, config=None):
        full = gp.fit(p, config)
        return corrections.CorrectionResult(
            method="abc-stub",
            beta_corrected=full.beta,
            beta_uncorrected=full.beta,
        )

    gp.register_correction("abc-stub-test", passthrough)
    try:
        got = gp.get_correction("abc-stub-test")(panel, None)
        assert np.allclose(got.beta_corrected, gp.fit(panel).beta)
    finally:
        corrections._REGISTRY.pop("abc-stub-test")
