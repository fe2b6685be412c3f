import numpy as np
import pandas as pd
import pytest

from contest_lab.core import SpecError
from contest_lab.did import (
    RankDeficiencyError,
    RegressionSpec,
    WindowError,
    cs_group_time,
    dense_dummy_ols,
    event_study,
    placebo_test,
    twfe,
)
from contest_lab.panel import OutcomeEffect, Panel, PanelConfig, generate_panel


def frame(Y, adoption, years):
    """Long panel from a units x years outcome matrix."""
    Y = np.asarray(Y, dtype=float)
    n, T = Y.shape
    return Panel(pd.DataFrame({
        "unit_id": np.repeat(np.arange(1, n + 1), T),
        "province_id": 1,
        "year": np.tile(years, n),
        "adoption_year": pd.array(np.repeat(adoption, T), dtype="Int64"),
        "group": "none",
        "lgdp": Y.ravel(),
    }))


def dummy_ols(panel, regressors, outcome="lgdp"):
    """OLS on explicit unit and year dummies with CR1 unit-clustered SEs."""
    df = panel.data
    X = np.column_stack([regressors,
                         pd.get_dummies(df["unit_id"]).to_numpy(float),
                         pd.get_dummies(df["year"], drop_first=True).to_numpy(float)])
    y = df[outcome].to_numpy(float)
    XtX_inv = np.linalg.pinv(X.T @ X)
    b = XtX_inv @ X.T @ y
    u = y - X @ b
    N, K = X.shape
    G = df["unit_id"].nunique()
    meat = np.zeros((K, K))
    for _, idx in df.groupby("unit_id").indices.items():
        s = X[idx].T @ u[idx]
        meat += np.outer(s, s)
    k = regressors.shape[1]
    return b[:k], XtX_inv @ meat @ XtX_inv, G, N


def small_panel(**kw):
    base = dict(n_units=40, n_provinces=8, years=(2001, 2010), seed=3)
    base.update(kw)
    return generate_panel(PanelConfig(**base))


class TestTWFE:
    def test_hand_two_by_two(self):
        p = frame([[1, 3], [1, 2]], [2, None], [1, 2])
        rep = twfe(p, RegressionSpec(cluster="none"))
        assert rep.coef("treat") == pytest.approx(1.0, abs=1e-12)

    def test_noise_free_null_is_exactly_zero(self):
        p = small_panel(effects={}, sigma=0.0)
        rep = twfe(p, RegressionSpec(treatment=("treat", "trend")))
        assert abs(rep.coef("treat")) < 1e-10
        assert abs(rep.coef("trend")) < 1e-10

    def test_matches_dummy_regression(self):
        p = small_panel()
        rep = twfe(p, RegressionSpec(treatment=("treat", "trend")))
        R = np.column_stack([p.treat(), p.trend()])
        b, V, G, N = dummy_ols(p, R)
        np.testing.assert_allclose(rep.table["estimate"], b, atol=1e-8)
        # CR1 with only the slope regressors counted
        scale = G / (G - 1) * (N - 1) / (N - 2)
        np.testing.assert_allclose(rep.table["se"], np.sqrt(np.diag(V)[:2] * scale), rtol=1e-6)
        np.testing.assert_allclose(dense_dummy_ols(p, RegressionSpec(treatment=("treat", "trend"))), b,
                                   atol=1e-8)

    def test_recovers_truth_on_large_panel(self):
        p = generate_panel(PanelConfig(seed=7))
        rep = twfe(p, RegressionSpec(treatment=("treat", "trend")))
        assert abs(rep.coef("treat") - 0.07) < 4 * rep.se("treat")
        assert abs(rep.coef("trend") - 0.006) < 4 * rep.se("trend")

    def test_covariate_trends_absorb_confounding(self):
        cfg = dict(covariate_loadings=((0.5, 0.0, 0.3),), effects={"lgdp": OutcomeEffect(0.05)}, seed=9)
        p = generate_panel(PanelConfig(**cfg))
        adjusted = twfe(p, RegressionSpec(covariates=(("cov_1", 3),)))
        assert "cov_1_t3" in set(adjusted.table["term"])
        assert abs(adjusted.coef("treat") - 0.05) < 4 * adjusted.se("treat")

    def test_twoway_cluster(self):
        p = small_panel()
        rep = twfe(p, RegressionSpec(cluster="twoway"))
        assert np.all(rep.table["se"] > 0)

    def test_rank_deficiency_names_columns(self):
        p = small_panel()
        p.data["copy"] = p.treat()
        with pytest.raises(RankDeficiencyError) as err:
            twfe(p, RegressionSpec(treatment=("treat", "copy")))
        assert "copy" in err.value.columns or "treat" in err.value.columns

    def test_unknown_outcome(self):
        with pytest.raises(SpecError):
            twfe(small_panel(), RegressionSpec(outcome="gdp"))

    def test_policy_and_crowding_terms(self):
        p = small_panel(group_rule="advantage")
        rep = twfe(p, RegressionSpec(group="econ", policy_years=(2005,), crowding_groups=("eco",)))
        assert {"treat", "policy_2005", "crowd_eco"} <= set(rep.table["term"])


class TestEventStudy:
    def test_reference_is_zero(self):
        rep = event_study(small_panel())
        ref = rep.table[rep.table["rel_time"] == -1].iloc[0]
        assert ref["estimate"] == 0.0 and ref["se"] == 0.0

    def test_noise_free_null(self):
        rep = event_study(small_panel(effects={}, sigma=0.0))
        assert np.abs(rep.table["estimate"]).max() < 1e-10

    def test_pure_level_effect(self):
        p = generate_panel(PanelConfig(effects={"lgdp": OutcomeEffect(0.1)}, sigma=0.01, seed=5))
        t = event_study(p).table
        post = t[t["rel_time"] >= 0]
        pre = t[t["rel_time"] < -1]
        np.testing.assert_allclose(post["estimate"], 0.1, atol=0.01)
        np.testing.assert_allclose(pre["estimate"], 0.0, atol=0.01)

    def test_matches_dummy_regression(self):
        p = small_panel()
        rep = event_study(p, pre_periods=2, post_periods=2)
        df = p.data
        rel = (df["year"] - df["adoption_year"].astype(float)).to_numpy()
        ev = np.clip(np.nan_to_num(rel, nan=-99), -2, 2)
        cols = [((ev == k) & ~np.isnan(rel)).astype(float) for k in (-2, 0, 1, 2)]
        b, _, _, _ = dummy_ols(p, np.column_stack(cols))
        est = rep.table.set_index("rel_time").loc[[-2, 0, 1, 2], "estimate"].to_numpy()
        np.testing.assert_allclose(est, b, atol=1e-8)

    def test_window_too_wide(self):
        with pytest.raises(WindowError, match="feasible span"):
            event_study(small_panel(), pre_periods=30)


class TestGroupTime:
    def test_hand_double_difference(self):
        years = [1, 2, 3, 4]
        Y = [[1, 2, 4, 5], [1, 2, 3, 4]]
        rep = cs_group_time(frame(Y, [3, None], years), bootstrap=0)
        gt = rep.extra["att_gt"].set_index(["g", "t"])["att"]
        assert gt[(3, 3)] == pytest.approx(1.0)
        assert gt[(3, 4)] == pytest.approx(1.0)
        assert gt[(3, 1)] == pytest.approx(0.0)

    def test_noise_free_null(self):
        rep = cs_group_time(small_panel(effects={}, sigma=0.0), bootstrap=0)
        assert np.nanmax(np.abs(rep.extra["att_gt"]["att"])) < 1e-10

    def test_missing_control_cells(self):
        years = [1, 2, 3, 4]
        Y = [[1, 2, 4, 5], [1, 2, 3, 4]]
        rep = cs_group_time(frame(Y, [3, 2], years), control="never", bootstrap=0)
        assert rep.extra["att_gt"]["missing"].all()

    def test_not_yet_treated_controls(self):
        years = [1, 2, 3, 4]
        Y = [[1, 2, 4, 5], [1, 2, 3, 5]]
        rep = cs_group_time(frame(Y, [3, 4], years), control="notyet", bootstrap=0)
        gt = rep.extra["att_gt"].set_index(["g", "t"])
        assert gt.loc[(3, 3), "att"] == pytest.approx(1.0)
        assert gt.loc[(3, 4), "missing"]

    def test_bootstrap_reproducible(self):
        p = small_panel()
        a = cs_group_time(p, bootstrap=50, seed=1).table
        b = cs_group_time(p, bootstrap=50, seed=1).table
        pd.testing.assert_frame_equal(a, b)
        assert (a["se"].dropna() > 0).all()


class TestPlacebo:
    def test_constant_outcome(self):
        p = small_panel()
        p.data["lgdp"] = 1.0
        rep = placebo_test(p, draws=40)
        assert np.abs(rep.extra["draws"]["estimate"]).max() < 1e-12
        assert rep.extra["p_value"] == 1.0

    def test_strong_effect_rejects(self):
        p = generate_panel(PanelConfig(effects={"lgdp": OutcomeEffect(0.07)}, sigma=0.02, seed=0))
        rep = placebo_test(p, draws=500, seed=0)
        assert rep.extra["p_value"] <= 0.05

    def test_reproducible_and_seed_sensitive(self):
        p = small_panel()
        a = placebo_test(p, draws=30, seed=2).extra["draws"]
        b = placebo_test(p, draws=30, seed=2).extra["draws"]
        c = placebo_test(p, draws=30, seed=3).extra["draws"]
        pd.testing.assert_frame_equal(a, b)
        assert not a.equals(c)

    def test_draws_must_be_positive(self):
        with pytest.raises(SpecError):
            placebo_test(small_panel(), draws=0)

    def test_histogram_counts_all_draws(self):
        rep = placebo_test(small_panel(), draws=60)
        assert rep.extra["histogram"]["count"].sum() == 60


class TestInvariances:
    def test_constant_shift(self):
        p = small_panel()
        a = twfe(p, RegressionSpec(treatment=("treat", "trend"))).table
        p.data["lgdp"] = p.data["lgdp"] + 123.0
        b = twfe(p, RegressionSpec(treatment=("treat", "trend"))).table
        np.testing.assert_allclose(a["estimate"], b["estimate"], atol=1e-9)
        np.testing.assert_allclose(a["se"], b["se"], rtol=1e-6)

    def test_row_order(self):
        p = small_panel()
        a = twfe(p, RegressionSpec(treatment=("treat", "trend"))).table
        shuffled = Panel(p.data.sample(frac=1.0, random_state=0).reset_index(drop=True))
        b = twfe(shuffled, RegressionSpec(treatment=("treat", "trend"))).table
        np.testing.assert_allclose(a["estimate"], b["estimate"], atol=1e-10)
        np.testing.assert_allclose(a["se"], b["se"], rtol=1e-8)

    def test_cs_cells_are_simple_double_differences(self):
        p = small_panel(adoption_years={i: (2005 if i <= 4 else None) for i in range(1, 9)})
        gt = cs_group_time(p, bootstrap=0).extra["att_gt"].set_index(["g", "t"])["att"]
        Y = p.data.pivot(index="unit_id", columns="year", values="lgdp")
        adopt = p.data.groupby("unit_id")["adoption_year"].first()
        tr, nv = adopt.notna(), adopt.isna()
        for t in (2003, 2005, 2009):
            d = Y[t] - Y[2004]
            assert gt[(2005, t)] == pytest.approx(d[tr].mean() - d[nv].mean(), abs=1e-12)

    def test_placebo_p_value_stable_across_seeds(self):
        p = generate_panel(PanelConfig(effects={"lgdp": OutcomeEffect(0.07)}, sigma=0.02, seed=0))
        ps = [placebo_test(p, draws=500, seed=s).extra["p_value"] for s in range(20)]
        assert max(ps) - min(ps) < 0.05
