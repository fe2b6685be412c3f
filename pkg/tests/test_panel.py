import numpy as np
import pandas as pd
import pytest

from contest_lab.core import ContestSpec, Regime, SpecError
from contest_lab.panel import (
    OutcomeEffect,
    PanelConfig,
    county_efforts,
    generate_contest_linked_panel,
    generate_panel,
    read_panel,
    write_panel,
)

TEMPLATE = ContestSpec([[1, 4], [4, 1]], [1, 1], Regime.MULTI)


def small(**kw):
    base = dict(n_units=60, n_provinces=6, years=(2001, 2010), seed=4)
    base.update(kw)
    return PanelConfig(**base)


class TestGenerate:
    def test_shape(self):
        p = generate_panel(PanelConfig())
        assert len(p.data) == 500 * 21
        assert p.data.groupby("unit_id").size().eq(21).all()

    def test_same_seed_identical(self):
        a = generate_panel(small(seed=11)).data
        b = generate_panel(small(seed=11)).data
        pd.testing.assert_frame_equal(a, b, check_exact=True)
        assert not generate_panel(small(seed=12)).data["lgdp"].equals(a["lgdp"])

    def test_null_noise_free_is_additive(self):
        p = generate_panel(small(effects={}, sigma=0.0))
        Y = p.data.pivot(index="unit_id", columns="year", values="lgdp").to_numpy()
        # a pure unit + year structure has zero interaction residual
        resid = Y - Y.mean(1, keepdims=True) - Y.mean(0, keepdims=True) + Y.mean()
        assert np.abs(resid).max() < 1e-12

    def test_truth_record(self):
        p = generate_panel(PanelConfig(seed=2))
        cfg = p.truth["config"]["effects"]["lgdp"]
        assert (cfg["level"], cfg["trend"]) == (0.07, 0.006)
        # injected effect equals generator path on a treated unit
        df = p.data
        unit = df.loc[df["adoption_year"].notna(), "unit_id"].iloc[0]
        rows = df[df["unit_id"] == unit]
        g = int(rows["adoption_year"].iloc[0])
        eff = OutcomeEffect(0.07, 0.006).path(g, rows["year"].to_numpy() - g)
        assert eff[rows["year"].to_numpy() == g + 3][0] == pytest.approx(0.07 + 3 * 0.006)

    def test_never_treated_share(self):
        p = generate_panel(PanelConfig(n_provinces=200, adoption_level="province", seed=1))
        share = p.data.groupby("unit_id")["adoption_year"].first().isna().mean()
        assert 0.2 < share < 0.4

    def test_explicit_adoption(self):
        p = generate_panel(small(adoption_years={1: 2004, 2: None}, n_provinces=2))
        by_prov = p.data.groupby("province_id")["adoption_year"].first()
        assert by_prov.loc[1] == 2004
        assert pd.isna(by_prov.loc[2])

    def test_lag_delays_onset(self):
        p = generate_panel(small(effects={"lpm25": OutcomeEffect(-0.05, lag=1)}))
        cells = p.truth["att_gt"]["lpm25"]
        g = next(iter(cells))
        assert cells[g][g] == 0.0
        assert cells[g][str(int(g) + 1)] == pytest.approx(-0.05)

    def test_advantage_groups(self):
        p = generate_panel(small(group_rule="advantage"))
        assert set(p.data["group"]) == {"econ", "eco", "none"}

    def test_invalid_config(self):
        with pytest.raises(SpecError):
            PanelConfig(years=(2010, 2001))
        with pytest.raises(SpecError):
            PanelConfig(adoption_support=(1990,))

    def test_covariate_trends(self):
        p = generate_panel(small(covariate_loadings=((0.2, 0.0, 0.1),)))
        assert "cov_1" in p.data.columns
        assert p.data.groupby("unit_id")["cov_1"].nunique().eq(1).all()


class TestContestLinked:
    def test_identical_costs_give_identical_effects(self):
        p = generate_contest_linked_panel(small(county_costs=(1.0, 4.0)), TEMPLATE)
        efforts = pd.DataFrame(p.truth["county_efforts"])
        assert efforts[["pre_econ", "post_econ", "post_eco"]].nunique().eq(1).all()

    def test_efforts_follow_contest_solution(self):
        e = county_efforts((1.0, 4.0), TEMPLATE)
        assert e["pre_econ"] == pytest.approx(np.sqrt(2) / 3, abs=1e-8)
        assert e["post_econ"] == pytest.approx(np.sqrt(2) / 3, abs=1e-8)
        assert e["post_eco"] == pytest.approx(np.sqrt(2) / 6, abs=1e-8)

    def test_mirrored_archetypes_effect_signs(self):
        costs = tuple((1.0, 4.0) if i % 2 else (4.0, 1.0) for i in range(60))
        tight = ContestSpec([[1, 4], [4, 1]], [1, 1], Regime.MULTI, budget_cap=0.5)
        p = generate_contest_linked_panel(small(county_costs=costs), tight)
        att = p.truth["att"]
        # the second task pulls effort away from the economic one once the budget binds
        assert att["lgdp"]["econ"] < 0
        assert att["lpm25"]["eco"] < 0
        assert att["lpm25"]["econ"] < 0

    def test_zero_gains_reduce_to_null_panel(self):
        cfg = small(effort_gains=(0.0, 0.0))
        linked = generate_contest_linked_panel(cfg, TEMPLATE).data
        null = generate_panel(small(effects={})).data
        for col in ("lgdp", "lpergdp", "lpm25", "dpm25"):
            np.testing.assert_array_equal(linked[col].to_numpy(), null[col].to_numpy())

    def test_rejects_wrong_template(self):
        with pytest.raises(SpecError):
            generate_contest_linked_panel(small(), ContestSpec([1, 4], [1]))


class TestIO:
    def test_round_trip(self, tmp_path):
        p = generate_panel(small(covariate_loadings=((0.1,),)))
        write_panel(p, tmp_path / "p.csv")
        back = read_panel(tmp_path / "p.csv")
        pd.testing.assert_frame_equal(back.data, p.data, check_exact=False, rtol=1e-15)
        assert back.truth["att"] == p.truth["att"]

    def test_empty_panel_header_only(self, tmp_path):
        p = generate_panel(PanelConfig(n_units=0))
        write_panel(p, tmp_path / "e.csv")
        lines = (tmp_path / "e.csv").read_text().splitlines()
        assert len(lines) == 1 and lines[0].startswith("unit_id,")

    def test_missing_columns(self, tmp_path):
        (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
        with pytest.raises(SpecError, match="lacks columns"):
            read_panel(tmp_path / "bad.csv")


class TestTreatmentColumns:
    def test_definitions_hold_on_every_row(self):
        p = generate_panel(small(group_rule="advantage"))
        g = p.data["adoption_year"].astype(float).to_numpy()
        t = p.data["year"].to_numpy()
        treated = ~np.isnan(g)
        np.testing.assert_array_equal(p.treat(), np.where(treated, (t >= np.nan_to_num(g)).astype(float), 0.0))
        np.testing.assert_array_equal(p.trend(), np.where(treated, np.maximum(t - np.nan_to_num(g), 0), 0.0))
        assert not p.treat()[~treated].any() and not p.trend()[~treated].any()

    def test_noise_free_two_by_two_blocks(self):
        beta, gamma = 0.07, 0.006
        p = generate_panel(small(sigma=0.0, effects={"lgdp": OutcomeEffect(beta, gamma)}))
        Y = p.data.pivot(index="unit_id", columns="year", values="lgdp")
        adopt = p.data.groupby("unit_id")["adoption_year"].first()
        never = adopt[adopt.isna()].index[0]
        for unit, g in adopt.dropna().items():
            g = int(g)
            for post in (g, g + 2):
                if post not in Y.columns or g - 1 not in Y.columns:
                    continue
                did = (Y.loc[unit, post] - Y.loc[unit, g - 1]) - (Y.loc[never, post] - Y.loc[never, g - 1])
                assert did == pytest.approx(beta + gamma * (post - g), abs=1e-12)
