import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contest_lab.core import (
    ContestSpec,
    DegenerateContest,
    DimensionError,
    EffortProfile,
    Regime,
    ScenarioParseError,
    SpecError,
    expected_utility,
    load_scenario,
    win_prob_matrix,
    win_probability,
)


def spec2(costs=(1.0, 1.0), weights=(0.5, 0.5), y=1.0):
    return ContestSpec(list(costs), [y], weights=list(weights))


class TestWinProbability:
    def test_symmetric_efforts(self):
        s = spec2()
        assert win_probability(s, [0.3, 0.3], 0, 0) == pytest.approx(0.5)
        assert win_probability(s, [0.3, 0.3], 0, 1) == pytest.approx(0.5)

    def test_zero_effort_branch_splits_by_weight(self):
        assert win_probability(spec2(), [0.0, 0.0], 0, 0) == 0.5
        s = spec2(weights=(0.25, 0.75))
        assert win_probability(s, [0.0, 0.0], 0, 1) == pytest.approx(0.75)

    def test_weighted_tie(self):
        # w1 e1 = w2 e2 = 1/6
        s = spec2(costs=(1, 4), weights=(1 / 3, 2 / 3))
        assert win_probability(s, [0.5, 0.25], 0, 0) == pytest.approx(0.5, abs=1e-15)

    def test_dimension_mismatch_names_axis(self):
        with pytest.raises(DimensionError) as err:
            win_probability(spec2(), [0.1, 0.2, 0.3], 0, 0)
        assert err.value.axis == "contestant"

    @given(st.lists(st.floats(0, 10), min_size=2, max_size=6),
           st.lists(st.floats(0.01, 1), min_size=6, max_size=6))
    def test_probabilities_form_a_distribution(self, e, w):
        w = np.array(w[: len(e)])
        P = win_prob_matrix(w[:, None], np.array(e)[:, None])
        assert np.all(P >= 0)
        assert P.sum() == pytest.approx(1.0, abs=1e-12)


class TestExpectedUtility:
    def test_symmetric(self):
        assert expected_utility(spec2(), [0.5, 0.5], 0) == pytest.approx(0.375)

    def test_zero_efforts(self):
        s = ContestSpec([2.0, 3.0], [1.0])
        assert expected_utility(s, [0, 0], 0) == pytest.approx(0.5)
        assert expected_utility(s, [0, 0], 1) == pytest.approx(0.5)

    def test_equilibrium_payoff(self):
        s = spec2(costs=(1, 4))
        e = [np.sqrt(2) / 3, np.sqrt(2) / 6]
        assert expected_utility(s, e, 0) == pytest.approx(2 / 3 - 0.5 * 2 / 9)

    def test_multi_task_sums_tasks(self):
        s = ContestSpec([[1, 4], [4, 1]], [1, 1], Regime.MULTI)
        e = np.array([[0.3, 0.2], [0.1, 0.4]])
        p1 = 0.3 / 0.4 + 0.2 / 0.6
        cost = 0.5 * (1 * 0.09 + 4 * 0.04)
        assert expected_utility(s, e, 0) == pytest.approx(p1 - cost)

    def test_budget_violation(self):
        s = ContestSpec([[1, 1], [1, 1]], [1, 1], Regime.MULTI, budget_cap=0.5)
        with pytest.raises(SpecError):
            EffortProfile(np.array([[0.4, 0.4], [0.1, 0.1]])).check(s)


class TestSpecValidation:
    def test_lone_contestant(self):
        with pytest.raises(DegenerateContest):
            ContestSpec([1.0], [1.0])

    def test_non_positive_cost(self):
        with pytest.raises(SpecError):
            ContestSpec([1.0, 0.0], [1.0])

    def test_prizes_must_be_sorted(self):
        with pytest.raises(SpecError):
            ContestSpec([[1, 1], [1, 1]], [0.5, 1.0], Regime.MULTI)

    def test_weights_out_of_range(self):
        with pytest.raises(SpecError):
            ContestSpec([1, 1], [1], weights=[1.0, 0.0])

    def test_regime_aliases(self):
        assert Regime.parse("multi") is Regime.MULTI
        assert Regime.parse("FreeCompetition") is Regime.FREE
        with pytest.raises(SpecError):
            Regime.parse("lottery")


MINIMAL = """
costs = [1.0, 4.0]
[contest]
regime = "FreeCompetition"
"""


class TestLoadScenario:
    def test_minimal_document(self):
        s = load_scenario(MINIMAL)
        assert s.regime is Regime.FREE
        assert s.costs.shape == (2, 1)
        np.testing.assert_allclose(s.weights, [0.5, 0.5])

    def test_weight_sum_error_names_sum(self):
        text = "weights = [0.4, 0.5]\n" + MINIMAL
        with pytest.raises(SpecError, match="sum=0.9"):
            load_scenario(text)

    def test_weight_sum_error_from_mapping(self):
        doc = {"contest": {"regime": "FreeCompetition"}, "costs": [1, 4], "weights": [0.4, 0.5]}
        with pytest.raises(SpecError, match="sum=0.9"):
            load_scenario(doc)

    def test_arity_mismatch(self):
        doc = {"contest": {"regime": "FreeCompetition", "m": 2}, "costs": [[1, 4], [4, 1]]}
        with pytest.raises(SpecError, match="m=1"):
            load_scenario(doc)

    def test_table_sections(self):
        text = '[contest]\nregime = "multi"\n[costs]\nvalues = [[1, 4], [4, 1]]\n[prizes]\nvalues = [1, 1]\n'
        s = load_scenario(text)
        assert s.regime is Regime.MULTI and s.m == 2

    def test_json_and_file(self, tmp_path):
        doc = {"contest": {"regime": "OptimalWeights"}, "costs": [[1], [4]], "prizes": [1]}
        path = tmp_path / "s.json"
        path.write_text(json.dumps(doc))
        assert load_scenario(path).regime is Regime.OPTIMAL

    def test_parse_error_has_line(self):
        with pytest.raises(ScenarioParseError) as err:
            load_scenario("costs = [1, 4]\n[contest\n")
        assert err.value.line == 2

    def test_missing_costs(self):
        with pytest.raises(SpecError, match="costs"):
            load_scenario({"contest": {}})


@settings(max_examples=50)
@given(st.lists(st.floats(0.1, 10), min_size=2, max_size=5))
def test_to_dict_round_trip(costs):
    s = ContestSpec(costs, [1.0])
    back = load_scenario({"contest": {"regime": s.regime.value, "budget_cap": s.budget_cap},
                          **{k: v for k, v in s.to_dict().items() if k in ("costs", "prizes", "weights")}})
    np.testing.assert_allclose(back.costs, s.costs)
    np.testing.assert_allclose(back.weights, s.weights)


@settings(max_examples=50)
@given(st.lists(st.floats(0.01, 5), min_size=2, max_size=5), st.floats(0.01, 100))
def test_csf_invariant_to_common_effort_scaling(e, alpha):
    w = np.full((len(e), 1), 1.0 / len(e))
    a = win_prob_matrix(w, np.array(e)[:, None])
    b = win_prob_matrix(w, alpha * np.array(e)[:, None])
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_utility_decreasing_in_own_cost():
    e = [0.4, 0.3]
    values = [expected_utility(ContestSpec([c, 1.0], [1.0]), e, 0) for c in np.linspace(0.5, 5, 20)]
    assert np.all(np.diff(values) < 0)
