import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from daqn.cohort.io import clinical_rewards
from daqn.cohort.rewards import hypotension_reward, sepsis_reward
from daqn.tensor import ContractError


class TestSepsisReward:
    def test_unchanged_positive_sofa_penalised(self):
        assert sepsis_reward(4, 4, 1.0, 1.0) == pytest.approx(-0.025)

    def test_zero_sofa_unchanged_is_free(self):
        assert sepsis_reward(0, 0, 2.0, 2.0) == 0.0

    def test_improvement_rewarded(self):
        assert sepsis_reward(3, 5, 1.0, 1.0) == pytest.approx(0.25)

    def test_lactate_rise_penalised_and_saturates(self):
        assert sepsis_reward(2, 1, 3.0, 1.0) == pytest.approx(-0.125 - 2 * math.tanh(2.0))
        assert sepsis_reward(1, 1, 100.0, 0.0) > -2.0 - 0.025 - 1e-12

    def test_negative_sofa_rejected(self):
        with pytest.raises(ContractError):
            sepsis_reward(-1, 2, 0.0, 0.0)


class TestHypotensionReward:
    @pytest.mark.parametrize("m,expected", [(80.0, 0.0), (65.0, 0.0), (62.5, -0.025), (60.0, -0.05),
                                            (57.5, -0.1), (55.0, -0.15), (40.0, -1.0)])
    def test_piecewise_values(self, m, expected):
        assert hypotension_reward(m) == pytest.approx(expected, abs=1e-12)

    def test_continuous_at_breakpoints(self):
        for b in (55.0, 60.0, 65.0):
            lo, hi = hypotension_reward(b - 1e-9), hypotension_reward(b + 1e-9)
            assert abs(lo - hi) < 1e-8

    def test_urine_override(self):
        assert hypotension_reward(58.0, urine_t=40, urine_measured=True) == 0.0
        assert hypotension_reward(58.0, urine_t=40, urine_measured=False) < 0
        assert hypotension_reward(50.0, urine_t=40, urine_measured=True) < 0
        assert hypotension_reward(58.0, urine_t=30, urine_measured=True) < 0

    def test_nonphysical_map(self):
        with pytest.raises(ContractError):
            hypotension_reward(0.0)


class TestRewardAttribution:
    def test_row_rewarded_by_next_step_change(self):
        clin = {"sofa": np.array([5.0, 3.0, 3.0]), "lactate": np.array([2.0, 2.0, 1.0])}
        r = clinical_rewards(clin, "sepsis")
        np.testing.assert_allclose(r, [0.25, -0.025 - 2 * math.tanh(-1.0), 0.0])

    def test_hypotension_uses_next_map(self):
        clin = {"map": np.array([50.0, 60.0, 70.0]), "urine": np.zeros(3), "urine_measured": np.zeros(3)}
        np.testing.assert_allclose(clinical_rewards(clin, "hypotension"), [-0.05, 0.0, 0.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 24), st.integers(0, 24), st.floats(0, 20), st.floats(0, 20))
def test_sepsis_change_terms_are_antisymmetric(s_t, s_prev, l_t, l_prev):
    def change_part(a, b, la, lb):
        flat = -0.025 if (a == b and a > 0) else 0.0
        return sepsis_reward(a, b, la, lb) - flat

    forward = change_part(s_t, s_prev, l_t, l_prev)
    backward = change_part(s_prev, s_t, l_prev, l_t)
    assert forward == pytest.approx(-backward, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 12))
def test_stored_sepsis_rewards_recompute_from_clinical_columns(seed, length):
    rng = np.random.default_rng(seed)
    clin = {"sofa": rng.integers(0, 25, length).astype(float), "lactate": rng.uniform(0.5, 10, length)}
    rewards = clinical_rewards(clin, "sepsis")
    for t in range(length - 1):
        expect = sepsis_reward(clin["sofa"][t + 1], clin["sofa"][t], clin["lactate"][t + 1], clin["lactate"][t])
        assert rewards[t] == expect
    assert rewards[-1] == 0.0
