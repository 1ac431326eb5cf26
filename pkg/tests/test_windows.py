import numpy as np
import pytest

from daqn.cohort import Episode, Normalizer, TransitionSet, build_history_windows, encode_observations
from daqn.net import HistoryBatch


@pytest.fixture
def episode(rng):
    T = 6
    return Episode("x", np.array([1.0, 2.0]), np.arange(T * 3, dtype=float).reshape(T, 3),
                   np.array([0, 2, 1, 3, 0, 2]), np.arange(T, dtype=float))


class TestEncoding:
    def test_previous_action_one_hot(self, episode):
        obs = encode_observations(episode.features, episode.actions, 4)
        assert obs.shape == (6, 7)
        np.testing.assert_array_equal(obs[0, 3:], 0)
        for t in range(1, 6):
            assert obs[t, 3 + episode.actions[t - 1]] == 1 and obs[t, 3:].sum() == 1


class TestWindows:
    def test_window_lengths(self, episode):
        trans = build_history_windows(episode, k=2, num_actions=4)
        assert [t.window.valid_len for t in trans] == [1, 2, 3, 3, 3, 3]
        assert trans[-1].terminal and trans[-1].next_window is None
        assert not trans[0].terminal
        np.testing.assert_array_equal(trans[3].window.observations[:, :3], episode.features[1:4])

    def test_lookback_zero_is_current_only(self, episode):
        trans = build_history_windows(episode, k=0, num_actions=4)
        assert all(t.window.valid_len == 1 for t in trans)

    def test_transition_set_matches_windows(self, episode):
        other = Episode("y", np.array([0.0, 1.0]), np.ones((3, 3)), np.array([1, 1, 0]), np.zeros(3))
        ts = TransitionSet([episode, other], 2, 4)
        trans = build_history_windows(episode, 2, 4) + build_history_windows(other, 2, 4)
        ref = HistoryBatch.from_windows([t.window for t in trans], 3)
        b = ts.all()
        np.testing.assert_array_equal(b.obs, ref.obs)
        np.testing.assert_array_equal(b.valid_len, ref.valid_len)
        np.testing.assert_array_equal(ts.terminal, [t.terminal for t in trans])
        nb = ts.next_batch(np.array([0, 6]))
        np.testing.assert_array_equal(nb.obs[0], ref.obs[1])

    def test_normaliser_applies_to_dynamic_and_static(self, episode):
        norm = Normalizer.fit([episode, Episode("z", np.array([3.0, 0.0]), np.zeros((2, 3)), [0, 0], [0, 0])])
        ts = TransitionSet([episode], 1, 4, norm)
        np.testing.assert_allclose(ts.obs[:, :3], norm.apply(episode.features))
        np.testing.assert_allclose(ts.static[0], norm.apply_static(episode.static))

    def test_normaliser_round_trip(self, episode):
        norm = Normalizer.fit([episode])
        back = Normalizer.from_dict(norm.to_dict())
        np.testing.assert_array_equal(back.mean, norm.mean)
        np.testing.assert_array_equal(back.static_std, norm.static_std)
        np.testing.assert_allclose(norm.invert(norm.apply(episode.features)), episode.features)
