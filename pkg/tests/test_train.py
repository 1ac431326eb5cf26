import numpy as np
import pytest

from daqn import tensor as T
from daqn.cohort import Episode
from daqn.net import QNetwork
from daqn.tensor import ContractError
from daqn.train import (TrainConfig, TrainedPolicy, TrainingDiverged, greedy_actions, split_cohort, td_targets,
                        train_policy, weighted_td_loss)

NET = {"embed_dim": 8, "ff_dim": 16, "num_blocks": 1, "hidden_dim": 8, "lookback": 3}


def quick_config(**kw):
    base = dict(batches=40, batch_size=32, target_sync=10, lr=1e-3, log_every=10, seed=4)
    base.update(kw)
    return TrainConfig(**base)


class TestSplit:
    def test_disjoint_and_complete(self, small_cohort):
        tr, te = split_cohort(small_cohort.episodes, 0.8, seed=1)
        ids_tr = {e.patient_id for e in tr}
        ids_te = {e.patient_id for e in te}
        assert not ids_tr & ids_te
        assert len(ids_tr) + len(ids_te) == len(small_cohort.episodes)
        assert len(tr) == 96

    def test_stratified_outcome_rates(self, small_cohort):
        tr, te = split_cohort(small_cohort.episodes, 0.8, seed=1)
        rate = np.mean([e.outcome for e in small_cohort.episodes])
        assert abs(np.mean([e.outcome for e in tr]) - rate) < 0.02

    def test_deterministic_and_seed_dependent(self, small_cohort):
        a = split_cohort(small_cohort.episodes, 0.8, seed=1)[1]
        b = split_cohort(small_cohort.episodes, 0.8, seed=1)[1]
        c = split_cohort(small_cohort.episodes, 0.8, seed=2)[1]
        assert [e.patient_id for e in a] == [e.patient_id for e in b]
        assert [e.patient_id for e in a] != [e.patient_id for e in c]

    def test_single_outcome_warns(self, small_cohort):
        eps = [Episode(e.patient_id, e.static, e.features, e.actions, e.rewards, outcome=0)
               for e in small_cohort.episodes[:10]]
        with pytest.warns(UserWarning):
            split_cohort(eps, 0.5, seed=0)

    def test_bad_fraction(self, small_cohort):
        with pytest.raises(ContractError):
            split_cohort(small_cohort.episodes, 1.0, seed=0)


class TestTargets:
    def test_double_q_with_shared_weights_is_max_target(self, small_transitions):
        cfg_net = QNetwork.create("dqn-mlp", _cfg(small_transitions), 0)
        idx = np.arange(40)
        nb = small_transitions.next_batch(idx)
        r = small_transitions.rewards[idx]
        term = small_transitions.terminal[idx]
        y = td_targets(r, term, nb, cfg_net, cfg_net, 0.99)
        q_next = cfg_net.q_values(nb).max(axis=1)
        np.testing.assert_array_equal(y, np.where(term, r, r + 0.99 * q_next))

    def test_terminal_uses_reward_only(self, small_transitions):
        net = QNetwork.create("dqn-mlp", _cfg(small_transitions), 0)
        idx = np.flatnonzero(small_transitions.terminal)[:5]
        y = td_targets(small_transitions.rewards[idx], small_transitions.terminal[idx],
                       small_transitions.next_batch(idx), net, net.clone(), 0.99)
        np.testing.assert_array_equal(y, small_transitions.rewards[idx])

    def test_target_network_values_main_choice(self, small_transitions):
        main = QNetwork.create("dqn-mlp", _cfg(small_transitions), 0)
        target = QNetwork.create("dqn-mlp", _cfg(small_transitions), 1)
        idx = np.flatnonzero(~small_transitions.terminal)[:20]
        nb = small_transitions.next_batch(idx)
        y = td_targets(np.zeros(20), np.zeros(20, bool), nb, main, target, 0.5)
        a = greedy_actions(main.q_values(nb))
        np.testing.assert_allclose(y, 0.5 * target.q_values(nb)[np.arange(20), a])

    def test_greedy_ties_go_to_lowest_index(self):
        np.testing.assert_array_equal(greedy_actions(np.array([[1.0, 3.0, 3.0], [2.0, 2.0, 2.0]])), [1, 0])


def _cfg(ts):
    from daqn.net import DaqnConfig
    return DaqnConfig(obs_dim=ts.obs_dim, static_dim=ts.static.shape[1], num_actions=25, lookback=ts.k,
                      hidden_dim=8, embed_dim=8, ff_dim=8, num_blocks=1)


class TestTrainPolicy:
    @pytest.mark.parametrize("arch", ["daqn", "dqn-mlp", "drqn-lstm"])
    def test_runs_and_reports(self, small_cohort, arch):
        pol, rep = train_policy(small_cohort.episodes, arch, quick_config(), 25, NET)
        assert isinstance(pol, TrainedPolicy) and pol.arch == arch
        assert len(rep.intervals) == 4
        assert rep.syncs == [10, 20, 30, 40]
        assert np.all(np.isfinite(rep.losses()))

    def test_loss_decreases(self, small_cohort):
        _, rep = train_policy(small_cohort.episodes, "dqn-mlp", quick_config(batches=300, log_every=50), 25, NET)
        assert rep.losses()[-1] < rep.losses()[0]

    def test_checkpoints_byte_identical(self, small_cohort, tmp_path):
        for name in ("a", "b"):
            train_policy(small_cohort.episodes, "daqn", quick_config(), 25, NET,
                         checkpoint_path=tmp_path / f"{name}.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_saved_policy_reloads(self, small_cohort, tmp_path):
        pol, _ = train_policy(small_cohort.episodes, "drqn-lstm", quick_config(), 25, NET,
                              checkpoint_path=tmp_path / "p.ckpt")
        back = TrainedPolicy.load(tmp_path / "p.ckpt")
        b = pol.transitions(small_cohort.episodes[:3]).all()
        np.testing.assert_array_equal(pol.q_values(b), back.q_values(b))

    def test_report_tsv(self, small_cohort, tmp_path):
        _, rep = train_policy(small_cohort.episodes, "dqn-mlp", quick_config(), 25, NET)
        lines = rep.write_tsv(tmp_path / "r.tsv").read_text().splitlines()
        assert len(lines) == 1 + 4
        assert lines[0].split("\t")[0:3] == ["start", "end", "loss_mean"]

    def test_divergence_guard(self, small_cohort):
        with pytest.raises(TrainingDiverged, match="diverged at batch"):
            train_policy(small_cohort.episodes, "dqn-mlp", quick_config(divergence_limit=1e-9), 25, NET)

    def test_too_few_transitions(self, small_cohort):
        with pytest.raises(ContractError):
            train_policy(small_cohort.episodes[:1], "dqn-mlp", quick_config(batch_size=10 ** 4), 25, NET)

    def test_config_validation(self):
        with pytest.raises(ContractError):
            TrainConfig(gamma=1.0)
        with pytest.raises(ContractError):
            TrainConfig.from_dict({"learning_rate": 1.0})


class TestLoss:
    def test_unit_weights_give_plain_mean_squared_td_error(self, rng):
        q = T.parameter(rng.standard_normal((6, 4)))
        actions = rng.integers(0, 4, 6)
        targets = rng.standard_normal(6)
        loss, delta = weighted_td_loss(q, actions, targets, np.ones(6))
        plain = np.mean((q.data[np.arange(6), actions] - targets) ** 2)
        assert float(loss.data) == pytest.approx(plain, abs=1e-15)
        np.testing.assert_array_equal(delta.data, q.data[np.arange(6), actions] - targets)

    def test_gradient_only_reaches_taken_actions(self, rng):
        q = T.parameter(rng.standard_normal((5, 3)))
        actions = np.array([0, 2, 2, 1, 0])
        loss, _ = weighted_td_loss(q, actions, np.zeros(5), rng.uniform(0.1, 1, 5))
        T.backward(loss)
        untouched = np.ones((5, 3), bool)
        untouched[np.arange(5), actions] = False
        assert np.all(q.grad[untouched] == 0)
