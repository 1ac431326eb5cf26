"""Acceptance suite.

Each test prints one ``criterion N: PASS|FAIL`` line (shown even when pytest
captures output) and then asserts the same condition. Criteria 6 and 7 train
networks on 5000-episode cohorts and take several minutes; they are marked
``slow``.
"""

import json
import time

import numpy as np
import pytest

from daqn import gradcheck
from daqn.benchmark import attention_correlation, attention_run, behavior_self_evaluation, ordinal_run
from daqn.cli import main
from daqn.cohort.rewards import hypotension_reward, sepsis_reward
from daqn.net import DaqnConfig, QNetwork, apply_head
from daqn.ope import wdr_from_arrays
from daqn.replay import PrioritizedReplay, SumTree
from daqn import tensor as T
from daqn.train import td_targets

from conftest import make_batch
from test_ope import GAMMA, PB, PE, brute_force_wdr, exact_value, population_dataset

SEEDS = range(5)


def report(capsys, number, passed, detail):
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")


def test_criterion_1_gradient_suite(capsys):
    t0 = time.perf_counter()
    results = gradcheck.run_suite(range(10))
    seconds = time.perf_counter() - t0
    failed = [r.line() for r in results if not r.passed]
    layer_err = max(r.max_error for r in results if r.tolerance == gradcheck.LAYER_TOL)
    net_err = max(r.max_error for r in results if r.tolerance == gradcheck.NETWORK_TOL)
    archs = {r.op for r in results if r.tolerance == gradcheck.NETWORK_TOL}
    ok = not failed and seconds < 120 and {"daqn", "dqn-mlp", "drqn-lstm"} <= archs
    report(capsys, 1, ok, f"{len(results)} checks over 10 seeds, worst layer error {layer_err:.1e}, "
                          f"worst network error {net_err:.1e}, {seconds:.0f} s")
    assert ok, failed


def test_criterion_2_architectural_invariants(capsys):
    rng = np.random.default_rng(2)
    cfg = DaqnConfig(obs_dim=5, static_dim=2, num_actions=4, lookback=5, num_blocks=2, num_heads=2,
                     embed_dim=8, ff_dim=12, hidden_dim=6)
    net = QNetwork.create("daqn", cfg, 0)
    worst_sum, worst_masked = 0.0, 0.0
    for _ in range(1000):
        batch = make_batch(rng, cfg, n=4)
        masked = ~batch.valid_mask()[:, None, :]
        for w in net.trace(batch).layers:
            worst_sum = max(worst_sum, float(np.abs(w.sum(axis=-1) - 1).max()))
            worst_masked = max(worst_masked, float(np.abs(np.where(masked, w, 0.0)).max()))

    params = {"head.value.W": T.Tensor(rng.standard_normal((6, 1))), "head.value.b": T.Tensor(rng.standard_normal(1)),
              "head.adv.W": T.Tensor(rng.standard_normal((6, 4))), "head.adv.b": T.Tensor(rng.standard_normal(4))}
    z = rng.standard_normal((50, 6))
    v = z @ params["head.value.W"].data + params["head.value.b"].data
    a = z @ params["head.adv.W"].data + params["head.adv.b"].data
    dueling_exact = np.array_equal(apply_head(params, T.Tensor(z)).data, v + (a - a.mean(axis=1, keepdims=True)))

    batch = make_batch(rng, cfg, n=64)
    rewards = rng.standard_normal(64)
    terminal = rng.random(64) < 0.3
    y = td_targets(rewards, terminal, batch, net, net, 0.99)
    max_target = np.where(terminal, rewards, rewards + 0.99 * net.q_values(batch).max(axis=1))
    double_q_exact = np.array_equal(y, max_target)

    ok = worst_sum <= 1e-9 and worst_masked == 0.0 and dueling_exact and double_q_exact
    report(capsys, 2, ok, f"row-sum deviation {worst_sum:.1e}, masked weight {worst_masked:g}, "
                          f"dueling exact {dueling_exact}, double-Q exact {double_q_exact}")
    assert ok


def sepsis_oracle(sofa_t, sofa_prev, lac_t, lac_prev):
    flat = np.where((sofa_t == sofa_prev) & (sofa_t > 0), -0.025, 0.0)
    return flat - 0.125 * (sofa_t - sofa_prev) - 2.0 * np.tanh(lac_t - lac_prev)


def hypotension_oracle(m):
    return np.interp(m, [40.0, 55.0, 60.0, 65.0, 80.0], [-1.0, -0.15, -0.05, 0.0, 0.0])


def test_criterion_3_reward_exactness(capsys):
    sofa = np.arange(25.0)
    deltas = np.round(np.arange(-20, 21) / 10.0, 10)
    worst = 0.0
    for lac_prev in (0.5, 2.0, 7.3):
        st, sp, d = np.meshgrid(sofa, sofa, deltas, indexing="ij")
        expect = sepsis_oracle(st, sp, lac_prev + d, lac_prev)
        got = np.vectorize(sepsis_reward)(st, sp, lac_prev + d, lac_prev)
        worst = max(worst, float(np.abs(got - expect).max()))

    maps = np.round(np.arange(401) / 10.0 + 40.0, 10)
    got = np.array([hypotension_reward(m) for m in maps])
    worst_map = float(np.abs(got - hypotension_oracle(maps)).max())
    boundaries = [hypotension_reward(b) for b in (65.0, 60.0, 55.0)]
    boundary_ok = all(abs(g - e) <= 1e-12 for g, e in zip(boundaries, (0.0, -0.05, -0.15)))
    continuous = all(abs(hypotension_reward(b - 1e-9) - hypotension_reward(b + 1e-9)) < 1e-8 for b in (55, 60, 65))
    above = maps[maps > 55]
    override = all(hypotension_reward(m, 31.0, True) == 0.0 for m in above)
    override &= all(hypotension_reward(m, 31.0, True) == hypotension_reward(m) for m in maps[maps <= 55])
    override &= all(hypotension_reward(m, 30.0, True) == hypotension_reward(m) for m in maps)
    override &= all(hypotension_reward(m, 40.0, False) == hypotension_reward(m) for m in maps)

    ok = worst <= 1e-12 and worst_map <= 1e-12 and boundary_ok and continuous and override
    report(capsys, 3, ok, f"sepsis grid error {worst:.1e}, MAP grid error {worst_map:.1e}, "
                          f"boundaries {boundary_ok}, continuity {continuous}, urine override {override}")
    assert ok


def test_criterion_4_replay_statistics(capsys):
    buf = PrioritizedReplay(2, alpha=1.0, seed=4)
    ids = buf.extend(["x", "y"])
    buf.update_priorities(ids, [3.0, 1.0], eps=0.0)
    n = 100_000
    hits = sum(int(buf.sample(1, 0.4).slots[0] == 0) for _ in range(n))
    sigma = np.sqrt(0.75 * 0.25 / n)
    z = (hits / n - 0.75) / sigma

    rng = np.random.default_rng(44)
    tree = SumTree(1000)
    values = np.zeros(1000)
    for slot, v in zip(rng.integers(0, 1000, 10_000), rng.exponential(2.0, 10_000)):
        tree.update(int(slot), float(v))
        values[slot] = v
    gap = abs(tree.total - values.sum())

    ok = abs(z) <= 3 and gap <= 1e-9 * values.sum()
    report(capsys, 4, ok, f"P(high)={hits / n:.4f} (z={z:+.2f}), root minus leaf sum {gap:.1e}")
    assert ok


def test_criterion_5_wdr_oracles(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    oracle_err = 0.0
    for _ in range(10):
        qhat = rng.standard_normal((2, 2, 2)) * 3
        oracle_err = max(oracle_err, abs(wdr_from_arrays(*population_dataset(qhat), GAMMA).estimate
                                         - exact_value(PE)))

    lens = rng.integers(1, 6, 60)
    rewards = [rng.standard_normal(k) for k in lens]
    actions = [rng.integers(0, 3, k) for k in lens]
    pe = [rng.dirichlet(np.ones(3), k) for k in lens]
    pb = [rng.dirichlet(np.ones(3), k) for k in lens]
    zeros = [np.zeros((k, 3)) for k in lens]
    wis_err = abs(wdr_from_arrays(rewards, actions, pe, pb, zeros, 0.9).estimate
                  - brute_force_wdr(rewards, actions, pe, pb, None, 0.9))

    checks = [behavior_self_evaluation(s) for s in SEEDS]
    within = sum(abs(c.z) <= 2 for c in checks)
    seconds = time.perf_counter() - t0
    ok = oracle_err <= 1e-10 and wis_err <= 1e-12 and within == len(checks) and seconds < 300
    zs = ", ".join(f"{c.z:+.2f}" for c in checks)
    report(capsys, 5, ok, f"enumeration error {oracle_err:.1e}, WIS error {wis_err:.1e}, "
                          f"self-evaluation z-scores [{zs}], {seconds:.0f} s")
    assert ok


@pytest.fixture(scope="module")
def ordinal_runs():
    t0 = time.perf_counter()
    runs = [ordinal_run(s) for s in SEEDS]
    return runs, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_6_ordinal_claim(ordinal_runs, capsys):
    runs, seconds = ordinal_runs
    wdr_order = sum(r.wdr["daqn"] > r.wdr["dqn-mlp"] > r.wdr["random"] for r in runs)
    true_order = sum(r.true_value["daqn"] > r.true_value["dqn-mlp"] for r in runs)
    ok = wdr_order >= 4 and true_order >= 4 and seconds < 1800
    report(capsys, 6, ok, f"WDR order DAQN > DQN > random in {wdr_order}/5 runs, true-value DAQN > DQN in "
                          f"{true_order}/5 runs, {seconds / 60:.1f} min")
    with capsys.disabled():
        for r in runs:
            print(f"    seed {r.seed}: WDR " + ", ".join(f"{k} {v:.3f}" for k, v in r.wdr.items())
                  + " | true " + ", ".join(f"{k} {v:.3f}" for k, v in r.true_value.items()))
    assert ok


@pytest.mark.slow
def test_criterion_7_attention_tracks_severity(ordinal_runs, capsys):
    best, null_worst = [], 0.0
    for s in SEEDS:
        real, null = attention_correlation(attention_run(s))
        best.append(real.best("severity"))
        null_worst = max(null_worst, max(abs(c["severity"]) for c in null.coefficients))
    positive = sum(b is not None and b > 0.2 for b in best)
    ok = positive >= 4 and null_worst < 0.1
    detail = ", ".join("n/a" if b is None else f"{b:+.3f}" for b in best)
    report(capsys, 7, ok, f"best-layer r on the severity-memory environment [{detail}], above 0.2 in "
                          f"{positive}/5 runs, worst null |r| {null_worst:.3f}")
    with capsys.disabled():
        default = [attention_correlation(r)[0].best("severity") for r in ordinal_runs[0]]
        print("    default environment best-layer r: " + ", ".join(f"{b:+.3f}" for b in default))
    assert ok


def test_criterion_8_cli_determinism(tmp_path, capsys):
    cfg = {"train": {"batches": 30, "batch_size": 32, "log_every": 10, "target_sync": 10},
           "net": {"embed_dim": 8, "ff_dim": 16, "num_blocks": 1, "hidden_dim": 8, "lookback": 4},
           "behavior": {"batches": 20, "batch_size": 32}, "env": {"episodes": 150},
           "ope": {"rollout_episodes": 200}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["generate", "--out", str(tmp_path / "data"), "--config", str(path), "--seed", "8"]) == 0
    cohort = str(tmp_path / "data" / "cohort" / "cohort.csv")
    for run in ("a", "b"):
        out = str(tmp_path / run)
        assert main(["train", "--cohort", cohort, "--out", out, "--config", str(path), "--seed", "8",
                     "--arch", "daqn", "--arch", "dqn-mlp", "--arch", "drqn-lstm"]) == 0
        assert main(["evaluate", "--cohort", cohort, "--out", out, "--config", str(path), "--seed", "8",
                     "--splits", "2"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.is_file() and p.parent.name in ("checkpoints", "metrics", "reports"))
    differing = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = len(files) >= 8 and not differing
    report(capsys, 8, ok, f"{len(files)} checkpoint/metric/report files compared, {len(differing)} differ")
    assert ok, differing
