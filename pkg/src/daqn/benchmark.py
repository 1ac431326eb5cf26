"""Desk-scale benchmark runs on the default synthetic POMDP.

One run draws a cohort, splits it, trains the attention and memoryless
Q-networks, fits the behaviour policy and scores every policy by weighted
doubly-robust estimation on the test fold and by online rollouts in the
simulator. The trained DAQN is kept so attention analyses can reuse it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cohort.episode import Episode, Normalizer
from .cohort.synthetic import (SyntheticEnvSpec, default_env_spec, discounted_returns, generate_synthetic_cohort,
                               severity_memory_env_spec, simulate_policy)
from .interpret import AttentionCorrelation, correlate, extract_traces, marker_series
from .ope import (BehaviorConfig, GroundTruthPolicy, SoftenedGreedy, UniformPolicy, fit_behavior_policy,
                  wdr_estimate)
from .train import STREAM_ROLLOUT, TrainConfig, TrainedPolicy, split_cohort, substream, train_policy

# Smaller than the library defaults so five runs fit a laptop budget.
BENCH_NET = {"daqn": {"embed_dim": 64, "ff_dim": 128, "num_blocks": 2}, "dqn-mlp": {}}
BENCH_TRAIN = dict(batches=2000, lr=1e-3, target_sync=100, log_every=250)
BENCH_BEHAVIOR = dict(batches=1000, lr=1e-3)


@dataclass
class BenchmarkRun:
    seed: int
    wdr: dict[str, float]
    true_value: dict[str, float]
    seconds: float
    policies: dict[str, TrainedPolicy] = field(repr=False, default_factory=dict)
    test: list[Episode] = field(repr=False, default_factory=list)
    feature_names: list[str] = field(repr=False, default_factory=list)


def ordinal_run(seed: int, n_episodes: int = 5000, rollout_episodes: int = 10000,
                spec: SyntheticEnvSpec | None = None, train: dict | None = None,
                nets: dict | None = None, behavior: dict | None = None, eps_soft: float = 0.05) -> BenchmarkRun:
    t0 = time.perf_counter()
    spec = spec or default_env_spec()
    nets = nets or BENCH_NET
    cohort = generate_synthetic_cohort(spec, n_episodes, seed=seed)
    tc = TrainConfig(seed=seed, **(train or BENCH_TRAIN))
    tr, te = split_cohort(cohort.episodes, tc.split_fraction, seed)
    normalizer = Normalizer.fit(tr)
    A = spec.n_actions
    policies = {arch: train_policy(tr, arch, tc, A, nets[arch], normalizer)[0] for arch in nets}
    daqn_net = {k: v for k, v in nets.get("daqn", {}).items() if k != "lookback"}
    pi_b = fit_behavior_policy(tr, 9, A, BehaviorConfig(seed=seed, **(behavior or BENCH_BEHAVIOR)),
                               daqn_net, normalizer)
    rollout_seed = int(substream(seed, STREAM_ROLLOUT).integers(2 ** 31))
    wdr, true = {}, {}
    for arch, pol in policies.items():
        pe = SoftenedGreedy(pol, eps_soft)
        wdr[arch] = wdr_estimate(te, pe, pi_b, pol, tc.gamma).estimate
        true[arch] = float(np.mean(simulate_policy(spec, pe, rollout_episodes, pol.lookback, normalizer,
                                                   rollout_seed)))
    uniform = UniformPolicy(A)
    wdr["random"] = wdr_estimate(te, uniform, pi_b, None, tc.gamma).estimate
    true["random"] = spec.exact_value(np.full((spec.n_states, A), 1.0 / A))
    return BenchmarkRun(seed, wdr, true, time.perf_counter() - t0, policies, te, cohort.schema.feature_names)


def attention_correlation(run: BenchmarkRun, marker: str = "severity", null_seed: int | None = None
                          ) -> tuple[AttentionCorrelation, AttentionCorrelation]:
    """Layer-wise attention/severity correlation on the test fold, plus a randomised-marker null."""
    records = extract_traces(run.policies["daqn"], run.test)
    markers = marker_series(run.test, [marker], run.feature_names)
    real = correlate(records, markers)
    rng = np.random.default_rng([run.seed if null_seed is None else null_seed, 99])
    null = correlate(records, {marker: [rng.standard_normal(len(e)) for e in run.test]})
    return real, null


def attention_run(seed: int, n_episodes: int = 5000, spec: SyntheticEnvSpec | None = None,
                  train: dict | None = None, net: dict | None = None) -> BenchmarkRun:
    """Train only the DAQN, by default on the severity-memory environment, for attention analysis."""
    t0 = time.perf_counter()
    spec = spec or severity_memory_env_spec()
    cohort = generate_synthetic_cohort(spec, n_episodes, seed=seed)
    tc = TrainConfig(seed=seed, **(train or BENCH_TRAIN))
    tr, te = split_cohort(cohort.episodes, tc.split_fraction, seed)
    normalizer = Normalizer.fit(tr)
    pol, _ = train_policy(tr, "daqn", tc, spec.n_actions, net or BENCH_NET["daqn"], normalizer)
    return BenchmarkRun(seed, {}, {}, time.perf_counter() - t0, {"daqn": pol}, te, cohort.schema.feature_names)


@dataclass
class BehaviorCheck:
    seed: int
    estimate: float
    standard_error: float
    exact: float

    @property
    def z(self) -> float:
        return (self.estimate - self.exact) / self.standard_error


def behavior_self_evaluation(seed: int, n_episodes: int = 2000, spec: SyntheticEnvSpec | None = None
                             ) -> BehaviorCheck:
    """WDR with the ground-truth behaviour policy as both target and logging policy."""
    spec = spec or default_env_spec()
    cohort = generate_synthetic_cohort(spec, n_episodes, seed=seed)
    gt = GroundTruthPolicy.from_cohort(cohort)
    res = wdr_estimate(cohort.episodes, gt, gt, None, spec.gamma)
    returns = discounted_returns(cohort.episodes, spec.gamma)
    se = float(returns.std(ddof=1) / np.sqrt(len(returns)))
    return BehaviorCheck(seed, res.estimate, se, spec.exact_value(spec.behavior_probs()))
