"""Off-policy evaluation: behaviour cloning, softened policies and weighted doubly-robust estimates.

The weighted doubly-robust estimate over ``n`` test episodes is::

    sum_t gamma^t sum_i [ w_t^i r_t^i - w_t^i q(h_t^i, a_t^i) + w_{t-1}^i v(h_t^i) ]

with cumulative ratios ``rho_t^i = prod_{tau <= t} pi_e(a|h) / pi_b(a|h)``,
self-normalised weights ``w_t^i = rho_t^i / sum_j rho_t^j``, ``w_{-1}^i = 1/n``
and ``v(h) = sum_a pi_e(a|h) q(h, a)``. Episodes shorter than the longest are
padded with an absorbing state: their ratio is frozen and reward, ``q`` and
``v`` are zero from then on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .cohort.episode import Episode, Normalizer
from .cohort.windows import TransitionSet
from .net import DaqnConfig, HistoryBatch, QNetwork
from .tensor import ContractError, Tensor
from .train import (STREAM_BEHAVIOR, STREAM_SPLIT, TrainConfig, TrainedPolicy, TrainingDiverged, greedy_actions,
                    split_cohort, substream, train_policy)

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-3


class EstimatorError(ValueError):
    pass


# ---------------------------------------------------------------------------
# policies


class StochasticPolicy:
    """Maps histories to action distributions.

    ``episode_probs`` returns one ``(T, A)`` array per episode; history-based
    policies also accept a :class:`HistoryBatch` through ``__call__`` so they
    can drive online rollouts.
    """

    provenance = "abstract"
    num_actions: int

    def episode_probs(self, episodes: Sequence[Episode]) -> list[np.ndarray]:
        raise NotImplementedError

    def __call__(self, batch: HistoryBatch) -> np.ndarray:
        raise NotImplementedError(f"{self.provenance} policy cannot act on raw histories")


def _split_rows(flat: np.ndarray, ts: TransitionSet) -> list[np.ndarray]:
    return [flat[s:e] for s, e in ts.slices]


class UniformPolicy(StochasticPolicy):
    provenance = "uniform-random"

    def __init__(self, num_actions: int):
        self.num_actions = num_actions

    def __call__(self, batch: HistoryBatch) -> np.ndarray:
        return np.full((len(batch), self.num_actions), 1.0 / self.num_actions)

    def episode_probs(self, episodes):
        return [np.full((len(e), self.num_actions), 1.0 / self.num_actions) for e in episodes]


class SoftenedGreedy(StochasticPolicy):
    """``1 - eps + eps/|A|`` on the greedy action and ``eps/|A|`` elsewhere."""

    provenance = "softened-greedy"

    def __init__(self, policy: TrainedPolicy, eps: float = 0.05):
        if not 0 < eps <= 1:
            raise ContractError(f"softening epsilon must lie in (0, 1], got {eps}")
        self.policy = policy
        self.eps = eps
        self.num_actions = policy.num_actions

    def from_q(self, q: np.ndarray) -> np.ndarray:
        return soften_actions(greedy_actions(q), self.num_actions, self.eps)

    def __call__(self, batch: HistoryBatch) -> np.ndarray:
        return self.from_q(self.policy.q_values(batch))

    def episode_probs(self, episodes):
        ts = self.policy.transitions(list(episodes))
        return _split_rows(self.from_q(self.policy.q_values(ts.all())), ts)


def soften_actions(actions: np.ndarray, num_actions: int, eps: float) -> np.ndarray:
    if not 0 < eps <= 1:
        raise ContractError(f"softening epsilon must lie in (0, 1], got {eps}")
    p = np.full((len(actions), num_actions), eps / num_actions)
    p[np.arange(len(actions)), actions] += 1.0 - eps
    return p


def soften(greedy: TrainedPolicy, eps: float = 0.05) -> SoftenedGreedy:
    return SoftenedGreedy(greedy, eps)


class BehaviorClonedPolicy(StochasticPolicy):
    provenance = "behavior-cloned"

    def __init__(self, net: QNetwork, normalizer: Normalizer, num_actions: int, floor: float = PROB_FLOOR):
        self.net = net
        self.normalizer = normalizer
        self.num_actions = num_actions
        self.floor = floor

    def _floor(self, p: np.ndarray) -> np.ndarray:
        # mixing keeps every entry >= floor while preserving a unit sum
        return (1.0 - self.num_actions * self.floor) * p + self.floor

    def __call__(self, batch: HistoryBatch) -> np.ndarray:
        return self._floor(self.net.probabilities(batch))

    def episode_probs(self, episodes):
        ts = TransitionSet(list(episodes), self.net.config.lookback, self.num_actions, self.normalizer)
        return _split_rows(self(ts.all()), ts)


class GroundTruthPolicy(StochasticPolicy):
    """Behaviour probabilities read from a synthetic cohort's sidecar."""

    provenance = "ground-truth"

    def __init__(self, table: dict[str, tuple[np.ndarray, np.ndarray]]):
        self.table = table
        first = next(iter(table.values()))
        self.num_actions = first[1].shape[1]

    @classmethod
    def from_cohort(cls, cohort) -> "GroundTruthPolicy":
        return cls({e.patient_id: (s, p) for e, s, p in zip(cohort.episodes, cohort.latent, cohort.behavior_probs)})

    def episode_probs(self, episodes):
        out = []
        for e in episodes:
            try:
                out.append(self.table[e.patient_id][1][:len(e)])
            except KeyError:
                raise EstimatorError(f"no ground-truth probabilities for patient {e.patient_id!r}") from None
        return out


@dataclass
class BehaviorConfig:
    batches: int = 1000
    batch_size: int = 128
    lr: float = 1e-3
    clip_norm: float = 10.0
    floor: float = PROB_FLOOR
    seed: int = 0
    divergence_limit: float = 1e6


def fit_behavior_policy(train: Sequence[Episode], k: int, num_actions: int, cfg: BehaviorConfig | None = None,
                        net_overrides: dict | None = None, normalizer: Normalizer | None = None
                        ) -> BehaviorClonedPolicy:
    """Behaviour cloning with a DAQN-shaped network and a softmax action head."""
    cfg = cfg or BehaviorConfig()
    train = list(train)
    if not train:
        raise ContractError("behaviour cloning needs a nonempty training set")
    normalizer = normalizer or Normalizer.fit(train)
    ts = TransitionSet(train, k, num_actions, normalizer)
    net_cfg = DaqnConfig(obs_dim=ts.obs_dim, static_dim=ts.static.shape[1], num_actions=num_actions,
                         lookback=k, **(net_overrides or {}))
    rng = substream(cfg.seed, STREAM_BEHAVIOR)
    net = QNetwork.create("daqn", net_cfg, rng, head="softmax")
    opt = T.Adam(net.parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
    bs = min(cfg.batch_size, len(ts))
    for step in range(cfg.batches):
        idx = rng.integers(0, len(ts), size=bs)
        logits, _ = net.forward(ts.batch(idx))
        loss = T.scale(T.sum(T.take_rows(T.log_softmax(logits), ts.actions[idx])), -1.0 / bs)
        lv = float(loss.data)
        if not np.isfinite(lv) or lv > cfg.divergence_limit:
            raise TrainingDiverged(f"behaviour cloning diverged at batch {step}: loss={lv!r}")
        opt.zero_grad()
        T.backward(loss)
        opt.step()
    return BehaviorClonedPolicy(net, normalizer, num_actions, cfg.floor)


# ---------------------------------------------------------------------------
# estimators


@dataclass
class WDRResult:
    estimate: float
    contributions: np.ndarray
    wis: float
    direct: float
    ess: float
    n_episodes: int
    weights: np.ndarray | None = field(default=None, repr=False)  # (n, H) self-normalised, frozen after the end

    @property
    def standard_error(self) -> float:
        """Standard error treating ``n * contribution_i`` as per-episode samples."""
        n = self.n_episodes
        return float(np.std(n * self.contributions, ddof=1) / np.sqrt(n)) if n > 1 else float("nan")


def _pad(arrs: Sequence[np.ndarray], H: int, fill: float = 0.0) -> np.ndarray:
    out = np.full((len(arrs), H) + arrs[0].shape[1:], fill)
    for i, a in enumerate(arrs):
        out[i, :len(a)] = a
    return out


def wdr_from_arrays(rewards: Sequence[np.ndarray], actions: Sequence[np.ndarray],
                    pi_e: Sequence[np.ndarray], pi_b: Sequence[np.ndarray],
                    q_hat: Sequence[np.ndarray] | None, gamma: float,
                    patient_ids: Sequence[str] | None = None) -> WDRResult:
    n = len(rewards)
    if n == 0:
        raise EstimatorError("no episodes to evaluate")
    ids = list(patient_ids) if patient_ids is not None else [str(i) for i in range(n)]
    lengths = np.array([len(r) for r in rewards])
    if np.any(lengths == 0):
        raise EstimatorError(f"episode {ids[int(np.argmin(lengths))]} is empty")
    H = int(lengths.max())
    ratio = []
    qsa, vh = [], []
    for i in range(n):
        a = np.asarray(actions[i])
        rows = np.arange(len(a))
        pb = np.asarray(pi_b[i])[rows, a]
        zero = np.flatnonzero(pb <= 0)
        if zero.size:
            raise EstimatorError(
                f"behaviour probability is zero for the logged action of episode {ids[i]} at timestep {zero[0]}")
        pe_full = np.asarray(pi_e[i])
        ratio.append(pe_full[rows, a] / pb)
        if q_hat is not None:
            q = np.asarray(q_hat[i])
            qsa.append(q[rows, a])
            vh.append((pe_full * q).sum(axis=1))
    r = _pad([np.asarray(x, dtype=float) for x in rewards], H)
    step_ratio = _pad(ratio, H, fill=1.0)
    rho = np.cumprod(step_ratio, axis=1)
    w = rho / rho.sum(axis=0, keepdims=True)
    w_prev = np.concatenate([np.full((n, 1), 1.0 / n), w[:, :-1]], axis=1)
    disc = gamma ** np.arange(H)
    contrib = (disc * w * r).sum(axis=1)
    wis = float(contrib.sum())
    if q_hat is not None:
        Q = _pad(qsa, H)
        V = _pad(vh, H)
        contrib = contrib + (disc * (w_prev * V - w * Q)).sum(axis=1)
        direct = float(np.mean(V[:, 0]))
    else:
        direct = 0.0
    final = rho[np.arange(n), lengths - 1]
    wf = final / final.sum()
    ess = float(1.0 / np.sum(wf ** 2))
    return WDRResult(float(contrib.sum()), contrib, wis, direct, ess, n, w)


def wdr_estimate(test: Sequence[Episode], pi_e: StochasticPolicy, pi_b: StochasticPolicy,
                 q_hat: TrainedPolicy | None, gamma: float) -> WDRResult:
    test = list(test)
    if not test:
        raise EstimatorError("no test episodes")
    pe = pi_e.episode_probs(test)
    pb = pi_b.episode_probs(test)
    qs = None
    if q_hat is not None:
        ts = q_hat.transitions(test)
        qs = _split_rows(q_hat.q_values(ts.all()), ts)
    return wdr_from_arrays([e.rewards for e in test], [e.actions for e in test], pe, pb, qs, gamma,
                           [e.patient_id for e in test])


# ---------------------------------------------------------------------------
# multi-split evaluation

LEARNED = ("daqn", "drqn-lstm", "dqn-mlp")
POLICY_LABELS = {"daqn": "DAQN", "drqn-lstm": "DRQN", "dqn-mlp": "DQN", "behavior": "Clinician",
                 "random": "Random"}


@dataclass
class OPEReport:
    cohort: str
    policies: list[str]
    rows: list[dict] = field(default_factory=list)  # one per (split, policy)

    def values(self, policy: str, key: str = "wdr") -> np.ndarray:
        return np.array([r[key] for r in sorted(self.rows, key=lambda r: r["split"]) if r["policy"] == policy])

    def mean(self, policy: str) -> float:
        return float(np.mean(self.values(policy)))

    def std(self, policy: str) -> float:
        v = self.values(policy)
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    SUMMARY_COLUMNS = ("policy", "cohort", "n_splits", "wdr_mean", "wdr_std", "table")
    SPLIT_COLUMNS = ("split", "policy", "wdr", "wis", "direct", "ess", "true_value", "n_test")

    def summary_rows(self) -> list[dict]:
        out = []
        for p in self.policies:
            m, s = self.mean(p), self.std(p)
            out.append({"policy": POLICY_LABELS.get(p, p), "cohort": self.cohort, "n_splits": len(self.values(p)),
                        "wdr_mean": m, "wdr_std": s, "table": f"{m:.5f}±{s:.4f}"})
        return out

    def write(self, summary_path, splits_path) -> tuple[Path, Path]:
        summary_path, splits_path = Path(summary_path), Path(splits_path)
        with summary_path.open("w", encoding="utf-8") as fh:
            fh.write("\t".join(self.SUMMARY_COLUMNS) + "\n")
            for r in self.summary_rows():
                fh.write("\t".join(_cell(r[c]) for c in self.SUMMARY_COLUMNS) + "\n")
        with splits_path.open("w", encoding="utf-8") as fh:
            fh.write("\t".join(self.SPLIT_COLUMNS) + "\n")
            for r in sorted(self.rows, key=lambda r: (r["split"], self.policies.index(r["policy"]))):
                fh.write("\t".join(_cell(r.get(c)) for c in self.SPLIT_COLUMNS) + "\n")
        return summary_path, splits_path


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class OPESettings:
    n_splits: int = 50
    eps_soft: float = 0.05
    policies: tuple = ("daqn", "drqn-lstm", "dqn-mlp", "behavior", "random")
    net_overrides: dict = field(default_factory=dict)
    behavior: BehaviorConfig = field(default_factory=BehaviorConfig)
    retrain: bool = True
    rollout_episodes: int = 0
    stratified: bool = True


def evaluate_split(episodes: Sequence[Episode], split: int, num_actions: int, cfg: TrainConfig,
                   settings: OPESettings, checkpoints: dict | None = None, env_spec=None) -> list[dict]:
    """Train, fit the behaviour policy and evaluate every policy on one split."""
    split_seed = int(substream(cfg.seed, STREAM_SPLIT, split).integers(2 ** 31))
    train, test = split_cohort(list(episodes), cfg.split_fraction, split_seed, settings.stratified)
    normalizer = Normalizer.fit(train)
    run_cfg = replace(cfg, seed=split_seed)
    overrides = dict(settings.net_overrides)
    k = overrides.get("lookback", 9)
    learned: dict[str, TrainedPolicy] = {}
    for arch in (p for p in settings.policies if p in LEARNED):
        if settings.retrain:
            learned[arch], _ = train_policy(train, arch, run_cfg, num_actions, overrides, normalizer)
        else:
            if not checkpoints or arch not in checkpoints:
                raise ContractError(
                    f"policy {arch!r} requested with retraining disabled but no checkpoint was given; "
                    f"pass a checkpoint for {arch} or enable retraining")
            learned[arch] = TrainedPolicy.load(checkpoints[arch])
    bc_cfg = replace(settings.behavior, seed=split_seed)
    bc_over = {k2: v for k2, v in overrides.items() if k2 != "lookback"}
    pi_b = fit_behavior_policy(train, k, num_actions, bc_cfg, bc_over, normalizer)
    rows = []
    for p in settings.policies:
        if p in LEARNED:
            pe = SoftenedGreedy(learned[p], settings.eps_soft)
            res = wdr_estimate(test, pe, pi_b, learned[p], cfg.gamma)
        elif p == "behavior":
            pe = pi_b
            res = wdr_estimate(test, pi_b, pi_b, None, cfg.gamma)
        elif p == "random":
            pe = UniformPolicy(num_actions)
            res = wdr_estimate(test, pe, pi_b, None, cfg.gamma)
        else:
            raise ContractError(f"unknown policy {p!r}")
        true_value = None
        if env_spec is not None and settings.rollout_episodes > 0 and p != "behavior":
            from .cohort.synthetic import simulate_policy
            rollout_seed = int(substream(split_seed, 5).integers(2 ** 31))
            true_value = float(np.mean(simulate_policy(env_spec, pe, settings.rollout_episodes, k,
                                                       normalizer, rollout_seed)))
        rows.append({"split": split, "policy": p, "wdr": res.estimate, "wis": res.wis, "direct": res.direct,
                     "ess": res.ess, "true_value": true_value, "n_test": res.n_episodes})
        log.info("split %d %s wdr=%.4f", split, p, res.estimate)
    return rows


def evaluate_policies(episodes: Sequence[Episode], num_actions: int, cfg: TrainConfig,
                      settings: OPESettings | None = None, cohort_name: str = "cohort",
                      checkpoints: dict | None = None, env_spec=None, workers: int = 1) -> OPEReport:
    settings = settings or OPESettings()
    for p in settings.policies:
        if p not in LEARNED and p not in ("behavior", "random"):
            raise ContractError(f"unknown policy {p!r}")
    if not settings.retrain:
        missing = [p for p in settings.policies if p in LEARNED and not (checkpoints and p in checkpoints)]
        if missing:
            raise ContractError(
                f"retraining is disabled but no checkpoint was supplied for {missing}; "
                f"provide --checkpoint {missing[0]}=PATH or enable retraining")
    report = OPEReport(cohort_name, list(settings.policies))
    splits = range(settings.n_splits)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(evaluate_split, episodes, s, num_actions, cfg, settings, checkpoints, env_spec)
                    for s in splits]
            for f in futs:
                report.rows.extend(f.result())
    else:
        for s in splits:
            report.rows.extend(evaluate_split(episodes, s, num_actions, cfg, settings, checkpoints, env_spec))
    return report
