"""Offline dueling double Q-learning with prioritized replay."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .cohort.episode import Episode, Normalizer
from .cohort.windows import TransitionSet
from .net import DaqnConfig, HistoryBatch, QNetwork, load_network, save_network, sync_target
from .replay import PrioritizedReplay, beta_schedule
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)

# substream ids under one top-level seed
STREAM_SPLIT = 1
STREAM_INIT = 2
STREAM_REPLAY = 3
STREAM_BEHAVIOR = 4
STREAM_ROLLOUT = 5


def substream(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream, *map(int, extra)])


@dataclass
class TrainConfig:
    gamma: float = 0.99
    batches: int = 10000
    batch_size: int = 128
    target_sync: int = 500
    lr: float = 1e-4
    clip_norm: float = 10.0
    per_alpha: float = 0.6
    per_beta_start: float = 0.4
    per_beta_end: float = 1.0
    per_eps: float = 0.01
    split_fraction: float = 0.8
    log_every: int = 100
    divergence_limit: float = 1e6
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ContractError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0 < self.split_fraction < 1:
            raise ContractError(f"split fraction must lie in (0, 1), got {self.split_fraction}")
        if self.batches < 1 or self.batch_size < 1 or self.target_sync < 1 or self.log_every < 1:
            raise ContractError("batches, batch_size, target_sync and log_every must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainReport:
    intervals: list[dict] = field(default_factory=list)
    syncs: list[int] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: str | None = None
    stale_priority_updates: int = 0

    COLUMNS = ("start", "end", "loss_mean", "td_abs_mean", "td_abs_p50", "td_abs_p90", "td_abs_max",
               "beta", "grad_norm_mean")

    @property
    def batches(self) -> int:
        return sum(r["end"] - r["start"] for r in self.intervals)

    def losses(self) -> np.ndarray:
        return np.array([r["loss_mean"] for r in self.intervals])

    def write_tsv(self, path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            fh.write("\t".join(self.COLUMNS) + "\n")
            for r in self.intervals:
                fh.write("\t".join(repr(r[c]) if isinstance(r[c], float) else str(r[c])
                                   for c in self.COLUMNS) + "\n")
        return path


@dataclass
class TrainedPolicy:
    """A Q-network together with the normalisation it was trained under."""

    net: QNetwork
    normalizer: Normalizer
    num_actions: int
    train_config: dict = field(default_factory=dict)
    step_losses: np.ndarray | None = None

    @property
    def arch(self) -> str:
        return self.net.arch

    @property
    def lookback(self) -> int:
        return self.net.config.lookback

    def q_values(self, batch: HistoryBatch) -> np.ndarray:
        return self.net.q_values(batch)

    def greedy(self, batch: HistoryBatch) -> np.ndarray:
        return greedy_actions(self.q_values(batch))

    def transitions(self, episodes: list[Episode]) -> TransitionSet:
        return TransitionSet(episodes, self.lookback, self.num_actions, self.normalizer)

    def save(self, path) -> Path:
        extra = {"normalizer": self.normalizer.to_dict(), "num_actions": self.num_actions,
                 "train_config": self.train_config}
        return save_network(path, self.net, extra)

    @classmethod
    def load(cls, path) -> "TrainedPolicy":
        net, extra = load_network(path)
        return cls(net, Normalizer.from_dict(extra["normalizer"]), int(extra["num_actions"]),
                   extra.get("train_config", {}))


def greedy_actions(q: np.ndarray) -> np.ndarray:
    """Argmax per row; ``np.argmax`` returns the first maximum, i.e. ties go to the lowest index."""
    return np.argmax(q, axis=1)


def greedy_policy(policy: TrainedPolicy):
    """Deterministic ``(history batch) -> action indices`` function."""
    return policy.greedy


def split_cohort(episodes: list[Episode], fraction: float, seed: int,
                 stratified: bool = True) -> tuple[list[Episode], list[Episode]]:
    """Episode-level split, outcome-stratified with largest-remainder quotas."""
    if not 0 < fraction < 1:
        raise ContractError(f"fraction must lie in (0, 1), got {fraction}")
    n = len(episodes)
    if n < 2:
        raise ContractError("need at least two episodes to split")
    rng = substream(seed, STREAM_SPLIT)
    outcomes = np.array([e.outcome for e in episodes])
    strata = sorted(set(outcomes.tolist()))
    if stratified and len(strata) == 1:
        warnings.warn("all episodes share one outcome; falling back to a plain split", stacklevel=2)
        stratified = False
    if not stratified:
        groups = [np.arange(n)]
    else:
        groups = [np.flatnonzero(outcomes == s) for s in strata]
        small = [s for s, g in zip(strata, groups) if len(g) < 2]
        if small:
            raise ContractError(f"outcome strata {small} have fewer than 2 episodes")
    n_train = int(round(fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    exact = np.array([fraction * len(g) for g in groups])
    quota = np.floor(exact).astype(int)
    rem = n_train - quota.sum()
    order = np.argsort(-(exact - quota), kind="stable")
    for i in order[:max(rem, 0)]:
        quota[i] += 1
    train_idx, test_idx = [], []
    for g, q in zip(groups, quota):
        perm = g[rng.permutation(len(g))]
        train_idx.extend(perm[:q].tolist())
        test_idx.extend(perm[q:].tolist())
    train_idx.sort()
    test_idx.sort()
    return [episodes[i] for i in train_idx], [episodes[i] for i in test_idx]


def td_targets(rewards: np.ndarray, terminal: np.ndarray, next_batch: HistoryBatch,
               main: QNetwork, target: QNetwork, gamma: float) -> np.ndarray:
    """Double-Q targets: main network picks ``a'``, target network values it."""
    rewards = np.asarray(rewards, dtype=float)
    terminal = np.asarray(terminal, dtype=bool)
    if main.arch != target.arch:
        raise ContractError("main and target networks must share an architecture")
    out = rewards.copy()
    live = np.flatnonzero(~terminal)
    if live.size:
        nb = next_batch.take(live)
        a_star = greedy_actions(main.q_values(nb))
        q_t = target.q_values(nb)[np.arange(live.size), a_star]
        out[live] += gamma * q_t
    return out


def weighted_td_loss(q: Tensor, actions: np.ndarray, targets: np.ndarray, weights: np.ndarray
                     ) -> tuple[Tensor, Tensor]:
    """Importance-weighted mean squared TD error and the per-sample TD errors."""
    delta = T.take_rows(q, actions) - Tensor(targets)
    return T.mean(Tensor(weights) * delta * delta), delta


def default_net_config(arch: str, obs_dim: int, static_dim: int, num_actions: int, **overrides) -> DaqnConfig:
    return DaqnConfig(obs_dim=obs_dim, static_dim=static_dim, num_actions=num_actions, **overrides)


def train_policy(episodes: list[Episode], arch: str, cfg: TrainConfig, num_actions: int,
                 net_overrides: dict | None = None, normalizer: Normalizer | None = None,
                 checkpoint_path=None) -> tuple[TrainedPolicy, TrainReport]:
    """Fill a prioritized buffer with every training transition and run ``cfg.batches`` updates."""
    t0 = time.perf_counter()
    if not episodes:
        raise ContractError("no training episodes")
    normalizer = normalizer or Normalizer.fit(episodes)
    overrides = dict(net_overrides or {})
    lookback = overrides.pop("lookback", 9)
    ts = TransitionSet(episodes, lookback, num_actions, normalizer)
    net_cfg = DaqnConfig(obs_dim=ts.obs_dim, static_dim=ts.static.shape[1], num_actions=num_actions,
                         lookback=lookback, **overrides)
    if len(ts) < cfg.batch_size:
        raise ContractError(f"{len(ts)} training transitions < batch size {cfg.batch_size}")
    main = QNetwork.create(arch, net_cfg, substream(cfg.seed, STREAM_INIT))
    target = main.clone()
    buffer = PrioritizedReplay(len(ts), cfg.per_alpha, substream(cfg.seed, STREAM_REPLAY))
    buffer.extend(range(len(ts)))
    opt = T.Adam(main.parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
    report = TrainReport()
    losses = np.zeros(cfg.batches)
    acc = {"loss": [], "td": [], "gn": []}
    interval_start = 0
    for step in range(cfg.batches):
        beta = beta_schedule(step, cfg.batches, cfg.per_beta_start, cfg.per_beta_end)
        smp = buffer.sample(cfg.batch_size, beta)
        idx = np.asarray(smp.items, dtype=np.int64)
        y = td_targets(ts.rewards[idx], ts.terminal[idx], ts.next_batch(idx), main, target, cfg.gamma)
        q, _ = main.forward(ts.batch(idx))
        loss, delta = weighted_td_loss(q, ts.actions[idx], y, smp.weights)
        lv = float(loss.data)
        if not np.isfinite(lv) or lv > cfg.divergence_limit:
            raise TrainingDiverged(
                f"{arch} training diverged at batch {step}: loss={lv!r} "
                f"(limit {cfg.divergence_limit:g}); max |td|={np.max(np.abs(delta.data)):.3g}")
        opt.zero_grad()
        T.backward(loss)
        gn = opt.step()
        buffer.update_priorities(smp.ids, delta.data, cfg.per_eps)
        losses[step] = lv
        acc["loss"].append(lv)
        acc["td"].append(np.abs(delta.data))
        acc["gn"].append(gn)
        if (step + 1) % cfg.target_sync == 0:
            sync_target(main, target)
            report.syncs.append(step + 1)
        if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.batches:
            td = np.concatenate(acc["td"])
            report.intervals.append({
                "start": interval_start, "end": step + 1,
                "loss_mean": float(np.mean(acc["loss"])),
                "td_abs_mean": float(td.mean()),
                "td_abs_p50": float(np.quantile(td, 0.5)),
                "td_abs_p90": float(np.quantile(td, 0.9)),
                "td_abs_max": float(td.max()),
                "beta": float(beta),
                "grad_norm_mean": float(np.mean(acc["gn"])),
            })
            log.debug("%s batch %d loss %.5f", arch, step + 1, report.intervals[-1]["loss_mean"])
            acc = {"loss": [], "td": [], "gn": []}
            interval_start = step + 1
    report.stale_priority_updates = buffer.stale_updates
    report.wall_clock = time.perf_counter() - t0
    policy = TrainedPolicy(main, normalizer, num_actions, asdict(cfg), losses)
    if checkpoint_path is not None:
        policy.save(checkpoint_path)
        report.checkpoint = str(checkpoint_path)
    return policy, report
