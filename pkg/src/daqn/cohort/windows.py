"""History windows and transition sets.

Each observation fed to a network is the (normalised) timestep feature vector
followed by a one-hot of the *previous* action; the first timestep gets an
all-zero action block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..net import HistoryBatch, HistoryWindow
from ..tensor import ContractError
from .episode import Episode, Normalizer


def encode_observations(features: np.ndarray, actions: np.ndarray, num_actions: int) -> np.ndarray:
    T = features.shape[0]
    prev = np.zeros((T, num_actions))
    if T > 1:
        prev[np.arange(1, T), actions[:-1]] = 1.0
    return np.concatenate([features, prev], axis=1)


@dataclass
class Transition:
    window: HistoryWindow
    action: int
    reward: float
    next_window: HistoryWindow | None
    terminal: bool

    @property
    def static(self) -> np.ndarray:
        return self.window.static


def build_history_windows(ep: Episode, k: int, num_actions: int,
                          normalizer: Normalizer | None = None) -> list[Transition]:
    """One transition per timestep, windows holding ``min(t + 1, k + 1)`` observations."""
    if k < 0:
        raise ContractError("lookback k must be >= 0")
    feats = normalizer.apply(ep.features) if normalizer is not None else ep.features
    obs = encode_observations(feats, ep.actions, num_actions)
    T = len(ep)
    static = normalizer.apply_static(ep.static) if normalizer is not None else ep.static
    windows = [HistoryWindow(obs[max(0, t - k):t + 1], static) for t in range(T)]
    return [Transition(windows[t], int(ep.actions[t]), float(ep.rewards[t]),
                       windows[t + 1] if t + 1 < T else None, t == T - 1)
            for t in range(T)]


class TransitionSet:
    """All transitions of a list of episodes, stored as index arrays into one
    flat observation matrix so batches are assembled by gathering."""

    def __init__(self, episodes: list[Episode], k: int, num_actions: int,
                 normalizer: Normalizer | None = None):
        if not episodes:
            raise ContractError("no episodes")
        self.k = k
        self.window = k + 1
        self.num_actions = num_actions
        self.normalizer = normalizer
        self.episodes = episodes
        obs, statics, idx, vl, ep_id, ts = [], [], [], [], [], []
        self.slices: list[tuple[int, int]] = []
        base = 0
        L = self.window
        offs = np.arange(L) - (L - 1)
        for e, ep in enumerate(episodes):
            feats = normalizer.apply(ep.features) if normalizer is not None else ep.features
            obs.append(encode_observations(feats, ep.actions, num_actions))
            T = len(ep)
            t = np.arange(T)
            rows = base + t[:, None] + offs[None, :]
            valid = (t[:, None] + offs[None, :]) >= 0
            idx.append(np.where(valid, rows, -1))
            vl.append(np.minimum(t + 1, L))
            static = normalizer.apply_static(ep.static) if normalizer is not None else ep.static
            statics.append(np.repeat(static[None, :], T, axis=0))
            ep_id.append(np.full(T, e))
            ts.append(t)
            self.slices.append((base, base + T))
            base += T
        self.obs = np.concatenate(obs, axis=0)
        self.obs_padded = np.concatenate([self.obs, np.zeros((1, self.obs.shape[1]))], axis=0)
        self.index = np.concatenate(idx, axis=0)
        self.valid_len = np.concatenate(vl)
        self.static = np.concatenate(statics, axis=0)
        self.episode = np.concatenate(ep_id)
        self.timestep = np.concatenate(ts)
        self.actions = np.concatenate([ep.actions for ep in episodes])
        self.rewards = np.concatenate([ep.rewards for ep in episodes])
        self.terminal = np.zeros(len(self.actions), dtype=bool)
        self.terminal[[s[1] - 1 for s in self.slices]] = True
        self.next = np.where(self.terminal, -1, np.arange(len(self.actions)) + 1)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    def batch(self, idx) -> HistoryBatch:
        idx = np.asarray(idx)
        # -1 gathers the trailing zero row
        obs = self.obs_padded[self.index[idx]]
        return HistoryBatch(obs, self.valid_len[idx], self.static[idx])

    def next_batch(self, idx) -> HistoryBatch:
        """Successor windows; terminal rows reuse their own window (masked out by callers)."""
        idx = np.asarray(idx)
        nxt = np.where(self.next[idx] >= 0, self.next[idx], idx)
        return self.batch(nxt)

    def all(self) -> HistoryBatch:
        return self.batch(np.arange(len(self)))

    def episode_rows(self, e: int) -> np.ndarray:
        s, t = self.slices[e]
        return np.arange(s, t)
