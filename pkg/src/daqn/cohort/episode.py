from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tensor import ContractError


@dataclass
class Episode:
    """One patient trajectory.

    ``features`` is ``(T, n_dynamic)``; ``actions`` and ``rewards`` are ``(T,)``.
    ``clinical`` maps column name to a ``(T,)`` array (SOFA, lactate, MAP, ...).
    The reward stored at row ``t`` is the one received for action ``a_t``.
    """

    patient_id: str
    static: np.ndarray
    features: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    clinical: dict[str, np.ndarray] = field(default_factory=dict)
    outcome: int = 0

    def __post_init__(self):
        self.static = np.asarray(self.static, dtype=float)
        self.features = np.asarray(self.features, dtype=float)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=float)
        T = len(self.actions)
        if self.features.shape[0] != T or self.rewards.shape[0] != T:
            raise ContractError(f"episode {self.patient_id}: ragged feature/action/reward lengths")
        for k, v in self.clinical.items():
            self.clinical[k] = np.asarray(v, dtype=float)
            if len(v) != T:
                raise ContractError(f"episode {self.patient_id}: clinical column {k} has wrong length")

    def __len__(self) -> int:
        return len(self.actions)

    def column(self, name: str, feature_names: list[str]) -> np.ndarray:
        """A clinical column, or a dynamic feature by name."""
        if name in self.clinical:
            return self.clinical[name]
        if name in feature_names:
            return self.features[:, feature_names.index(name)]
        raise KeyError(name)


@dataclass
class Normalizer:
    """Per-feature z-normalisation of dynamic and static features, fitted on training episodes."""

    mean: np.ndarray
    std: np.ndarray
    static_mean: np.ndarray | None = None
    static_std: np.ndarray | None = None

    @staticmethod
    def _moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        std = x.std(axis=0)
        return x.mean(axis=0), np.where(std > 1e-12, std, 1.0)

    @classmethod
    def fit(cls, episodes: list[Episode]) -> "Normalizer":
        if not episodes:
            raise ContractError("cannot fit normalisation on zero episodes")
        mean, std = cls._moments(np.concatenate([e.features for e in episodes], axis=0))
        smean, sstd = cls._moments(np.stack([e.static for e in episodes]))
        return cls(mean, std, smean, sstd)

    @classmethod
    def identity(cls, dim: int, static_dim: int = 0) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim), np.zeros(static_dim), np.ones(static_dim))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    def apply_static(self, s: np.ndarray) -> np.ndarray:
        if self.static_mean is None:
            return s
        return (s - self.static_mean) / self.static_std

    def to_dict(self) -> dict:
        d = {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}
        if self.static_mean is not None:
            d["static_mean"] = [float(v) for v in self.static_mean]
            d["static_std"] = [float(v) for v in self.static_std]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        arr = lambda k: np.asarray(d[k], dtype=float) if k in d else None
        return cls(arr("mean"), arr("std"), arr("static_mean"), arr("static_std"))
