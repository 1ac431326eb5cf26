"""Synthetic partially observable cohorts with exact ground truth.

A latent MDP ``(S, A, P, R)`` emits Gaussian observations per latent state.
Episodes start at ``t = 0`` and, after each step, continue with probability
``1 - hazard[s_next]`` (forced to continue until ``min_length`` and forced to
stop at ``horizon``). The behaviour policy is a softmax over the latent-optimal
Q-function, so it acts on information the observations only partly reveal.

Every episode draws from its own counter-keyed stream
``default_rng([seed, episode_index])``; cohorts are reproducible per seed and
independent of how many episodes are generated alongside.

The default environment
-----------------------
Eight latent states: a hidden phenotype ``z`` in {0, 1} times a severity level
0..3. Level 3 is a crisis: it is the only state whose observation reveals ``z``
(on the ``cue`` channel). At levels 2 and 3 the helpful action is a
phenotype-independent "rescue" (high fluid and high vasopressor); at levels 0
and 1 the helpful action depends on ``z``. Because the rescue action carries no
information about ``z``, after a crisis an agent can only recover the phenotype
from observations at least two steps in the past, so memoryless policies are
suboptimal. Reward is ``-0.25 * level + 0.5 * [helpful action]`` and the
``severity`` channel emits the level, so reward penalises that channel.

``severity_memory_env_spec`` keeps these dynamics but moves the phenotype
signal onto the severity channel itself (see its docstring).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..net import HistoryBatch
from ..tensor import ContractError
from .episode import Episode, Normalizer
from .schema import CohortSchema, synthetic_schema

STATIC_BINARY_P = (0.5, 0.3, 0.1)
STATIC_CONT = ((65.0, 15.0), (80.0, 15.0))


@dataclass
class SyntheticEnvSpec:
    transition: np.ndarray      # (S, A, S)
    reward: np.ndarray          # (S, A)
    emission_mean: np.ndarray   # (S, D)
    emission_std: np.ndarray    # (S, D)
    initial: np.ndarray         # (S,)
    hazard: np.ndarray          # (S,)
    horizon: int = 20
    min_length: int = 2
    behavior_temperature: float = 0.5
    gamma: float = 0.99
    reward_noise: float = 0.0
    static_binary_p: tuple = STATIC_BINARY_P
    static_continuous: tuple = STATIC_CONT
    feature_names: list[str] | None = None
    seed: int = 0
    outcome_levels: tuple = ()  # latent states counted as a poor outcome when final
    behavior_q: np.ndarray | None = None  # (S, A) scores for the behaviour softmax; latent Q* when None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.reward = np.asarray(self.reward, dtype=float)
        self.emission_mean = np.asarray(self.emission_mean, dtype=float)
        self.emission_std = np.broadcast_to(np.asarray(self.emission_std, dtype=float),
                                            self.emission_mean.shape).copy()
        self.initial = np.asarray(self.initial, dtype=float)
        self.hazard = np.asarray(self.hazard, dtype=float)
        if self.behavior_q is not None:
            self.behavior_q = np.asarray(self.behavior_q, dtype=float)
        self.validate()

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.emission_mean.shape[1]

    def validate(self) -> None:
        S, A = self.reward.shape
        if self.transition.shape != (S, A, S):
            raise ContractError(f"transition shape {self.transition.shape} != ({S}, {A}, {S})")
        if np.any(self.transition < 0) or not np.allclose(self.transition.sum(axis=2), 1.0, atol=1e-9):
            raise ContractError("transition rows must be probability distributions")
        if self.initial.shape != (S,) or np.any(self.initial < 0) or abs(self.initial.sum() - 1) > 1e-9:
            raise ContractError("initial distribution must be a probability vector over states")
        if self.emission_mean.shape[0] != S or np.any(self.emission_std < 0):
            raise ContractError("emission parameters must cover every state with std >= 0")
        if self.hazard.shape != (S,) or np.any((self.hazard < 0) | (self.hazard > 1)):
            raise ContractError("hazard must be a per-state probability")
        if self.horizon < self.min_length or self.min_length < 1:
            raise ContractError("need 1 <= min_length <= horizon")
        if self.behavior_q is not None and self.behavior_q.shape != (S, A):
            raise ContractError(f"behaviour scores must have shape ({S}, {A})")
        if not self.behavior_temperature > 0:
            raise ContractError("behaviour temperature must be positive")
        if not 0 <= self.gamma < 1:
            raise ContractError("gamma must lie in [0, 1)")

    def schema(self) -> CohortSchema:
        if self.n_actions != 25:
            sch = synthetic_schema(self.obs_dim, self.feature_names)
            w = int(round(np.sqrt(self.n_actions)))
            if w * w != self.n_actions:
                raise ContractError("synthetic schemas need a square action grid")
            for ch in sch.channels:
                ch.nonzero_bins = w - 1
            return sch
        return synthetic_schema(self.obs_dim, self.feature_names)

    # -- exact latent-MDP quantities -------------------------------------

    def latent_optimal_q(self, tol: float = 1e-12, max_iter: int = 100000) -> np.ndarray:
        """Stationary optimal Q with per-state continuation ``1 - hazard``."""
        if "qstar" not in self._cache:
            cont = self.gamma * (1.0 - self.hazard)
            v = np.zeros(self.n_states)
            for _ in range(max_iter):
                q = self.reward + self.transition @ (cont * v)
                v_new = q.max(axis=1)
                if np.max(np.abs(v_new - v)) < tol:
                    v = v_new
                    break
                v = v_new
            self._cache["qstar"] = self.reward + self.transition @ (cont * v)
        return self._cache["qstar"]

    def behavior_probs(self) -> np.ndarray:
        base = self.latent_optimal_q() if self.behavior_q is None else self.behavior_q
        q = base / self.behavior_temperature
        z = np.exp(q - q.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def continuation(self, t_next: int) -> np.ndarray:
        if t_next >= self.horizon:
            return np.zeros(self.n_states)
        if t_next < self.min_length:
            return np.ones(self.n_states)
        return 1.0 - self.hazard

    def exact_value(self, policy: np.ndarray) -> float:
        """Expected discounted return of a latent-state policy ``(S, A)`` by backward induction."""
        policy = np.asarray(policy, dtype=float)
        if policy.shape != (self.n_states, self.n_actions):
            raise ContractError(f"policy must be ({self.n_states}, {self.n_actions})")
        v = np.zeros(self.n_states)
        for t in range(self.horizon - 1, -1, -1):
            cont = self.continuation(t + 1)
            q = self.reward + self.gamma * self.transition @ (cont * v)
            v = (policy * q).sum(axis=1)
        return float(self.initial @ v)


def _helpful(z: int, level: int, a: int) -> bool:
    iv, vaso = divmod(a, 5)
    if level >= 2:
        return iv >= 3 and vaso >= 3
    if z == 0:
        return iv >= 3 and vaso <= 1
    return vaso >= 3 and iv <= 1


def _helpful_after_crisis(z: int, level: int, a: int) -> bool:
    iv, vaso = divmod(a, 5)
    if level == 3:
        return iv >= 3 and vaso >= 3
    if level == 2:
        return iv >= 3 and vaso <= 1 if z == 0 else vaso >= 3 and iv <= 1
    return iv <= 1 and vaso <= 1


def _staged_env(helpful, cue_shift: float, severity_shift: float, seed: int, horizon: int,
                behavior_temperature: float, crisis_rate: float, hazard: float, severity_penalty: float,
                match_bonus: float) -> SyntheticEnvSpec:
    """Phenotype x four severity levels; crisis (level 3) observations reveal the phenotype."""
    S, A, D = 8, 25, 12
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    mean = np.zeros((S, D))
    std = np.ones((S, D))
    loadings = np.linspace(-0.3, 0.3, D - 2)
    for z in (0, 1):
        for level in range(4):
            s = 4 * z + level
            crisis = level == 3
            mean[s, 0] = level + (severity_shift * z if crisis else 0.0)
            mean[s, 1] = (2 * z - 1) * cue_shift if crisis else 0.0
            mean[s, 2:] = loadings * level
            std[s, :2] = 0.3
            for a in range(A):
                good = helpful(z, level, a)
                R[s, a] = -severity_penalty * level + match_bonus * good
                nxt = np.zeros(4)
                if crisis:
                    if good:
                        nxt[1], nxt[2] = 0.5, 0.5
                    else:
                        nxt[3], nxt[2] = 0.5, 0.5
                else:
                    base = np.zeros(4)
                    if good:
                        base[max(level - 1, 0)] += 0.6
                        base[level] += 0.4
                    else:
                        base[min(level + 1, 2)] += 0.4
                        base[level] += 0.6
                    nxt = (1 - crisis_rate) * base
                    nxt[3] += crisis_rate
                P[s, a, 4 * z:4 * z + 4] = nxt
    init = np.zeros(S)
    init[3] = init[7] = 0.5
    names = ["severity", "cue"] + [f"aux_{i}" for i in range(D - 2)]
    return SyntheticEnvSpec(P, R, mean, std, init, np.full(S, hazard), horizon=horizon,
                            behavior_temperature=behavior_temperature, feature_names=names,
                            seed=seed, outcome_levels=(2, 3, 6, 7))


def default_env_spec(seed: int = 0, horizon: int = 20, behavior_temperature: float = 0.5,
                     crisis_rate: float = 0.08, hazard: float = 0.05,
                     severity_penalty: float = 0.25, match_bonus: float = 0.5) -> SyntheticEnvSpec:
    return _staged_env(_helpful, 2.0, 0.0, seed, horizon, behavior_temperature, crisis_rate, hazard,
                       severity_penalty, match_bonus)


def severity_memory_env_spec(seed: int = 0, horizon: int = 20, behavior_temperature: float = 0.5,
                             crisis_rate: float = 0.08, hazard: float = 0.05,
                             severity_penalty: float = 0.25, match_bonus: float = 0.5,
                             severity_shift: float = 1.0) -> SyntheticEnvSpec:
    """Variant in which only the severity channel carries the phenotype.

    The cue channel is silent. During a crisis the severity reading is
    ``3 + severity_shift * z``, and the helpful action at level 2 depends on
    ``z`` while levels 0 and 1 share one phenotype-independent action. The
    behaviour policy scores actions by the phenotype-averaged latent Q, so
    logged actions carry no phenotype information. Acting well after a crisis
    therefore needs the severity reading from earlier high-severity steps.
    """
    spec = _staged_env(_helpful_after_crisis, 0.0, severity_shift, seed, horizon, behavior_temperature,
                       crisis_rate, hazard, severity_penalty, match_bonus)
    q = spec.latent_optimal_q()
    pooled = 0.5 * (q[:4] + q[4:])
    spec.behavior_q = np.concatenate([pooled, pooled])
    return spec


ENVIRONMENTS = {"default": default_env_spec, "severity-memory": severity_memory_env_spec}


@dataclass
class SyntheticCohort:
    episodes: list[Episode]
    latent: list[np.ndarray]
    behavior_probs: list[np.ndarray]
    schema: CohortSchema
    spec: SyntheticEnvSpec


def _categorical(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise inverse-CDF sampling; ``cdf`` is ``(n, K)``."""
    idx = (u[:, None] < cdf).argmax(axis=1)
    # guard the last bin against cumulative rounding below 1
    return np.where(u >= cdf[:, -1], cdf.shape[1] - 1, idx)


def _streams(seed: int, first: int, n: int, horizon: int, obs_dim: int):
    u0 = np.empty(n)
    U = np.empty((n, horizon, 3))
    Z = np.empty((n, horizon, obs_dim))
    N = np.empty((n, horizon))
    st_u = np.empty((n, 3))
    st_n = np.empty((n, 2))
    for i in range(n):
        g = np.random.default_rng([seed, first + i])
        u0[i] = g.random()
        U[i] = g.random((horizon, 3))
        Z[i] = g.standard_normal((horizon, obs_dim))
        N[i] = g.standard_normal(horizon)
        st_u[i] = g.random(3)
        st_n[i] = g.standard_normal(2)
    return u0, U, Z, N, st_u, st_n


def generate_synthetic_cohort(spec: SyntheticEnvSpec, n_episodes: int, seed: int | None = None,
                              first_index: int = 0) -> SyntheticCohort:
    """Roll out ``n_episodes`` under the behaviour policy with full ground truth."""
    spec.validate()
    seed = spec.seed if seed is None else seed
    H, S, A, D = spec.horizon, spec.n_states, spec.n_actions, spec.obs_dim
    n = n_episodes
    u0, U, Z, N, st_u, st_n = _streams(seed, first_index, n, H, D)
    pb = spec.behavior_probs()
    pb_cdf = np.cumsum(pb, axis=1)
    P_cdf = np.cumsum(spec.transition, axis=2)
    init_cdf = np.cumsum(spec.initial)

    states = np.zeros((n, H), dtype=np.int64)
    actions = np.zeros((n, H), dtype=np.int64)
    rewards = np.zeros((n, H))
    obs = np.zeros((n, H, D))
    length = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    s = _categorical(np.broadcast_to(init_cdf, (n, S)), u0)
    for t in range(H):
        length[alive] = t + 1
        states[:, t] = s
        obs[:, t] = spec.emission_mean[s] + spec.emission_std[s] * Z[:, t]
        a = _categorical(pb_cdf[s], U[:, t, 1])
        actions[:, t] = a
        rewards[:, t] = spec.reward[s, a] + spec.reward_noise * N[:, t]
        s_next = _categorical(P_cdf[s, a], U[:, t, 0])
        cont = spec.continuation(t + 1)[s_next]
        alive = alive & (U[:, t, 2] < cont)
        s = s_next

    schema = spec.schema()
    episodes, latent, probs = [], [], []
    binp = np.asarray(spec.static_binary_p)
    for i in range(n):
        T = length[i]
        static = np.concatenate([(st_u[i] < binp).astype(float),
                                 [m + sd * z for (m, sd), z in zip(spec.static_continuous, st_n[i])]])
        outcome = int(states[i, T - 1] in spec.outcome_levels)
        episodes.append(Episode(f"{first_index + i:06d}", static, obs[i, :T].copy(), actions[i, :T].copy(),
                                rewards[i, :T].copy(), {}, outcome))
        latent.append(states[i, :T].copy())
        probs.append(pb[states[i, :T]])
    return SyntheticCohort(episodes, latent, probs, schema, spec)


PolicyFn = Callable[[HistoryBatch], np.ndarray]


def simulate_policy(spec: SyntheticEnvSpec, policy: PolicyFn, n_episodes: int, lookback: int,
                    normalizer: Normalizer | None = None, seed: int = 0) -> np.ndarray:
    """Online rollouts of a history policy; returns each episode's discounted return."""
    H, S, A, D = spec.horizon, spec.n_states, spec.n_actions, spec.obs_dim
    n = n_episodes
    u0, U, Z, N, st_u, st_n = _streams(seed, 0, n, H, D)
    binp = np.asarray(spec.static_binary_p)
    static = np.concatenate([(st_u < binp).astype(float),
                             np.stack([m + sd * st_n[:, j] for j, (m, sd) in enumerate(spec.static_continuous)],
                                      axis=1)], axis=1)
    if normalizer is not None:
        static = normalizer.apply_static(static)
    P_cdf = np.cumsum(spec.transition, axis=2)
    s = _categorical(np.broadcast_to(np.cumsum(spec.initial), (n, S)), u0)
    L = lookback + 1
    enc = np.zeros((n, H, D + A))
    alive = np.ones(n, dtype=bool)
    returns = np.zeros(n)
    disc = 1.0
    for t in range(H):
        o = spec.emission_mean[s] + spec.emission_std[s] * Z[:, t]
        enc[:, t, :D] = normalizer.apply(o) if normalizer is not None else o
        act = np.flatnonzero(alive)
        if act.size == 0:
            break
        lo = max(0, t - L + 1)
        win = np.zeros((act.size, L, D + A))
        win[:, L - (t + 1 - lo):] = enc[act, lo:t + 1]
        batch = HistoryBatch(win, np.full(act.size, t + 1 - lo), static[act])
        p = policy(batch)
        a = _categorical(np.cumsum(p, axis=1), U[act, t, 1])
        returns[act] += disc * (spec.reward[s[act], a] + spec.reward_noise * N[act, t])
        if t + 1 < H:
            enc[act, t + 1, D + a] = 1.0
        s_next = s.copy()
        s_next[act] = _categorical(P_cdf[s[act], a], U[act, t, 0])
        cont = spec.continuation(t + 1)[s_next]
        alive = alive & (U[:, t, 2] < cont)
        s = s_next
        disc *= spec.gamma
    return returns


def discounted_returns(episodes: list[Episode], gamma: float) -> np.ndarray:
    return np.array([float(np.sum(e.rewards * gamma ** np.arange(len(e)))) for e in episodes])
