"""Q-network architectures over observation histories.

Three architectures share one calling convention, a :class:`HistoryBatch`:

``daqn``
    start-token attention decoder over the embedded history window
``dqn-mlp``
    memoryless two-layer MLP on the current observation
``drqn-lstm``
    LSTM over the window

All three end in a dueling head (``Q = V + A - mean(A)``). A ``softmax`` head
variant produces action logits instead and is used for behaviour cloning.

Windows are right-aligned: slot ``L - 1`` holds the current observation and
padding occupies the leading ``L - valid_len`` slots.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

ARCHITECTURES = ("daqn", "dqn-mlp", "drqn-lstm")


@dataclass
class DaqnConfig:
    obs_dim: int
    static_dim: int
    num_actions: int
    lookback: int = 9
    num_blocks: int = 4
    num_heads: int = 2
    embed_dim: int = 128
    ff_dim: int = 256
    hidden_dim: int = 128  # MLP width and LSTM hidden/cell size
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ContractError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.lookback < 0:
            raise ContractError("lookback must be >= 0")

    @property
    def window(self) -> int:
        return self.lookback + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class HistoryWindow:
    """One agent input: up to ``k + 1`` observation vectors, oldest first."""

    observations: np.ndarray  # (valid_len, obs_dim)
    static: np.ndarray

    @property
    def valid_len(self) -> int:
        return len(self.observations)


@dataclass
class HistoryBatch:
    obs: np.ndarray        # (B, L, obs_dim), right-aligned, zero padded
    valid_len: np.ndarray  # (B,)
    static: np.ndarray     # (B, static_dim)

    def __len__(self) -> int:
        return self.obs.shape[0]

    @classmethod
    def from_windows(cls, windows: Sequence[HistoryWindow], length: int) -> "HistoryBatch":
        if not windows:
            raise ContractError("empty window list")
        d = windows[0].observations.shape[1]
        obs = np.zeros((len(windows), length, d))
        vl = np.zeros(len(windows), dtype=np.int64)
        for i, w in enumerate(windows):
            n = min(w.valid_len, length)
            if n < 1:
                raise ContractError("history window needs at least one observation")
            obs[i, length - n:] = w.observations[-n:]
            vl[i] = n
        return cls(obs, vl, np.stack([np.asarray(w.static, dtype=float) for w in windows]))

    def take(self, idx) -> "HistoryBatch":
        return HistoryBatch(self.obs[idx], self.valid_len[idx], self.static[idx])

    def valid_mask(self) -> np.ndarray:
        L = self.obs.shape[1]
        return np.arange(L)[None, :] >= (L - self.valid_len)[:, None]


@dataclass
class AttentionTrace:
    """Per-block attention weights, each of shape ``(B, heads, L)``.

    Weights cover all ``L`` slots; padded slots carry exactly zero.
    """

    layers: list[np.ndarray] = field(default_factory=list)
    valid_len: np.ndarray | None = None

    def head_averaged(self) -> list[np.ndarray]:
        return [w.mean(axis=1) for w in self.layers]


# ---------------------------------------------------------------------------
# parameter construction


def _linear(params: dict, rng, name: str, fan_in: int, fan_out: int) -> None:
    params[f"{name}.W"] = T.parameter(T.glorot_uniform(rng, fan_in, fan_out), f"{name}.W")
    params[f"{name}.b"] = T.parameter(np.zeros(fan_out), f"{name}.b")


def _layer_norm(params: dict, name: str, d: int) -> None:
    params[f"{name}.g"] = T.parameter(np.ones(d), f"{name}.g")
    params[f"{name}.b"] = T.parameter(np.zeros(d), f"{name}.b")


def _head(params: dict, rng, in_dim: int, cfg: DaqnConfig, head: str) -> None:
    if head == "dueling":
        _linear(params, rng, "head.value", in_dim, 1)
        _linear(params, rng, "head.adv", in_dim, cfg.num_actions)
    elif head == "softmax":
        _linear(params, rng, "head.logits", in_dim, cfg.num_actions)
    else:
        raise ContractError(f"unknown head {head!r}")


def init_params(arch: str, cfg: DaqnConfig, rng: np.random.Generator, head: str = "dueling") -> dict:
    params: dict[str, Tensor] = {}
    E = cfg.embed_dim
    if arch == "daqn":
        _linear(params, rng, "embed", cfg.obs_dim, E)
        params["pos"] = T.parameter(rng.normal(0.0, 0.02, size=(cfg.window, E)), "pos")
        params["start"] = T.parameter(rng.normal(0.0, 0.02, size=E), "start")
        for j in range(cfg.num_blocks):
            p = f"block{j}"
            for m in ("Wq", "Wk", "Wv"):
                params[f"{p}.{m}"] = T.parameter(T.glorot_uniform(rng, E, E), f"{p}.{m}")
            _layer_norm(params, f"{p}.ln1", E)
            _linear(params, rng, f"{p}.ff1", E, cfg.ff_dim)
            _linear(params, rng, f"{p}.ff2", cfg.ff_dim, E)
            _layer_norm(params, f"{p}.ln2", E)
        _head(params, rng, E + cfg.static_dim, cfg, head)
    elif arch == "dqn-mlp":
        H = cfg.hidden_dim
        _linear(params, rng, "fc1", cfg.obs_dim + cfg.static_dim, H)
        _linear(params, rng, "fc2", H, H)
        _head(params, rng, H, cfg, head)
    elif arch == "drqn-lstm":
        H = cfg.hidden_dim
        params["lstm.Wx"] = T.parameter(T.glorot_uniform(rng, cfg.obs_dim, 4 * H), "lstm.Wx")
        params["lstm.Wh"] = T.parameter(T.glorot_uniform(rng, H, 4 * H), "lstm.Wh")
        params["lstm.b"] = T.parameter(np.zeros(4 * H), "lstm.b")
        _head(params, rng, H + cfg.static_dim, cfg, head)
    else:
        raise ContractError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    return params


# ---------------------------------------------------------------------------
# forward passes


def _check_batch(batch: HistoryBatch, cfg: DaqnConfig) -> None:
    B, L, d = batch.obs.shape
    if d != cfg.obs_dim:
        raise DimensionError(f"observation dim {d} does not match config obs_dim {cfg.obs_dim}")
    if L != cfg.window:
        raise DimensionError(f"window length {L} does not match lookback+1 = {cfg.window}")
    if batch.static.shape != (B, cfg.static_dim):
        raise DimensionError(f"static shape {batch.static.shape} does not match ({B}, {cfg.static_dim})")
    if np.any(batch.valid_len < 1) or np.any(batch.valid_len > L):
        raise ContractError("valid_len must lie in [1, window]")


def _dense(params, name, x):
    return T.matmul(x, params[f"{name}.W"]) + params[f"{name}.b"]


def apply_head(params: dict, z: Tensor) -> Tensor:
    if "head.logits.W" in params:
        return _dense(params, "head.logits", z)
    v = _dense(params, "head.value", z)
    a = _dense(params, "head.adv", z)
    return v + (a - T.mean(a, axis=-1, keepdims=True))


def daqn_encode(params: dict, cfg: DaqnConfig, batch: HistoryBatch, want_trace: bool = False):
    """Decoded start token ``(B, E)`` and the attention trace."""
    _check_batch(batch, cfg)
    B, L, _ = batch.obs.shape
    E, H, dh = cfg.embed_dim, cfg.num_heads, cfg.head_dim
    x = T.matmul(Tensor(batch.obs), params["embed.W"]) + params["embed.b"]
    # slot L-1 is the present, so slot j carries the encoding for offset L-1-j
    x = x + params["pos"]
    mask = np.where(batch.valid_mask(), 0.0, -np.inf)
    mask = np.ascontiguousarray(np.broadcast_to(mask[:, None, None, :], (B, H, 1, L)))
    mask_t = Tensor(mask)
    query_src = Tensor(np.zeros((B, E))) + params["start"]
    trace = AttentionTrace(valid_len=batch.valid_len.copy())
    inv_scale = 1.0 / np.sqrt(dh)
    for j in range(cfg.num_blocks):
        p = f"block{j}"
        q = T.reshape(T.matmul(query_src, params[f"{p}.Wq"]), (B, H, 1, dh))
        k = T.transpose(T.reshape(T.matmul(x, params[f"{p}.Wk"]), (B, L, H, dh)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(T.matmul(x, params[f"{p}.Wv"]), (B, L, H, dh)), (0, 2, 1, 3))
        scores = T.scale(T.matmul(q, k), inv_scale) + mask_t
        attn = T.softmax(scores, axis=-1)
        if want_trace:
            trace.layers.append(attn.data.reshape(B, H, L).copy())
        ctx = T.reshape(T.matmul(attn, v), (B, E))
        tok = T.layer_norm(query_src + ctx, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"], cfg.ln_eps)
        ff = _dense(params, f"{p}.ff2", T.relu(_dense(params, f"{p}.ff1", tok)))
        query_src = T.layer_norm(tok + ff, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"], cfg.ln_eps)
    return query_src, trace


def daqn_forward(params: dict, cfg: DaqnConfig, batch: HistoryBatch, want_trace: bool = False):
    token, trace = daqn_encode(params, cfg, batch, want_trace)
    z = T.concat([token, Tensor(batch.static)], axis=-1)
    return apply_head(params, z), trace


def mlp_forward(params: dict, cfg: DaqnConfig, batch: HistoryBatch) -> Tensor:
    _check_batch(batch, cfg)
    x = Tensor(np.concatenate([batch.obs[:, -1, :], batch.static], axis=1))
    h = T.relu(_dense(params, "fc1", x))
    h = T.relu(_dense(params, "fc2", h))
    return apply_head(params, h)


def lstm_forward(params: dict, cfg: DaqnConfig, batch: HistoryBatch) -> Tensor:
    _check_batch(batch, cfg)
    B, L, _ = batch.obs.shape
    Hd = cfg.hidden_dim
    h = Tensor(np.zeros((B, Hd)))
    c = Tensor(np.zeros((B, Hd)))
    valid = batch.valid_mask()
    first = int(L - batch.valid_len.max())
    for t in range(first, L):
        gates = (T.matmul(Tensor(batch.obs[:, t, :]), params["lstm.Wx"])
                 + T.matmul(h, params["lstm.Wh"]) + params["lstm.b"])
        i = T.sigmoid(T.slice_last(gates, 0, Hd))
        f = T.sigmoid(T.slice_last(gates, Hd, 2 * Hd))
        g = T.tanh(T.slice_last(gates, 2 * Hd, 3 * Hd))
        o = T.sigmoid(T.slice_last(gates, 3 * Hd, 4 * Hd))
        c_new = f * c + i * g
        h_new = o * T.tanh(c_new)
        if valid[:, t].all():
            h, c = h_new, c_new
        else:
            m = Tensor(valid[:, t:t + 1].astype(float))
            h = h + m * (h_new - h)
            c = c + m * (c_new - c)
    z = T.concat([h, Tensor(batch.static)], axis=-1)
    return apply_head(params, z)


# ---------------------------------------------------------------------------


class QNetwork:
    """Parameter set plus architecture tag; forward is pure in (params, inputs)."""

    def __init__(self, arch: str, config: DaqnConfig, params: dict[str, Tensor], head: str = "dueling"):
        if arch not in ARCHITECTURES:
            raise ContractError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
        self.arch = arch
        self.config = config
        self.params = params
        self.head = head

    @classmethod
    def create(cls, arch: str, config: DaqnConfig, seed: int | np.random.Generator = 0,
               head: str = "dueling") -> "QNetwork":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return cls(arch, config, init_params(arch, config, rng, head), head)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def forward(self, batch: HistoryBatch, want_trace: bool = False):
        """Return ``(output, trace)``; ``trace`` is ``None`` except for DAQN."""
        if self.arch == "daqn":
            return daqn_forward(self.params, self.config, batch, want_trace)
        if self.arch == "dqn-mlp":
            return mlp_forward(self.params, self.config, batch), None
        return lstm_forward(self.params, self.config, batch), None

    def q_values(self, batch: HistoryBatch, chunk: int = 4096) -> np.ndarray:
        out = []
        with T.no_grad():
            for s in range(0, len(batch), chunk):
                q, _ = self.forward(batch.take(slice(s, s + chunk)))
                out.append(q.data)
        return np.concatenate(out, axis=0)

    def probabilities(self, batch: HistoryBatch, chunk: int = 4096) -> np.ndarray:
        """Softmax over the head output (meaningful for the ``softmax`` head)."""
        logits = self.q_values(batch, chunk)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def trace(self, batch: HistoryBatch) -> AttentionTrace:
        if self.arch != "daqn":
            raise ContractError(f"architecture {self.arch!r} has no attention trace")
        with T.no_grad():
            _, tr = self.forward(batch, want_trace=True)
        return tr

    def clone(self) -> "QNetwork":
        params = {k: T.parameter(v.data.copy(), k) for k, v in self.params.items()}
        return QNetwork(self.arch, copy.deepcopy(self.config), params, self.head)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def manifest(self) -> dict:
        return {"arch": self.arch, "head": self.head, "config": asdict(self.config)}


def sync_target(main: QNetwork, target: QNetwork) -> QNetwork:
    """Hard-copy the main parameters into ``target`` (in place) and return it."""
    if main.arch != target.arch or main.config != target.config or main.head != target.head:
        raise ContractError(
            f"cannot sync {main.arch}/{main.head} into {target.arch}/{target.head}: architecture mismatch")
    for name, p in main.params.items():
        target.params[name].data = p.data.copy()
    return target


def save_network(path, net: QNetwork, extra: dict | None = None):
    meta = net.manifest()
    if extra:
        meta["extra"] = extra
    return checkpoint.save(path, net.state_arrays(), meta)


def network_from_arrays(arrays: dict[str, np.ndarray], meta: dict) -> QNetwork:
    cfg = DaqnConfig(**meta["config"])
    params = {k: T.parameter(v, k) for k, v in arrays.items()}
    net = QNetwork(meta["arch"], cfg, params, meta.get("head", "dueling"))
    expected = init_params(net.arch, cfg, np.random.default_rng(0), net.head)
    if set(expected) != set(params):
        raise checkpoint.CheckpointError("checkpoint tensors do not match the declared architecture")
    for k, v in expected.items():
        if v.shape != params[k].shape:
            raise checkpoint.CheckpointError(f"tensor {k} has shape {params[k].shape}, expected {v.shape}")
    return net


def load_network(path) -> tuple[QNetwork, dict]:
    arrays, meta = checkpoint.load(path)
    return network_from_arrays(arrays, meta), meta.get("extra", {})
