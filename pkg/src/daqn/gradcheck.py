"""Central finite-difference checks for every primitive, layer and network.

Each check builds a scalar loss ``sum(out * R)`` with a fixed random
projection ``R`` (so ops like softmax whose plain sum is constant still get a
non-trivial gradient), runs the tape backward, and compares every parameter
gradient against central differences with step ``1e-5``.

Relative error per tensor is ``||g_analytic - g_numeric|| / max(||g_analytic||,
||g_numeric||, 1e-12)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .net import DaqnConfig, HistoryBatch, QNetwork, apply_head, daqn_encode

LAYER_TOL = 1e-4
NETWORK_TOL = 1e-3
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    op: str
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e <= self.tolerance for e in self.errors.values())

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} [op={self.op}] max_rel_err={self.max_error:.3e} tol={self.tolerance:g}"


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(loss_fn: Callable[[], float], arr: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. ``arr``, perturbed in place."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = loss_fn()
        flat[i] = old - step
        down = loss_fn()
        flat[i] = old
        gf[i] = (up - down) / (2.0 * step)
    return g


def check(name: str, op: str, build: Callable[[], T.Tensor], params: dict[str, T.Tensor],
          tolerance: float, rng: np.random.Generator) -> CheckResult:
    """Compare analytic and numeric gradients of ``sum(build() * R)``."""
    out = build()
    proj = rng.normal(size=out.shape)

    def loss_tensor():
        return T.sum(T.mul(build(), T.Tensor(proj)))

    for p in params.values():
        p.grad = None
    T.backward(loss_tensor())

    def loss_value():
        with T.no_grad():
            return float(loss_tensor().data)

    result = CheckResult(name, op, tolerance)
    for pname, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        result.errors[pname] = relative_error(analytic, numeric_grad(loss_value, p.data))
    return result


def _p(rng, *shape, name, positive=False):
    data = rng.uniform(0.5, 2.0, size=shape) if positive else rng.normal(size=shape)
    return T.parameter(data, name)


def primitive_checks(rng: np.random.Generator) -> list[CheckResult]:
    out = []
    a = _p(rng, 4, 5, name="a")
    b = _p(rng, 5, 3, name="b")
    out.append(check("matmul 4x5.5x3", "matmul", lambda: T.matmul(a, b), {"a": a, "b": b}, LAYER_TOL, rng))
    x3 = _p(rng, 2, 4, 5, name="x")
    out.append(check("matmul batched-shared", "matmul", lambda: T.matmul(x3, b), {"x": x3, "b": b}, LAYER_TOL, rng))
    y3 = _p(rng, 2, 5, 3, name="y")
    out.append(check("matmul batched", "matmul", lambda: T.matmul(x3, y3), {"x": x3, "y": y3}, LAYER_TOL, rng))
    u = _p(rng, 3, 4, name="u")
    v = _p(rng, 3, 4, name="v")
    bias = _p(rng, 4, name="bias")
    col = _p(rng, 3, 1, name="col")
    out.append(check("add", "add", lambda: T.add(u, v), {"u": u, "v": v}, LAYER_TOL, rng))
    out.append(check("add suffix-broadcast", "add", lambda: T.add(u, bias), {"u": u, "bias": bias}, LAYER_TOL, rng))
    out.append(check("sub column-broadcast", "sub", lambda: T.sub(u, col), {"u": u, "col": col}, LAYER_TOL, rng))
    out.append(check("mul", "mul", lambda: T.mul(u, v), {"u": u, "v": v}, LAYER_TOL, rng))
    out.append(check("mul column-broadcast", "mul", lambda: T.mul(col, u), {"u": u, "col": col}, LAYER_TOL, rng))
    out.append(check("scale", "scale", lambda: T.scale(u, -2.5), {"u": u}, LAYER_TOL, rng))
    for op in ("tanh", "sigmoid", "relu", "exp"):
        out.append(check(op, op, lambda op=op: T.elementwise(op, u), {"u": u}, LAYER_TOL, rng))
    pos = _p(rng, 3, 4, name="pos", positive=True)
    out.append(check("log", "log", lambda: T.log(pos), {"pos": pos}, LAYER_TOL, rng))
    out.append(check("rsqrt", "rsqrt", lambda: T.rsqrt(pos), {"pos": pos}, LAYER_TOL, rng))
    out.append(check("sum axis", "sum", lambda: T.sum(u, axis=1, keepdims=True), {"u": u}, LAYER_TOL, rng))
    out.append(check("mean", "sum", lambda: T.mean(u, axis=0), {"u": u}, LAYER_TOL, rng))
    out.append(check("reshape", "reshape", lambda: T.reshape(u, (2, 6)), {"u": u}, LAYER_TOL, rng))
    out.append(check("transpose", "transpose", lambda: T.transpose(x3, (0, 2, 1)), {"x": x3}, LAYER_TOL, rng))
    out.append(check("concat", "concat", lambda: T.concat([u, v], axis=-1), {"u": u, "v": v}, LAYER_TOL, rng))
    out.append(check("slice_last", "slice_last", lambda: T.slice_last(u, 1, 3), {"u": u}, LAYER_TOL, rng))
    idx = rng.integers(0, 4, size=3)
    out.append(check("take_rows", "take_rows", lambda: T.take_rows(u, idx), {"u": u}, LAYER_TOL, rng))
    s6 = _p(rng, 6, name="s")
    out.append(check("softmax len-6", "softmax", lambda: T.softmax(s6), {"s": s6}, LAYER_TOL, rng))
    out.append(check("softmax rows", "softmax", lambda: T.softmax(x3, axis=-1), {"x": x3}, LAYER_TOL, rng))
    out.append(check("log_softmax", "log_softmax", lambda: T.log_softmax(u, axis=-1), {"u": u}, LAYER_TOL, rng))
    ln_x = _p(rng, 3, 8, name="x")
    gain = T.parameter(rng.normal(1.0, 0.3, size=8), "gain")
    lnb = _p(rng, 8, name="bias")
    out.append(check("layer_norm 3x8", "layer_norm", lambda: T.layer_norm(ln_x, gain, lnb, 1e-5),
                     {"x": ln_x, "gain": gain, "bias": lnb}, LAYER_TOL, rng))
    return out


def small_config(obs_dim=6, static_dim=3, num_actions=4) -> DaqnConfig:
    return DaqnConfig(obs_dim=obs_dim, static_dim=static_dim, num_actions=num_actions, lookback=3,
                      num_blocks=2, num_heads=2, embed_dim=8, ff_dim=12, hidden_dim=6)


def random_batch(rng: np.random.Generator, cfg: DaqnConfig, n: int = 3) -> HistoryBatch:
    L = cfg.window
    vl = rng.integers(1, L + 1, size=n)
    vl[0] = L
    obs = rng.normal(size=(n, L, cfg.obs_dim))
    obs[np.arange(L)[None, :] < (L - vl)[:, None]] = 0.0
    return HistoryBatch(obs, vl, rng.normal(size=(n, cfg.static_dim)))


def layer_checks(rng: np.random.Generator) -> list[CheckResult]:
    """Composite layers: one attention block, the dueling head, one LSTM step."""
    out = []
    cfg = DaqnConfig(obs_dim=5, static_dim=2, num_actions=3, lookback=3, num_blocks=1,
                     num_heads=2, embed_dim=6, ff_dim=8, hidden_dim=4)
    net = QNetwork.create("daqn", cfg, rng)
    batch = random_batch(rng, cfg)
    block = {k: v for k, v in net.params.items() if k.startswith(("block0", "start", "pos", "embed"))}
    out.append(check("attention block", "daqn_encode",
                     lambda: daqn_encode(net.params, cfg, batch)[0],
                     block, LAYER_TOL, rng))
    z = _p(rng, 4, 5, name="z")
    head_net = QNetwork.create("dqn-mlp", DaqnConfig(obs_dim=1, static_dim=1, num_actions=3, hidden_dim=5), rng)
    head = {k: v for k, v in head_net.params.items() if k.startswith("head")}
    head["z"] = z
    out.append(check("dueling head", "dueling", lambda: apply_head(head_net.params, z), head, LAYER_TOL, rng))
    lcfg = DaqnConfig(obs_dim=4, static_dim=2, num_actions=3, lookback=0, hidden_dim=5)
    lnet = QNetwork.create("drqn-lstm", lcfg, rng)
    lbatch = random_batch(rng, lcfg)
    out.append(check("lstm cell", "lstm", lambda: lnet.forward(lbatch)[0], lnet.params, LAYER_TOL, rng))
    return out


def network_checks(rng: np.random.Generator) -> list[CheckResult]:
    out = []
    cfg = small_config()
    for arch in ("daqn", "dqn-mlp", "drqn-lstm"):
        net = QNetwork.create(arch, cfg, rng)
        batch = random_batch(rng, cfg)
        out.append(check(f"network {arch}", arch, lambda net=net, batch=batch: net.forward(batch)[0],
                         net.params, NETWORK_TOL, rng))
    lcfg = DaqnConfig(obs_dim=4, static_dim=2, num_actions=3, lookback=4, hidden_dim=5)
    lnet = QNetwork.create("drqn-lstm", lcfg, rng)
    lb = random_batch(rng, lcfg)
    lb.valid_len[:] = 5
    out.append(check("network drqn-lstm 5 steps", "drqn-lstm", lambda: lnet.forward(lb)[0],
                     lnet.params, NETWORK_TOL, rng))
    bc = QNetwork.create("daqn", cfg, rng, head="softmax")
    bb = random_batch(rng, cfg)
    out.append(check("network daqn softmax-head", "daqn", lambda: T.log_softmax(bc.forward(bb)[0]),
                     bc.params, NETWORK_TOL, rng))
    return out


def run_suite(seeds=range(10)) -> list[CheckResult]:
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for r in primitive_checks(rng) + layer_checks(rng) + network_checks(rng):
            r.name = f"seed{seed} {r.name}"
            results.append(r)
    return results
