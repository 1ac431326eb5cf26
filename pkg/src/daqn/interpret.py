"""Attention traces and their correlation with severity markers.

A trace record holds, for one decision (patient, timestep ``t``), the attention
weights the start token placed on each valid history position in every block.
Position ``p`` of a window with ``valid_len`` observations comes from episode
timestep ``t - (valid_len - 1) + p``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cohort.episode import Episode
from .tensor import ContractError
from .train import TrainedPolicy


@dataclass
class TraceRecord:
    patient_id: str
    episode: int
    timestep: int
    heads: np.ndarray  # (layers, heads, valid_len)

    @property
    def valid_len(self) -> int:
        return self.heads.shape[2]

    @property
    def weights(self) -> np.ndarray:
        """Head-averaged weights, shape ``(layers, valid_len)``."""
        return self.heads.mean(axis=1)

    @property
    def source_timesteps(self) -> np.ndarray:
        return self.timestep - (self.valid_len - 1) + np.arange(self.valid_len)


def extract_traces(policy: TrainedPolicy | str | Path, episodes: Sequence[Episode], k: int | None = None,
                   chunk: int = 2048) -> list[TraceRecord]:
    """Run every decision of ``episodes`` through a DAQN and keep its attention."""
    if not isinstance(policy, TrainedPolicy):
        policy = TrainedPolicy.load(policy)
    if policy.arch != "daqn":
        raise ContractError(f"architecture {policy.arch!r} has no attention weights to extract")
    if k is not None and k != policy.lookback:
        raise ContractError(f"lookback {k} does not match the network's lookback {policy.lookback}")
    episodes = list(episodes)
    if not episodes:
        return []
    ts = policy.transitions(episodes)
    L = ts.window
    records = []
    for lo in range(0, len(ts), chunk):
        idx = np.arange(lo, min(lo + chunk, len(ts)))
        tr = policy.net.trace(ts.batch(idx))
        stacked = np.stack(tr.layers, axis=1)  # (B, layers, heads, L)
        for row, i in enumerate(idx):
            vl = int(ts.valid_len[i])
            e = int(ts.episode[i])
            records.append(TraceRecord(episodes[e].patient_id, e, int(ts.timestep[i]),
                                       stacked[row, :, :, L - vl:].copy()))
    return records


def write_trace_dump(path, records: Sequence[TraceRecord]) -> Path:
    """Long format: one line per (patient, timestep, layer, head, position)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("patient_id\ttimestep\tlayer\thead\tposition\tsource_timestep\tweight\n")
        for r in records:
            src = r.source_timesteps
            M, H, V = r.heads.shape
            for m in range(M):
                for h in range(H):
                    for p in range(V):
                        fh.write(f"{r.patient_id}\t{r.timestep}\t{m}\t{h}\t{p}\t{src[p]}\t{r.heads[m, h, p]!r}\n")
    return path


def pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    """Two-pass Pearson coefficient; ``None`` when either side has zero variance."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError("pearson needs two 1-d arrays of equal length")
    if x.size < 3:
        raise ContractError(f"need at least 3 samples, got {x.size}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return None
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


@dataclass
class AttentionCorrelation:
    markers: list[str]
    coefficients: list[dict]  # per layer: marker -> coefficient or None
    n_samples: int

    def get(self, layer: int, marker: str) -> float | None:
        return self.coefficients[layer][marker]

    def best(self, marker: str) -> float | None:
        vals = [c[marker] for c in self.coefficients if c[marker] is not None]
        return max(vals) if vals else None

    def write(self, path) -> Path:
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            fh.write("\t".join(["layer"] + self.markers + ["n_samples"]) + "\n")
            for m, row in enumerate(self.coefficients):
                cells = ["" if row[k] is None else repr(row[k]) for k in self.markers]
                fh.write("\t".join([str(m + 1)] + cells + [str(self.n_samples)]) + "\n")
        return path


def marker_series(episodes: Sequence[Episode], names: Sequence[str],
                  feature_names: Sequence[str]) -> dict[str, list[np.ndarray]]:
    """Per-episode marker arrays; ``delta_<name>`` gives first differences (0 at t=0)."""
    out = {}
    for name in names:
        base = name[len("delta_"):] if name.startswith("delta_") else name
        cols = [np.asarray(e.column(base, list(feature_names)), dtype=float) for e in episodes]
        if base != name:
            cols = [np.concatenate([[0.0], np.diff(c)]) for c in cols]
        out[name] = cols
    return out


def pooled_samples(records: Sequence[TraceRecord], markers: Mapping[str, Sequence[np.ndarray]]
                   ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Stack (weight, marker-at-source-timestep) pairs over every record and position."""
    if not records:
        raise ContractError("no trace records")
    weights = np.concatenate([r.weights for r in records], axis=1)  # (layers, N)
    vals = {}
    for name, series in markers.items():
        vals[name] = np.concatenate([series[r.episode][r.source_timesteps] for r in records])
    return weights, vals


def correlate(records: Sequence[TraceRecord], markers: Mapping[str, Sequence[np.ndarray]]
              ) -> AttentionCorrelation:
    weights, vals = pooled_samples(records, markers)
    coeffs = [{name: pearson(weights[m], v) for name, v in vals.items()} for m in range(weights.shape[0])]
    return AttentionCorrelation(list(markers), coeffs, int(weights.shape[1]))


def received_attention(records: Sequence[TraceRecord], patient_id: str, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean weight each timestep of one patient received over all decisions that saw it."""
    recs = [r for r in records if r.patient_id == patient_id]
    if not recs:
        raise ContractError(f"no traces for patient {patient_id!r}")
    T = max(r.timestep for r in recs) + 1
    total, count = np.zeros(T), np.zeros(T)
    for r in recs:
        np.add.at(total, r.source_timesteps, r.weights[layer])
        np.add.at(count, r.source_timesteps, 1)
    return np.arange(T), total / np.maximum(count, 1)


# ---------------------------------------------------------------------------
# figure


def _scale(v: np.ndarray, lo: float, hi: float) -> np.ndarray:
    vmin, vmax = float(v.min()), float(v.max())
    if vmax == vmin:
        return np.full(v.shape, (lo + hi) / 2)
    return hi - (v - vmin) / (vmax - vmin) * (hi - lo)


def render_trace_figure(timesteps, marker, attention, path, marker_label: str = "severity",
                        attention_label: str = "attention weight", title: str = "") -> Path:
    """Write an SVG line chart with the marker and the attention series over timesteps."""
    t = np.asarray(timesteps, dtype=float)
    m = np.asarray(marker, dtype=float)
    a = np.asarray(attention, dtype=float)
    if t.size == 0:
        raise ContractError("cannot draw an empty series")
    if not (t.shape == m.shape == a.shape):
        raise ContractError("timesteps, marker and attention must have the same length")
    W, H, pad = 480, 260, 40
    x = np.full(t.shape, W / 2) if t.max() == t.min() else pad + (t - t.min()) / (t.max() - t.min()) * (W - 2 * pad)
    ym = _scale(m, pad, H - pad)
    ya = _scale(a, pad, H - pad)

    def pts(ys):
        return " ".join(f"{xi:.2f},{yi:.2f}" for xi, yi in zip(x, ys))

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
        f'<text x="{W / 2:.0f}" y="{H - 8}" font-size="12" text-anchor="middle">timestep</text>',
        f'<polyline points="{pts(ym)}" fill="none" stroke="#c0392b" stroke-width="2"/>',
        f'<polyline points="{pts(ya)}" fill="none" stroke="#2c6fbb" stroke-width="2"/>',
        '<g class="legend">',
        f'<rect x="{W - 150}" y="8" width="12" height="4" fill="#c0392b"/>',
        f'<text x="{W - 132}" y="14" font-size="11">{_escape(marker_label)}</text>',
        f'<rect x="{W - 150}" y="24" width="12" height="4" fill="#2c6fbb"/>',
        f'<text x="{W - 132}" y="30" font-size="11">{_escape(attention_label)}</text>',
        '</g>',
    ]
    if title:
        lines.append(f'<text x="{pad}" y="20" font-size="13">{_escape(title)}</text>')
    lines.append("</svg>")
    path = Path(path)
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"could not write figure to {path}: {exc}") from exc
    return path


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
