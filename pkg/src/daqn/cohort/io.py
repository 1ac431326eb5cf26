"""Cohort and ground-truth sidecar files.

Cohort file (comma-delimited text)::

    # daqn-cohort v1 schema=<name> reward=<tag> actions=<n>
    patient_id,timestep,outcome,static.<s>...,<dynamic>...,clin.<c>...,action,reward
    <one row per timestep, rows of a patient contiguous, timesteps increasing>

Floats are written with ``repr`` so a save/load round trip is bit-exact.

Sidecar file (synthetic cohorts only)::

    # daqn-sidecar v1 actions=<n>
    patient_id,timestep,latent_state,p_0,...,p_<n-1>
"""

from __future__ import annotations

import csv
import math
import warnings
from pathlib import Path

import numpy as np

from ..tensor import ContractError
from .episode import Episode
from .rewards import hypotension_reward, sepsis_reward
from .schema import CohortSchema

COHORT_MAGIC = "# daqn-cohort"
SIDECAR_MAGIC = "# daqn-sidecar"
FORMAT_VERSION = 1


class IngestionError(ValueError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


def columns(schema: CohortSchema) -> list[str]:
    return (["patient_id", "timestep", "outcome"]
            + [f"static.{s}" for s in schema.static]
            + schema.feature_names
            + [f"clin.{c}" for c in schema.clinical]
            + ["action", "reward"])


def clinical_rewards(clinical: dict[str, np.ndarray], tag: str) -> np.ndarray:
    """Per-row rewards from clinical columns.

    Row ``t`` is rewarded with the change observed at ``t + 1`` (the consequence
    of action ``a_t``); the final row has no successor and receives 0.
    """
    if tag == "sepsis":
        sofa, lac = clinical["sofa"], clinical["lactate"]
        T = len(sofa)
        out = np.zeros(T)
        for t in range(T - 1):
            out[t] = sepsis_reward(sofa[t + 1], sofa[t], lac[t + 1], lac[t])
        return out
    if tag == "hypotension":
        m, u, um = clinical["map"], clinical["urine"], clinical["urine_measured"]
        T = len(m)
        out = np.zeros(T)
        for t in range(T - 1):
            out[t] = hypotension_reward(m[t + 1], u[t + 1], bool(um[t + 1]))
        return out
    raise ContractError(f"reward tag {tag!r} has no clinical reward function")


def _fmt(x: float) -> str:
    return repr(float(x))


def save_cohort(path, episodes: list[Episode], schema: CohortSchema) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"{COHORT_MAGIC} v{FORMAT_VERSION} schema={schema.name} reward={schema.reward} "
                 f"actions={schema.num_actions}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns(schema))
        for ep in episodes:
            static = [_fmt(v) for v in ep.static]
            for t in range(len(ep)):
                w.writerow([ep.patient_id, t, int(ep.outcome)] + static
                           + [_fmt(v) for v in ep.features[t]]
                           + [_fmt(ep.clinical[c][t]) for c in schema.clinical]
                           + [int(ep.actions[t]), _fmt(ep.rewards[t])])
    return path


def _parse_float(raw: str, col: str, row: int) -> float:
    try:
        v = float(raw)
    except ValueError:
        raise IngestionError(f"column {col!r}: cannot parse {raw!r} as a number", row) from None
    if math.isnan(v):
        raise IngestionError(f"column {col!r}: missing value", row)
    return v


def load_cohort(path, schema: CohortSchema) -> list[Episode]:
    """Read and validate a cohort file. Raises :class:`IngestionError` with the file row."""
    path = Path(path)
    with path.open(newline="") as fh:
        lines = fh.read().splitlines()
    if not lines:
        warnings.warn(f"cohort file {path} is empty: zero episodes loaded", stacklevel=2)
        return []
    first = lines[0]
    if not first.startswith(COHORT_MAGIC):
        raise IngestionError("missing '# daqn-cohort' version header", 1)
    if f"v{FORMAT_VERSION}" not in first.split():
        raise IngestionError(f"unsupported cohort format in header {first!r}", 1)
    if len(lines) < 2:
        warnings.warn(f"cohort file {path} has no column header: zero episodes loaded", stacklevel=2)
        return []
    reader = csv.reader(lines[1:])
    header = next(reader)
    expected = columns(schema)
    missing = [c for c in expected if c not in header]
    if missing:
        raise IngestionError(f"missing column(s) {missing}", 2)
    pos = {c: header.index(c) for c in expected}
    n_actions = schema.num_actions

    episodes: list[Episode] = []
    seen: set[str] = set()
    cur: dict | None = None

    def close(ep_rows: dict, row: int):
        if len(ep_rows["t"]) < 2:
            raise IngestionError(f"patient {ep_rows['pid']!r} has fewer than 2 timesteps", row)
        clinical = {c: np.array(ep_rows["clin"][c]) for c in schema.clinical}
        ep = Episode(ep_rows["pid"], np.array(ep_rows["static"]), np.array(ep_rows["feat"]),
                     np.array(ep_rows["a"]), np.array(ep_rows["r"]), clinical, ep_rows["outcome"])
        if schema.reward in ("sepsis", "hypotension"):
            expect = clinical_rewards(clinical, schema.reward)
            bad = np.flatnonzero(np.abs(expect - ep.rewards) > 1e-12)
            if bad.size:
                raise IngestionError(
                    f"patient {ep.patient_id!r}: stored reward {ep.rewards[bad[0]]!r} at timestep "
                    f"{ep_rows['t'][bad[0]]} differs from the {schema.reward} reward {expect[bad[0]]!r}",
                    ep_rows["rows"][bad[0]])
        episodes.append(ep)

    row = 2
    for rec in reader:
        row += 1
        if not rec:
            continue
        if len(rec) != len(header):
            raise IngestionError(f"expected {len(header)} fields, found {len(rec)}", row)
        pid = rec[pos["patient_id"]]
        if cur is None or pid != cur["pid"]:
            if cur is not None:
                close(cur, row - 1)
            if pid in seen:
                raise IngestionError(f"rows of patient {pid!r} are not contiguous", row)
            seen.add(pid)
            cur = {"pid": pid, "t": [], "rows": [], "feat": [], "a": [], "r": [],
                   "clin": {c: [] for c in schema.clinical},
                   "static": [_parse_float(rec[pos[f"static.{s}"]], f"static.{s}", row) for s in schema.static],
                   "outcome": int(_parse_float(rec[pos["outcome"]], "outcome", row))}
        t = _parse_float(rec[pos["timestep"]], "timestep", row)
        if cur["t"] and not t > cur["t"][-1]:
            raise IngestionError(f"patient {pid!r}: non-monotone timestep {t:g} after {cur['t'][-1]:g}", row)
        a = _parse_float(rec[pos["action"]], "action", row)
        if a != int(a) or not 0 <= a < n_actions:
            raise IngestionError(f"action {rec[pos['action']]} outside [0, {n_actions - 1}]", row)
        cur["t"].append(t)
        cur["rows"].append(row)
        cur["feat"].append([_parse_float(rec[pos[f]], f, row) for f in schema.feature_names])
        for c in schema.clinical:
            cur["clin"][c].append(_parse_float(rec[pos[f"clin.{c}"]], f"clin.{c}", row))
        cur["a"].append(int(a))
        cur["r"].append(_parse_float(rec[pos["reward"]], "reward", row))
    if cur is not None:
        close(cur, row)
    if not episodes:
        warnings.warn(f"cohort file {path} contains no rows: zero episodes loaded", stacklevel=2)
    return episodes


def save_sidecar(path, patient_ids: list[str], latent: list[np.ndarray], probs: list[np.ndarray]) -> Path:
    path = Path(path)
    n_actions = probs[0].shape[1] if probs else 0
    with path.open("w", newline="") as fh:
        fh.write(f"{SIDECAR_MAGIC} v{FORMAT_VERSION} actions={n_actions}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "timestep", "latent_state"] + [f"p_{a}" for a in range(n_actions)])
        for pid, s, p in zip(patient_ids, latent, probs):
            for t in range(len(s)):
                w.writerow([pid, t, int(s[t])] + [_fmt(v) for v in p[t]])
    return path


def load_sidecar(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """``patient_id -> (latent states (T,), behaviour probabilities (T, A))``."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith(SIDECAR_MAGIC):
        raise IngestionError("missing '# daqn-sidecar' header", 1)
    reader = csv.reader(lines[1:])
    header = next(reader)
    n_actions = len(header) - 3
    acc: dict[str, tuple[list, list]] = {}
    for rec in reader:
        if not rec:
            continue
        s, p = acc.setdefault(rec[0], ([], []))
        s.append(int(rec[2]))
        p.append([float(x) for x in rec[3:3 + n_actions]])
    return {k: (np.array(s, dtype=np.int64), np.array(p)) for k, (s, p) in acc.items()}
