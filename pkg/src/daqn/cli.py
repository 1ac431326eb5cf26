"""Command-line entry point.

Usage::

    daqn generate  --out DIR [--episodes N] [--env default|severity-memory]
    daqn train     --cohort DIR/cohort/cohort.csv --out DIR [--arch daqn]
    daqn evaluate  --cohort ... --out DIR [--splits N] [--no-retrain --checkpoint ARCH=PATH]
    daqn interpret --cohort ... --checkpoint PATH --out DIR
    daqn gradcheck --out DIR [--seeds N]

Every command accepts ``--config FILE.json`` (sections ``train``, ``net``,
``env``, ``ope``, ``behavior``, ``interpret``), ``--seed`` and ``--threads``.
The effective configuration is written to ``<out>/config.json``; passing that
file back through ``--config`` reproduces the run.

Output layout under ``--out``::

    config.json
    cohort/        cohort.csv  schema.json  sidecar.csv
    checkpoints/   <arch>.ckpt
    metrics/       <arch>_train.tsv
    reports/       ope_summary.tsv  ope_splits.tsv  attention_correlation.tsv  traces.tsv  gradcheck.txt
    figures/       attention_<patient>_layer<m>.svg
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

COMMANDS = ("generate", "train", "evaluate", "interpret", "gradcheck")

DEFAULTS = {
    "command": None,
    "seed": 0,
    "threads": 1,
    "out": None,
    "cohort": None,
    "schema": None,
    "arch": ["daqn"],
    "checkpoint": None,
    "checkpoints": {},
    "retrain": True,
    "train": {},
    "net": {},
    "env": {"name": "default", "episodes": 5000, "horizon": 20, "behavior_temperature": 0.5},
    "ope": {"n_splits": 50, "eps_soft": 0.05, "policies": ["daqn", "drqn-lstm", "dqn-mlp", "behavior", "random"],
            "rollout_episodes": 0},
    "behavior": {},
    "interpret": {"markers": ["severity", "delta_severity"], "figures": 3},
    "gradcheck": {"seeds": 10},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--seed", type=int, help="top-level seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--threads", type=int, help="cap on worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="daqn", description="Deep attention Q-network pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic cohort and its ground-truth sidecar")
    g.add_argument("--episodes", type=int)
    g.add_argument("--env", choices=["default", "severity-memory"], help="synthetic environment variant")

    def data_args(sp):
        sp.add_argument("--cohort", type=Path, help="cohort file")
        sp.add_argument("--schema", help="schema tag (sepsis, hypotension, synthetic) or schema JSON path")

    t = sub.add_parser("train", parents=[common], help="train Q-networks")
    data_args(t)
    t.add_argument("--arch", action="append", help="daqn, dqn-mlp or drqn-lstm (repeatable)")
    t.add_argument("--batches", type=int)
    t.add_argument("--lr", type=float)

    e = sub.add_parser("evaluate", parents=[common], help="off-policy evaluation across train/test splits")
    data_args(e)
    e.add_argument("--splits", type=int)
    e.add_argument("--batches", type=int)
    e.add_argument("--policy", action="append", help="policy to evaluate (repeatable)")
    e.add_argument("--no-retrain", action="store_true", help="use --checkpoint files instead of retraining")
    e.add_argument("--checkpoint", action="append", default=[], metavar="ARCH=PATH")

    i = sub.add_parser("interpret", parents=[common], help="attention traces and severity correlations")
    data_args(i)
    i.add_argument("--checkpoint", type=Path, help="DAQN checkpoint")
    i.add_argument("--marker", action="append", help="marker column (prefix delta_ for differences)")

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    gc.add_argument("--seeds", type=int)
    return p


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config is not None:
        try:
            cfg = _merge(cfg, json.loads(args.config.read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    cfg["command"] = args.command
    for key in ("seed", "threads", "out", "cohort", "schema"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = str(v) if isinstance(v, Path) else v
    if getattr(args, "episodes", None) is not None:
        cfg["env"]["episodes"] = args.episodes
    if getattr(args, "env", None) is not None:
        cfg["env"]["name"] = args.env
    if getattr(args, "batches", None) is not None:
        cfg["train"]["batches"] = args.batches
    if getattr(args, "lr", None) is not None:
        cfg["train"]["lr"] = args.lr
    if getattr(args, "arch", None):
        cfg["arch"] = args.arch
    if getattr(args, "splits", None) is not None:
        cfg["ope"]["n_splits"] = args.splits
    if getattr(args, "policy", None):
        cfg["ope"]["policies"] = args.policy
    if getattr(args, "no_retrain", False):
        cfg["retrain"] = False
    if args.command == "evaluate":
        for item in args.checkpoint:
            arch, sep, path = item.partition("=")
            if not sep:
                raise ConfigError(f"--checkpoint expects ARCH=PATH, got {item!r}")
            cfg["checkpoints"][arch] = path
    if args.command == "interpret" and args.checkpoint is not None:
        cfg["checkpoint"] = str(args.checkpoint)
    if getattr(args, "marker", None):
        cfg["interpret"]["markers"] = args.marker
    if getattr(args, "seeds", None) is not None:
        cfg["gradcheck"]["seeds"] = args.seeds
    if isinstance(cfg["arch"], str):
        cfg["arch"] = [cfg["arch"]]
    if cfg["out"] is None:
        raise ConfigError("an output directory is required (--out)")
    if cfg["threads"] < 1:
        raise ConfigError("--threads must be at least 1")
    return cfg


def _limit_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _dirs(out: Path) -> dict[str, Path]:
    d = {k: out / k for k in ("cohort", "checkpoints", "metrics", "reports", "figures")}
    out.mkdir(parents=True, exist_ok=True)
    return d


def _echo(cfg: dict, out: Path) -> None:
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _env_spec(cfg: dict):
    from .cohort.synthetic import ENVIRONMENTS
    env = {k: v for k, v in cfg["env"].items() if k not in ("episodes", "name")}
    name = cfg["env"].get("name", "default")
    if name not in ENVIRONMENTS:
        raise ConfigError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    try:
        return ENVIRONMENTS[name](seed=cfg["seed"], **env)
    except TypeError as exc:
        raise ConfigError(f"bad environment setting: {exc}") from exc


def _load_data(cfg: dict):
    from .cohort import get_schema, load_cohort
    if cfg["cohort"] is None:
        raise ConfigError("a cohort file is required (--cohort)")
    cohort = Path(cfg["cohort"])
    if not cohort.exists():
        raise ConfigError(f"cohort file {cohort} does not exist")
    schema_ref = cfg["schema"]
    if schema_ref is None:
        sibling = cohort.parent / "schema.json"
        schema_ref = str(sibling) if sibling.exists() else "synthetic"
    schema = get_schema(schema_ref)
    header = cohort.open().readline()
    if f"schema={schema.name}" not in header.split():
        raise ConfigError(f"cohort {cohort} was written with a different schema than {schema.name!r}: {header.strip()}")
    return schema, load_cohort(cohort, schema)


def _validate_training(cfg: dict, archs) -> None:
    from .net import ARCHITECTURES, DaqnConfig
    from .train import TrainConfig
    bad = [a for a in archs if a not in ARCHITECTURES]
    if bad:
        raise ConfigError(f"unknown architecture(s) {bad}; choose from {list(ARCHITECTURES)}")
    TrainConfig.from_dict(cfg["train"])
    net = dict(cfg["net"])
    try:
        DaqnConfig(obs_dim=1, static_dim=0, num_actions=2, **net)
    except TypeError as exc:
        raise ConfigError(f"invalid net options {sorted(net)}: {exc}") from exc


def _behavior_config(cfg: dict):
    from .ope import BehaviorConfig
    try:
        return BehaviorConfig(**cfg["behavior"])
    except TypeError as exc:
        raise ConfigError(f"invalid behavior options {sorted(cfg['behavior'])}: {exc}") from exc


def cmd_generate(cfg: dict) -> int:
    from .cohort import generate_synthetic_cohort, save_cohort, save_sidecar
    d = _dirs(Path(cfg["out"]))
    spec = _env_spec(cfg)
    n = int(cfg["env"]["episodes"])
    if n < 1:
        raise ConfigError("episodes must be positive")
    _echo(cfg, Path(cfg["out"]))
    cohort = generate_synthetic_cohort(spec, n, seed=cfg["seed"])
    d["cohort"].mkdir(exist_ok=True)
    save_cohort(d["cohort"] / "cohort.csv", cohort.episodes, cohort.schema)
    cohort.schema.save(d["cohort"] / "schema.json")
    save_sidecar(d["cohort"] / "sidecar.csv", [e.patient_id for e in cohort.episodes], cohort.latent,
                 cohort.behavior_probs)
    print(f"wrote {n} episodes to {d['cohort']}")
    return 0


def cmd_train(cfg: dict) -> int:
    from .train import TrainConfig, train_policy
    archs = cfg["arch"]
    _validate_training(cfg, archs)
    schema, episodes = _load_data(cfg)
    if not episodes:
        raise ConfigError("the cohort holds no episodes")
    out = Path(cfg["out"])
    d = _dirs(out)
    _echo(cfg, out)
    tc = TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"]})
    d["checkpoints"].mkdir(exist_ok=True)
    d["metrics"].mkdir(exist_ok=True)
    for arch in archs:
        _, report = train_policy(episodes, arch, tc, schema.num_actions, cfg["net"],
                                 checkpoint_path=d["checkpoints"] / f"{arch}.ckpt")
        report.write_tsv(d["metrics"] / f"{arch}_train.tsv")
        print(f"{arch}: {report.batches} batches, final loss {report.intervals[-1]['loss_mean']:.5f}, "
              f"checkpoint {report.checkpoint}")
    return 0


def cmd_evaluate(cfg: dict) -> int:
    from .ope import OPESettings, evaluate_policies
    from .train import TrainConfig
    ope = dict(cfg["ope"])
    learned = [p for p in ope["policies"] if p in ("daqn", "dqn-mlp", "drqn-lstm")]
    _validate_training(cfg, learned)
    if not cfg["retrain"]:
        missing = [p for p in learned if p not in cfg["checkpoints"]]
        if missing:
            raise ConfigError(f"retraining is disabled but policy {missing[0]!r} has no checkpoint; "
                              f"add --checkpoint {missing[0]}=PATH or drop --no-retrain")
        absent = [p for p in learned if not Path(cfg["checkpoints"][p]).exists()]
        if absent:
            raise ConfigError(f"checkpoint for {absent[0]!r} not found at {cfg['checkpoints'][absent[0]]}")
    schema, episodes = _load_data(cfg)
    out = Path(cfg["out"])
    d = _dirs(out)
    _echo(cfg, out)
    tc = TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"]})
    settings = OPESettings(n_splits=int(ope["n_splits"]), eps_soft=float(ope["eps_soft"]),
                           policies=tuple(ope["policies"]), net_overrides=dict(cfg["net"]),
                           behavior=_behavior_config(cfg), retrain=cfg["retrain"],
                           rollout_episodes=int(ope.get("rollout_episodes", 0)))
    env = _env_spec(cfg) if settings.rollout_episodes > 0 else None
    report = evaluate_policies(episodes, schema.num_actions, tc, settings, schema.name,
                               cfg["checkpoints"] or None, env, workers=cfg["threads"])
    d["reports"].mkdir(exist_ok=True)
    report.write(d["reports"] / "ope_summary.tsv", d["reports"] / "ope_splits.tsv")
    for r in report.summary_rows():
        print(f"{r['policy']:<10} {r['table']}")
    return 0


def cmd_interpret(cfg: dict) -> int:
    from .interpret import correlate, extract_traces, marker_series, received_attention, render_trace_figure, \
        write_trace_dump
    from .train import TrainedPolicy
    if cfg["checkpoint"] is None:
        raise ConfigError("interpret needs a DAQN checkpoint (--checkpoint PATH)")
    ckpt = Path(cfg["checkpoint"])
    if not ckpt.exists():
        raise ConfigError(f"checkpoint {ckpt} not found; run 'daqn train --arch daqn' first")
    policy = TrainedPolicy.load(ckpt)
    if policy.arch != "daqn":
        raise ConfigError(f"checkpoint {ckpt} holds a {policy.arch} network; attention needs daqn")
    schema, episodes = _load_data(cfg)
    out = Path(cfg["out"])
    d = _dirs(out)
    _echo(cfg, out)
    records = extract_traces(policy, episodes)
    markers = marker_series(episodes, cfg["interpret"]["markers"], schema.feature_names)
    corr = correlate(records, markers)
    d["reports"].mkdir(exist_ok=True)
    corr.write(d["reports"] / "attention_correlation.tsv")
    write_trace_dump(d["reports"] / "traces.tsv", records)
    d["figures"].mkdir(exist_ok=True)
    first = cfg["interpret"]["markers"][0]
    for e in range(min(int(cfg["interpret"]["figures"]), len(episodes))):
        ep = episodes[e]
        for m in range(len(records[0].weights)):
            t, w = received_attention(records, ep.patient_id, m)
            render_trace_figure(t, markers[first][e], w,
                                d["figures"] / f"attention_{ep.patient_id}_layer{m + 1}.svg",
                                marker_label=first, title=f"patient {ep.patient_id}, layer {m + 1}")
    for m, row in enumerate(corr.coefficients):
        cells = "  ".join(f"{k}={'n/a' if v is None else f'{v:+.3f}'}" for k, v in row.items())
        print(f"layer {m + 1}: {cells}")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    from .gradcheck import run_suite
    out = Path(cfg["out"])
    d = _dirs(out)
    _echo(cfg, out)
    results = run_suite(range(int(cfg["gradcheck"]["seeds"])))
    d["reports"].mkdir(exist_ok=True)
    lines = []
    for r in results:
        lines.append(r.line())
        lines.extend(f"    {name} rel_err={err:.3e}" for name, err in sorted(r.errors.items()))
    failed = [r for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} checks passed")
    (d["reports"] / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    for r in failed:
        print(r.line(), file=sys.stderr)
    print(lines[-1])
    return 1 if failed else 0


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
            "interpret": cmd_interpret, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        parser.error(str(exc))  # exits with status 2
    _limit_threads(cfg["threads"])
    from .checkpoint import CheckpointError
    from .cohort.io import IngestionError
    from .tensor import ContractError
    from .train import TrainingDiverged
    try:
        return HANDLERS[cfg["command"]](cfg)
    except ConfigError as exc:
        print(f"daqn {cfg['command']}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, IngestionError, CheckpointError, TrainingDiverged, OSError) as exc:
        print(f"daqn {cfg['command']}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
