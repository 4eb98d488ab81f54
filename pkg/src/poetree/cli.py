"""Command line: simulate -> train -> evaluate -> explain.

Exit code 0 on success (including training that finished with warnings),
2 on usage or data errors; errors go to stderr as JSON lines.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .analysis import evaluate, write_step_csv
from .data import DataError, Normalizer, feature_ranges, make_batch, train_val_split
from .growth import GrowthConfig, grow, write_events
from .io import axis_tree_to_dot, load_policy, read_trajectories, save_policy, write_trajectories
from .simplify import adjust_threshold_with_evolution, prune_axis_aligned, to_axis_aligned
from .synth import SynthConfig, generate_dataset, summary
from .training import TrainingConfig, validation_score, write_history_csv
from .tree import Gating, RecurrenceModel, StructureError, rollout_batch

log = logging.getLogger("poetree")


class UsageError(Exception):
    pass


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"level": "error", "error": kind, "message": message}) + "\n")


def _warn(message: str) -> None:
    sys.stderr.write(json.dumps({"level": "warning", "message": message}) + "\n")


def _dataclass_from(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def load_run_config(path) -> dict:
    """JSON with optional sections ``model``, ``training`` and ``growth``."""
    if path is None:
        raw = {}
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict) or set(raw) - {"model", "training", "growth"}:
        raise UsageError("config must be an object with sections model, training, growth")
    model = {"hist_dim": 8, "recurrence": "matrix_hist", "gating": "oblique", "grow": True, "depth": 2}
    extra = set(raw.get("model", {})) - set(model)
    if extra:
        raise UsageError(f"unknown model keys: {sorted(extra)}")
    model.update(raw.get("model", {}))
    try:
        training = raw.get("training", {})
        if "l1_schedule" in training and training["l1_schedule"] is not None:
            training["l1_schedule"] = tuple(training["l1_schedule"])
        return {
            "model": model,
            "training": _dataclass_from(TrainingConfig, training),
            "growth": _dataclass_from(GrowthConfig, raw.get("growth", {})),
        }
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def cmd_simulate(args) -> int:
    cfg = SynthConfig(n_patients=args.patients, horizon=args.horizon, n_noise_dims=args.noise_dims, seed=args.seed)
    data = generate_dataset(cfg)
    try:
        write_trajectories(data, args.out)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc}") from exc
    print(json.dumps(summary(data), sort_keys=True))
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    training: TrainingConfig = run["training"]
    if args.seed is not None:
        training.seed = args.seed
    model = run["model"]
    data = read_trajectories(args.data)
    rng = np.random.default_rng(training.seed)
    train, val = train_val_split(data, args.val_frac, rng)
    normalizer = Normalizer.fit(train)
    n_actions = int(max(int(tr.actions.max()) for tr in data)) + 1
    n_actions = max(n_actions, 2)
    growth = run["growth"]
    if not model["grow"]:
        # every leaf starts at max depth, so no split is attempted
        growth = GrowthConfig(max_depth=model["depth"], initial_depth=model["depth"],
                              prune_threshold=growth.prune_threshold)
    res = grow(train, val, growth, training, rng, hist_dim=int(model["hist_dim"]),
               recurrence=RecurrenceModel(model["recurrence"]), gating=Gating(model["gating"]),
               n_actions=n_actions, normalizer=normalizer)
    if res.training_failures:
        _warn(f"{res.training_failures} optimization run(s) did not reduce the loss by the restart margin")
    val_auroc, _, _ = validation_score(res.policy, make_batch(val, normalizer))
    metrics = {
        "val_auroc": val_auroc,
        "depth": res.policy.topology.depth,
        "n_leaves": res.policy.topology.n_leaves,
        "n_parameters": res.policy.n_parameters(),
        "training_failures": res.training_failures,
    }
    config_echo = {"model": model, "training": asdict(training), "growth": asdict(run["growth"]),
                   "val_frac": args.val_frac}
    try:
        save_policy(res.policy, args.out_model, {"seed": training.seed, "config": config_echo, "metrics": metrics})
        if args.log:
            write_events(res.events, args.log)
        if args.loss_log:
            write_history_csv(res.history, args.loss_log)
    except OSError as exc:
        raise UsageError(f"cannot write output: {exc}") from exc
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    policy, _ = load_policy(args.model)
    data = read_trajectories(args.data)
    active = tuple(int(a) for a in args.active.split(",")) if args.active else (1,)
    report = evaluate(policy, data, args.anomaly_threshold, active)
    text = report.to_json(include_series=True)
    if args.out_report:
        Path(args.out_report).write_text(text + "\n")
    if args.steps_csv:
        write_step_csv(report, args.steps_csv)
    print(json.dumps(report.summary(), sort_keys=True))
    return 0


def cmd_explain(args) -> int:
    policy, _ = load_policy(args.model)
    data = read_trajectories(args.data)
    by_id = {tr.id: tr for tr in data}
    if args.trajectory_id not in by_id:
        raise UsageError(f"no trajectory with id {args.trajectory_id!r}")
    traj = by_id[args.trajectory_id]
    steps = args.timestep or list(range(1, len(traj) + 1))
    for t in steps:
        if not 1 <= t <= len(traj):
            raise UsageError(f"timestep {t} outside 1..{len(traj)}")
    batch = make_batch([traj], policy.normalizer)
    roll = rollout_batch(policy, batch.z, "soft")
    lo, hi = feature_ranges(data)
    names = args.feature_names.split(",") if args.feature_names else None
    if names is not None and len(names) != policy.obs_dim:
        raise UsageError(f"{len(names)} feature names for {policy.obs_dim} dimensions")
    outputs = []
    for t in steps:
        h = roll.h[0, t - 1]
        if args.evolution_adjust:
            z_hat = roll.z_pred[0, t - 2] if t > 1 else np.zeros(policy.obs_dim)
            tree = adjust_threshold_with_evolution(policy, h, z_hat, t)
        else:
            tree = to_axis_aligned(policy, h, t)
        val_obs = np.array([tr.observations[t - 1] for tr in data if len(tr) >= t])
        tree = prune_axis_aligned(tree, (lo, hi), val_obs, args.p_min)
        dot = axis_tree_to_dot(tree, names, name=f"{traj.id} t={t}")
        out = Path(args.out_dot)
        path = out if (len(steps) == 1 and out.suffix == ".dot") else out.with_name(f"{out.stem}_t{t}.dot")
        try:
            path.write_text(dot)
        except OSError as exc:
            raise UsageError(f"cannot write {path}: {exc}") from exc
        outputs.append({"timestep": t, "dot": str(path), "tree": tree.to_dict()})
    print(json.dumps(outputs if args.json else [o["dot"] for o in outputs]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poetree", description="Recurrent soft decision tree policies")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate SYNTH demonstrations")
    p.add_argument("--patients", type=int, default=1000)
    p.add_argument("--horizon", type=int, default=9)
    p.add_argument("--noise-dims", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="grow and train a tree policy")
    p.add_argument("--data", required=True)
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-model", required=True)
    p.add_argument("--log", help="growth log (JSON lines)")
    p.add_argument("--loss-log", help="per-epoch loss CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="action-matching metrics and behavior flags")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-report")
    p.add_argument("--steps-csv")
    p.add_argument("--anomaly-threshold", type=float, default=0.9)
    p.add_argument("--active", default="1", help="comma-separated active action ids")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="per-timestep axis-aligned trees as DOT")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--trajectory-id", required=True)
    p.add_argument("--timestep", type=int, action="append")
    p.add_argument("--evolution-adjust", action="store_true")
    p.add_argument("--p-min", type=float, default=0.05)
    p.add_argument("--feature-names")
    p.add_argument("--out-dot", required=True)
    p.add_argument("--json", action="store_true", help="print the trees as JSON")
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        _emit_error("usage", str(exc))
    except (DataError, StructureError) as exc:
        _emit_error("data", str(exc))
    except OSError as exc:
        _emit_error("io", str(exc))
    return 2


if __name__ == "__main__":
    sys.exit(main())
