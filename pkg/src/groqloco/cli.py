"""Command line: gen-data, train, eval, bench, export-attention, export-residuals.

Configuration is a JSON object with flat dotted keys (``"arch.d_emb": 32``,
``"train.lr": 0.001``); nested objects are flattened the same way.  Flags
override the file, and ``--set key=value`` overrides anything.  The resolved
configuration and seed are embedded in every artifact written.

Machine-readable events go to stdout as JSON lines; a short human summary
goes to stderr.  Exit codes: 0 success, 2 usage or configuration error,
3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import export_attention, export_residuals, pooled_variance
from .data import (
    default_generator_spec, generate_dataset, generate_trajectory, parse_generator_spec,
    read_dataset, write_dataset,
)
from .errors import ContractError, DimensionError, FormatError, NumericalError, ValidationError
from .model import ArchConfig, init_params, rollout
from .runtime import bench, read_checkpoint, save_checkpoint
from .trainer import TrainConfig, TrainerState, train_epoch

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "arch": ArchConfig().to_dict(),
    "train": {**TrainConfig().to_dict(), "batch_size": 32},
    "paths": {"spec": None, "dataset": None, "checkpoint": None, "out": None},
    "options": {
        "count": 40, "steps": 1000, "warmup": None, "length": None, "trajectory": None,
        "morphology": None, "step_tag": None, "expert_baseline": False,
    },
}


class UsageError(Exception):
    pass


def flatten(doc, prefix=""):
    out = {}
    for key, value in doc.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict) and name.count(".") < 1 and name in DEFAULTS:
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _assign(cfg, dotted, value):
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown configuration key {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise UsageError(f"unknown configuration key {dotted!r}")
    node[parts[-1]] = value


def _parse_value(text):
    try:
        return json.loads(text)
    except ValueError:
        return text


def resolve_config(args):
    """Merge defaults, the config file, flags and ``--set`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        for key, value in flatten(doc).items():
            _assign(cfg, key, value)
    flag_map = {
        "seed": "seed", "spec": "paths.spec", "dataset": "paths.dataset",
        "checkpoint": "paths.checkpoint", "out": "paths.out", "count": "options.count",
        "steps": "options.steps", "warmup": "options.warmup", "length": "options.length",
        "trajectory": "options.trajectory", "morphology": "options.morphology",
        "step_tag": "options.step_tag", "epochs": "train.epochs",
        "batch_size": "train.batch_size", "lr": "train.lr",
        "expert_baseline": "options.expert_baseline",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None and value is not False:
            _assign(cfg, key, value)
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _assign(cfg, key, _parse_value(value))
    if not isinstance(cfg["seed"], int):
        raise UsageError("seed must be an integer")
    cfg["train"]["seed"] = cfg["seed"]
    cfg["command"] = args.command
    return cfg


def _emit(event, **fields):
    print(json.dumps({"event": event, **fields}, sort_keys=True), flush=True)


def _say(text):
    print(text, file=sys.stderr, flush=True)


def _require(cfg, key):
    value = cfg["paths"][key]
    if not value:
        raise UsageError(f"--{key} is required for {cfg['command']}")
    return value


def _provenance(cfg):
    return {"run_config": cfg, "seed": cfg["seed"]}


def _arch_for(cfg, d_obs, d_act):
    arch = dict(cfg["arch"])
    arch.update(d_obs=d_obs, d_act=d_act)
    if arch["use_robot_encoding"]:
        arch["d_obs"] = d_obs - arch["d_robot_enc"]
    return ArchConfig.from_dict(arch)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg):
    spec_path = cfg["paths"]["spec"]
    if spec_path:
        try:
            doc = json.loads(Path(spec_path).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read spec {spec_path}: {exc}") from None
    else:
        doc = default_generator_spec()
    count = cfg["options"]["count"]
    if not isinstance(count, int) or count < 1:
        raise ValidationError("count must be a positive integer")
    out = _require(cfg, "out")
    ds = generate_dataset(doc, count, cfg["seed"])
    ds.meta["run_config"] = cfg
    write_dataset(out, ds)
    lengths = [len(t) for t in ds]
    behaviors = {b: sum(t.behavior == b for t in ds) for b in sorted({t.behavior for t in ds})}
    _emit("gen-data", out=out, trajectories=len(ds), min_length=min(lengths),
          max_length=max(lengths), behaviors=behaviors, held_out=ds.held_out, seed=cfg["seed"])
    _say(f"wrote {len(ds)} trajectories ({behaviors}) to {out}")
    return EXIT_OK


def cmd_train(cfg):
    dataset = read_dataset(_require(cfg, "dataset"))
    out = Path(_require(cfg, "out"))
    train_trajs, _ = dataset.split()
    if not train_trajs:
        raise FormatError("dataset has no in-distribution trajectories")
    tc = TrainConfig.from_dict(cfg["train"])
    resume = cfg["paths"]["checkpoint"]
    if resume:
        ckpt = read_checkpoint(resume)
        params = ckpt.params
        state = TrainerState.fresh(params, epoch=int(ckpt.metadata.get("epoch", 0)))
    else:
        arch = _arch_for(cfg, train_trajs[0].d_obs, train_trajs[0].d_act)
        params = init_params(arch, cfg["seed"])
        state = TrainerState.fresh(params)
    if train_trajs[0].d_obs != params.config.d_in or train_trajs[0].d_act != params.config.d_act:
        raise DimensionError("dataset widths do not match the architecture")
    cfg["arch"] = params.config.to_dict()
    metrics_path = out.with_name(out.name + ".metrics.jsonl")
    metrics_path.parent.mkdir(parents=True, exist_ok=True)
    with metrics_path.open("w") as log:
        log.write(json.dumps({"event": "run_config", **_provenance(cfg)}, sort_keys=True) + "\n")
        for _ in range(tc.epochs):
            try:
                state, metrics = train_epoch(train_trajs, state, tc)
            except NumericalError as exc:
                failed = out.with_name(out.name + ".failed")
                bad = getattr(exc, "state", state)
                save_checkpoint(failed, bad.params, {"epoch": bad.epoch, **_provenance(cfg),
                                                     "error": str(exc)})
                _emit("failed", error=str(exc), checkpoint=str(failed))
                _say(f"numerical failure: {exc}; partial checkpoint at {failed}")
                return EXIT_NUMERIC
            line = json.dumps({"event": "epoch", **metrics}, sort_keys=True)
            log.write(line + "\n")
            print(line, flush=True)
    final = state.history[-1] if state.history else float("nan")
    save_checkpoint(out, state.params, {"epoch": state.epoch, "final_loss": final,
                                        **_provenance(cfg)})
    _emit("train", checkpoint=str(out), epoch=state.epoch, final_loss=final, seed=cfg["seed"])
    _say(f"trained to epoch {state.epoch}, final loss {final:.6g}; checkpoint {out}")
    return EXIT_OK if tc.epochs == 0 or math.isfinite(final) else EXIT_NUMERIC


def evaluate(params, dataset, expert_baseline=False):
    """Masked mean absolute action error per trajectory, morphology and split."""
    held = set(dataset.held_out)
    rows, per_m = [], {}
    for i, t in enumerate(dataset):
        if t.d_obs != params.config.d_in or t.d_act != params.config.d_act:
            raise DimensionError(f"trajectory {i} widths ({t.d_obs}, {t.d_act}) do not match "
                                 f"the model ({params.config.d_in}, {params.config.d_act})")
        target = t.actions.astype(np.float64)
        pred = target if expert_baseline else rollout(t.observations.astype(np.float64), params)
        err = np.abs(pred - target)
        rows.append({"index": i, "morphology_id": t.morphology_id, "behavior": t.behavior,
                     "held_out": t.morphology_id in held, "mae": float(err.mean()),
                     "steps": len(t)})
        acc = per_m.setdefault(t.morphology_id, [0.0, 0])
        acc[0] += float(err.sum())
        acc[1] += err.size

    def split(flag):
        sel = [r for r in rows if r["held_out"] == flag]
        if not sel:
            return None
        return float(sum(r["mae"] * r["steps"] for r in sel) / sum(r["steps"] for r in sel))

    return {
        "per_trajectory": rows,
        "per_morphology": {m: {"mae": s / n, "held_out": m in held}
                           for m, (s, n) in sorted(per_m.items())},
        "in_distribution_mae": split(False),
        "zero_shot_mae": split(True),
    }


def _write_report(path, report):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")


def cmd_eval(cfg):
    ckpt = read_checkpoint(_require(cfg, "checkpoint"))
    dataset = read_dataset(_require(cfg, "dataset"))
    report = evaluate(ckpt.params, dataset, bool(cfg["options"]["expert_baseline"]))
    report.update(_provenance(cfg))
    out = _require(cfg, "out")
    _write_report(out, report)
    _emit("eval", report=out, in_distribution_mae=report["in_distribution_mae"],
          zero_shot_mae=report["zero_shot_mae"], seed=cfg["seed"])
    _say(f"in-distribution MAE {report['in_distribution_mae']}, "
         f"zero-shot MAE {report['zero_shot_mae']}")
    return EXIT_OK


def cmd_bench(cfg):
    opts = cfg["options"]
    if cfg["paths"]["checkpoint"]:
        params = read_checkpoint(cfg["paths"]["checkpoint"]).params
    else:
        params = init_params(ArchConfig.from_dict(cfg["arch"]), cfg["seed"])
    if opts["steps"] < params.config.window:
        raise UsageError(f"--steps must be at least the window ({params.config.window})")
    report = bench(steps=opts["steps"], warmup=opts["warmup"], seed=cfg["seed"], params=params)
    result = {**report.to_dict(), **_provenance(cfg)}
    if cfg["paths"]["out"]:
        _write_report(cfg["paths"]["out"], {**result, "times": report.times})
    _emit("bench", **report.to_dict(), seed=cfg["seed"])
    _say(f"p50 {report.p50 * 1e3:.3f} ms, p99 {report.p99 * 1e3:.3f} ms, "
         f"max {report.max * 1e3:.3f} ms, allocations {report.allocations}")
    return EXIT_OK


def _attention_stream(cfg, params):
    opts = cfg["options"]
    window = params.config.window
    if cfg["paths"]["dataset"] and opts["trajectory"] is not None:
        dataset = read_dataset(cfg["paths"]["dataset"])
        t = dataset.trajectories[int(opts["trajectory"])]
        if len(t) < window:
            raise ContractError(f"trajectory {opts['trajectory']} has {len(t)} steps, "
                                f"export needs at least {window}")
        return t.observations.astype(np.float64)
    if cfg["paths"]["spec"]:
        doc = json.loads(Path(cfg["paths"]["spec"]).read_text())
    elif cfg["paths"]["dataset"]:
        doc = read_dataset(cfg["paths"]["dataset"]).meta.get("generator") or default_generator_spec()
    else:
        doc = default_generator_spec()
    specs, _, _, encodings = parse_generator_spec(doc)
    by_id = {s.morphology_id: s for s in specs}
    mid = opts["morphology"] or specs[0].morphology_id
    if mid not in by_id:
        raise ValidationError(f"unknown morphology {mid!r}")
    length = opts["length"] or 3 * window
    traj = generate_trajectory(by_id[mid], int(length), cfg["seed"])
    obs = traj.observations.astype(np.float64)
    if mid in encodings:
        obs = np.concatenate([obs, np.tile(encodings[mid], (len(obs), 1))], axis=1)
    return obs


def cmd_export_attention(cfg):
    params = read_checkpoint(_require(cfg, "checkpoint")).params
    stream = _attention_stream(cfg, params)
    out = _require(cfg, "out")
    trace = export_attention(params, stream, out, provenance=_provenance(cfg))
    chi = {src: [p for _, p in v] for src, v in trace.chi_square.items()}
    _emit("export-attention", out=out, steady_state_steps=trace.steps,
          max_step_sum_error=trace.max_sum_error, chi_square_p=chi, seed=cfg["seed"])
    _say(f"attention over {trace.steps} steady-state steps written to {out}")
    return EXIT_OK


def cmd_export_residuals(cfg):
    ckpt = read_checkpoint(_require(cfg, "checkpoint"))
    dataset = read_dataset(_require(cfg, "dataset"))
    trajs, _ = dataset.split()
    tag = cfg["options"]["step_tag"]
    tag = str(ckpt.metadata.get("epoch", 0)) if tag is None else str(tag)
    out = _require(cfg, "out")
    records = export_residuals(ckpt.params, trajs, tag, out, provenance=_provenance(cfg))
    pooled = pooled_variance(records)
    _emit("export-residuals", out=out, step_tag=tag, pooled_variance=pooled,
          variances=[r.variance for r in records], seed=cfg["seed"])
    _say(f"residuals at step {tag} written to {out}; pooled variance {pooled:.6g}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "export-attention": cmd_export_attention,
    "export-residuals": cmd_export_residuals,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="groqloco", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config with flat dotted keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one dotted configuration key")
        if name in ("gen-data", "export-attention"):
            p.add_argument("--spec", help="generator spec JSON")
        if name != "gen-data":
            p.add_argument("--dataset")
            p.add_argument("--checkpoint")
    p = sub.choices["gen-data"]
    p.add_argument("--count", type=int)
    p = sub.choices["train"]
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    sub.choices["eval"].add_argument("--expert-baseline", dest="expert_baseline",
                                     action="store_true",
                                     help="score the dataset actions themselves")
    p = sub.choices["bench"]
    p.add_argument("--steps", type=int)
    p.add_argument("--warmup", type=int)
    p = sub.choices["export-attention"]
    p.add_argument("--trajectory", type=int)
    p.add_argument("--morphology")
    p.add_argument("--length", type=int)
    sub.choices["export-residuals"].add_argument("--step-tag", dest="step_tag")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, ValidationError) as exc:
        _say(f"error: {exc}")
        return EXIT_USAGE
    except NumericalError as exc:
        _say(f"numerical error: {exc}")
        return EXIT_NUMERIC
    except (FormatError, DimensionError, ContractError, OSError, IndexError) as exc:
        _say(f"data error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
