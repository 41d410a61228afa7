"""Command-line entry point: ``taskmod <subcommand> [--config cfg.json] ...``.

Failures print one JSON error record on stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..accounting import load_preset, model_flops, preset_flops
from ..model import ToyModel
from ..planner import PruningPlan, Selection, build_plan
from .. import profiler
from .checkpoint import load_checkpoint
from .config import ExperimentConfig, Method, toy_config
from .suite import run_baseline_suite
from .train import TASKS, build_model, eval_batches, arank_batches, train


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else toy_config()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.precision is not None:
        changes["precision"] = args.precision
    return cfg.replace(**changes) if changes else cfg


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model(args, cfg: ExperimentConfig) -> ToyModel:
    if not args.checkpoint:
        return build_model(cfg)
    ck = load_checkpoint(args.checkpoint)
    model = build_model(ck.config)
    for name, arr in ck.params.items():
        model.params[name].data = arr.astype(model.params[name].dtype)
    return model


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------- commands
def cmd_train(args) -> None:
    cfg = _config(args)
    if args.method:
        cfg = cfg.replace(method=args.method)
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps)
    out = _out(args, "runs/train")
    res = train(cfg, out, resume_from=args.resume)
    _emit({"out": str(out), "method": cfg.method.value, "steps": cfg.steps, "eval": res.final_eval,
           "train_flops": res.cum_flops, "flops_ratio": res.flops_ratio})


def cmd_profile_arank(args) -> None:
    cfg = _config(args)
    if args.samples is not None:
        cfg = cfg.replace(arank_samples=args.samples)
    model = _model(args, cfg)
    out = _out(args, "runs/arank")
    profiles = []
    for t in TASKS:
        dump = None if not args.dump else out / "maps" / t.value
        profiles.append(profiler.compute_arank(model, arank_batches(cfg, t), t, args.rel_tol, dump))
    profiler.write_arank_csv(out / "arank.csv", profiles)
    _emit({"csv": str(out / "arank.csv"), "tau": {p.task.value: p.taus() for p in profiles}})


def cmd_profile_attn(args) -> None:
    cfg = _config(args)
    model = _model(args, cfg)
    out = _out(args, "runs/attn")
    profiles = [profiler.attention_weight_stats(model, eval_batches(cfg, t), t) for t in TASKS]
    profiler.write_attn_csv(out / "attn.csv", profiles)
    _emit({"csv": str(out / "attn.csv")})


def cmd_probe_skip(args) -> None:
    cfg = _config(args)
    model = _model(args, cfg)
    out = _out(args, "runs/skip")
    rows = []
    for t in TASKS:
        for e in profiler.skip_probe_all(model, eval_batches(cfg, t)):
            rows.append({"task": t.value, "layer": e.layer, "loss": e.loss, "token_accuracy": e.token_accuracy,
                         "exact_match": e.exact_match, "baseline_loss": e.baseline_loss,
                         "baseline_exact_match": e.baseline_exact_match})
    (out / "skip_probe.json").write_text(json.dumps(rows, indent=2))
    _emit({"json": str(out / "skip_probe.json"), "entries": len(rows)})


def cmd_plan(args) -> None:
    cfg = _config(args)
    if args.arank:
        profiles = profiler.read_arank_csv(args.arank)
        k = args.k_layers if args.k_layers is not None else cfg.k_layers
        plan = build_plan(profiles, k, Selection(args.selection or cfg.selection), args.c_min or cfg.c_min,
                          cfg.model.n_layers)
    else:
        plan = cfg.static_plan()
        if plan is None:
            raise ValueError(f"method {cfg.method.value} has no static plan; pass --arank")
    out = _out(args, "runs/plan")
    plan.save(out / "plan.json")
    _emit(plan.to_json())


def cmd_flops(args) -> None:
    if args.preset:
        reports = preset_flops(load_preset(args.preset), args.batch_size)
    else:
        cfg = _config(args)
        plan = PruningPlan.load(args.plan, cfg.model.n_layers) if args.plan else cfg.static_plan()
        plan = plan or PruningPlan.dense(cfg.model.n_layers)
        reports = {"final": model_flops(cfg.model, plan, {t: cfg.data.seq_len for t in TASKS},
                                        args.batch_size or cfg.data.batch_size)}
    if args.table:
        for name, rep in reports.items():
            print(f"[{name}]")
            print(rep.table())
    else:
        _emit({name: rep.to_json() for name, rep in reports.items()})


def cmd_suite(args) -> None:
    cfg = _config(args)
    methods = args.methods.split(",") if args.methods else [m.value for m in Method]
    out = _out(args, "runs/suite")
    res = run_baseline_suite(cfg, methods, out_dir=out)
    print(res.table())


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taskmod", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="experiment config JSON (default: shipped toy config)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--precision", choices=["f32", "f64"])
        sp.add_argument("--out", help="output directory")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("train", cmd_train, "train one method, write metrics.jsonl and checkpoints")
    sp.add_argument("--method", choices=[m.value for m in Method])
    sp.add_argument("--steps", type=int)
    sp.add_argument("--resume", help="checkpoint directory to resume from")

    for name, fn, h in (("profile-arank", cmd_profile_arank, "per-layer ARank of a dense model"),
                        ("profile-attn", cmd_profile_attn, "attention mass received per modality"),
                        ("probe-skip", cmd_probe_skip, "skip-one-layer importance probe")):
        sp = add(name, fn, h)
        sp.add_argument("--checkpoint", help="checkpoint directory (default: freshly initialised model)")
        if name == "profile-arank":
            sp.add_argument("--samples", type=int)
            sp.add_argument("--rel-tol", type=float, default=profiler.DEFAULT_REL_TOL)
            sp.add_argument("--dump", action="store_true", help="dump the first batch's maps")

    sp = add("plan", cmd_plan, "build a pruning plan (from an ARank CSV or the config)")
    sp.add_argument("--arank", help="CSV written by profile-arank")
    sp.add_argument("--k-layers", type=int)
    sp.add_argument("--selection", choices=[s.value for s in Selection])
    sp.add_argument("--c-min", type=float)

    sp = add("flops", cmd_flops, "analytical FLOP report")
    sp.add_argument("--preset", help="showo, emu3 or a preset JSON path")
    sp.add_argument("--plan", help="plan JSON for --config mode")
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--table", action="store_true", help="print a text table instead of JSON")

    sp = add("suite", cmd_suite, "baseline and ablation comparison at a shared seed")
    sp.add_argument("--methods", help="comma-separated method names (default: all)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except Exception as exc:  # reported as a machine-readable record
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
