"""Training loop: alternating single-task SGD steps under a method's routing.

Every draw comes from a stream named by (seed, purpose, ...), so a step's
batch and noise depend only on its index. That is what makes resume
bit-identical to an uninterrupted run.
"""

from __future__ import annotations

import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import numerics as nx
from ..accounting import layer_flops, traced_flops
from ..model import Task, ToyModel, task_loss
from ..numerics import ContractError, RandomStream
from ..planner import LayerMode, PruningPlan, build_plan, capacity_at, token_budget
from ..profiler import compute_arank, evaluate
from ..routing import GumbelSettings, aux_capacity_loss, init_routers, network_forward
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, Method, ROUTED_METHODS
from .data import gen_synthetic_batch

log = logging.getLogger(__name__)

SCHEMA = "taskmod.metrics"
SCHEMA_VERSION = 1
METRICS_FILE = "metrics.jsonl"

PURPOSE_PARAMS = 0
PURPOSE_DATA = 1
PURPOSE_GUMBEL = 2
PURPOSE_EVAL = 3
PURPOSE_ROUTER = 4
PURPOSE_ARANK = 5

TASK_INDEX = {Task.T2I: 0, Task.MMU: 1}
TASKS = (Task.T2I, Task.MMU)


class TrainingDiverged(RuntimeError):
    def __init__(self, record: dict):
        super().__init__(f"non-finite loss at step {record['step']} ({record['task']})")
        self.record = record


@dataclass
class TrainResult:
    config: ExperimentConfig
    model: ToyModel
    plan: PruningPlan | None
    records: list[dict] = field(default_factory=list)
    cum_flops: float = 0.0
    cum_dense_flops: float = 0.0

    @property
    def final_eval(self) -> dict:
        evals = [r for r in self.records if r["type"] == "eval"]
        return evals[-1]["eval"] if evals else {}

    @property
    def flops_ratio(self) -> float:
        return self.cum_flops / self.cum_dense_flops if self.cum_dense_flops else float("nan")

    def train_records(self) -> list[dict]:
        return [r for r in self.records if r["type"] == "train"]


# ------------------------------------------------------------------ pieces
def build_model(cfg: ExperimentConfig) -> ToyModel:
    model = ToyModel.init(cfg.model, cfg.seed, cfg.precision)
    keys = cfg.router_keys()
    if keys:
        gs = cfg.gumbel_settings()
        layers = gs.layers if gs else range(cfg.model.n_layers)
        init_routers(model.params, cfg.model.d_model, layers, keys, RandomStream(cfg.seed, PURPOSE_ROUTER),
                     cfg.precision)
    return model


def task_for_step(step: int) -> Task:
    return Task.T2I if step % 2 == 0 else Task.MMU


def train_batch(cfg: ExperimentConfig, task: Task, step: int):
    return gen_synthetic_batch(task, RandomStream(cfg.seed, PURPOSE_DATA, step, TASK_INDEX[task]), cfg.data, cfg.model)


def eval_batches(cfg: ExperimentConfig, task: Task) -> list:
    return [gen_synthetic_batch(task, RandomStream(cfg.seed, PURPOSE_EVAL, TASK_INDEX[task], i), cfg.data, cfg.model)
            for i in range(cfg.eval_batches)]


def arank_batches(cfg: ExperimentConfig, task: Task) -> list:
    n = math.ceil(cfg.arank_samples / cfg.data.batch_size)
    return [gen_synthetic_batch(task, RandomStream(cfg.seed, PURPOSE_ARANK, TASK_INDEX[task], i), cfg.data,
                                cfg.model) for i in range(n)]


_PRETRAINED: dict[str, dict] = {}


def pretrained(cfg: ExperimentConfig) -> dict:
    """Dense parameters after ``cfg.pretrain_steps`` steps, plus their eval.

    Cached per dense config, so every method in a suite fine-tunes the same
    starting point without retraining it.
    """
    dense = cfg.replace(method=Method.DENSE.value, steps=cfg.pretrain_steps, pretrain_steps=0, checkpoint_every=0,
                        eval_every=max(cfg.pretrain_steps, 1), plan=None, schedules={})
    key = json.dumps(dense.to_dict(), sort_keys=True)
    if key not in _PRETRAINED:
        if len(_PRETRAINED) >= 8:
            _PRETRAINED.pop(next(iter(_PRETRAINED)))
        res = train(dense)
        _PRETRAINED[key] = {"params": {k: p.data.copy() for k, p in res.model.params.items()},
                            "eval": res.final_eval, "cum_flops": res.cum_flops}
    return _PRETRAINED[key]


def scheduled_capacities(cfg: ExperimentConfig, step: int) -> dict[str, float]:
    return {t: capacity_at(cfg.schedule_for(t), step) for t in cfg.schedules}


def plan_at(cfg: ExperimentConfig, base_plan: PruningPlan | None, step: int) -> PruningPlan | None:
    """Plan in force at ``step``, with scheduled capacities applied.

    UNIMOD scales its own plan; the ablations are rebuilt so they keep
    matching the reference plan's pruning rate at every step.
    """
    if cfg.method not in ROUTED_METHODS:
        return None
    caps = scheduled_capacities(cfg, step)
    if cfg.method == Method.UNIMOD:
        if base_plan is None:
            return None
        plan = base_plan
        for t, c in caps.items():
            plan = plan.with_capacity(Task(t), c)
        return plan
    return cfg.static_plan(caps)


def arank_plan(cfg: ExperimentConfig, model: ToyModel) -> PruningPlan:
    profiles = {t: compute_arank(model, arank_batches(cfg, t), t) for t in TASKS}
    return build_plan(profiles, cfg.k_layers, cfg.selection, cfg.c_min, cfg.model.n_layers)


def forward_kwargs(cfg: ExperimentConfig) -> dict:
    return {
        "skip_layers": cfg.skip_layers(),
        "exit_layer": cfg.exit_layer if cfg.method == Method.EARLYEXIT else None,
    }


def evaluate_all(cfg: ExperimentConfig, model: ToyModel, plan: PruningPlan | None, batches: dict) -> dict:
    gs = cfg.gumbel_settings()
    if gs is not None:
        gs = GumbelSettings(gs.layers, gs.temperature, gs.key, deterministic=True)
    kw = forward_kwargs(cfg)

    def fwd(batch):
        return network_forward(model, batch, plan, gumbel=gs, **kw).logits

    return {t.value: evaluate(model, batches[t], forward_fn=fwd) for t in TASKS}


def sgd_update(params, lr: float) -> None:
    for p in params.values():
        if p.grad is not None:
            p.data -= (lr * p.grad).astype(p.data.dtype, copy=False)


def _budgets(plan: PruningPlan | None, task: Task, n_layers: int, seq_len: int) -> list:
    if plan is None:
        return [None] * n_layers
    out = []
    for l in range(n_layers):
        e = plan.entry(l, task)
        out.append(token_budget(e.capacity, seq_len) if e.mode == LayerMode.ROUTED else None)
    return out


class _MetricsLog:
    def __init__(self, path: Path | None):
        self.path = path
        self.records: list[dict] = []
        self._fh = None
        if path is not None:
            self._fh = path.open("a")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def flush(self) -> None:
        if self._fh is not None:
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def read_metrics(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    records = [json.loads(l) for l in lines if l.strip()]
    if not records or records[0].get("schema") != SCHEMA:
        raise ContractError(f"{path} is not a {SCHEMA} log")
    return records


# -------------------------------------------------------------------- train
def train(cfg: ExperimentConfig, out_dir=None, resume_from=None) -> TrainResult:
    """Run ``cfg`` and return its metrics; with ``out_dir`` also write the
    JSON-lines log and checkpoints (interim under ``checkpoints/``, final
    under ``checkpoint/``)."""
    out = Path(out_dir) if out_dir is not None else None
    model = build_model(cfg)
    start, cum, cum_dense, base_plan = 0, 0.0, 0.0, None
    if cfg.method in ROUTED_METHODS:
        base_plan = cfg.static_plan()
    prior: list[dict] = []

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        mine, theirs = cfg.to_dict(), ck.config.to_dict()
        mine.pop("steps"), theirs.pop("steps")
        if mine != theirs:
            diff = sorted(k for k in mine if mine[k] != theirs.get(k))
            raise ContractError(f"checkpoint config differs from the run config in {diff}")
        if set(ck.params) != set(model.params):
            raise ContractError("checkpoint parameters do not match the model")
        for name, arr in ck.params.items():
            model.params[name].data = arr.astype(model.params[name].dtype)
        start, cum, base_plan = ck.step, ck.cum_flops, ck.plan if ck.plan is not None else base_plan
        cum_dense = ck.extra.get("cum_dense_flops", 0.0)
        snap = Path(resume_from) / METRICS_FILE
        if snap.exists():
            prior = read_metrics(snap)

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        mpath = out / METRICS_FILE
        if resume_from is not None and (Path(resume_from) / METRICS_FILE).exists():
            shutil.copyfile(Path(resume_from) / METRICS_FILE, mpath)
        elif mpath.exists():
            mpath.unlink()
    metrics = _MetricsLog(None if out is None else out / METRICS_FILE)
    metrics.records.extend(prior)
    if resume_from is None:
        metrics.write({"type": "header", "schema": SCHEMA, "version": SCHEMA_VERSION, "config": cfg.to_dict(),
                       "rng": nx.rng.ALGORITHM})
        if cfg.pretrain_steps:
            pre = pretrained(cfg)
            for name, arr in pre["params"].items():
                model.params[name].data = arr.copy()
            metrics.write({"type": "pretrain", "steps": cfg.pretrain_steps, "eval": pre["eval"],
                           "flops": pre["cum_flops"]})

    n, S, B = cfg.model.n_layers, cfg.data.seq_len, cfg.data.batch_size
    dense_fwd = n * layer_flops(cfg.model, S) * B
    held_out = {t: eval_batches(cfg, t) for t in TASKS}
    gs = cfg.gumbel_settings()
    fkw = forward_kwargs(cfg)
    wants_arank = cfg.method == Method.UNIMOD and base_plan is None

    def checkpoint(directory, step):
        metrics.flush()
        save_checkpoint(directory, cfg, step, model.params, cum, base_plan, extra={"cum_dense_flops": cum_dense})
        if out is not None:
            shutil.copyfile(out / METRICS_FILE, Path(directory) / METRICS_FILE)

    try:
        if resume_from is None:
            metrics.write({"type": "eval", "step": 0,
                           "eval": evaluate_all(cfg, model, plan_at(cfg, base_plan, 0), held_out)})
        for step in range(start, cfg.steps):
            if wants_arank and base_plan is None and step >= cfg.arank_step:
                base_plan = arank_plan(cfg, model)
                metrics.write({"type": "plan", "step": step, "plan": base_plan.to_json()})
            plan = plan_at(cfg, base_plan, step)
            tasks = TASKS if gs is not None else (task_for_step(step),)
            nx.parameters_zero_grad(model.params.values())
            total, losses, keep, processed, budgets = None, {}, {}, {}, {}
            soft_sum, soft_count = {}, {}
            step_flops = 0.0
            for task in tasks:
                gstep = cfg.pretrain_steps + step  # data and noise continue the pretraining streams
                batch = train_batch(cfg, task, gstep)
                res = network_forward(model, batch, plan, gumbel=gs,
                                      stream=RandomStream(cfg.seed, PURPOSE_GUMBEL, gstep, TASK_INDEX[task]), **fkw)
                loss = task_loss(res.logits, batch, cfg.model.family)
                lv = float(loss.data)
                if not math.isfinite(lv):
                    rec = {"type": "diverged", "step": step, "task": task.value, "loss": repr(lv)}
                    metrics.write(rec)
                    raise TrainingDiverged(rec)
                losses[task.value] = lv
                total = loss if total is None else total + loss
                rates, counts = [0.0] * n, [0] * n
                for t in res.traces:
                    rates[t.layer] = t.keep_rate
                    counts[t.layer] = int(t.processed.sum())
                    if t.kind == "gumbel":
                        soft_sum[t.layer] = t.soft_keep_sum if t.layer not in soft_sum else soft_sum[t.layer] + t.soft_keep_sum
                        soft_count[t.layer] = soft_count.get(t.layer, 0) + t.soft_keep_count
                keep[task.value] = rates
                processed[task.value] = counts
                budgets[task.value] = _budgets(plan, task, n, S)
                step_flops += 3.0 * traced_flops(cfg.model, res.traces)
                cum_dense += 3.0 * dense_fwd
            aux = None
            if gs is not None:
                r = nx.stack([soft_sum[l] * (1.0 / soft_count[l]) for l in sorted(soft_sum)])
                aux_t = aux_capacity_loss(r, cfg.gumbel_target)
                aux = float(aux_t.data)
                total = total + aux_t * cfg.aux_weight
            if not math.isfinite(float(total.data)):
                rec = {"type": "diverged", "step": step, "task": "+".join(losses), "loss": repr(float(total.data))}
                metrics.write(rec)
                raise TrainingDiverged(rec)
            total.backward()
            sgd_update(model.params, cfg.lr)
            cum += step_flops
            rec = {"type": "train", "step": step, "task": "+".join(losses), "loss": losses, "keep_rate": keep,
                   "processed": processed, "budget": budgets, "step_flops": step_flops, "cum_flops": cum,
                   "cum_dense_flops": cum_dense}
            if aux is not None:
                rec["aux"] = aux
            if plan is not None:
                rec["capacity"] = {t.value: [plan.entry(l, t).capacity for l in range(n)] for t in TASKS}
            metrics.write(rec)
            done = step + 1
            if done % cfg.eval_every == 0 or done == cfg.steps:
                metrics.write({"type": "eval", "step": done,
                               "eval": evaluate_all(cfg, model, plan_at(cfg, base_plan, done), held_out)})
            if out is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.steps:
                checkpoint(out / "checkpoints" / f"step_{done:06d}", done)
        if out is not None:
            checkpoint(out / "checkpoint", max(start, cfg.steps))
    finally:
        metrics.close()
    return TrainResult(cfg, model, plan_at(cfg, base_plan, cfg.steps), metrics.records, cum, cum_dense)
