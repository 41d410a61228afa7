"""Baseline / ablation comparison at a shared seed, shape and step budget."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..accounting import layer_flops, model_flops, skip_flops
from ..model import Task
from ..planner import PruningPlan
from .config import ExperimentConfig, Method, ROUTED_METHODS
from .train import TASKS, TrainResult, plan_at, train


def accounted_ratio(cfg: ExperimentConfig, plan: PruningPlan | None = None) -> float:
    """Forward-FLOP ratio vs dense from the analytical model, both tasks pooled.

    Routed methods use ``plan`` (default: the final-step plan for static plans).
    """
    n, S = cfg.model.n_layers, cfg.data.seq_len
    dense = n * layer_flops(cfg.model, S)
    if cfg.method == Method.LAYERSKIP:
        skipped = set(cfg.skip_layers())
        return skip_flops(cfg.model, S, [l for l in range(n) if l not in skipped]) / dense
    if cfg.method == Method.EARLYEXIT:
        return skip_flops(cfg.model, S, range(cfg.exit_layer)) / dense
    if cfg.method in ROUTED_METHODS:
        plan = plan or plan_at(cfg, cfg.static_plan(), cfg.steps)
        if plan is None:
            return float("nan")
        return model_flops(cfg.model, plan, {t: S for t in TASKS}).ratio
    return 1.0


@dataclass
class SuiteRow:
    method: Method
    eval_loss: dict[str, float]
    measured_flops: float
    ratio_vs_dense: float
    accounted_ratio: float

    def to_json(self) -> dict:
        return {"method": self.method.value, "eval_loss": self.eval_loss, "measured_flops": self.measured_flops,
                "ratio_vs_dense": self.ratio_vs_dense, "accounted_ratio": self.accounted_ratio}


@dataclass
class SuiteResult:
    seed: int
    rows: list[SuiteRow] = field(default_factory=list)
    runs: dict[Method, TrainResult] = field(default_factory=dict, repr=False)

    def row(self, method) -> SuiteRow:
        m = Method(method)
        return next(r for r in self.rows if r.method == m)

    def to_json(self) -> dict:
        return {"seed": self.seed, "rows": [r.to_json() for r in self.rows]}

    def table(self) -> str:
        head = f"{'method':<20} {'T2I loss':>9} {'MMU loss':>9} {'train FLOPs':>12} {'measured':>9} {'accounted':>9}"
        lines = [head]
        for r in self.rows:
            lines.append(f"{r.method.value:<20} {r.eval_loss['T2I']:>9.4f} {r.eval_loss['MMU']:>9.4f} "
                         f"{r.measured_flops:>12.4e} {r.ratio_vs_dense:>9.4f} {r.accounted_ratio:>9.4f}")
        return "\n".join(lines)


def run_baseline_suite(base: ExperimentConfig, methods, seed: int | None = None, out_dir=None) -> SuiteResult:
    """Train every method in ``methods`` from ``base`` with one shared seed.

    The measured ratio divides each run's training FLOPs by the DENSE run's
    (by the dense-equivalent count of the run itself when DENSE is absent;
    the two agree because shapes and step counts are shared).
    """
    seed = base.seed if seed is None else seed
    methods = [Method(m) for m in methods]
    result = SuiteResult(seed)
    for m in methods:
        cfg = base.replace(method=m.value, seed=seed)
        sub = None if out_dir is None else Path(out_dir) / m.value.lower()
        result.runs[m] = train(cfg, sub)
    dense_run = result.runs.get(Method.DENSE)
    for m in methods:
        r = result.runs[m]
        denom = dense_run.cum_flops if dense_run is not None else r.cum_dense_flops
        ev = r.final_eval
        result.rows.append(SuiteRow(m, {t.value: ev[t.value]["loss"] for t in TASKS}, r.cum_flops,
                                    r.cum_flops / denom if denom else float("nan"),
                                    accounted_ratio(r.config, r.plan)))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "suite.json").write_text(json.dumps(result.to_json(), indent=2))
        (Path(out_dir) / "suite.txt").write_text(result.table() + "\n")
    return result
