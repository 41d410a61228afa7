"""Analytical FLOP model for dense and routed transformer stacks.

Convention: one multiply-add is 2 FLOPs. Per layer on ``m`` retained tokens:

* ``8 m d^2``        Q, K, V and output projections
* ``4 m^2 d``        score and value contractions among the retained tokens
* ``4 m d d_ffn``    the two FFN matmuls

Embeddings, norms, softmax, routers and the output head are excluded.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping

from .model import ModelConfig, Task
from .numerics import ContractError
from .planner import LayerMode, PruningPlan, token_budget

CONVENTION = "multiply-add = 2 FLOPs; attention/FFN matmuls only"


def layer_flops(config: ModelConfig, m: int) -> int:
    if m < 0:
        raise ContractError(f"retained token count must be >= 0, got {m}")
    d, f = config.d_model, config.d_ffn
    return 8 * m * d * d + 4 * m * m * d + 4 * m * d * f


@dataclass
class TaskFlops:
    seq_len: int
    retained: list[int]
    per_layer: list[int]
    dense_per_layer: list[int]

    @property
    def total(self) -> int:
        return sum(self.per_layer)

    @property
    def dense_total(self) -> int:
        return sum(self.dense_per_layer)

    @property
    def ratio(self) -> float:
        return self.total / self.dense_total


@dataclass
class FlopReport:
    tasks: dict[Task, TaskFlops]
    convention: str = CONVENTION
    batch_size: int | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(t.total for t in self.tasks.values())

    @property
    def dense_total(self) -> int:
        return sum(t.dense_total for t in self.tasks.values())

    @property
    def ratio(self) -> float:
        return self.total / self.dense_total

    def ratio_for(self, task: Task) -> float:
        return self.tasks[Task(task)].ratio

    def to_json(self) -> dict:
        d = {
            "convention": self.convention,
            "total_forward_flops": self.total,
            "dense_forward_flops": self.dense_total,
            "ratio": self.ratio,
            "tasks": {t.value: {**asdict(tf), "total": tf.total, "dense_total": tf.dense_total, "ratio": tf.ratio}
                      for t, tf in self.tasks.items()},
            "notes": self.notes,
        }
        if self.batch_size is not None:
            d["batch_size"] = self.batch_size
            d["training_compute"] = {t.value: training_compute(tf.total, self.batch_size)
                                     for t, tf in self.tasks.items()}
            d["dense_training_compute"] = {t.value: training_compute(tf.dense_total, self.batch_size)
                                           for t, tf in self.tasks.items()}
        return d

    def table(self) -> str:
        lines = [f"{'task':<5} {'seq':>6} {'forward FLOPs':>16} {'dense FLOPs':>16} {'ratio':>7}"]
        for t, tf in self.tasks.items():
            lines.append(f"{t.value:<5} {tf.seq_len:>6} {tf.total:>16.4e} {tf.dense_total:>16.4e} {tf.ratio:>7.4f}")
        lines.append(f"{'all':<5} {'':>6} {self.total:>16.4e} {self.dense_total:>16.4e} {self.ratio:>7.4f}")
        if self.batch_size is not None:
            for t, tf in self.tasks.items():
                lines.append(f"training compute {t.value} (x{self.batch_size} x3): "
                             f"{training_compute(tf.total, self.batch_size):.4e}")
        return "\n".join(lines)


def model_flops(config: ModelConfig, plan: PruningPlan, seq_lens: Mapping[Task, int],
                batch_size: int | None = None) -> FlopReport:
    """Per-task forward FLOPs per sample under ``plan`` (single-task batches)."""
    if plan.n_layers != config.n_layers:
        raise ContractError(f"plan covers {plan.n_layers} layers, config has {config.n_layers}")
    tasks = {}
    for task, L in seq_lens.items():
        task = Task(task)
        retained = []
        for layer in range(config.n_layers):
            e = plan.entry(layer, task)
            retained.append(L if e.mode == LayerMode.DENSE else token_budget(e.capacity, L))
        tasks[task] = TaskFlops(L, retained, [layer_flops(config, m) for m in retained],
                                [layer_flops(config, L)] * config.n_layers)
    return FlopReport(tasks, batch_size=batch_size)


def skip_flops(config: ModelConfig, seq_len: int, executed_layers) -> int:
    """FLOPs when only ``executed_layers`` run densely (LayerSkip / EarlyExit)."""
    return sum(layer_flops(config, seq_len) for _ in executed_layers)


def training_compute(forward_flops_per_sample: float, batch_size: int) -> float:
    """Forward FLOPs x batch size x 3 (backward counted as twice the forward)."""
    if forward_flops_per_sample < 0 or batch_size <= 0:
        raise ContractError("training_compute needs nonnegative FLOPs and a positive batch size")
    return forward_flops_per_sample * batch_size * 3


def traced_flops(config: ModelConfig, traces) -> int:
    """Forward FLOPs actually spent by a traced batch (sum over sequences and layers)."""
    return sum(layer_flops(config, int(m)) for t in traces for m in t.processed)


def load_preset(name_or_path) -> dict:
    """Load a shipped FLOP preset (``showo``, ``emu3``) or a JSON file."""
    from importlib import resources
    from pathlib import Path

    p = Path(str(name_or_path))
    if p.suffix == ".json" and p.exists():
        return json.loads(p.read_text())
    res = resources.files("taskmod.presets").joinpath(f"{name_or_path}.json")
    if not res.is_file():
        raise FileNotFoundError(f"no preset named {name_or_path!r}")
    return json.loads(res.read_text())


def preset_flops(preset: dict, batch_size: int | None = None) -> dict[str, FlopReport]:
    """Reports for a preset's plan at its final capacities and, when it has a
    schedule, at the schedule's starting capacities too."""
    from .planner import CapacitySchedule

    config = ModelConfig.from_dict(preset["model"])
    plan = PruningPlan.from_json(preset["plan"], config.n_layers)
    seq = {Task(k): int(v) for k, v in preset["seq_len"].items()}
    bs = batch_size or preset.get("batch_size")
    reports = {"final": model_flops(config, plan, seq, bs)}
    schedules = preset.get("schedules") or {}
    if schedules:
        start = plan
        for task, sch in schedules.items():
            start = start.with_capacity(Task(task), CapacitySchedule(**sch).c_start)
        reports["start"] = model_flops(config, start, seq, bs)
    return reports
