"""Layer Switch Module: ARank profiles -> per-layer, per-task pruning plans.

Also holds the plan data types shared with routing and accounting, and the
linear capacity schedule used during training.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

from .model import Task
from .numerics import ContractError

log = logging.getLogger(__name__)

C_MIN = 0.1


class LayerMode(str, enum.Enum):
    DENSE = "DENSE"
    ROUTED = "ROUTED"


class LayerType(str, enum.Enum):
    DENSE = "DENSE"
    T2I_MOD = "T2I_MOD"
    MMU_MOD = "MMU_MOD"
    SHARED_MOD = "SHARED_MOD"


class Selection(str, enum.Enum):
    LOWEST_ARANK = "LOWEST_ARANK"
    HIGHEST_ARANK = "HIGHEST_ARANK"


@dataclass(frozen=True)
class PlanEntry:
    layer: int
    task: Task
    mode: LayerMode = LayerMode.DENSE
    capacity: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "mode", LayerMode(self.mode))
        if not 0.0 < self.capacity <= 1.0:
            raise ContractError(f"capacity must lie in (0, 1], got {self.capacity} at layer {self.layer}")
        if self.mode == LayerMode.DENSE and self.capacity != 1.0:
            raise ContractError(f"DENSE entry at layer {self.layer} must have capacity 1")


@dataclass
class PruningPlan:
    n_layers: int
    entries: dict[tuple[int, Task], PlanEntry] = field(default_factory=dict)
    provenance: str = "manual"
    shared_router: bool = False

    def __post_init__(self):
        for (layer, task), e in self.entries.items():
            if not 0 <= layer < self.n_layers:
                raise ContractError(f"plan entry for layer {layer} outside [0, {self.n_layers})")
            if (e.layer, e.task) != (layer, task):
                raise ContractError(f"plan entry keyed ({layer}, {task}) describes ({e.layer}, {e.task})")

    @classmethod
    def dense(cls, n_layers: int) -> "PruningPlan":
        return cls(n_layers, provenance="manual")

    @classmethod
    def from_routed(cls, n_layers: int, routed: Mapping[Task, Mapping[int, float]], provenance="manual",
                    shared_router=False) -> "PruningPlan":
        entries = {}
        for task, layers in routed.items():
            task = Task(task)
            for layer, c in layers.items():
                entries[(layer, task)] = PlanEntry(layer, task, LayerMode.ROUTED, c)
        return cls(n_layers, entries, provenance, shared_router)

    def entry(self, layer: int, task: Task) -> PlanEntry:
        if not 0 <= layer < self.n_layers:
            raise ContractError(f"layer {layer} outside plan of {self.n_layers} layers")
        task = Task(task)
        return self.entries.get((layer, task)) or PlanEntry(layer, task)

    def routed_layers(self, task: Task) -> list[int]:
        task = Task(task)
        return sorted(l for (l, t), e in self.entries.items() if t == task and e.mode == LayerMode.ROUTED)

    def layer_type(self, layer: int) -> LayerType:
        t2i = self.entry(layer, Task.T2I).mode == LayerMode.ROUTED
        mmu = self.entry(layer, Task.MMU).mode == LayerMode.ROUTED
        if t2i and mmu:
            return LayerType.SHARED_MOD
        if t2i:
            return LayerType.T2I_MOD
        if mmu:
            return LayerType.MMU_MOD
        return LayerType.DENSE

    def is_dense_equivalent(self) -> bool:
        return all(e.mode == LayerMode.DENSE or e.capacity == 1.0 for e in self.entries.values())

    def with_capacity(self, task: Task, capacity: float) -> "PruningPlan":
        """Copy with every routed entry of ``task`` set to ``capacity``."""
        task = Task(task)
        entries = {
            k: (replace(e, capacity=capacity) if k[1] == task and e.mode == LayerMode.ROUTED else e)
            for k, e in self.entries.items()
        }
        return PruningPlan(self.n_layers, entries, self.provenance, self.shared_router)

    def router_key(self, task: Task) -> str:
        return "shared" if self.shared_router else Task(task).value

    # ------------------------------------------------------------ persistence
    def to_json(self) -> dict:
        rows = [
            {"layer": e.layer, "task": e.task.value, "mode": e.mode.value, "capacity": e.capacity}
            for _, e in sorted(self.entries.items(), key=lambda kv: (kv[0][0], kv[0][1].value))
        ]
        return {"n_layers": self.n_layers, "provenance": self.provenance,
                "shared_router": self.shared_router, "entries": rows}

    @classmethod
    def from_json(cls, obj, n_layers: int | None = None) -> "PruningPlan":
        """Accepts the object form written by :meth:`to_json` or a bare entry list."""
        if isinstance(obj, list):
            obj = {"entries": obj}
        rows = obj["entries"]
        n = obj.get("n_layers", n_layers)
        if n is None:
            n = 1 + max((r["layer"] for r in rows), default=-1)
        entries = {}
        for r in rows:
            e = PlanEntry(int(r["layer"]), Task(r["task"]), LayerMode(r.get("mode", "ROUTED")),
                          float(r.get("capacity", 1.0)))
            entries[(e.layer, e.task)] = e
        return cls(int(n), entries, obj.get("provenance", "manual"), bool(obj.get("shared_router", False)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path, n_layers: int | None = None) -> "PruningPlan":
        return cls.from_json(json.loads(Path(path).read_text()), n_layers)


# ------------------------------------------------------------------- building
def select_layers(taus: Mapping[int, float], k: int, selection: Selection = Selection.LOWEST_ARANK) -> list[int]:
    """Pick ``k`` layers by ARank; ties go to the later layer."""
    if k > len(taus):
        raise ContractError(f"k_layers={k} exceeds the {len(taus)} profiled layers")
    sign = 1.0 if Selection(selection) == Selection.LOWEST_ARANK else -1.0
    ranked = sorted(taus, key=lambda l: (sign * taus[l], -l))
    return sorted(ranked[:k])


def build_plan(profiles: Mapping, k_layers: int, selection: Selection = Selection.LOWEST_ARANK,
               c_min: float = C_MIN, n_layers: int | None = None) -> PruningPlan:
    """Route ``k_layers`` layers per task at capacity ``clamp(tau / seq_len, c_min, 1)``.

    ``profiles`` maps each task to an :class:`~taskmod.profiler.ARankProfile`.
    Layers chosen for both tasks become Shared MoD layers.
    """
    routed: dict[Task, dict[int, float]] = {}
    total_layers = n_layers
    for task, prof in profiles.items():
        task = Task(task)
        taus = {r.layer: r.mean_rank for r in prof.records}
        lens = {r.layer: r.seq_len for r in prof.records}
        total_layers = total_layers or len(taus)
        if set(taus) != set(range(total_layers)):
            raise ContractError(f"{task.value} profile does not cover layers 0..{total_layers - 1}")
        if k_layers > total_layers:
            raise ContractError(f"k_layers={k_layers} exceeds n_layers={total_layers}")
        chosen = select_layers(taus, k_layers, selection)
        routed[task] = {l: min(1.0, max(c_min, taus[l] / lens[l])) for l in chosen}
    return PruningPlan.from_routed(total_layers, routed, provenance="arank-derived")


def interleaved_layers(n_layers: int) -> list[int]:
    """Every second layer, 0-based odd indices (1-based even layers)."""
    return list(range(1, n_layers, 2))


def last_layers(n_layers: int, k: int) -> list[int]:
    return list(range(n_layers - k, n_layers))


def pruning_rate(plan: PruningPlan, task: Task) -> float:
    """Fraction of (layer, token) evaluations skipped for ``task``."""
    return sum(1.0 - plan.entry(l, task).capacity for l in range(plan.n_layers)) / plan.n_layers


def matched_capacity(rate: float, n_layers: int, n_routed: int) -> float:
    """Capacity on ``n_routed`` layers giving aggregate pruning ``rate``."""
    c = 1.0 - rate * n_layers / n_routed
    if not 0 < c <= 1:
        raise ContractError(f"pruning rate {rate:.3f} is unreachable with {n_routed} routed layers")
    return c


# -------------------------------------------------------------------- schedule
@dataclass
class CapacitySchedule:
    c_start: float = 1.0
    c_end: float = 0.2
    total_steps: int = 1000
    shape: str = "LINEAR"

    def __post_init__(self):
        for c in (self.c_start, self.c_end):
            if not 0 < c <= 1:
                raise ContractError(f"schedule capacities must lie in (0, 1], got {c}")
        if self.shape != "LINEAR":
            raise ContractError(f"unsupported schedule shape {self.shape!r}")
        if self.c_start < self.c_end:
            log.warning("capacity schedule increases from %s to %s", self.c_start, self.c_end)


def capacity_at(schedule: CapacitySchedule, step: int) -> float:
    if step >= schedule.total_steps or schedule.total_steps <= 0:
        return schedule.c_end
    frac = step / schedule.total_steps
    return schedule.c_start + (schedule.c_end - schedule.c_start) * frac


def token_budget(capacity: float, n_tokens: int) -> int:
    """``ceil(capacity * n_tokens)``, floored at one token when any exist.

    The product is nudged down by 1e-9 before the ceiling so values like
    ``0.6 * 10`` that land a rounding error above an integer do not gain a token.
    """
    if n_tokens <= 0:
        return 0
    return max(1, min(n_tokens, math.ceil(capacity * n_tokens - 1e-9)))
