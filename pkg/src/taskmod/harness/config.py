"""Experiment configuration and method -> execution-structure resolution."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..model import ModelConfig, Task
from ..numerics import ContractError
from ..planner import (
    CapacitySchedule,
    PruningPlan,
    Selection,
    interleaved_layers,
    last_layers,
    matched_capacity,
    pruning_rate,
)
from ..routing import GumbelSettings
from .data import DataSettings


class Method(str, enum.Enum):
    DENSE = "DENSE"
    LAYERSKIP = "LAYERSKIP"
    EARLYEXIT = "EARLYEXIT"
    BASIC_MOD = "BASIC_MOD"
    INTERLEAVED_ROUTERS = "INTERLEAVED_ROUTERS"
    SINGLE_ROUTER = "SINGLE_ROUTER"
    UNIMOD = "UNIMOD"
    GUMBEL_COMPETITIVE = "GUMBEL_COMPETITIVE"


ROUTED_METHODS = {Method.BASIC_MOD, Method.INTERLEAVED_ROUTERS, Method.SINGLE_ROUTER, Method.UNIMOD}


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataSettings = field(default_factory=DataSettings)
    method: Method = Method.DENSE
    steps: int = 2000
    lr: float = 0.5
    seed: int = 0
    precision: str = "f32"
    eval_every: int = 100
    eval_batches: int = 32
    checkpoint_every: int = 0
    pretrain_steps: int = 0  # dense steps run before the method takes over
    # plan settings (routed methods)
    plan: dict | None = None  # explicit plan JSON; overrides the settings below
    plan_source: str = "last"  # "last" | "arank"
    k_layers: int | None = None  # default n_layers // 2
    capacities: dict = field(default_factory=lambda: {"T2I": 0.8, "MMU": 0.2})
    schedules: dict = field(default_factory=dict)  # task -> CapacitySchedule kwargs
    selection: Selection = Selection.LOWEST_ARANK
    arank_step: int = 0
    arank_samples: int = 50
    c_min: float = 0.1
    # baselines
    exit_layer: int | None = None  # default n_layers // 2
    # competitive Gumbel routing
    gumbel_target: float = 0.5
    gumbel_temperature: float = 1.0
    gumbel_layers: list | None = None  # default: every layer
    aux_weight: float = 1.0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.data, dict):
            self.data = DataSettings(**self.data)
        self.method = Method(self.method)
        self.selection = Selection(self.selection)
        if self.precision not in ("f32", "f64"):
            raise ContractError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.plan_source not in ("last", "arank"):
            raise ContractError(f"plan_source must be 'last' or 'arank', got {self.plan_source!r}")
        if self.data.seq_len > self.model.max_seq:
            raise ContractError(f"sequences of {self.data.seq_len} tokens exceed max_seq={self.model.max_seq}")
        n = self.model.n_layers
        if self.method == Method.EARLYEXIT and self.exit_layer is None:
            self.exit_layer = n // 2
        if self.exit_layer is not None and not 1 <= self.exit_layer <= n:
            raise ContractError(f"exit_layer must lie in [1, {n}], got {self.exit_layer}")
        if self.pretrain_steps < 0:
            raise ContractError(f"pretrain_steps must be >= 0, got {self.pretrain_steps}")
        if self.k_layers is None:
            self.k_layers = n // 2
        for task, sch in self.schedules.items():
            Task(task)
            CapacitySchedule(**sch)

    # ------------------------------------------------------------ persistence
    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["data"] = self.data.to_dict()
        d["method"] = self.method.value
        d["selection"] = self.selection.value
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown experiment fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(changes)
        return ExperimentConfig.from_dict(d)

    # ------------------------------------------------------------- structure
    def schedule_for(self, task: Task) -> CapacitySchedule | None:
        sch = self.schedules.get(Task(task).value)
        return CapacitySchedule(**sch) if sch else None

    def skip_layers(self) -> list[int]:
        return interleaved_layers(self.model.n_layers) if self.method == Method.LAYERSKIP else []

    def gumbel_settings(self) -> GumbelSettings | None:
        if self.method != Method.GUMBEL_COMPETITIVE:
            return None
        layers = self.gumbel_layers if self.gumbel_layers is not None else list(range(self.model.n_layers))
        return GumbelSettings(list(layers), self.gumbel_temperature)

    def reference_plan(self, capacities: dict | None = None) -> PruningPlan:
        """The UNIMOD plan this config describes; ``capacities`` overrides per task."""
        caps = {Task(t): c for t, c in self.capacities.items()}
        caps.update({Task(t): c for t, c in (capacities or {}).items()})
        n = self.model.n_layers
        if self.plan is not None:
            plan = PruningPlan.from_json(self.plan, n)
            for t, c in (capacities or {}).items():
                plan = plan.with_capacity(t, c)
            return plan
        layers = last_layers(n, self.k_layers)
        return PruningPlan.from_routed(n, {t: {l: c for l in layers} for t, c in caps.items()})

    def static_plan(self, capacities: dict | None = None) -> PruningPlan | None:
        """Plan known before training starts; ``None`` for dense methods and ARank plans.

        Ablation variants (BASIC_MOD, INTERLEAVED_ROUTERS, SINGLE_ROUTER) get
        capacities matching the reference plan's pruning rate per task.
        """
        m = self.method
        n = self.model.n_layers
        if m not in ROUTED_METHODS:
            return None
        if m == Method.UNIMOD:
            if self.plan is None and self.plan_source == "arank":
                return None
            return self.reference_plan(capacities)
        ref = self.reference_plan(capacities)
        rates = {t: pruning_rate(ref, t) for t in (Task.T2I, Task.MMU)}
        mean_rate = sum(rates.values()) / 2
        if m == Method.SINGLE_ROUTER:
            layers = {t: ref.routed_layers(t) for t in rates}
            routed = {t: {l: matched_capacity(mean_rate, n, len(layers[t])) for l in layers[t]} for t in rates}
            return PruningPlan.from_routed(n, routed, provenance="manual", shared_router=True)
        inter = interleaved_layers(n)
        if m == Method.BASIC_MOD:
            c = matched_capacity(mean_rate, n, len(inter))
            return PruningPlan.from_routed(n, {t: {l: c for l in inter} for t in rates}, shared_router=True)
        routed = {t: {l: matched_capacity(rates[t], n, len(inter)) for l in inter} for t in rates}
        return PruningPlan.from_routed(n, routed)

    def router_keys(self) -> list[str]:
        m = self.method
        if m in (Method.BASIC_MOD, Method.SINGLE_ROUTER):
            return ["shared"]
        if m in (Method.UNIMOD, Method.INTERLEAVED_ROUTERS):
            return [Task.T2I.value, Task.MMU.value]
        if m == Method.GUMBEL_COMPETITIVE:
            return ["gumbel"]
        return []


def toy_config(**changes) -> ExperimentConfig:
    """The shipped toy benchmark configuration (``presets/toy.json``)."""
    from importlib import resources

    d = json.loads(resources.files("taskmod.presets").joinpath("toy.json").read_text())
    d.update(changes)
    return ExperimentConfig.from_dict(d)


def as_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)

