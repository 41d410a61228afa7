"""Checkpoints: a tensor dump whose manifest also carries the run state."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import numerics as nx
from ..numerics import ContractError, Tensor
from ..planner import PruningPlan
from .config import ExperimentConfig

KIND = "taskmod.checkpoint"


@dataclass
class Checkpoint:
    config: ExperimentConfig
    step: int
    params: dict[str, np.ndarray]
    cum_flops: float
    plan: PruningPlan | None
    extra: dict = field(default_factory=dict)


def save_checkpoint(directory, config: ExperimentConfig, step: int, params: dict[str, Tensor], cum_flops: float,
                    plan: PruningPlan | None, extra: dict | None = None) -> Path:
    """``extra`` holds run counters beyond the step and FLOP total."""
    meta = {
        "kind": KIND,
        "config": config.to_dict(),
        "step": step,
        "cum_flops": cum_flops,
        "plan": None if plan is None else plan.to_json(),
        "extra": extra or {},
    }
    return nx.dump_tensors(directory, params, meta)


def load_checkpoint(directory) -> Checkpoint:
    manifest = nx.load_manifest(directory)
    if manifest.get("kind") != KIND:
        raise ContractError(f"{directory} is not a checkpoint (kind={manifest.get('kind')!r})")
    cfg = ExperimentConfig.from_dict(manifest["config"])
    plan = manifest.get("plan")
    return Checkpoint(cfg, int(manifest["step"]), nx.load_tensors(directory), float(manifest["cum_flops"]),
                      None if plan is None else PruningPlan.from_json(plan, cfg.model.n_layers),
                      manifest.get("extra") or {})
