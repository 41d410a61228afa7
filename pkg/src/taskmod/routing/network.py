"""Whole-network forward under a pruning plan, plus threshold calibration."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import numerics as nx
from ..model import LayerActivations, Task, TaskBatch, ToyModel, block_forward, embed, layer_params, output_logits
from ..numerics import ContractError, RandomStream, Tensor
from ..planner import LayerMode, PruningPlan
from .layer import LayerTrace, gumbel_layer_forward, routed_layer_forward
from .routers import RouteMode, get_router


@dataclass
class GumbelSettings:
    layers: list[int]
    temperature: float = 1.0
    key: str = "gumbel"
    deterministic: bool = False  # zero noise: keep iff pi_keep >= 0.5


@dataclass
class ThresholdCalibration:
    deltas: dict[tuple[int, Task], float]
    quantiles: dict[tuple[int, Task], float]
    sample_counts: dict[tuple[int, Task], int]

    def delta(self, layer: int, task: Task) -> float:
        try:
            return self.deltas[(layer, Task(task))]
        except KeyError:
            raise ContractError(f"no calibrated threshold for layer {layer}, task {Task(task).value}") from None


@dataclass
class ForwardResult:
    logits: Tensor
    traces: list[LayerTrace]
    gumbel: list = field(default_factory=list)

    def processed_counts(self) -> list[np.ndarray]:
        return [t.processed for t in self.traces]


def network_forward(model: ToyModel, batch: TaskBatch, plan: PruningPlan | None = None, *,
                    route_mode: RouteMode = RouteMode.TOPK, thresholds: ThresholdCalibration | None = None,
                    bypass: bool = False, skip_layers=(), exit_layer: int | None = None,
                    gumbel: GumbelSettings | None = None, stream: RandomStream | None = None) -> ForwardResult:
    config, params = model.config, model.params
    if plan is not None and plan.n_layers != config.n_layers:
        raise ContractError(f"plan covers {plan.n_layers} layers, model has {config.n_layers}")
    hidden = embed(batch, params).hidden
    B, S = batch.tokens.shape
    n = config.n_layers if exit_layer is None else exit_layer
    skip = set(skip_layers)
    gumbel_layers = set(gumbel.layers) if gumbel else set()
    traces, samples = [], []
    for i in range(n):
        lp = layer_params(params, i)
        if i in skip:
            traces.append(LayerTrace(i, batch.task, "skip", np.zeros(B, dtype=int), S))
            continue
        if i in gumbel_layers:
            router = get_router(params, i, gumbel.key)
            noise = np.zeros((B, S, 2)) if gumbel.deterministic else None
            acts, trace, g = gumbel_layer_forward(
                LayerActivations(hidden), batch, lp, router, config, layer_index=i,
                temperature=gumbel.temperature, stream=None if stream is None else stream.child(i), noise=noise)
            samples.append(g)
        elif plan is not None and plan.entry(i, batch.task).mode == LayerMode.ROUTED:
            entry = plan.entry(i, batch.task)
            router = None if bypass else get_router(params, i, plan.router_key(batch.task))
            delta = thresholds.delta(i, batch.task) if route_mode == RouteMode.THRESHOLD else None
            acts, trace = routed_layer_forward(
                LayerActivations(hidden), batch, lp, router, entry, config, layer_index=i,
                route_mode=route_mode, threshold=delta, bypass=bypass)
        else:
            acts = LayerActivations(block_forward(hidden, batch.attn_mask, lp, config).hidden)
            trace = LayerTrace(i, batch.task, "dense", np.full(B, S), S)
        hidden = acts.hidden
        traces.append(trace)
    return ForwardResult(output_logits(hidden, params), traces, samples)


def calibrate_threshold(model: ToyModel, plan: PruningPlan, calibration_batches) -> ThresholdCalibration:
    """Per routed (layer, task): the ``1 - capacity`` quantile of router scores.

    Scores come from a TOPK forward pass over the calibration batches, so
    threshold selection hits the trained capacity in expectation. Capacity 1
    gives ``-inf`` (select everything).
    """
    batches = list(calibration_batches)
    if not batches:
        raise ContractError("calibrate_threshold needs at least one calibration batch")
    pooled: dict[tuple[int, Task], list[np.ndarray]] = {}
    with nx.no_grad():
        for batch in batches:
            res = network_forward(model, batch, plan)
            pos = batch.task_positions()
            for t in res.traces:
                if t.kind == "routed":
                    pooled.setdefault((t.layer, batch.task), []).append(t.scores[:, pos].ravel())
    deltas, quantiles, counts = {}, {}, {}
    for key, chunks in pooled.items():
        scores = np.concatenate(chunks)
        c = plan.entry(*key).capacity
        q = 1.0 - c
        quantiles[key] = q
        counts[key] = scores.size
        deltas[key] = -np.inf if c >= 1.0 else float(np.quantile(scores, q))
    return ThresholdCalibration(deltas, quantiles, counts)
