"""Routed execution of one transformer block."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import numerics as nx
from ..model import LayerActivations, ModelConfig, TaskBatch, Task, block_forward
from ..numerics import ContractError, RandomStream, Tensor
from ..planner import LayerMode, PlanEntry
from .routers import (
    GumbelSample,
    RouteMode,
    RouterParams,
    gumbel_router_forward,
    route_threshold,
    route_topk,
)


@dataclass
class LayerTrace:
    """What one layer did to one batch; feeds keep-rate logs, FLOP counts and score dumps."""

    layer: int
    task: Task
    kind: str  # dense | routed | skip | gumbel
    processed: np.ndarray  # tokens processed per sequence
    n_tokens: int
    scores: np.ndarray | None = None
    selected: list = field(default_factory=list)
    soft_keep_sum: Tensor | None = None
    soft_keep_count: int = 0

    @property
    def keep_rate(self) -> float:
        return float(self.processed.sum()) / (len(self.processed) * self.n_tokens)


def _process_selected(x: Tensor, sel: np.ndarray, weights: Tensor, mask: np.ndarray,
                      lp: dict[str, Tensor], config: ModelConfig) -> Tensor:
    B, S, _ = x.shape
    xs = nx.take_rows(x, sel)
    sub_mask = mask[np.arange(B)[:, None, None], sel[:, :, None], sel[:, None, :]]
    body = block_forward(xs, sub_mask, lp, config).hidden
    r = nx.take_rows(weights.reshape(B, S, 1), sel)
    return nx.scatter_rows(x, sel, xs + (body - xs) * r)


def routed_layer_forward(acts: LayerActivations, batch: TaskBatch, lp: dict[str, Tensor],
                         router: RouterParams | None, entry: PlanEntry, config: ModelConfig, *,
                         layer_index: int, route_mode: RouteMode = RouteMode.TOPK,
                         threshold: float | None = None, bypass: bool = False) -> tuple[LayerActivations, LayerTrace]:
    """One block under ``entry`` for the batch's task.

    Selected tokens become ``x + D(x) * R(x)`` where ``D`` is the block's
    residual update computed over the selected tokens only; every other token
    is copied through unchanged. ``bypass`` fixes ``R = 1`` (test mode).
    """
    if entry.layer != layer_index:
        raise ContractError(f"plan entry for layer {entry.layer} applied at layer {layer_index}")
    if entry.task != batch.task:
        raise ContractError(f"plan entry for {entry.task.value} applied to a {batch.task.value} batch")
    x = acts.hidden
    B, S, _ = x.shape
    if entry.mode == LayerMode.DENSE:
        out = block_forward(x, batch.attn_mask, lp, config).hidden
        return LayerActivations(out), LayerTrace(layer_index, batch.task, "dense", np.full(B, S), S)

    positions = batch.task_positions()
    if bypass:
        weights = Tensor(np.ones((B, S), dtype=x.dtype))
    else:
        if router is None:
            raise ContractError(f"ROUTED layer {layer_index} has no router")
        weights = router.scores(x)
    if route_mode == RouteMode.TOPK:
        decision = route_topk(x, positions, entry.capacity, router, scores=weights)
    else:
        if threshold is None:
            raise ContractError(f"THRESHOLD routing at layer {layer_index} needs a calibrated threshold")
        decision = route_threshold(x, positions, threshold, router, scores=weights)

    mask = batch.attn_mask
    if decision.uniform():
        if decision.selected.shape[1] == 0:
            out = x
        else:
            out = _process_selected(x, decision.selected, weights, np.broadcast_to(mask, (B, S, S)), lp, config)
    else:
        rows = []
        for b, sel in enumerate(decision.selected):
            xb = x[b:b + 1]
            if len(sel) == 0:
                rows.append(x[b])
                continue
            ob = _process_selected(xb, sel[None], weights[b:b + 1], mask[None], lp, config)
            rows.append(ob[0])
        out = nx.stack(rows, axis=0)
    trace = LayerTrace(layer_index, batch.task, "routed", decision.counts(), S, weights.data.copy(),
                       list(decision.selected))
    return LayerActivations(out), trace


def gumbel_layer_forward(acts: LayerActivations, batch: TaskBatch, lp: dict[str, Tensor], router: RouterParams,
                         config: ModelConfig, *, layer_index: int, temperature: float,
                         stream: RandomStream | None = None, noise: np.ndarray | None = None
                         ) -> tuple[LayerActivations, LayerTrace, GumbelSample]:
    """Competitive keep/drop routing: ``x + D(x) * z_keep`` with straight-through ``z``.

    Dropped tokens are hidden as keys from kept tokens (every token still sees
    itself), so kept outputs match what a pruned layer would compute; the
    dropped tokens' ``D`` is still evaluated because the straight-through
    gradient needs it.
    """
    x = acts.hidden
    B, S, _ = x.shape
    g = gumbel_router_forward(x, temperature, stream, router, noise)
    keep = g.z[..., 0] > 0.5
    mask = (batch.attn_mask[None] & keep[:, None, :]) | np.eye(S, dtype=bool)[None]
    body = block_forward(x, mask, lp, config).hidden
    out = x + (body - x) * g.z_st[..., 0:1]
    selected = [np.flatnonzero(k) for k in keep]
    trace = LayerTrace(layer_index, batch.task, "gumbel", keep.sum(axis=1), S,
                       g.y.data[..., 0].copy(), selected, g.y[..., 0].sum(), B * S)
    return LayerActivations(out), trace, g
