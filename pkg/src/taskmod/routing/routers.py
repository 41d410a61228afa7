"""Per-task linear routers, top-k / threshold selection, and the Gumbel router."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .. import numerics as nx
from ..numerics import ContractError, RandomStream, Tensor
from ..planner import token_budget


class RouteMode(str, enum.Enum):
    TOPK = "TOPK"
    THRESHOLD = "THRESHOLD"


@dataclass
class RouterParams:
    """``score = sigmoid(w . x + b)``; views into the model's parameter dict."""

    w: Tensor
    b: Tensor

    def logits(self, hidden: Tensor) -> Tensor:
        return (hidden @ self.w.reshape(-1, 1)).reshape(hidden.shape[:-1]) + self.b

    def scores(self, hidden: Tensor) -> Tensor:
        return nx.sigmoid(self.logits(hidden))


def router_names(layer: int, key: str) -> tuple[str, str]:
    return f"routers.{layer}.{key}.w", f"routers.{layer}.{key}.b"


def get_router(params: dict[str, Tensor], layer: int, key: str) -> RouterParams:
    wn, bn = router_names(layer, key)
    try:
        return RouterParams(params[wn], params[bn])
    except KeyError:
        raise ContractError(f"no router {key!r} at layer {layer}") from None


def init_routers(params: dict[str, Tensor], d_model: int, layers, keys, stream: RandomStream,
                 dtype: str = "f32", std: float | None = None) -> None:
    """Add router parameters for every (layer, key) pair, in a fixed order."""
    std = 1.0 / math.sqrt(d_model) if std is None else std
    for layer in sorted(layers):
        for key in sorted(keys):
            wn, bn = router_names(layer, key)
            if wn in params:
                continue
            params[wn] = Tensor(stream.normal((d_model,), std), requires_grad=True, dtype=dtype, name=wn)
            params[bn] = Tensor(np.zeros(()), requires_grad=True, dtype=dtype, name=bn)


@dataclass
class RouterDecision:
    """``selected`` is ``[B, k]`` (TOPK) or a list of per-sequence arrays (THRESHOLD)."""

    selected: np.ndarray | list[np.ndarray]
    weights: Tensor
    capacity_used: float
    mode: RouteMode
    n_task_tokens: int

    def counts(self) -> np.ndarray:
        if isinstance(self.selected, np.ndarray):
            return np.full(self.selected.shape[0], self.selected.shape[1])
        return np.array([len(s) for s in self.selected])

    def uniform(self) -> bool:
        return isinstance(self.selected, np.ndarray)


def select_topk(scores: np.ndarray, task_positions: np.ndarray, k: int) -> np.ndarray:
    """Top-``k`` task positions per row of ``scores`` [B, S]; ties go to the lower index.

    Returned indices are ascending within each row.
    """
    sub = scores[:, task_positions]
    # Stable sort on the negated score keeps equal scores in index order.
    order = np.argsort(-sub, axis=1, kind="stable")[:, :k]
    return np.sort(task_positions[order], axis=1)


def route_topk(hidden: Tensor, task_positions, capacity: float, router: RouterParams | None,
               scores: Tensor | None = None) -> RouterDecision:
    """Select ``ceil(capacity * L_t)`` tokens per sequence by router score.

    Pass ``scores`` directly to bypass the router (used by tests and R=1 mode).
    """
    if not 0.0 < capacity <= 1.0:
        raise ContractError(f"capacity must lie in (0, 1], got {capacity}")
    task_positions = np.asarray(task_positions)
    if task_positions.size == 0:
        raise ContractError("route_topk needs at least one task position")
    if scores is None:
        scores = router.scores(hidden)
    k = token_budget(capacity, task_positions.size)
    sel = select_topk(scores.data, task_positions, k)
    return RouterDecision(sel, scores, k / scores.shape[1], RouteMode.TOPK, task_positions.size)


def route_threshold(hidden: Tensor, task_positions, delta: float, router: RouterParams | None,
                    scores: Tensor | None = None) -> RouterDecision:
    """Keep task tokens with ``score >= delta`` (count varies per sequence)."""
    task_positions = np.asarray(task_positions)
    if scores is None:
        scores = router.scores(hidden)
    sub = scores.data[:, task_positions]
    selected = [task_positions[row >= delta] for row in sub]
    used = float(np.mean([len(s) for s in selected])) / scores.shape[1]
    return RouterDecision(selected, scores, used, RouteMode.THRESHOLD, task_positions.size)


# ---------------------------------------------------------------- Gumbel path
@dataclass
class GumbelSample:
    """``y`` soft [B, S, 2], ``z`` hard one-hot [B, S, 2], ``z_st`` forward z / backward y.

    Category 0 is *keep*, category 1 is *drop*.
    """

    y: Tensor
    z: np.ndarray
    z_st: Tensor
    logits: Tensor


def gumbel_router_forward(hidden: Tensor, temperature: float, stream: RandomStream | None,
                          router: RouterParams, noise: np.ndarray | None = None) -> GumbelSample:
    """Straight-through Gumbel-Softmax keep/drop decision per token.

    ``pi_keep = sigmoid(w.x + b)``; ``y = softmax((log pi + g) / temperature)``
    with Gumbel(0, 1) noise ``g``; ``z`` is the argmax one-hot of ``y``.
    ``noise`` freezes ``g`` (for gradient checks); otherwise it is drawn from ``stream``.
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    s = router.logits(hidden)
    log_pi = nx.stack([nx.log_sigmoid(s), nx.log_sigmoid(-s)], axis=-1)
    if noise is None:
        noise = stream.gumbel(log_pi.shape)
    y = nx.row_softmax((log_pi + noise.astype(log_pi.dtype)) * (1.0 / temperature))
    idx = y.data.argmax(axis=-1)
    z = np.zeros(y.shape, dtype=y.dtype)
    np.put_along_axis(z, idx[..., None], 1.0, axis=-1)
    return GumbelSample(y, z, nx.straight_through(z, y), log_pi)


def aux_capacity_loss(keep_rates, target: float) -> Tensor:
    """``target * sum_i (r_i - target)^2`` over per-layer keep rates ``r_i``."""
    if isinstance(keep_rates, Tensor):
        r = keep_rates
    else:
        rates = list(keep_rates)
        r = nx.stack(rates) if rates and isinstance(rates[0], Tensor) else Tensor(np.asarray(rates, dtype=float))
    diff = r - target
    return (diff * diff).sum() * target
