"""Redundancy measurements on a dense model: ARank, attention received per
modality, and the skip-one-layer importance probe."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .model import Family, Modality, Task, TaskBatch, ToyModel, forward, predictions, task_loss
from .numerics import ContractError

DEFAULT_ARANK_SAMPLES = 50
DEFAULT_REL_TOL = 1e-6


@dataclass
class ARankRecord:
    layer: int
    task: Task
    mean_rank: float
    n_samples: int
    seq_len: int
    rel_tol: float


@dataclass
class ARankProfile:
    task: Task
    records: list[ARankRecord]

    def taus(self) -> dict[int, float]:
        return {r.layer: r.mean_rank for r in self.records}


def attention_maps(model: ToyModel, hidden: np.ndarray, layer: int) -> np.ndarray:
    """Unnormalised, unmasked per-head maps ``(x W_Qh)(x W_Kh)^T`` -> [B, H, S, S]."""
    cfg = model.config
    wq = model.params[f"layers.{layer}.attn.wq"].data.astype(np.float64)
    wk = model.params[f"layers.{layer}.attn.wk"].data.astype(np.float64)
    B, S, d = hidden.shape
    x = hidden.astype(np.float64)
    q = (x @ wq).reshape(B, S, cfg.n_heads, cfg.d_head).transpose(0, 2, 1, 3)
    k = (x @ wk).reshape(B, S, cfg.n_heads, cfg.d_head).transpose(0, 2, 1, 3)
    return q @ k.transpose(0, 1, 3, 2)


def layer_inputs(model: ToyModel, batch: TaskBatch) -> list[np.ndarray]:
    with nx.no_grad():
        out = forward(model.params, model.config, batch)
    return [h.data for h in out.layer_inputs]


def compute_arank(model: ToyModel, samples, task: Task, rel_tol: float = DEFAULT_REL_TOL,
                  dump_dir=None) -> ARankProfile:
    """Mean numerical rank of per-head attention maps, per layer.

    Every sequence in ``samples`` counts as one sample. Maps are built from
    the dense forward pass's layer inputs, before softmax and without masks.
    ``dump_dir`` (optional) receives the maps of the first batch in the numerics
    dump format.
    """
    task = Task(task)
    samples = list(samples)
    if not samples:
        raise ContractError("compute_arank needs at least one sample")
    n_layers = model.config.n_layers
    sums = np.zeros(n_layers)
    count = 0
    seq_len = samples[0].seq_len
    for bi, batch in enumerate(samples):
        if batch.task != task:
            raise ContractError(f"sample of task {batch.task.value} in a {task.value} profile")
        if batch.seq_len != seq_len:
            raise ContractError("ARank samples must share one sequence length")
        inputs = layer_inputs(model, batch)
        dumps = {}
        for layer, x in enumerate(inputs):
            maps = attention_maps(model, x, layer)
            B, H, S, _ = maps.shape
            ranks = nx.numerical_ranks(maps.reshape(B * H, S, S), rel_tol).reshape(B, H)
            sums[layer] += ranks.mean(axis=1).sum()
            if dump_dir is not None and bi == 0:
                for b in range(B):
                    for h in range(H):
                        dumps[f"layer{layer}.seq{b}.head{h}"] = maps[b, h]
        if dumps:
            nx.dump_tensors(dump_dir, dumps, {"task": task.value, "rel_tol": rel_tol})
        count += batch.batch_size
    records = [ARankRecord(l, task, float(sums[l] / count), count, seq_len, rel_tol) for l in range(n_layers)]
    return ARankProfile(task, records)


def write_arank_csv(path, profiles) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "task", "tau", "n", "seq_len", "rel_tol"])
        for prof in profiles:
            for r in prof.records:
                w.writerow([r.layer, r.task.value, f"{r.mean_rank:.9g}", r.n_samples, r.seq_len, r.rel_tol])


def read_arank_csv(path) -> dict[Task, ARankProfile]:
    out: dict[Task, list[ARankRecord]] = {}
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            t = Task(row["task"])
            out.setdefault(t, []).append(ARankRecord(int(row["layer"]), t, float(row["tau"]), int(row["n"]),
                                                     int(row["seq_len"]), float(row["rel_tol"])))
    return {t: ARankProfile(t, sorted(rs, key=lambda r: r.layer)) for t, rs in out.items()}


# ------------------------------------------------------------ attention mass
@dataclass
class AttnWeightRecord:
    layer: int
    task: Task
    modality: Modality
    mean_received: float
    token_count: float  # tokens of this modality per sequence (mean)


@dataclass
class AttnWeightProfile:
    task: Task
    records: list[AttnWeightRecord] = field(default_factory=list)

    def get(self, layer: int, modality: Modality) -> AttnWeightRecord:
        for r in self.records:
            if r.layer == layer and r.modality == modality:
                return r
        raise KeyError((layer, modality))


def received_attention(model: ToyModel, batch: TaskBatch) -> list[np.ndarray]:
    """Per layer: ``[B, S]`` mean post-softmax weight each key receives (mean over heads, queries)."""
    with nx.no_grad():
        out = forward(model.params, model.config, batch, keep_probs=True)
    return [p.data.mean(axis=(1, 2)) for p in out.attn_probs]


def attention_weight_stats(model: ToyModel, samples, task: Task) -> AttnWeightProfile:
    task = Task(task)
    samples = list(samples)
    if not samples:
        raise ContractError("attention_weight_stats needs at least one sample")
    n_layers = model.config.n_layers
    recv_sum = {(l, m): 0.0 for l in range(n_layers) for m in Modality}
    tok_count = {m: 0 for m in Modality}
    n_seq = 0
    for batch in samples:
        per_layer = received_attention(model, batch)
        for m in Modality:
            tok_count[m] += int((batch.modality == m).sum())
        for l, recv in enumerate(per_layer):
            for m in Modality:
                recv_sum[(l, m)] += float(recv[batch.modality == m].sum())
        n_seq += batch.batch_size
    prof = AttnWeightProfile(task)
    for l in range(n_layers):
        for m in Modality:
            if tok_count[m] == 0:
                continue
            prof.records.append(AttnWeightRecord(l, task, m, recv_sum[(l, m)] / tok_count[m], tok_count[m] / n_seq))
    return prof


def write_attn_csv(path, profiles) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "task", "modality", "mean_received"])
        for prof in profiles:
            for r in prof.records:
                w.writerow([r.layer, r.task.value, r.modality.name, f"{r.mean_received:.9g}"])


# ------------------------------------------------------------------ skip probe
@dataclass
class SkipProbeEntry:
    layer: int | None
    loss: float
    token_accuracy: float
    exact_match: float
    baseline_loss: float
    baseline_token_accuracy: float
    baseline_exact_match: float


def evaluate(model: ToyModel, batches, skip_layers=(), family: Family | None = None,
             forward_fn=None) -> dict[str, float]:
    """Mean loss, token accuracy and sequence exact-match over ``batches``.

    ``forward_fn(batch) -> logits`` replaces the dense forward (routed evaluation).
    """
    family = family or model.config.family
    if forward_fn is None:
        def forward_fn(batch):
            return forward(model.params, model.config, batch, skip_layers=skip_layers).logits
    losses, correct, total, seq_ok, n_seq = [], 0, 0, 0, 0
    with nx.no_grad():
        for batch in batches:
            logits = forward_fn(batch)
            losses.append(float(task_loss(logits, batch, family).data))
            pos, pred, tgt = predictions(logits, batch, family)
            hit = pred == tgt
            correct += int(hit.sum())
            total += hit.size
            per_seq = np.ones(batch.batch_size, dtype=bool)
            np.logical_and.at(per_seq, pos[:, 0], hit)
            seq_ok += int(per_seq.sum())
            n_seq += batch.batch_size
    return {"loss": float(np.mean(losses)), "token_accuracy": correct / max(total, 1),
            "exact_match": seq_ok / max(n_seq, 1)}


def skip_layer_probe(model: ToyModel, eval_batches, layer_index: int,
                     baseline: dict[str, float] | None = None) -> SkipProbeEntry:
    """Held-out metrics with layer ``layer_index`` replaced by the identity."""
    if not 0 <= layer_index < model.config.n_layers:
        raise IndexError(f"layer_index {layer_index} outside [0, {model.config.n_layers})")
    eval_batches = list(eval_batches)
    base = baseline or evaluate(model, eval_batches)
    m = evaluate(model, eval_batches, skip_layers=(layer_index,))
    return SkipProbeEntry(layer_index, m["loss"], m["token_accuracy"], m["exact_match"],
                          base["loss"], base["token_accuracy"], base["exact_match"])


def skip_probe_all(model: ToyModel, eval_batches) -> list[SkipProbeEntry]:
    eval_batches = list(eval_batches)
    base = evaluate(model, eval_batches)
    return [skip_layer_probe(model, eval_batches, l, base) for l in range(model.config.n_layers)]
