"""Toy unified transformer shared by the T2I and MMU tasks.

Parameters live in a flat ``dict[str, Tensor]`` so the optimizer, checkpoint
writer and routers can treat them uniformly. Token ids inside a
:class:`TaskBatch` are local to their modality; :func:`embed` maps them onto
disjoint rows of one embedding table (text, then image, then the image
``[MASK]`` slot, then special tokens).
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor


class Task(str, enum.Enum):
    T2I = "T2I"
    MMU = "MMU"


class Modality(enum.IntEnum):
    TEXT = 0
    IMAGE = 1
    SPECIAL = 2


class MaskMode(str, enum.Enum):
    CAUSAL = "CAUSAL"
    CAUSAL_WITH_FULL_IMAGE_BLOCK = "CAUSAL_WITH_FULL_IMAGE_BLOCK"


class Family(str, enum.Enum):
    """Objective family: Show-o style (MTP for T2I, NTP for MMU) or fully autoregressive."""

    SHOWO = "showo"
    EMU3 = "emu3"


SEP_ID = 0
N_SPECIAL = 1


class VocabularyError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 8
    d_model: int = 128
    n_heads: int = 4
    d_ffn: int = 512
    text_vocab: int = 64
    image_vocab: int = 64
    max_seq: int = 128
    activation: str = "gelu"
    family: Family = Family.SHOWO

    def __post_init__(self):
        self.family = Family(self.family)
        for name in ("n_layers", "d_model", "n_heads", "d_ffn", "text_vocab", "image_vocab", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.activation not in ("gelu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def embed_vocab(self) -> int:
        return self.text_vocab + self.image_vocab + 1 + N_SPECIAL

    @property
    def out_vocab(self) -> int:
        return self.text_vocab + self.image_vocab

    @property
    def mask_id(self) -> int:
        """Local image id of the ``[MASK]`` token."""
        return self.image_vocab

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.family.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TaskBatch:
    task: Task
    tokens: np.ndarray
    modality: np.ndarray
    mask_mode: MaskMode
    loss_mask: np.ndarray
    text_vocab: int
    image_vocab: int
    mtp_targets: np.ndarray | None = None
    image_block: tuple[int, int] | None = None
    _attn_mask: np.ndarray | None = field(default=None, repr=False)

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    @property
    def attn_mask(self) -> np.ndarray:
        """``[S, S]`` boolean, True where query i may attend to key j."""
        if self._attn_mask is None:
            self._attn_mask = build_attn_mask(self.seq_len, self.mask_mode, self.image_block)
        return self._attn_mask

    def task_positions(self) -> np.ndarray:
        # Batches are single-task, so every position belongs to the batch task.
        return np.arange(self.seq_len)

    def validate(self) -> None:
        if self.tokens.shape != self.modality.shape or self.tokens.shape != self.loss_mask.shape:
            raise ContractError("tokens, modality and loss_mask must share one shape")
        if self.mtp_targets is not None:
            masked = self.loss_mask
            if np.any(self.modality[masked] != Modality.IMAGE):
                raise ContractError("MTP loss positions must carry IMAGE modality")
            if np.any(self.mtp_targets[masked] < 0):
                raise ContractError("MTP loss positions need mtp_targets")
        if self.mask_mode == MaskMode.CAUSAL_WITH_FULL_IMAGE_BLOCK and self.image_block is None:
            raise ContractError("CAUSAL_WITH_FULL_IMAGE_BLOCK needs an image_block")


def build_attn_mask(seq_len: int, mode: MaskMode, image_block: tuple[int, int] | None = None) -> np.ndarray:
    mask = np.tril(np.ones((seq_len, seq_len), dtype=bool))
    if MaskMode(mode) == MaskMode.CAUSAL_WITH_FULL_IMAGE_BLOCK:
        start, end = image_block
        mask[start:end, start:end] = True
    return mask


@dataclass
class LayerActivations:
    hidden: Tensor
    attn_probs: Tensor | None = None


# ------------------------------------------------------------------ parameters
def init_params(config: ModelConfig, stream: nx.RandomStream, dtype: str = "f32") -> dict[str, Tensor]:
    d, f = config.d_model, config.d_ffn
    resid_std = 1.0 / math.sqrt(d) / math.sqrt(2 * config.n_layers)

    def p(name, shape, std=None, fill=None):
        if fill is not None:
            arr = np.full(shape, fill)
        else:
            arr = stream.normal(shape, std)
        params[name] = Tensor(arr, requires_grad=True, dtype=dtype, name=name)

    params: dict[str, Tensor] = {}
    p("tok_emb", (config.embed_vocab, d), 1.0)
    p("pos_emb", (config.max_seq, d), 1.0)
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        p(pre + "ln1.g", (d,), fill=1.0)
        p(pre + "ln1.b", (d,), fill=0.0)
        for w in ("wq", "wk", "wv"):
            p(pre + "attn." + w, (d, d), 1.0 / math.sqrt(d))
        p(pre + "attn.wo", (d, d), resid_std)
        p(pre + "ln2.g", (d,), fill=1.0)
        p(pre + "ln2.b", (d,), fill=0.0)
        p(pre + "ffn.w1", (d, f), 1.0 / math.sqrt(d))
        p(pre + "ffn.b1", (f,), fill=0.0)
        p(pre + "ffn.w2", (f, d), 1.0 / math.sqrt(f) / math.sqrt(2 * config.n_layers))
        p(pre + "ffn.b2", (d,), fill=0.0)
    p("ln_f.g", (d,), fill=1.0)
    p("ln_f.b", (d,), fill=0.0)
    p("head.w", (d, config.out_vocab), 1.0 / math.sqrt(d))
    p("head.b", (config.out_vocab,), fill=0.0)
    return params


def layer_params(params: dict[str, Tensor], index: int) -> dict[str, Tensor]:
    pre = f"layers.{index}."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


# --------------------------------------------------------------------- forward
def global_ids(batch: TaskBatch) -> np.ndarray:
    tv, iv = batch.text_vocab, batch.image_vocab
    tok, mod = batch.tokens, batch.modality
    bad = (
        ((mod == Modality.TEXT) & ((tok < 0) | (tok >= tv)))
        | ((mod == Modality.IMAGE) & ((tok < 0) | (tok > iv)))
        | ((mod == Modality.SPECIAL) & ((tok < 0) | (tok >= N_SPECIAL)))
    )
    if np.any(bad):
        b, s = np.argwhere(bad)[0]
        raise VocabularyError(
            f"token id {tok[b, s]} out of range for {Modality(mod[b, s]).name} at position ({b}, {s})"
        )
    offset = np.select([mod == Modality.TEXT, mod == Modality.IMAGE], [0, tv], tv + iv + 1)
    return tok + offset


def embed(batch: TaskBatch, params: dict[str, Tensor]) -> LayerActivations:
    ids = global_ids(batch)
    if batch.seq_len > params["pos_emb"].shape[0]:
        raise ContractError(f"sequence length {batch.seq_len} exceeds max_seq {params['pos_emb'].shape[0]}")
    tok = nx.embedding(params["tok_emb"], ids)
    pos = nx.embedding(params["pos_emb"], np.arange(batch.seq_len))
    return LayerActivations(tok + pos)


def attention_forward(acts: LayerActivations, mask: np.ndarray, lp: dict[str, Tensor], n_heads: int,
                      keep_probs: bool = False) -> LayerActivations:
    """Pre-norm multi-head attention with residual: ``x + MHA(LN(x))``.

    ``mask`` is ``[S, S]`` or ``[B, S, S]`` (True = may attend).
    """
    x = acts.hidden
    B, S, d = x.shape
    dh = d // n_heads
    h = nx.layer_norm(x, lp["ln1.g"], lp["ln1.b"])

    def heads(w):
        return (h @ w).reshape(B, S, n_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = heads(lp["attn.wq"]), heads(lp["attn.wk"]), heads(lp["attn.wv"])
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    m = mask[None, None] if mask.ndim == 2 else mask[:, None]
    probs = nx.row_softmax(scores, m)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, S, d)
    out = x + ctx @ lp["attn.wo"]
    return LayerActivations(out, probs if keep_probs else None)


def ffn_forward(acts: LayerActivations, lp: dict[str, Tensor], activation: str = "gelu") -> LayerActivations:
    """``x + W2 act(W1 LN(x) + b1) + b2`` with tanh-GELU (or identity, for tests)."""
    x = acts.hidden
    h = nx.layer_norm(x, lp["ln2.g"], lp["ln2.b"])
    u = h @ lp["ffn.w1"] + lp["ffn.b1"]
    if activation == "gelu":
        u = nx.gelu(u)
    return LayerActivations(x + (u @ lp["ffn.w2"] + lp["ffn.b2"]), acts.attn_probs)


def block_forward(hidden: Tensor, mask: np.ndarray, lp: dict[str, Tensor], config: ModelConfig,
                  keep_probs: bool = False) -> LayerActivations:
    acts = attention_forward(LayerActivations(hidden), mask, lp, config.n_heads, keep_probs)
    return ffn_forward(acts, lp, config.activation)


def output_logits(hidden: Tensor, params: dict[str, Tensor]) -> Tensor:
    h = nx.layer_norm(hidden, params["ln_f.g"], params["ln_f.b"])
    return h @ params["head.w"] + params["head.b"]


@dataclass
class DenseOutput:
    logits: Tensor
    layer_inputs: list[Tensor]
    attn_probs: list[Tensor | None]


def forward(params: dict[str, Tensor], config: ModelConfig, batch: TaskBatch, *, skip_layers=(),
            exit_layer: int | None = None, keep_probs: bool = False) -> DenseOutput:
    """Dense forward pass. ``skip_layers`` are replaced by the identity;
    with ``exit_layer`` only layers ``[0, exit_layer)`` run."""
    hidden = embed(batch, params).hidden
    n = config.n_layers if exit_layer is None else exit_layer
    skip = set(skip_layers)
    inputs, probs = [], []
    for i in range(n):
        inputs.append(hidden)
        if i in skip:
            probs.append(None)
            continue
        acts = block_forward(hidden, batch.attn_mask, layer_params(params, i), config, keep_probs)
        hidden = acts.hidden
        probs.append(acts.attn_probs)
    return DenseOutput(output_logits(hidden, params), inputs, probs)


# ---------------------------------------------------------------------- losses
def masked_nll(rows: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under logit ``rows`` [n, V]."""
    n, V = rows.shape
    if n == 0:
        raise ContractError("loss needs at least one supervised position")
    if np.any((targets < 0) | (targets >= V)):
        raise VocabularyError(f"targets outside [0, {V})")
    logp = nx.log_softmax(rows)
    return -(logp[np.arange(n), targets].sum()) * (1.0 / n)


def _shifted_rows(logits: Tensor, batch: TaskBatch):
    pos = np.argwhere(batch.loss_mask)
    if pos.size == 0:
        raise ContractError("empty loss mask")
    if np.any(pos[:, 1] == 0):
        raise ContractError("position 0 has no preceding context to predict it from")
    return logits[pos[:, 0], pos[:, 1] - 1], pos


def ntp_loss(logits: Tensor, batch: TaskBatch) -> Tensor:
    """Next-token NLL at loss-masked positions; logits at i-1 predict token i."""
    rows, pos = _shifted_rows(logits, batch)
    return masked_nll(rows, batch.tokens[pos[:, 0], pos[:, 1]])


def ar_loss(logits: Tensor, batch: TaskBatch) -> Tensor:
    """Next-token NLL over the joint text+image output vocabulary."""
    rows, pos = _shifted_rows(logits, batch)
    tok = batch.tokens[pos[:, 0], pos[:, 1]]
    mod = batch.modality[pos[:, 0], pos[:, 1]]
    return masked_nll(rows, np.where(mod == Modality.IMAGE, tok + batch.text_vocab, tok))


def mtp_loss(logits: Tensor, batch: TaskBatch) -> Tensor:
    """NLL of the original image tokens at masked positions (no shift)."""
    if batch.mtp_targets is None:
        raise ContractError("batch has no masked image positions")
    pos = np.argwhere(batch.loss_mask & (batch.mtp_targets >= 0))
    if pos.size == 0:
        raise ContractError("batch has no masked image positions")
    rows = logits[pos[:, 0], pos[:, 1]]
    return masked_nll(rows, batch.mtp_targets[pos[:, 0], pos[:, 1]])


def task_loss(logits: Tensor, batch: TaskBatch, family: Family) -> Tensor:
    """Objective for ``batch.task`` under the model family, on full-vocab logits."""
    tv = batch.text_vocab
    if Family(family) == Family.EMU3:
        return ar_loss(logits, batch)
    if batch.task == Task.MMU:
        return ntp_loss(logits[..., :tv], batch)
    return mtp_loss(logits[..., tv:], batch)


def predictions(logits: Tensor, batch: TaskBatch, family: Family):
    """Argmax predictions and targets at supervised positions, in local ids."""
    tv = batch.text_vocab
    data = logits.data
    if Family(family) == Family.SHOWO and batch.task == Task.T2I:
        pos = np.argwhere(batch.loss_mask)
        pred = data[pos[:, 0], pos[:, 1], tv:].argmax(-1)
        return pos, pred, batch.mtp_targets[pos[:, 0], pos[:, 1]]
    pos = np.argwhere(batch.loss_mask)
    rows = data[pos[:, 0], pos[:, 1] - 1]
    tok = batch.tokens[pos[:, 0], pos[:, 1]]
    if Family(family) == Family.SHOWO:
        return pos, rows[:, :tv].argmax(-1), tok
    mod = batch.modality[pos[:, 0], pos[:, 1]]
    return pos, rows.argmax(-1), np.where(mod == Modality.IMAGE, tok + tv, tok)


def uniform_loss(batch: TaskBatch, family: Family) -> float:
    if Family(family) == Family.EMU3:
        return math.log(batch.text_vocab + batch.image_vocab)
    return math.log(batch.text_vocab if batch.task == Task.MMU else batch.image_vocab)


@dataclass
class ToyModel:
    """A config together with its parameter dict."""

    config: ModelConfig
    params: dict[str, Tensor]

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype: str = "f32") -> "ToyModel":
        return cls(config, init_params(config, nx.RandomStream(seed, 0), dtype))

    def forward(self, batch: TaskBatch, **kw) -> DenseOutput:
        return forward(self.params, self.config, batch, **kw)
