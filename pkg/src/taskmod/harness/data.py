"""Synthetic two-task data.

Text tokens are uniform. Image token ``j`` is ``P_j(text[j mod N])`` for a
fixed family of permutations ``P_j`` of the image codebook, so either
modality determines the other:

* MMU sequences are ``image | SEP | text`` and supervise the text.
* T2I sequences are ``text | SEP | image`` and supervise the image tokens
  (masked ones under MTP, all of them under AR).

With ``noise > 0`` every token is independently resampled uniformly with
that probability after encoding, which gives both tasks an entropy floor.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from ..model import Family, MaskMode, Modality, ModelConfig, SEP_ID, Task, TaskBatch
from ..numerics import RandomStream

PURPOSE_CIPHER = 7


@dataclass
class DataSettings:
    n_image: int = 64
    n_text: int = 32
    batch_size: int = 10
    mask_ratio_min: float = 0.3
    mask_ratio_max: float = 1.0
    cipher_seed: int = 0
    n_ciphers: int = 0  # 0: a distinct permutation for every image position
    noise: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.noise < 1.0:
            raise ValueError(f"noise must lie in [0, 1), got {self.noise}")

    @property
    def seq_len(self) -> int:
        return self.n_image + self.n_text + 1

    def to_dict(self) -> dict:
        return asdict(self)


@lru_cache(maxsize=32)
def _cipher(image_vocab: int, n_image: int, n_ciphers: int, cipher_seed: int) -> np.ndarray:
    stream = RandomStream(cipher_seed, PURPOSE_CIPHER)
    n = n_ciphers or n_image
    perms = np.stack([stream.permutation(image_vocab) for _ in range(n)])
    return perms[np.arange(n_image) % n]


def cipher_table(settings: DataSettings, config: ModelConfig) -> np.ndarray:
    """``[n_image, image_vocab]``: row j maps a text id to its image id at position j."""
    if config.text_vocab > config.image_vocab:
        raise ValueError("the cipher needs text_vocab <= image_vocab")
    return _cipher(config.image_vocab, settings.n_image, settings.n_ciphers, settings.cipher_seed)


def encode_image(text: np.ndarray, settings: DataSettings, config: ModelConfig) -> np.ndarray:
    table = cipher_table(settings, config)
    j = np.arange(settings.n_image)
    return table[j, text[:, j % settings.n_text]]


def _corrupt(tokens: np.ndarray, vocab: int, rate: float, stream: RandomStream) -> np.ndarray:
    hit = stream.uniform(tokens.shape) < rate
    return np.where(hit, stream.integers(0, vocab, tokens.shape), tokens)


def gen_synthetic_batch(task: Task, stream: RandomStream, settings: DataSettings, config: ModelConfig) -> TaskBatch:
    task = Task(task)
    B, M, N = settings.batch_size, settings.n_image, settings.n_text
    text = stream.integers(0, config.text_vocab, (B, N))
    image = encode_image(text, settings, config)
    if settings.noise > 0:
        text = _corrupt(text, config.text_vocab, settings.noise, stream)
        image = _corrupt(image, config.image_vocab, settings.noise, stream)
    sep = np.full((B, 1), SEP_ID)
    mod_text = np.full((B, N), Modality.TEXT)
    mod_image = np.full((B, M), Modality.IMAGE)
    mod_sep = np.full((B, 1), Modality.SPECIAL)
    S = settings.seq_len
    loss_mask = np.zeros((B, S), dtype=bool)

    if task == Task.MMU:
        tokens = np.concatenate([image, sep, text], axis=1)
        modality = np.concatenate([mod_image, mod_sep, mod_text], axis=1).astype(np.int8)
        loss_mask[:, M + 1:] = True
        return TaskBatch(task, tokens, modality, MaskMode.CAUSAL, loss_mask, config.text_vocab,
                         config.image_vocab)

    tokens = np.concatenate([text, sep, image], axis=1)
    modality = np.concatenate([mod_text, mod_sep, mod_image], axis=1).astype(np.int8)
    block = (N + 1, S)
    if config.family == Family.EMU3:
        loss_mask[:, N + 1:] = True
        return TaskBatch(task, tokens, modality, MaskMode.CAUSAL, loss_mask, config.text_vocab,
                         config.image_vocab, image_block=block)

    ratios = stream.uniform((B,), settings.mask_ratio_min, settings.mask_ratio_max)
    n_masked = np.clip(np.rint(ratios * M).astype(int), 1, M)
    mtp_targets = np.full((B, S), -1)
    for b in range(B):
        pos = N + 1 + np.sort(stream.permutation(M)[: n_masked[b]])
        mtp_targets[b, pos] = tokens[b, pos]
        tokens[b, pos] = config.mask_id
        loss_mask[b, pos] = True
    batch = TaskBatch(task, tokens, modality, MaskMode.CAUSAL_WITH_FULL_IMAGE_BLOCK, loss_mask,
                      config.text_vocab, config.image_vocab, mtp_targets=mtp_targets, image_block=block)
    return batch
