"""Global learning: CLS-token attention pooling and contrastive alignment.

The teacher CLS token queries the student's dense features through a
parameter-free attention (inner products scaled by sqrt(C)), producing a
predicted CLS token per batch item.  An InfoNCE loss pulls the prediction
toward the true CLS token against a FIFO bank of CLS tokens from earlier
steps.  Gradient reaches the student path only; teacher tokens and bank
entries are constants.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .errors import ConfigError, ShapeError

POOL_VARIANTS = ("attention", "max", "mean")


class TokenBank:
    """FIFO store of the most recent CLS-token batches, gradient-detached."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ConfigError(f"bank capacity must be >= 0, got {capacity}")
        self.capacity = int(capacity)
        self._queue: deque[np.ndarray] = deque()

    def __len__(self) -> int:
        return len(self._queue)

    @property
    def entries(self) -> list[np.ndarray]:
        return list(self._queue)

    def negatives(self) -> np.ndarray | None:
        if not self._queue:
            return None
        return np.concatenate(list(self._queue), axis=0)

    def push(self, cls_batch: np.ndarray) -> None:
        if self.capacity == 0:
            return
        batch = np.array(cls_batch, dtype=np.float64, copy=True)
        if batch.ndim != 2:
            raise ShapeError(f"token bank expects (B, C) batches, got {batch.shape}")
        if self._queue and self._queue[0].shape[1] != batch.shape[1]:
            raise ShapeError(
                f"channel mismatch: bank holds {self._queue[0].shape[1]}, got {batch.shape[1]}"
            )
        if len(self._queue) == self.capacity:
            self._queue.popleft()
        self._queue.append(batch)

    def restore(self, entries) -> None:
        self._queue = deque(np.array(e, dtype=np.float64) for e in entries)
        while len(self._queue) > self.capacity:
            self._queue.popleft()


def bank_update(bank: TokenBank, cls_batch) -> TokenBank:
    """Rotate the bank: drop the oldest batch when full, append the newest."""
    data = cls_batch.data if isinstance(cls_batch, DiffTensor) else cls_batch
    bank.push(np.asarray(data))
    return bank


def attention_pool(cls_tokens: np.ndarray, features: DiffTensor):
    """Parameter-free attention pooling of dense features under the CLS query.

    Weights per item are softmax over L of (cls . features) / sqrt(C); the
    pooled token is the weight-averaged feature.  Returns (pooled (B, C),
    weights (B, L)).
    """
    cls_np = np.asarray(cls_tokens, dtype=np.float64)
    b, c, l = features.shape
    if l == 0:
        raise ShapeError("attention_pool: empty feature axis")
    if cls_np.shape != (b, c):
        raise ShapeError(f"attention_pool: cls shape {cls_np.shape} does not match (B={b}, C={c})")
    pooled, weights = [], []
    for i in range(b):
        r = ad.reshape(ad.gather_rows(features, [i]), (c, l))
        logits = ad.matmul(ad.constant(cls_np[i : i + 1]), r)  # (1, L)
        w = ad.row_softmax(logits, temperature=float(np.sqrt(c)))
        pooled.append(ad.matmul(w, ad.transpose(r)))  # (1, C)
        weights.append(w)
    return ad.concatenate(pooled, axis=0), ad.concatenate(weights, axis=0)


def pool_variant(cls_tokens: np.ndarray, features: DiffTensor, variant: str) -> DiffTensor:
    """Pooled CLS prediction under one of the pooling designs."""
    if variant not in POOL_VARIANTS:
        raise ConfigError(f"unknown pooling variant {variant!r}, expected one of {POOL_VARIANTS}")
    b, c, l = features.shape
    if variant == "attention":
        return attention_pool(cls_tokens, features)[0]
    flat = ad.reshape(features, (b * c, l))
    if variant == "max":
        return ad.reshape(ad.row_max(flat), (b, c))
    return ad.reshape(ad.scale(ad.row_sum(flat), 1.0 / l), (b, c))


def infonce_global(
    cls_tokens: np.ndarray,
    predicted: DiffTensor,
    bank: TokenBank,
    temperature: float,
    include_batch: bool = False,
) -> DiffTensor:
    """Contrastive alignment of predicted CLS tokens with the teacher's.

    Positive pair: (cls_i, predicted_i); negatives are every bank token
    (and, with ``include_batch``, the other items of the current batch).
    All dot products are taken on unit-normalized vectors; only the
    predicted side receives gradient.  With no negatives the loss is 0.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    cls_np = np.asarray(cls_tokens, dtype=np.float64)
    b, c = predicted.shape
    if cls_np.shape != (b, c):
        raise ShapeError(f"cls shape {cls_np.shape} does not match predictions {(b, c)}")
    negs = bank.negatives()
    if negs is not None and negs.shape[1] != c:
        raise ShapeError(f"bank channel {negs.shape[1]} does not match predictions {c}")

    def unit(x):
        return x / np.sqrt((x * x).sum(axis=1, keepdims=True))

    cls_n = unit(cls_np)
    negs_n = unit(negs) if negs is not None else None
    pred_n = ad.normalize_rows(predicted)

    rows = []
    for i in range(b):
        pi = ad.gather_rows(pred_n, [i])  # (1, C)
        pos = ad.matmul(pi, ad.constant(cls_n[i : i + 1].T))  # (1, 1)
        neg_mat = negs_n
        if include_batch and b > 1:
            others = np.delete(cls_n, i, axis=0)
            neg_mat = others if neg_mat is None else np.concatenate([neg_mat, others], axis=0)
        if neg_mat is None:
            row = pos
        else:
            row = ad.concatenate([pos, ad.matmul(pi, ad.constant(neg_mat.T))], axis=1)
        logp = ad.pick_rowwise(ad.row_log_softmax(ad.scale(row, 1.0 / temperature)), [0])
        rows.append(logp)
    return ad.scale(ad.sum_all(ad.concatenate(rows, axis=0)), -1.0 / b)
