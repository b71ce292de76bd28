"""Dataset-conditioned top-1 routing over the global expert pool."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ParameterError, StateError, ValidationError
from .nn import Module
from .tensor import Tensor

EMBED_DIM = 16
ROUTER_HIDDEN = 32
DISTILL_CLASSES = 8


class DatasetEmbeddingTable(Module):
    """One trainable embedding per known dataset id."""

    def __init__(self, vectors: np.ndarray):
        self.vectors = T.parameter(np.asarray(vectors, dtype=np.float64))

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    def lookup(self, ids) -> Tensor:
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        if np.any(ids < 0) or np.any(ids >= self.count):
            raise ValidationError(f"unknown dataset id in {ids.tolist()} (table holds {self.count})")
        return self.vectors[ids]


def embedding_projection(channels: int, dim: int = EMBED_DIM, seed: int = 0) -> np.ndarray:
    """Fixed random C -> d map used to seed dataset embeddings."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((channels, dim)) / np.sqrt(channels)


def pooled_descriptor(samples) -> np.ndarray:
    """Mean over samples of each sample's channel means."""
    if len(samples) == 0:
        raise ValidationError("dataset has no samples to pool")
    means = [np.asarray(s.data if isinstance(s, Tensor) else s).mean(axis=(-2, -1)) for s in samples]
    return np.mean(means, axis=0)


def init_dataset_embeddings(features_per_dataset, dim: int = EMBED_DIM, seed: int = 0) -> DatasetEmbeddingTable:
    """Seed z_i from average-pooled backbone features of each dataset."""
    pooled = [pooled_descriptor(samples) for samples in features_per_dataset]
    proj = embedding_projection(pooled[0].shape[0], dim, seed)
    return DatasetEmbeddingTable(np.stack(pooled) @ proj)


class RouterParams(Module):
    """Residual two-branch router over layer-normed [u, z]."""

    def __init__(self, rng: np.random.Generator, in_dim: int, num_experts: int,
                 hidden: int = ROUTER_HIDDEN, temperature: float = 1.0):
        if not temperature > 0:
            raise ParameterError(f"router temperature must be positive, got {temperature}")
        self.ln_scale = T.parameter(np.ones(in_dim))
        self.ln_shift = T.parameter(np.zeros(in_dim))
        self.w_skip = T.parameter(rng.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, num_experts)))
        self.w1 = T.parameter(rng.normal(0.0, np.sqrt(2.0 / in_dim), (in_dim, hidden)))
        self.b1 = T.parameter(np.zeros(hidden))
        self.w2 = T.parameter(rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, num_experts)))
        self.b2 = T.parameter(np.zeros(num_experts))
        self.temperature = temperature

    @property
    def num_experts(self) -> int:
        return self.w_skip.shape[1]

    def logits(self, u: Tensor, z: Tensor) -> Tensor:
        x = T.layer_norm(T.concat([u, z], axis=-1), self.ln_scale, self.ln_shift)
        h = T.relu(T.matmul(x, self.w1) + self.b1)
        return T.matmul(x, self.w_skip) + T.matmul(h, self.w2) + self.b2


@dataclass
class GlobalAssignment:
    """Router probabilities and the selected expert(s).

    ``probs`` is E_G or N x E_G; ``expert`` is an int or an int array.
    """

    probs: Tensor
    expert: int | np.ndarray


def top1(probs: np.ndarray) -> int | np.ndarray:
    # np.argmax returns the first maximal index: lowest-index tie-break
    out = np.argmax(probs, axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def route_global(u: Tensor, z: Tensor, params: RouterParams, temperature: float | None = None) -> GlobalAssignment:
    tau = params.temperature if temperature is None else temperature
    if not tau > 0:
        raise ParameterError(f"router temperature must be positive, got {tau}")
    probs = T.softmax_t(params.logits(u, z), tau)
    return GlobalAssignment(probs, top1(probs.data))


def cekd_loss(expert_logits, selected, temperature: float = 2.0, gate: Tensor | None = None,
              student_logits: Tensor | None = None) -> Tensor:
    """Cross-expert distillation: KL(softened ensemble || routed expert).

    ``expert_logits`` is a list of E_G tensors, each K or N x K; the teacher
    built from them is detached. ``selected`` is an int or one index per row.
    ``student_logits`` overrides the routed expert's logits (e.g. a live
    tensor when the list holds detached copies). ``gate``, if given,
    multiplies the student logits; it is the router's path into this loss.
    """
    if not temperature > 1:
        raise ParameterError(f"distillation temperature must exceed 1, got {temperature}")
    stacked = np.stack([t.data for t in expert_logits])
    teacher = T.softmax_t(Tensor(stacked.mean(axis=0)), temperature).data
    if student_logits is None:
        if np.ndim(selected) == 0:
            student_logits = expert_logits[int(selected)]
        else:
            rows = [T.reshape(expert_logits[int(e)][i], (1, -1)) for i, e in enumerate(np.asarray(selected))]
            student_logits = T.concat(rows, axis=0)
    if gate is not None:
        student_logits = student_logits * gate
    student = T.softmax_t(student_logits, temperature)
    loss = T.kl_divergence(teacher, student)
    if teacher.ndim == 2:
        loss = T.scale(loss, 1.0 / teacher.shape[0])
    return loss


class UsageTracker:
    """EMA of router probabilities (decay 0.99).

    ``update`` folds a batch into the EMA and returns a tensor whose value is
    the new EMA but whose gradient flows through the batch mean.
    """

    def __init__(self, num_experts: int, decay: float = 0.99):
        self.num_experts = num_experts
        self.decay = decay
        self.ema = np.full(num_experts, 1.0 / num_experts)
        self.steps = 0
        self.current: Tensor | None = None

    @classmethod
    def from_usage(cls, usage) -> UsageTracker:
        usage = np.asarray(usage, dtype=np.float64)
        tracker = cls(usage.size)
        tracker.ema = usage.copy()
        tracker.steps = 1
        return tracker

    @property
    def warm(self) -> bool:
        return self.steps > 0

    def update(self, probs: Tensor) -> Tensor:
        batch = T.tmean(probs, axis=0) if probs.ndim == 2 else probs
        if self.steps == 0:
            self.ema = batch.data.copy()
        else:
            self.ema = self.decay * self.ema + (1.0 - self.decay) * batch.data
        self.steps += 1
        self.current = batch + Tensor(self.ema - batch.data)
        return self.current


def routing_regularization(tracker: UsageTracker) -> Tensor:
    """Squared deviation of average expert usage from uniform."""
    if not tracker.warm:
        raise StateError("usage tracker has not seen any batch")
    usage = tracker.current if tracker.current is not None else Tensor(tracker.ema)
    return T.tsum(T.square(usage - 1.0 / tracker.num_experts))
