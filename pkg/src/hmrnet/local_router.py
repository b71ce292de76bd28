"""Complexity-adaptive partitioning into routing units and local dispatch.

Feature maps and score tensors are channel-first: C x h x w and E_L x h x w.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, ValidationError
from .experts import ExpertPool, expert_forward
from .nn import Module, kaiming_uniform
from .tensor import Tensor

THETA_INIT = 1.0


@dataclass
class ComplexityEstimate:
    entropy: float
    shares: np.ndarray


def feature_entropy(f) -> ComplexityEstimate:
    """Entropy (nats) of the per-channel share of total activation."""
    data = np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64)
    if np.any(data < 0):
        raise ValidationError("feature_entropy needs non-negative activations")
    totals = data.reshape(data.shape[0], -1).sum(axis=1)
    grand = totals.sum()
    if grand < 1e-12:
        shares = np.full(data.shape[0], 1.0 / data.shape[0])
    else:
        shares = totals / grand
    nz = shares[shares > 0]
    return ComplexityEstimate(float(-(nz * np.log(nz)).sum()), shares)


def region_count_continuous(entropy: float, theta: float, num_experts: int) -> float:
    return 2.0 + (num_experts - 2) / (1.0 + np.exp(-theta * entropy))


def region_count(entropy: float, theta: float, num_experts: int) -> int:
    """Number of routing units: 2 + sigmoid(theta * entropy) * (E_L - 2), rounded half-to-even."""
    if num_experts < 2:
        raise ConfigurationError(f"need at least 2 local experts, got {num_experts}")
    raw = region_count_continuous(entropy, theta, num_experts)
    return int(min(max(round(raw), 2), num_experts))


def region_count_tensor(entropy: float, theta: Tensor, num_experts: int) -> Tensor:
    """Rounded region count whose gradient is that of the unrounded value (straight-through)."""
    raw = T.scale(T.sigmoid(T.scale(theta, entropy)), num_experts - 2) + 2.0
    rounded = region_count(entropy, float(theta.data), num_experts)
    return raw + Tensor(rounded - raw.data)


class PartitionHead(Module):
    """Score conv C' -> E_L plus the learnable complexity scale theta_R."""

    def __init__(self, rng: np.random.Generator, channels: int, num_experts: int):
        self.kernel = T.parameter(kaiming_uniform(rng, (num_experts, channels, 3, 3), channels * 9) * 0.1)
        self.theta = T.parameter(np.array(THETA_INIT))

    @property
    def num_experts(self) -> int:
        return self.kernel.shape[0]

    def scores(self, f: Tensor) -> Tensor:
        axis = 0 if f.ndim == 3 else 1
        return T.softmax_t(T.conv2d(f, self.kernel), 1.0, axis=axis)


@dataclass
class PartitionState:
    region_count: int
    scores: Tensor
    active: tuple[int, ...]
    entropy: float = 0.0
    labels: np.ndarray | None = None
    masks: dict[int, np.ndarray] = field(default_factory=dict)

    def check_partition(self) -> None:
        total = sum(m.astype(np.int64) for m in self.masks.values())
        if not np.all(total == 1):
            raise ValidationError("routing-unit masks do not partition the grid")


def select_active(channel_totals: np.ndarray, count: int) -> tuple[int, ...]:
    """Indices of the ``count`` largest totals, ties to the lower index, in ascending order."""
    order = np.lexsort((np.arange(channel_totals.size), -channel_totals))
    return tuple(sorted(int(i) for i in order[:count]))


def partition_map(f: Tensor, head: PartitionHead, count: int | None = None,
                  entropy: float | None = None) -> PartitionState:
    """Score tensor and active set for one C' x h x w map."""
    if f.ndim != 3:
        raise DimensionError(f"partition_map expects C x h x w, got {f.shape}")
    if count is None:
        est = feature_entropy(f)
        entropy = est.entropy
        count = region_count(entropy, float(head.theta.data), head.num_experts)
    scores = head.scores(f)
    totals = scores.data.sum(axis=(1, 2))
    return PartitionState(count, scores, select_active(totals, count), entropy or 0.0)


def assign_labels(scores: np.ndarray, active: tuple[int, ...]) -> np.ndarray:
    """Per-pixel argmax over active channels (lowest index wins ties)."""
    idx = np.asarray(active)
    return idx[np.argmax(scores[idx], axis=0)]


def build_masks(state: PartitionState) -> PartitionState:
    labels = assign_labels(state.scores.data, state.active)
    state.labels = labels
    state.masks = {r: labels == r for r in state.active}
    return state


def masked_dispatch(f: Tensor, state: PartitionState, pool: ExpertPool, training: bool = True) -> list[Tensor | None]:
    """Route each unit's masked features to the local expert owning its channel.

    Empty units yield ``None`` and their expert is not run.
    """
    outputs: list[Tensor | None] = []
    for r in state.active:
        if r >= pool.count:
            raise ValidationError(f"active unit {r} has no local expert (pool of {pool.count})")
        mask = state.masks[r]
        if not mask.any():
            outputs.append(None)
            continue
        masked = f * Tensor(mask.astype(np.float64))
        outputs.append(expert_forward(pool, r, masked, training))
    return outputs


def fuse(outputs: list[Tensor | None], masks: list[np.ndarray]) -> Tensor:
    """Sum of mask-gated unit outputs; each pixel comes from its owning unit."""
    if len(outputs) != len(masks):
        raise DimensionError(f"{len(outputs)} outputs for {len(masks)} masks")
    shape = next(o.shape for o in outputs if o is not None)
    fused: Tensor | None = None
    for out, mask in zip(outputs, masks):
        if out is None:
            continue
        if out.shape[-2:] != mask.shape:
            raise DimensionError(f"output {out.shape} does not match mask {mask.shape}")
        part = out * Tensor(mask.astype(np.float64))
        fused = part if fused is None else fused + part
    return fused if fused is not None else Tensor(np.zeros(shape))


def coherence_loss(scores: Tensor) -> Tensor:
    """Squared L2 distance between 4-neighbour score vectors, each pair once.

    Accepts E x h x w or N x E x h x w.
    """
    right = scores[..., :, 1:] - scores[..., :, :-1]
    down = scores[..., 1:, :] - scores[..., :-1, :]
    return T.tsum(T.square(right)) + T.tsum(T.square(down))


def dump_partition(state: PartitionState, directory, stem: str = "partition") -> tuple[Path, Path]:
    """Write the label map as a binary PGM and a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    labels = state.labels.astype(np.uint8)
    h, w = labels.shape
    pgm = directory / f"{stem}.pgm"
    with open(pgm, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write((labels * (255 // max(state.scores.shape[0] - 1, 1))).astype(np.uint8).tobytes())
    meta = directory / f"{stem}.json"
    meta.write_text(json.dumps({"entropy": state.entropy, "R": state.region_count,
                                "active": list(state.active)}, indent=2))
    return pgm, meta
