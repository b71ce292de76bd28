"""Fast invariant suite behind the ``selftest`` subcommand."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cem import greedy_top1_baseline, hungarian
from .data import CLASSES, DEFAULT_DOMAINS, SplitConfig, generate_scene, load_scenes, make_splits
from .gradcheck import check_op
from .local_router import assign_labels, coherence_loss, region_count, select_active
from .global_router import UsageTracker, routing_regularization
from .tensor import Tensor, tensor_from_bytes, tensor_to_bytes


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _brute_force(s: np.ndarray) -> float:
    r, m = s.shape
    return max(sum(s[i, p[i]] for i in range(r)) for p in itertools.permutations(range(m), r))


def _hungarian(rng) -> str:
    for _ in range(200):
        r = int(rng.integers(1, 6))
        m = int(rng.integers(r, 6))
        s = rng.uniform(-1, 1, (r, m))
        a = hungarian(s)
        if len(set(a)) != r:
            return "assignment not injective"
        total = s[np.arange(r), a].sum()
        if not math.isclose(total, _brute_force(s), rel_tol=0, abs_tol=1e-12):
            return f"suboptimal on {s.tolist()}"
        if s[np.arange(r), greedy_top1_baseline(s)].sum() > total + 1e-12:
            return "greedy beat the optimum"
    return ""


def _partition(rng) -> str:
    for _ in range(50):
        e = 8
        p = rng.dirichlet(np.ones(e), size=(6, 6)).transpose(2, 0, 1)
        count = int(rng.integers(2, e + 1))
        active = select_active(p.sum(axis=(1, 2)), count)
        labels = assign_labels(p, active)
        masks = np.stack([labels == r for r in active])
        if not np.array_equal(masks.sum(axis=0), np.ones((6, 6))):
            return "masks do not partition the grid"
    counts = [region_count(h, 1.0, 8) for h in np.linspace(0, 20, 200)]
    if counts[0] != 5 or counts[-1] != 8 or np.any(np.diff(counts) < 0):
        return f"region count sweep broken: {counts[0]}..{counts[-1]}"
    return ""


def _losses(rng) -> str:
    if routing_regularization(UsageTracker.from_usage([0.5, 0.5])).item() != 0.0:
        return "routing loss not zero at uniform usage"
    if not math.isclose(routing_regularization(UsageTracker.from_usage([1.0, 0.0])).item(), 0.5):
        return "routing loss not 0.5 at [1, 0]"
    board = np.indices((4, 4)).sum(axis=0) % 2
    p = np.stack([board, 1 - board]).astype(float)
    if coherence_loss(Tensor(p)).item() != 48.0:
        return "checkerboard coherence is not 48"
    return ""


def _determinism(rng) -> str:
    a = generate_scene(DEFAULT_DOMAINS[0], 7)
    b = generate_scene(DEFAULT_DOMAINS[0], 7)
    if a.image.tobytes() != b.image.tobytes():
        return "scene generation not deterministic"
    blob = tensor_to_bytes(a.image, "img")
    back, name = tensor_from_bytes(blob)
    if name != "img" or back.tobytes() != a.image.tobytes():
        return "tensor round trip changed the data"
    return ""


def _no_leakage(rng) -> str:
    config = SplitConfig(train_per_domain=8, val_per_domain=2, test_per_domain=2, zsd_per_domain=2)
    manifests = make_splits(config)
    unseen = {CLASSES.index(c) for c in config.unseen}
    for scene in load_scenes(manifests["train"]):
        if unseen & set(scene.classes):
            return f"unseen class in train scene {scene.seed}"
    return ""


def _gradients(rng) -> str:
    for name in ("conv2d", "batch_norm", "softmax", "detection_loss", "alignment_loss"):
        check = check_op(name, points=3)
        if not check.passed:
            return f"{name} gradient error {check.worst_error:.2e}"
    return ""


CHECKS: dict[str, Callable[[np.random.Generator], str]] = {
    "hungarian_optimality": _hungarian,
    "partition_invariants": _partition,
    "loss_anchors": _losses,
    "determinism": _determinism,
    "unseen_leakage": _no_leakage,
    "gradients": _gradients,
}


def run_selftest(seed: int = 0) -> list[CheckResult]:
    out = []
    for name, check in CHECKS.items():
        detail = check(np.random.default_rng(seed))
        out.append(CheckResult(name, not detail, detail))
    return out
