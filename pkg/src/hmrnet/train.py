"""Staged training: warm-up, global routing, then local routing and the CEM."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .cem import PROMPT_BUDGET, sample_prompts
from .checkpoint import load_checkpoint, save_checkpoint
from .data import CLASSES, IMAGE_SIZE, SceneSample, default_prompts, load_scenes
from .detection import BoundingBox, Targets, assign_targets
from .errors import ConfigurationError, DivergenceError
from .model import HMRNet, ModelConfig
from .tensor import Tensor

log = logging.getLogger(__name__)

LOSS_TERMS = ("det", "route", "distill", "align", "coh")
STAGE_TERMS = {1: ("det",), 2: ("det", "route", "distill"), 3: LOSS_TERMS}
DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    decay_points: tuple[float, float] = (0.6, 0.8)
    decay_factor: float = 0.1
    batch_size: int = 8
    lambdas: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    stage_bounds: tuple[float, float] = (0.2, 0.6)
    seed: int = 0
    variant: str = "full"
    flip: bool = True
    embed_samples: int = 16
    unseen: tuple[str, ...] = ("ring", "cross")
    holdout_domain: int | None = None

    def validate(self) -> None:
        lo, hi = self.stage_bounds
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigurationError(f"stage fractions must increase within [0, 1], got {self.stage_bounds}")
        if any(l < 0 for l in self.lambdas):
            raise ConfigurationError(f"loss weights must be non-negative, got {self.lambdas}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch size must be positive")
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")

    def stage(self, epoch: int) -> int:
        frac = epoch / self.epochs
        if frac < self.stage_bounds[0]:
            return 1
        if frac < self.stage_bounds[1]:
            return 2
        return 3

    def learning_rate(self, epoch: int) -> float:
        lr = self.lr
        for point in self.decay_points:
            if epoch >= math.ceil(point * self.epochs - 1e-9):
                lr *= self.decay_factor
        return lr


class SGD:
    """SGD with momentum and L2 weight decay.

    Only parameters reached by the current backward pass are updated, so
    components that sit outside the graph keep their exact values.
    """

    def __init__(self, named_params, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = dict(named_params)
        self.names = {id(p): n for n, p in self.params.items()}
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, lr: float, reached) -> None:
        for p in reached:
            name = self.names.get(id(p))
            if name is None:
                continue
            g = p.grad + self.weight_decay * p.data
            buf = self.buffers.get(name)
            if buf is None:
                buf = g.copy()
            else:
                buf = self.momentum * buf + g
            self.buffers[name] = buf
            p.data -= lr * buf

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def total_loss(losses: dict, stage: int, lambdas=(1.0, 1.0, 1.0, 1.0)):
    """Stage-masked weighted sum; disabled or zero-weight terms are left out entirely."""
    weights = dict(zip(("route", "distill", "align", "coh"), lambdas))
    allowed = STAGE_TERMS[stage]
    if "det" not in losses:
        raise ConfigurationError("detection loss missing")
    for name, value in losses.items():
        v = value.item() if isinstance(value, Tensor) else float(value)
        if not math.isfinite(v):
            raise DivergenceError(f"loss term {name!r} is not finite ({v})")
    total = losses["det"]
    for name in ("route", "distill", "align", "coh"):
        if name in allowed and name in losses and weights[name] != 0.0:
            term = losses[name]
            total = total + (T.scale(term, weights[name]) if isinstance(term, Tensor) else weights[name] * term)
    return total


def flip_scene(image: np.ndarray, boxes: list[BoundingBox]) -> tuple[np.ndarray, list[BoundingBox]]:
    flipped = image[:, :, ::-1].copy()
    boxes = [BoundingBox(IMAGE_SIZE - b.x_max, b.y_min, IMAGE_SIZE - b.x_min, b.y_max) for b in boxes]
    return flipped, boxes


@dataclass
class TrainResult:
    model: HMRNet
    timeline: list[dict] = field(default_factory=list)
    initial_loss: float | None = None
    checkpoint: Path | None = None


def _targets(scene: SceneSample, boxes=None) -> Targets:
    grid = IMAGE_SIZE // 4
    return assign_targets(boxes if boxes is not None else scene.boxes, scene.classes, grid, grid)


def _seen_prompts(config: TrainConfig) -> list[str]:
    return [text for text, tag, _ in default_prompts(config.unseen) if tag == "seen"]


def staged_train(config: TrainConfig, train_manifest: dict, out_dir=None, resume=None,
                 checkpoint_every: int = 0, stop_after: int | None = None) -> TrainResult:
    """Run the staged schedule on the scenes of ``train_manifest``.

    ``resume`` is a checkpoint directory written by an earlier call with the
    same config; ``stop_after`` ends the run after that many epochs (used to
    produce mid-run checkpoints).
    """
    config.validate()
    scenes = load_scenes(train_manifest)
    if not scenes:
        raise ConfigurationError("training manifest is empty")
    images = np.stack([s.image for s in scenes])
    domains = np.array([s.domain for s in scenes])
    targets = [_targets(s) for s in scenes]
    flipped = [flip_scene(s.image, s.boxes) for s in scenes]
    flipped_targets = [_targets(s, fb) for s, (_, fb) in zip(scenes, flipped)]
    prompts_pool = _seen_prompts(config)

    if resume is not None:
        model, manifest = load_checkpoint(resume)
        optimizer = SGD(model.named_parameters(), config.momentum, config.weight_decay)
        load_checkpoint_into_optimizer(resume, optimizer)
        start_epoch = manifest["state"]["epoch"]
        step = manifest["state"]["step"]
        timeline = list(manifest["state"].get("timeline", []))
        initial_loss = manifest["state"].get("initial_loss")
    else:
        model = HMRNet(ModelConfig(num_classes=len(CLASSES), variant=config.variant, seed=config.seed))
        optimizer = SGD(model.named_parameters(), config.momentum, config.weight_decay)
        start_epoch, step, timeline, initial_loss = 0, 0, [], None

    out = Path(out_dir) if out_dir is not None else None
    end_epoch = config.epochs if stop_after is None else min(config.epochs, start_epoch + stop_after)
    for epoch in range(start_epoch, end_epoch):
        stage = config.stage(epoch)
        if stage >= 2 and model.uses_global and not model.embeddings_ready:
            _enter_global_stage(model, images, domains, config)
        if stage >= 3 and model.uses_local and not model.local_ready:
            _enter_local_stage(model, images, domains, config)
        lr = config.learning_rate(epoch)
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(scenes))
        flips = rng.random(len(scenes)) < 0.5 if config.flip else np.zeros(len(scenes), dtype=bool)
        sums = {k: 0.0 for k in LOSS_TERMS + ("total",)}
        batches = 0
        started = time.perf_counter()
        for b0 in range(0, len(order), config.batch_size):
            idx = order[b0:b0 + config.batch_size]
            batch_images = np.stack([flipped[i][0] if flips[i] else images[i] for i in idx])
            batch_targets = [flipped_targets[i] if flips[i] else targets[i] for i in idx]
            prompt_rng = np.random.default_rng([config.seed, epoch, step, 7])
            prompts = sample_prompts(prompt_rng, prompts_pool, PROMPT_BUDGET)
            result = model.forward(batch_images, domains[idx], stage=stage, training=True,
                                   targets=batch_targets, prompts=prompts)
            loss = total_loss(result.losses, stage, config.lambdas)
            if loss.item() > DIVERGENCE_LIMIT:
                raise DivergenceError(f"loss {loss.item():.3g} at epoch {epoch} step {step}; "
                                      f"terms {({k: v.item() for k, v in result.losses.items()})}")
            if initial_loss is None:
                initial_loss = loss.item()
            optimizer.zero_grad()
            reached = T.backward(loss)
            optimizer.step(lr, reached)
            model.tracker.current = None
            for k, v in result.losses.items():
                sums[k] += v.item()
            sums["total"] += loss.item()
            batches += 1
            step += 1
        # wall time goes to the log only; the timeline is part of the checkpoint and must be reproducible
        entry = {"epoch": epoch, "stage": stage, "lr": lr}
        entry.update({k: v / batches for k, v in sums.items()})
        timeline.append(entry)
        log.info("epoch %d stage %d lr %.2g loss %.4f (%.1fs)", epoch, stage, lr, entry["total"],
                 time.perf_counter() - started)
        state = {"epoch": epoch + 1, "step": step, "timeline": timeline, "initial_loss": initial_loss}
        if out is not None and checkpoint_every and (epoch + 1) % checkpoint_every == 0 and epoch + 1 < config.epochs:
            save_checkpoint(out / f"epoch_{epoch + 1:03d}", model, optimizer, state, config)
    result = TrainResult(model, timeline, initial_loss)
    if out is not None:
        state = {"epoch": end_epoch, "step": step, "timeline": timeline, "initial_loss": initial_loss}
        result.checkpoint = save_checkpoint(out, model, optimizer, state, config)
    return result


def load_checkpoint_into_optimizer(path, optimizer: SGD) -> None:
    from .checkpoint import read_manifest
    from .tensor import read_tensor

    path = Path(path)
    for entry in read_manifest(path)["tensors"]:
        if entry["name"].startswith("momentum."):
            array, name = read_tensor(path / entry["file"])
            optimizer.buffers[name.partition(".")[2]] = array.copy()


def _enter_global_stage(model: HMRNet, images: np.ndarray, domains: np.ndarray, config: TrainConfig) -> None:
    """Seed dataset embeddings and copy the warm-up expert into the rest of the pool."""
    by_domain = {}
    for d in np.unique(domains):
        rows = np.flatnonzero(domains == d)[: config.embed_samples]
        by_domain[int(d)] = images[rows]
    model.init_embeddings(by_domain)
    model.warm_start_global_experts()


def _enter_local_stage(model: HMRNet, images: np.ndarray, domains: np.ndarray, config: TrainConfig) -> None:
    """Start the local experts as the identity so switching them on keeps the detector's input."""
    rows = np.concatenate([np.flatnonzero(domains == d)[: config.embed_samples] for d in np.unique(domains)])
    features = []
    with T.no_grad():
        for b0 in range(0, len(rows), config.batch_size):
            idx = rows[b0:b0 + config.batch_size]
            features.append(model.forward(images[idx], domains[idx], stage=2, training=False, cem=False).features.data)
    model.warm_start_local_experts(features)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
