"""HMR-Net assembly: backbone, global routing, local routing, CEM and head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cem import Projection, embed_prompt, hungarian, alignment_loss, similarity
from .detection import DetectionHead, Targets, detection_loss
from .errors import ConfigurationError
from .experts import FEATURE_CHANNELS, NUM_GLOBAL_EXPERTS, NUM_LOCAL_EXPERTS, Backbone, ExpertPool
from .global_router import (DISTILL_CLASSES, EMBED_DIM, DatasetEmbeddingTable, RouterParams, UsageTracker,
                            cekd_loss, embedding_projection, route_global, routing_regularization)
from .local_router import PartitionHead, assign_labels, coherence_loss, feature_entropy, region_count, select_active
from .nn import Linear, Module
from .tensor import Tensor

VARIANTS = ("full", "global-only", "local-only")
DEFAULT_EXPERT = 0


@dataclass
class ModelConfig:
    num_classes: int = 6
    num_domains: int = 4
    channels: int = FEATURE_CHANNELS
    global_experts: int = NUM_GLOBAL_EXPERTS
    local_experts: int = NUM_LOCAL_EXPERTS
    embed_dim: int = EMBED_DIM
    distill_classes: int = DISTILL_CLASSES
    router_temperature: float = 1.0
    distill_temperature: float = 2.0
    variant: str = "full"
    seed: int = 0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.local_experts < 2:
            raise ConfigurationError("need at least 2 local experts")


@dataclass
class LocalRouting:
    scores: Tensor
    entropy: np.ndarray
    counts: np.ndarray
    active: list[tuple[int, ...]]
    labels: np.ndarray          # N x h x w
    masks: np.ndarray           # N x E_L x h x w, float 0/1


@dataclass
class ForwardResult:
    predictions: Tensor
    features: Tensor
    fused: Tensor
    probs: Tensor | None = None
    experts: np.ndarray | None = None
    local: LocalRouting | None = None
    losses: dict[str, Tensor] = field(default_factory=dict)
    alignments: list[list[int]] = field(default_factory=list)
    similarities: list[Tensor] = field(default_factory=list)
    teacher: list[Tensor] | None = None


class HMRNet(Module):
    def __init__(self, config: ModelConfig | None = None):
        config = config or ModelConfig()
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config.channels
        self.backbone = Backbone(rng, c)
        self.global_experts = ExpertPool(rng, "global", config.global_experts, c)
        self.router = RouterParams(rng, c + config.embed_dim, config.global_experts,
                                   temperature=config.router_temperature)
        self.embeddings = DatasetEmbeddingTable(np.zeros((config.num_domains, config.embed_dim)))
        self.distill_head = Linear(rng, c, config.distill_classes)
        self.partition = PartitionHead(rng, c, config.local_experts)
        self.local_experts = ExpertPool(rng, "local", config.local_experts, c)
        self.head = DetectionHead(rng, c, config.num_classes)
        self.cem_visual = Projection(rng, c)
        self.cem_text = Projection(rng, 32)
        self.tracker = UsageTracker(config.global_experts)
        self.embeddings_ready = False
        self.local_ready = False

    # -- component groups used for stage masking ---------------------------
    def component_parameters(self) -> dict[str, list[Tensor]]:
        return {
            "backbone": self.backbone.parameters(),
            "global_experts": self.global_experts.parameters(),
            "router": self.router.parameters() + self.embeddings.parameters() + self.distill_head.parameters(),
            "local": self.partition.parameters() + self.local_experts.parameters(),
            "head": self.head.parameters(),
            "cem": self.cem_visual.parameters() + self.cem_text.parameters(),
        }

    @property
    def uses_global(self) -> bool:
        return self.config.variant in ("full", "global-only")

    @property
    def uses_local(self) -> bool:
        return self.config.variant in ("full", "local-only")

    @property
    def trained_stage(self) -> int:
        """The furthest stage whose components have been initialized."""
        return 3 if self.local_ready else 2 if self.embeddings_ready else 1

    # -- stage transitions ------------------------------------------------------
    def init_embeddings(self, images_by_domain: dict[int, np.ndarray]) -> None:
        """Seed dataset embeddings from pooled backbone features (eval-mode backbone)."""
        proj = embedding_projection(self.config.channels, self.config.embed_dim, self.config.seed)
        with T.no_grad():
            for d, images in sorted(images_by_domain.items()):
                feats = self.backbone(Tensor(images), training=False)
                pooled = feats.data.mean(axis=(0, 2, 3))
                self.embeddings.vectors.data[d] = pooled @ proj
        self.embeddings_ready = True

    def warm_start_global_experts(self) -> None:
        for e in range(self.global_experts.count):
            if e != DEFAULT_EXPERT:
                self.global_experts.copy_expert(DEFAULT_EXPERT, e)

    # -- forward -----------------------------------------------------------------
    def route(self, v: Tensor, domains: np.ndarray, temperature: float | None = None):
        u = T.spatial_mean(v)
        z = self.embeddings.lookup(domains)
        return route_global(u, z, self.router, temperature)

    def global_stage(self, v: Tensor, experts: np.ndarray, training: bool) -> Tensor:
        n = v.shape[0]
        f = None
        for e in np.unique(experts):
            rows = np.flatnonzero(experts == e)
            out = self.global_experts.experts[int(e)](v[rows], training)
            part = T.scatter_rows(out, rows, n)
            f = part if f is None else f + part
        return f

    def warm_start_local_experts(self, features: list[np.ndarray]) -> None:
        """Start each local expert as the identity on the inputs it is routed.

        ``features`` are batches of global-stage outputs; the per-channel
        stats of each expert's masked input set its batch-norm affine.
        """
        c, e_l = self.config.channels, self.config.local_experts
        sums, squares, counts = np.zeros((e_l, c)), np.zeros((e_l, c)), np.zeros(e_l)
        with T.no_grad():
            for f in features:
                local = self.local_partition(Tensor(f))
                for r in range(e_l):
                    rows = np.flatnonzero(local.masks[:, r].reshape(len(f), -1).any(axis=1))
                    if rows.size == 0:
                        continue
                    x = f[rows] * local.masks[rows, r][:, None]
                    sums[r] += x.sum(axis=(0, 2, 3))
                    squares[r] += (x * x).sum(axis=(0, 2, 3))
                    counts[r] += x.shape[0] * x.shape[2] * x.shape[3]
        for r, expert in enumerate(self.local_experts.experts):
            n = max(counts[r], 1.0)
            mean = sums[r] / n
            expert.identity_init(mean, np.maximum(squares[r] / n - mean * mean, 0.0))
        self.local_ready = True

    def local_partition(self, f: Tensor) -> LocalRouting:
        n = f.shape[0]
        e_l = self.config.local_experts
        scores = self.partition.scores(f)
        theta = float(self.partition.theta.data)
        entropies = np.empty(n)
        counts = np.empty(n, dtype=np.int64)
        active: list[tuple[int, ...]] = []
        labels = np.empty((n,) + f.shape[2:], dtype=np.int64)
        masks = np.zeros((n, e_l) + f.shape[2:])
        for i in range(n):
            entropies[i] = feature_entropy(f.data[i]).entropy
            counts[i] = region_count(entropies[i], theta, e_l)
            act = select_active(scores.data[i].sum(axis=(1, 2)), int(counts[i]))
            active.append(act)
            labels[i] = assign_labels(scores.data[i], act)
            for r in act:
                masks[i, r] = labels[i] == r
        return LocalRouting(scores, entropies, counts, active, labels, masks)

    def local_stage(self, f: Tensor, training: bool) -> tuple[Tensor, LocalRouting]:
        local = self.local_partition(f)
        n, e_l, masks = f.shape[0], self.config.local_experts, local.masks
        fused = None
        for r in range(e_l):
            rows = np.flatnonzero(masks[:, r].reshape(n, -1).any(axis=1))
            if rows.size == 0:
                continue
            gate = Tensor(masks[rows, r][:, None])
            out = self.local_experts.experts[r](f[rows] * gate, training)
            part = T.scatter_rows(out * gate, rows, n)
            fused = part if fused is None else fused + part
        return fused, local

    def ru_embeddings(self, fused: Tensor, local: LocalRouting, i: int) -> tuple[Tensor, list[int]]:
        """Masked means of the fused map over each non-empty active unit of image ``i``."""
        units = [r for r in local.active[i] if local.masks[i, r].any()]
        m = local.masks[i, units].reshape(len(units), -1)
        m = m / m.sum(axis=1, keepdims=True)
        c = fused.shape[1]
        flat = T.reshape(fused[i], (c, -1))
        return T.matmul(Tensor(m), T.transpose(flat)), units

    def prompt_matrix(self, texts: list[str]) -> Tensor:
        vectors = np.stack([embed_prompt(t).vector for t in texts])
        projected, _ = self.cem_text(Tensor(vectors))
        return projected

    def align(self, fused: Tensor, local: LocalRouting, prompts: Tensor) -> tuple[list[Tensor], list[list[int]], list[list[int]]]:
        sims, assignments, unit_lists = [], [], []
        for i in range(fused.shape[0]):
            emb, units = self.ru_embeddings(fused, local, i)
            visual, _ = self.cem_visual(emb)
            s = similarity(visual, prompts)
            sims.append(s)
            assignments.append(hungarian(s.data))
            unit_lists.append(units)
        return sims, assignments, unit_lists

    def forward(self, images, domains, stage: int = 3, training: bool = True,
                targets: list[Targets] | None = None, prompts: list[str] | None = None,
                cem: bool = True, teacher: list[Tensor] | None = None) -> ForwardResult:
        """One pass of the routing pipeline.

        Stage 1 uses the default global expert and no local routing; stage 2
        adds global routing; stage 3 adds local routing and the CEM. The
        variant switches off one routing level. Losses are computed when
        ``targets`` is given. ``teacher`` replaces the distillation teacher
        logits (they are constants of the step either way).
        """
        x = images if isinstance(images, Tensor) else Tensor(images)
        domains = np.asarray(domains, dtype=np.int64)
        v = self.backbone(x, training)
        losses: dict[str, Tensor] = {}
        probs = experts = None
        routed = stage >= 2 and self.uses_global
        if routed:
            assignment = self.route(v, domains)
            probs, experts = assignment.probs, np.atleast_1d(assignment.expert)
            f = self.global_stage(v, experts, training)
        else:
            experts = np.full(x.shape[0], DEFAULT_EXPERT)
            f = self.global_experts.experts[DEFAULT_EXPERT](v, training)
        local = None
        fused = f
        if stage >= 3 and self.uses_local:
            fused, local = self.local_stage(f, training)
        predictions = self.head(fused)
        result = ForwardResult(predictions, f, fused, probs, experts, local, losses)
        if targets is not None:
            losses["det"] = detection_loss(predictions, targets, self.config.num_classes)
            if routed and training:
                self.tracker.update(probs)
                losses["route"] = routing_regularization(self.tracker)
                losses["distill"], result.teacher = self.distillation(v, f, probs, experts, teacher)
            if local is not None:
                losses["coh"] = T.scale(coherence_loss(local.scores), 1.0 / x.shape[0])
        if local is not None and cem and prompts:
            sims, assignments, _ = self.align(fused, local, self.prompt_matrix(prompts))
            result.similarities, result.alignments = sims, assignments
            if targets is not None:
                total = None
                for s, a in zip(sims, assignments):
                    term = alignment_loss(s, a)
                    total = term if total is None else total + term
                losses["align"] = T.scale(total, 1.0 / len(sims))
        return result

    def distillation(self, v: Tensor, f: Tensor, probs: Tensor, experts: np.ndarray,
                     teacher_logits: list[Tensor] | None = None) -> tuple[Tensor, list[Tensor]]:
        """Teacher from every global expert (detached), student from the routed one."""
        n = v.shape[0]
        if teacher_logits is None:
            with T.no_grad():
                vd = Tensor(v.data)
                teacher_logits = [self.distill_head(T.spatial_mean(ex(vd, True, update_stats=False)))
                                  for ex in self.global_experts.experts]
        student = self.distill_head(T.spatial_mean(f))
        gate = T.reshape(probs[np.arange(n), experts], (n, 1))
        loss = cekd_loss(teacher_logits, experts, self.config.distill_temperature, gate=gate,
                         student_logits=student)
        return loss, teacher_logits
