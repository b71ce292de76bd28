"""Detection metrics, the three evaluation protocols and the utilization report."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .cem import DEFAULT_THRESHOLD, PROMPT_BUDGET, open_category_infer, similarity
from .data import CLASSES, IMAGE_SIZE, SceneSample, default_prompts, load_scenes, prompt_class
from .detection import BoundingBox, Detection, class_posteriors, decode_and_nms, decode_offsets, iou_matrix, nms
from .errors import UsageError
from .tensor import Tensor

METRICS_SCHEMA = "hmrnet.metrics/1"
UTILIZATION_SCHEMA = "hmrnet.utilization/1"
MATCH_IOU = 0.5
RECALL_IOUS = (0.4, 0.5, 0.6)
RECALL_TOP = 100
# area buckets in pixels^2 on 64x64 scenes
SIZE_BUCKETS = {"small": (0.0, 8.0 ** 2), "medium": (8.0 ** 2, 16.0 ** 2), "large": (16.0 ** 2, float("inf"))}
MODES = ("per-domain", "leave-one-out", "zsd")


@dataclass
class GroundTruth:
    boxes: np.ndarray     # K x 4
    labels: np.ndarray    # K

    @classmethod
    def from_scene(cls, scene: SceneSample) -> GroundTruth:
        boxes = np.array([b.as_list() for b in scene.boxes], dtype=np.float64).reshape(-1, 4)
        return cls(boxes, np.asarray(scene.classes, dtype=np.int64))


def _areas(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the all-point interpolated precision-recall curve."""
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    steps = np.flatnonzero(r[1:] != r[:-1]) + 1
    return float(np.sum((r[steps] - r[steps - 1]) * p[steps]))


def class_ap(detections: list[list[Detection]], truths: list[GroundTruth], cls: int,
             iou_threshold: float = MATCH_IOU, area_range: tuple[float, float] | None = None) -> float | None:
    """AP of one class; None when no ground truth of that class is in range.

    With ``area_range`` set, ground truth outside the range is ignored, as
    are detections matched to it and unmatched detections outside it.
    """
    lo, hi = area_range if area_range is not None else (-np.inf, np.inf)
    gt_boxes, gt_ignore, npos = [], [], 0
    for t in truths:
        boxes = t.boxes[t.labels == cls]
        areas = _areas(boxes)
        ignore = (areas < lo) | (areas >= hi)
        gt_boxes.append(boxes)
        gt_ignore.append(ignore)
        npos += int((~ignore).sum())
    if npos == 0:
        return None
    dets = [(d.score, i, k, d) for i, ds in enumerate(detections) for k, d in enumerate(ds) if d.label == cls]
    dets.sort(key=lambda t: (-t[0], t[1], t[2]))
    used = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    tp, fp = [], []
    for _, i, _, d in dets:
        boxes = gt_boxes[i]
        ious = iou_matrix(np.array([d.box.as_list()]), boxes)[0] if len(boxes) else np.zeros(0)
        best, best_iou = -1, iou_threshold
        # prefer unmatched non-ignored ground truth, then ignored ground truth
        for ignored_pass in (False, True):
            for g in np.argsort(-ious, kind="stable"):
                if ious[g] < best_iou:
                    break
                if gt_ignore[i][g] == ignored_pass and not used[i][g]:
                    best = int(g)
                    break
            if best >= 0:
                break
        if best >= 0:
            used[i][best] = True
            if gt_ignore[i][best]:
                continue
            tp.append(1.0)
            fp.append(0.0)
        else:
            if not lo <= d.box.area < hi:
                continue
            tp.append(0.0)
            fp.append(1.0)
    if not tp:
        return 0.0
    tp_c, fp_c = np.cumsum(tp), np.cumsum(fp)
    return interpolated_ap(tp_c / npos, tp_c / (tp_c + fp_c))


def mean_ap(detections, truths, classes, iou_threshold: float = MATCH_IOU, area_range=None) -> tuple[float, dict[int, float | None]]:
    per_class = {c: class_ap(detections, truths, c, iou_threshold, area_range) for c in classes}
    valid = [v for v in per_class.values() if v is not None]
    return (float(np.mean(valid)) if valid else 0.0), per_class


def recall_at(detections, truths, classes, iou_threshold: float, top: int = RECALL_TOP) -> float:
    """Fraction of ground truth of ``classes`` matched by the top-``top`` detections of each image."""
    hit, total = 0, 0
    for ds, t in zip(detections, truths):
        ranked = sorted(ds, key=lambda d: -d.score)[:top]
        for c in classes:
            gt = t.boxes[t.labels == c]
            total += len(gt)
            if not len(gt):
                continue
            used = np.zeros(len(gt), dtype=bool)
            for d in ranked:
                if d.label != c:
                    continue
                ious = iou_matrix(np.array([d.box.as_list()]), gt)[0]
                ious[used] = -1.0
                g = int(np.argmax(ious))
                if ious[g] >= iou_threshold:
                    used[g] = True
            hit += int(used.sum())
    return hit / total if total else 0.0


@dataclass
class MetricsReport:
    mode: str
    num_images: int
    map: float
    per_class_ap: dict[str, float | None]
    ap_small: float
    ap_medium: float
    ap_large: float
    recall_at_100: dict[str, float]
    utilization: list[list[int]]
    domain_map: dict[str, float] = field(default_factory=dict)
    schema: str = METRICS_SCHEMA

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def detection_metrics(detections, truths, classes, mode: str = "per-domain", utilization=None,
                      domains=None) -> MetricsReport:
    m, per_class = mean_ap(detections, truths, classes)
    buckets = {name: mean_ap(detections, truths, classes, area_range=rng)[0] for name, rng in SIZE_BUCKETS.items()}
    recalls = {f"{t:.1f}": recall_at(detections, truths, classes, t) for t in RECALL_IOUS}
    domain_map = {}
    if domains is not None:
        domains = np.asarray(domains)
        for d in np.unique(domains):
            rows = np.flatnonzero(domains == d)
            domain_map[str(int(d))] = mean_ap([detections[i] for i in rows], [truths[i] for i in rows], classes)[0]
    return MetricsReport(mode, len(truths), m, {CLASSES[c]: per_class[c] for c in classes},
                         buckets["small"], buckets["medium"], buckets["large"], recalls,
                         [] if utilization is None else np.asarray(utilization).tolist(), domain_map)


# -- inference ---------------------------------------------------------------


@dataclass
class ImagePrediction:
    detections: list[Detection]
    expert: int
    open_detections: list[Detection] = field(default_factory=list)
    matches: list = field(default_factory=list)


def open_category_detections(prediction: np.ndarray, masks: np.ndarray, matches, prompt_labels,
                             num_classes: int, score_threshold: float = 0.05) -> list[Detection]:
    """Boxes of cells inside each matched unit, labelled with the matched prompt's class."""
    _, h, w = prediction.shape
    objectness = 1.0 - class_posteriors(prediction, num_classes)[0].reshape(-1)
    boxes = decode_offsets(prediction[num_classes + 1:], h, w)
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, IMAGE_SIZE)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, IMAGE_SIZE)
    valid = (boxes[:, 2] - boxes[:, 0] > 1e-6) & (boxes[:, 3] - boxes[:, 1] > 1e-6)
    out = []
    for match in matches:
        label = prompt_labels[match.prompt]
        if label is None:
            continue
        inside = masks[match.unit].reshape(-1) > 0
        cells = np.flatnonzero(inside & valid & (objectness >= score_threshold))
        if cells.size == 0:
            continue
        for k in nms(boxes[cells], objectness[cells]):
            cell = int(cells[k])
            out.append(Detection(BoundingBox(*boxes[cell]), label, float(objectness[cell]), cell))
    return out


def predict(model, scenes: list[SceneSample], cem: bool = False, prompts: list[str] | None = None,
            threshold: float = DEFAULT_THRESHOLD, batch_size: int = 16, stage: int | None = None) -> list[ImagePrediction]:
    """Eval-mode inference in manifest order.

    ``stage`` runs the pipeline as it stood in that training stage; the
    default is the furthest stage the model has reached.

    With ``cem`` on and a local-routing model, every image's units are
    matched to ``prompts`` and open-category detections are produced.
    """
    if cem and prompts is not None and len(prompts) > PROMPT_BUDGET:
        raise UsageError(f"at most {PROMPT_BUDGET} prompts per image")
    num_classes = model.config.num_classes
    stage = model.trained_stage if stage is None else stage
    out: list[ImagePrediction] = []
    with T.no_grad():
        prompt_matrix = model.prompt_matrix(prompts) if cem and prompts else None
        labels = [prompt_class(p) for p in prompts] if prompts else []
        for b0 in range(0, len(scenes), batch_size):
            batch = scenes[b0:b0 + batch_size]
            images = np.stack([s.image for s in batch])
            domains = np.array([s.domain for s in batch])
            result = model.forward(images, domains, stage=stage, training=False, cem=False)
            for i in range(len(batch)):
                pred = result.predictions.data[i]
                dets = decode_and_nms(pred, num_classes)
                item = ImagePrediction(dets, int(result.experts[i]))
                if prompt_matrix is not None and result.local is not None:
                    emb, units = model.ru_embeddings(result.fused, result.local, i)
                    visual, _ = model.cem_visual(emb)
                    s = similarity(visual, prompt_matrix)
                    item.matches = open_category_infer(s, threshold, units)
                    item.open_detections = open_category_detections(
                        pred, result.local.masks[i], item.matches, labels, num_classes)
                out.append(item)
    return out


def utilization_matrix(domains, experts, num_domains: int, num_experts: int) -> np.ndarray:
    counts = np.zeros((num_domains, num_experts), dtype=np.int64)
    np.add.at(counts, (np.asarray(domains, dtype=np.int64), np.asarray(experts, dtype=np.int64)), 1)
    return counts


def purity(counts: np.ndarray) -> float:
    """Mean over domains with traffic of the largest single-expert fraction."""
    counts = np.asarray(counts, dtype=np.float64)
    totals = counts.sum(axis=1)
    rows = totals > 0
    if not rows.any():
        return 0.0
    return float(np.mean(counts[rows].max(axis=1) / totals[rows]))


@dataclass
class RouteReport:
    counts: np.ndarray
    purity: float

    @property
    def expert_share(self) -> np.ndarray:
        return self.counts.sum(axis=0) / max(1, self.counts.sum())

    def rows(self) -> list[tuple[int, int, int, float]]:
        out = []
        for d in range(self.counts.shape[0]):
            total = self.counts[d].sum()
            for e in range(self.counts.shape[1]):
                out.append((d, e, int(self.counts[d, e]), float(self.counts[d, e] / total) if total else 0.0))
        return out

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["# schema", UTILIZATION_SCHEMA, "purity", repr(self.purity)])
            writer.writerow(["dataset_id", "expert_id", "count", "fraction"])
            for row in self.rows():
                writer.writerow([row[0], row[1], row[2], repr(row[3])])
        return path


def route_report(model, manifest: dict, predictions: list[ImagePrediction] | None = None) -> RouteReport:
    scenes = load_scenes(manifest)
    if predictions is None:
        predictions = predict(model, scenes)
    counts = utilization_matrix([s.domain for s in scenes], [p.expert for p in predictions],
                                model.config.num_domains, model.config.global_experts)
    return RouteReport(counts, purity(counts))


# -- protocols ---------------------------------------------------------------


def _domains_of(manifest: dict) -> set[int]:
    return {int(e["domain"]) for e in manifest["entries"]}


def evaluate(model, manifest: dict, mode: str = "per-domain", train_config: dict | None = None,
             prompts: list[str] | None = None) -> tuple[MetricsReport, list[ImagePrediction]]:
    """Run one protocol on ``manifest``; ``train_config`` is the checkpoint's training config."""
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; expected one of {MODES}")
    holdout = (train_config or {}).get("holdout_domain")
    unseen = tuple(manifest.get("unseen", ()))
    unseen_ids = [CLASSES.index(c) for c in unseen]
    seen_ids = [c for c in range(model.config.num_classes) if c not in unseen_ids]
    if mode == "leave-one-out":
        if holdout is None:
            raise UsageError("leave-one-out needs a checkpoint trained with a held-out domain")
        entries = [e for e in manifest["entries"] if int(e["domain"]) == holdout]
        if not entries:
            raise UsageError(f"manifest has no scenes of held-out domain {holdout}")
        manifest = dict(manifest, entries=entries)
        scenes = load_scenes(manifest)
        if model.uses_global:
            # the held-out domain has no trained embedding: seed it from its own images
            model.init_embeddings({holdout: np.stack([s.image for s in scenes[:16]])})
        classes = seen_ids
    else:
        if holdout is not None and holdout in _domains_of(manifest):
            raise UsageError(f"domain {holdout} was held out in training; use leave-one-out")
        scenes = load_scenes(manifest)
        classes = seen_ids
    if mode == "zsd":
        has_unseen = any(c in unseen_ids for s in scenes for c in s.classes)
        if not has_unseen:
            raise UsageError("zsd evaluation needs scenes containing unseen classes")
        if not model.uses_local:
            raise UsageError("zsd evaluation needs a model with local routing")
        if prompts is None:
            prompts = [text for text, _, _ in default_prompts(unseen)]
        preds = predict(model, scenes, cem=True, prompts=prompts)
        detections = [sorted(p.detections + p.open_detections, key=lambda d: -d.score)[:RECALL_TOP] for p in preds]
        classes = unseen_ids
    else:
        preds = predict(model, scenes)
        detections = [p.detections for p in preds]
    truths = [GroundTruth.from_scene(s) for s in scenes]
    domains = [s.domain for s in scenes]
    util = utilization_matrix(domains, [p.expert for p in preds], model.config.num_domains,
                              model.config.global_experts)
    report = detection_metrics(detections, truths, classes, mode, util, domains)
    return report, preds


def image_id(scene: SceneSample) -> str:
    return f"d{scene.domain}_s{scene.seed}"


def write_detections(path, scenes: list[SceneSample], predictions: list[ImagePrediction]) -> Path:
    """One JSON object per detection: image_id, box, class, score (and whether it is open-category)."""
    path = Path(path)
    with path.open("w") as fh:
        for s, p in zip(scenes, predictions):
            for d, is_open in [(d, False) for d in p.detections] + [(d, True) for d in p.open_detections]:
                row = {"image_id": image_id(s), "box": d.box.as_list(), "class": CLASSES[d.label],
                       "score": d.score, "open_category": is_open}
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path
