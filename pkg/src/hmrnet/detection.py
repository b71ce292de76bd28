"""Dense single-stage detection head, its loss, box decoding and NMS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, ValidationError
from .nn import Module, kaiming_uniform
from .tensor import Tensor

STRIDE = 4
BASE_SIZE = 2 * STRIDE
NMS_IOU = 0.5
SMOOTH_L1_BETA = 1.0
# initial background probability; almost every cell is background
BACKGROUND_PRIOR = 0.99


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate box {self.as_list()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def clipped(self, width: float, height: float) -> BoundingBox:
        return BoundingBox(max(0.0, self.x_min), max(0.0, self.y_min), min(width, self.x_max), min(height, self.y_max))


@dataclass
class Detection:
    box: BoundingBox
    label: int
    score: float
    cell: int = -1


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between K x 4 and L x 4 box arrays."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


class DetectionHead(Module):
    """One 3x3 conv producing K+1 class logits and 4 box offsets per cell."""

    def __init__(self, rng: np.random.Generator, channels: int, num_classes: int, zero_init: bool = False):
        self.num_classes = num_classes
        out = num_classes + 1 + 4
        k = np.zeros((out, channels, 3, 3)) if zero_init else kaiming_uniform(rng, (out, channels, 3, 3), channels * 9) * 0.1
        self.kernel = T.parameter(k)
        bias = np.zeros(out)
        if not zero_init:
            bias[0] = np.log(BACKGROUND_PRIOR * num_classes / (1.0 - BACKGROUND_PRIOR))
        self.bias = T.parameter(bias)

    def __call__(self, fused: Tensor) -> Tensor:
        if fused.shape[-3] != self.kernel.shape[1]:
            raise DimensionError(f"head expects {self.kernel.shape[1]} channels, got {fused.shape[-3]}")
        out = T.conv2d(fused, self.kernel)
        bshape = (-1, 1, 1) if fused.ndim == 3 else (1, -1, 1, 1)
        return out + T.reshape(self.bias, bshape)


def head_forward(head: DetectionHead, fused: Tensor) -> Tensor:
    return head(fused)


def anchors(h: int, w: int) -> np.ndarray:
    """Cell-center anchors (h*w x 2) in pixels, row-major."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([(xs.ravel() + 0.5) * STRIDE, (ys.ravel() + 0.5) * STRIDE], axis=1)


def encode_box(box: BoundingBox, anchor: np.ndarray) -> np.ndarray:
    cx, cy = box.center
    return np.array([(cx - anchor[0]) / BASE_SIZE, (cy - anchor[1]) / BASE_SIZE,
                     np.log(box.width / BASE_SIZE), np.log(box.height / BASE_SIZE)])


def decode_offsets(offsets: np.ndarray, h: int, w: int) -> np.ndarray:
    """Offsets (4 x h x w) to boxes (h*w x 4)."""
    a = anchors(h, w)
    o = offsets.reshape(4, -1).T
    cx = a[:, 0] + o[:, 0] * BASE_SIZE
    cy = a[:, 1] + o[:, 1] * BASE_SIZE
    bw = BASE_SIZE * np.exp(np.clip(o[:, 2], -6, 6))
    bh = BASE_SIZE * np.exp(np.clip(o[:, 3], -6, 6))
    return np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=1)


@dataclass
class Targets:
    labels: np.ndarray      # h*w ints, 0 = background, class c -> c + 1
    offsets: np.ndarray     # h*w x 4
    positive: np.ndarray    # h*w bool


def assign_targets(boxes: list[BoundingBox], classes: list[int], h: int, w: int,
                   image_size: tuple[int, int] | None = None) -> Targets:
    """Center-containment assignment.

    A cell is positive for a box that contains the cell's center; a cell
    inside several boxes takes the one whose center is nearest. A box that
    contains no cell center claims the cell holding its own center.
    """
    image_w, image_h = image_size if image_size is not None else (w * STRIDE, h * STRIDE)
    labels = np.zeros(h * w, dtype=np.int64)
    offsets = np.zeros((h * w, 4))
    positive = np.zeros(h * w, dtype=bool)
    best = np.full(h * w, np.inf)
    a = anchors(h, w)
    for box, cls in zip(boxes, classes):
        if box.x_min < 0 or box.y_min < 0 or box.x_max > image_w or box.y_max > image_h:
            raise ValidationError(f"box {box.as_list()} lies outside the {image_w}x{image_h} image")
        cx, cy = box.center
        inside = np.flatnonzero((a[:, 0] > box.x_min) & (a[:, 0] < box.x_max)
                                & (a[:, 1] > box.y_min) & (a[:, 1] < box.y_max))
        if inside.size == 0:
            col = min(int(cx // STRIDE), w - 1)
            row = min(int(cy // STRIDE), h - 1)
            inside = np.array([row * w + col])
        dist = np.hypot(cx - a[inside, 0], cy - a[inside, 1])
        for cell, d in zip(inside, dist):
            if d < best[cell]:
                best[cell] = d
                labels[cell] = cls + 1
                offsets[cell] = encode_box(box, a[cell])
                positive[cell] = True
    return Targets(labels, offsets, positive)


def detection_loss(predictions: Tensor, targets: list[Targets], num_classes: int) -> Tensor:
    """Mean cross-entropy over all cells plus mean smooth-L1 over matched cells.

    ``predictions`` is (K+1+4) x h x w or N x (K+1+4) x h x w.
    """
    preds = predictions if predictions.ndim == 4 else T.reshape(predictions, (1,) + predictions.shape)
    if isinstance(targets, Targets):
        targets = [targets]
    n, ch, h, w = preds.shape
    k1 = num_classes + 1
    if ch != k1 + 4:
        raise DimensionError(f"expected {k1 + 4} channels, got {ch}")
    flat = T.reshape(T.transpose(preds, (0, 2, 3, 1)), (n * h * w, ch))
    logits = flat[:, :k1]
    offsets = flat[:, k1:]
    labels = np.concatenate([t.labels for t in targets])
    onehot = np.zeros((n * h * w, k1))
    onehot[np.arange(n * h * w), labels] = 1.0
    ce = -T.tsum(T.log_softmax(logits) * Tensor(onehot)) / float(n * h * w)
    positive = np.concatenate([t.positive for t in targets])
    if not positive.any():
        return ce
    rows = np.flatnonzero(positive)
    target_offsets = np.concatenate([t.offsets for t in targets])[rows]
    diff = offsets[rows] - Tensor(target_offsets)
    loc = T.tsum(T.smooth_l1(diff, SMOOTH_L1_BETA)) / float(len(rows))
    return ce + loc


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def class_posteriors(prediction: np.ndarray, num_classes: int) -> np.ndarray:
    """(K+1) x h*w softmax over class logits of one image."""
    k1 = num_classes + 1
    return _softmax(prediction[:k1].reshape(k1, -1), axis=0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = NMS_IOU,
        order: np.ndarray | None = None) -> list[int]:
    """Greedy NMS; returns kept indices in descending-score order.

    Ties in score go to the lower index unless ``order`` is given.
    """
    if order is None:
        order = np.lexsort((np.arange(len(scores)), -scores))
    keep: list[int] = []
    suppressed = np.zeros(len(scores), dtype=bool)
    ious = iou_matrix(boxes, boxes)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] > iou_threshold
    return keep


def decode_and_nms(prediction: np.ndarray, num_classes: int, score_threshold: float = 0.05,
                   iou_threshold: float = NMS_IOU, image_size: tuple[int, int] = (64, 64),
                   max_detections: int = 100) -> list[Detection]:
    """Per-class thresholding and NMS over one image's head output."""
    if not (0 <= score_threshold <= 1 and 0 <= iou_threshold <= 1):
        raise ValidationError("thresholds must lie in [0, 1]")
    pred = prediction.data if isinstance(prediction, Tensor) else np.asarray(prediction)
    _, h, w = pred.shape
    k1 = num_classes + 1
    probs = class_posteriors(pred, num_classes)
    boxes = decode_offsets(pred[k1:], h, w)
    iw, ih = image_size
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, iw)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, ih)
    valid = (boxes[:, 2] - boxes[:, 0] > 1e-6) & (boxes[:, 3] - boxes[:, 1] > 1e-6)
    out: list[Detection] = []
    for c in range(num_classes):
        scores = probs[c + 1]
        cells = np.flatnonzero((scores >= score_threshold) & valid)
        if cells.size == 0:
            continue
        kept = nms(boxes[cells], scores[cells], iou_threshold)
        for k in kept:
            cell = cells[k]
            out.append(Detection(BoundingBox(*boxes[cell]), c, float(scores[cell]), int(cell)))
    out.sort(key=lambda d: (-d.score, d.cell, d.label))
    return out[:max_detections]
