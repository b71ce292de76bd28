"""Deterministic multi-domain synthetic detection scenes."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .detection import BoundingBox
from .errors import ConfigurationError, ValidationError
from .tensor import read_tensor, write_tensor

IMAGE_SIZE = 64
CLASSES = ("square", "disk", "triangle", "bar", "ring", "cross")
DEFAULT_UNSEEN = ("ring", "cross")
MANIFEST_SCHEMA = "hmrnet.manifest/1"
MAX_PLACEMENT_TRIES = 100


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    name: str
    base_color: tuple[float, float, float]
    noise: float
    pattern: str
    scale_range: tuple[int, int]
    palette: tuple[int, ...]
    objects_range: tuple[int, int]

    def with_palette(self, palette) -> DomainSpec:
        return replace(self, palette=tuple(sorted(palette)))


DEFAULT_DOMAINS = (
    DomainSpec(0, "urban", (0.46, 0.46, 0.50), 0.04, "stripes", (8, 14), (0, 1, 2, 3, 4, 5), (2, 5)),
    DomainSpec(1, "vegetation", (0.18, 0.42, 0.16), 0.10, "blobs", (10, 18), (0, 1, 2, 3, 4, 5), (1, 4)),
    DomainSpec(2, "coastal", (0.12, 0.28, 0.56), 0.03, "waves", (6, 11), (0, 1, 2, 3, 4, 5), (2, 6)),
    DomainSpec(3, "desert", (0.74, 0.63, 0.40), 0.07, "speckle", (12, 20), (0, 1, 2, 3, 4, 5), (1, 3)),
)


@dataclass
class SceneSample:
    image: np.ndarray                      # 3 x 64 x 64 in [0, 1]
    boxes: list[BoundingBox]
    classes: list[int]
    domain: int
    seed: int

    def annotations(self) -> list[dict]:
        return [{"box": b.as_list(), "class": c} for b, c in zip(self.boxes, self.classes)]


def _background(spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    size = IMAGE_SIZE
    ys, xs = np.mgrid[0:size, 0:size] / size
    base = np.asarray(spec.base_color)[:, None, None] * np.ones((3, size, size))
    if spec.pattern == "stripes":
        period = rng.uniform(6, 10) / size
        angle = rng.uniform(0, np.pi)
        t = xs * np.cos(angle) + ys * np.sin(angle)
        texture = 0.08 * np.sign(np.sin(2 * np.pi * t / period))
    elif spec.pattern == "blobs":
        texture = np.zeros((size, size))
        for _ in range(6):
            cx, cy, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.08, 0.2)
            texture += 0.12 * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * r * r))
        texture -= texture.mean()
    elif spec.pattern == "waves":
        phase = rng.uniform(0, 2 * np.pi)
        texture = 0.06 * np.sin(2 * np.pi * 3 * ys + phase + 2 * np.sin(2 * np.pi * xs))
    elif spec.pattern == "speckle":
        texture = 0.1 * (rng.random((size, size)) < 0.05)
    else:
        raise ConfigurationError(f"unknown background pattern {spec.pattern!r}")
    img = base + texture[None] + rng.normal(0.0, spec.noise, (3, size, size))
    return img


def _shape_mask(cls: int, w: int, h: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    name = CLASSES[cls]
    if name in ("square", "bar"):
        return np.ones((h, w), dtype=bool)
    rx, ry = w / 2.0, h / 2.0
    d2 = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2
    if name == "disk":
        return d2 <= 1.0
    if name == "ring":
        return (d2 <= 1.0) & (d2 >= 0.35)
    if name == "triangle":
        half = (ys + 1) / h * (w / 2.0)
        return np.abs(xs - cx) <= half
    if name == "cross":
        arm_w = max(2, w // 3)
        arm_h = max(2, h // 3)
        return (np.abs(xs - cx) < arm_w / 2.0) | (np.abs(ys - cy) < arm_h / 2.0)
    raise ValidationError(f"unknown class id {cls}")


def _object_extent(cls: int, size: int, rng: np.random.Generator) -> tuple[int, int]:
    if CLASSES[cls] == "bar":
        thin = max(3, size // 3)
        return (size, thin) if rng.random() < 0.5 else (thin, size)
    return size, size


def generate_scene(spec: DomainSpec, seed: int) -> SceneSample:
    """Render one scene; identical (spec, seed) pairs give identical bytes."""
    rng = np.random.default_rng([spec.domain_id, int(seed)])
    image = _background(spec, rng)
    lo, hi = spec.objects_range
    count = int(rng.integers(lo, hi + 1)) if hi > 0 and spec.palette else 0
    boxes: list[BoundingBox] = []
    classes: list[int] = []
    occupied: list[tuple[int, int, int, int]] = []
    for _ in range(count):
        cls = int(spec.palette[rng.integers(len(spec.palette))])
        size = int(rng.integers(spec.scale_range[0], spec.scale_range[1] + 1))
        w, h = _object_extent(cls, size, rng)
        placed = False
        for _ in range(MAX_PLACEMENT_TRIES):
            x0 = int(rng.integers(0, IMAGE_SIZE - w + 1))
            y0 = int(rng.integers(0, IMAGE_SIZE - h + 1))
            if all(x0 + w + 1 <= a or a2 + 1 <= x0 or y0 + h + 1 <= b or b2 + 1 <= y0
                   for a, b, a2, b2 in occupied):
                placed = True
                break
        if not placed:
            continue
        mask = _shape_mask(cls, w, h)
        ys, xs = np.nonzero(mask)
        if ys.size == 0:
            continue
        base = np.asarray(spec.base_color)
        color = np.clip(np.where(base < 0.5, base + 0.4, base - 0.4) + rng.uniform(-0.15, 0.15, 3), 0.0, 1.0)
        region = image[:, y0:y0 + h, x0:x0 + w]
        region[:, mask] = color[:, None] + rng.normal(0.0, spec.noise * 0.5, (3, int(mask.sum())))
        occupied.append((x0, y0, x0 + w, y0 + h))
        boxes.append(BoundingBox(float(x0 + xs.min()), float(y0 + ys.min()),
                                 float(x0 + xs.max() + 1), float(y0 + ys.max() + 1)))
        classes.append(cls)
    return SceneSample(np.clip(image, 0.0, 1.0), boxes, classes, spec.domain_id, int(seed))


# -- splits ---------------------------------------------------------------


@dataclass
class SplitConfig:
    train_per_domain: int = 96
    val_per_domain: int = 8
    test_per_domain: int = 32
    zsd_per_domain: int = 32
    seed: int = 0
    domains: tuple[int, ...] = (0, 1, 2, 3)
    unseen: tuple[str, ...] = DEFAULT_UNSEEN
    holdout_domain: int | None = None

    def seen(self) -> tuple[str, ...]:
        return tuple(c for c in CLASSES if c not in self.unseen)

    def validate(self) -> None:
        unknown = [c for c in self.unseen if c not in CLASSES]
        if unknown:
            raise ConfigurationError(f"unknown unseen classes {unknown}")
        if set(self.unseen) & set(self.seen()):
            raise ConfigurationError("seen and unseen class sets overlap")
        if self.holdout_domain is not None and self.holdout_domain not in self.domains:
            raise ConfigurationError(f"holdout domain {self.holdout_domain} is not among {self.domains}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


SPLIT_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000, "zsd": 3_000_000}


def _entries(config: SplitConfig, split: str, domains, per_domain: int, classes: list[int]) -> list[dict]:
    base = config.seed * 10_000_000 + SPLIT_OFFSETS[split]
    out = []
    for d in domains:
        palette = [c for c in DEFAULT_DOMAINS[d].palette if c in classes]
        for i in range(per_domain):
            out.append({"domain": int(d), "seed": base + d * 100_000 + i, "classes": palette})
    return out


def make_splits(config: SplitConfig) -> dict[str, dict]:
    """Train/val/test/zsd manifests; unseen classes occur only in ``zsd``."""
    config.validate()
    seen_ids = [CLASSES.index(c) for c in config.seen()]
    unseen_ids = [CLASSES.index(c) for c in config.unseen]
    train_domains = [d for d in config.domains if d != config.holdout_domain]
    manifests = {}
    for split, per, domains in (("train", config.train_per_domain, train_domains),
                                ("val", config.val_per_domain, train_domains),
                                ("test", config.test_per_domain, config.domains)):
        manifests[split] = _manifest(config, split, _entries(config, split, domains, per, seen_ids))
    zsd = _entries(config, "zsd", config.domains, config.zsd_per_domain, seen_ids + unseen_ids) if unseen_ids else []
    manifests["zsd"] = _manifest(config, "zsd", zsd)
    return manifests


def _manifest(config: SplitConfig, split: str, entries: list[dict]) -> dict:
    return {"schema": MANIFEST_SCHEMA, "split": split, "config": asdict(config),
            "seen": list(config.seen()), "unseen": list(config.unseen), "entries": entries}


def manifest_digest(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()


def scene_from_entry(entry: dict) -> SceneSample:
    spec = DEFAULT_DOMAINS[entry["domain"]].with_palette(entry["classes"])
    return generate_scene(spec, entry["seed"])


def load_scenes(manifest: dict) -> list[SceneSample]:
    return [scene_from_entry(e) for e in manifest["entries"]]


def save_manifest(manifest: dict, path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_manifest(path) -> dict:
    manifest = json.loads(Path(path).read_text())
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise ValidationError(f"{path} is not a {MANIFEST_SCHEMA} manifest")
    return manifest


def materialize(manifests: dict[str, dict], out_dir) -> Path:
    """Write manifests, image tensors and annotation JSON under ``out_dir``."""
    out = Path(out_dir)
    for split, manifest in manifests.items():
        split_dir = out / split
        split_dir.mkdir(parents=True, exist_ok=True)
        save_manifest(manifest, out / f"{split}.json")
        for entry in manifest["entries"]:
            scene = scene_from_entry(entry)
            stem = f"d{scene.domain}_s{scene.seed}"
            write_tensor(split_dir / f"{stem}.bin", scene.image, stem)
            (split_dir / f"{stem}.json").write_text(json.dumps(
                {"domain": scene.domain, "seed": scene.seed, "annotations": scene.annotations()}, sort_keys=True))
    return out


def read_scene(image_path) -> SceneSample:
    image, _ = read_tensor(image_path)
    meta = json.loads(Path(image_path).with_suffix(".json").read_text())
    boxes = [BoundingBox(*a["box"]) for a in meta["annotations"]]
    return SceneSample(image, boxes, [a["class"] for a in meta["annotations"]], meta["domain"], meta["seed"])


def default_prompts(unseen=DEFAULT_UNSEEN) -> list[tuple[str, str, int | None]]:
    """(text, seen/unseen, class id or None) for the default prompt pool.

    Prompts without a class id describe background context.
    """
    rows: list[tuple[str, str, int | None]] = []
    for cid, name in enumerate(CLASSES):
        tag = "unseen" if name in unseen else "seen"
        rows.append((name, tag, cid))
        rows.append((f"a {name} shaped object", tag, cid))
    for text in ("background", "open ground", "textured terrain", "empty field"):
        rows.append((text, "seen", None))
    return rows


def prompt_class(text: str) -> int | None:
    """Class named by a prompt: the first class word it contains, else None."""
    words = text.lower().replace(",", " ").split()
    for cid, name in enumerate(CLASSES):
        if name in words:
            return cid
    return None
