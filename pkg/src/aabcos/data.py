"""Samples, manifests, the synthetic blob dataset, oversampling and k-fold splits."""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .metrics import BoundingBox

log = logging.getLogger(__name__)


@dataclass
class Sample:
    id: str
    image: np.ndarray  # H x W float in [0, 1]
    labels: np.ndarray  # length-K binary vector
    boxes: list[BoundingBox] = field(default_factory=list)
    fold: int = -1
    path: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        for b in self.boxes:
            if not 0 <= b.class_id < len(self.labels) or self.labels[b.class_id] != 1:
                raise ValueError(f"sample {self.id}: box for class {b.class_id} without a positive label")


@dataclass
class Manifest:
    samples: list[Sample]
    num_classes: int
    multiclass: bool = False
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def folds(self) -> np.ndarray:
        return np.array([s.fold for s in self.samples])

    def subset(self, indices) -> "Manifest":
        return Manifest([self.samples[i] for i in indices], self.num_classes, self.multiclass, dict(self.meta))

    def split(self, fold: int) -> tuple["Manifest", "Manifest"]:
        """(train, validation) where validation is the samples assigned to ``fold``."""
        folds = self.folds()
        if np.any(folds < 0):
            raise ValueError("manifest has samples without a fold assignment")
        return (self.subset(np.flatnonzero(folds != fold)), self.subset(np.flatnonzero(folds == fold)))

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])[:, None]

    def label_matrix(self) -> np.ndarray:
        return np.stack([s.labels for s in self.samples])

    def targets(self) -> np.ndarray:
        """Class indices for multi-class manifests, label matrix for multi-label ones."""
        labels = self.label_matrix()
        return labels.argmax(axis=1) if self.multiclass else labels.astype(np.float64)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-sample stream, so generation can run in any order."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


# synthetic data ------------------------------------------------------------

@dataclass
class BlobStyle:
    eccentricity: float
    texture_period: float


def class_styles(k: int) -> list[BlobStyle]:
    return [BlobStyle(eccentricity=1.0 - 0.4 * (c % 3) / 2, texture_period=3.0 + 2.0 * c) for c in range(k)]


def draw_blob(shape, cy, cx, a, b, angle, style: BlobStyle) -> np.ndarray:
    """Textured elliptical blob intensity in [0, 1] (zero outside the ellipse)."""
    yy, xx = np.mgrid[:shape[0], :shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = (dx * ca + dy * sa) / a
    v = (-dx * sa + dy * ca) / b
    r2 = u * u + v * v
    inside = r2 <= 1.0
    texture = 0.85 + 0.15 * np.cos(2 * np.pi * (dx * ca + dy * sa) / style.texture_period)
    return np.where(inside, (1.0 - 0.5 * r2) * texture, 0.0)


def generate_synthetic(n: int, image_size: int = 32, k_classes: int = 1, seed: int = 0,
                       prevalence: float = 0.3, multiclass: bool = False,
                       radius_range: tuple[float, float] = (0.1, 0.17),
                       background: float = 0.3, noise_sigma: float = 0.08,
                       blob_gain: float = 0.55) -> Manifest:
    """Noise images with bright elliptical findings and their bounding boxes.

    Multi-label (default): every class is independently present with
    probability ``prevalence`` and draws 1-2 blobs.  Multi-class: class 0 is
    the normal class (no blob); with probability ``prevalence`` the image
    instead carries one finding class drawn uniformly from 1..K-1.
    ``radius_range`` is the semi-major axis as a fraction of ``image_size``.
    """
    if image_size < 32:
        raise ValueError(f"image_size must be >= 32, got {image_size}")
    if k_classes < 1 or (multiclass and k_classes < 2):
        raise ValueError(f"invalid k_classes={k_classes} for this mode")
    lo, hi = radius_range
    if 2 * hi * image_size + 2 > image_size:
        raise ValueError("blob larger than image")
    styles = class_styles(k_classes)
    samples = []
    for i in range(n):
        rng = sample_rng(seed, i)
        img = np.clip(background + noise_sigma * rng.standard_normal((image_size, image_size)), 0, 1)
        labels = np.zeros(k_classes, dtype=np.int64)
        if multiclass:
            if rng.random() < prevalence:
                labels[rng.integers(1, k_classes)] = 1
            else:
                labels[0] = 1
            finding_classes = [c for c in np.flatnonzero(labels) if c > 0]
        else:
            labels[:] = rng.random(k_classes) < prevalence
            finding_classes = list(np.flatnonzero(labels))
        boxes = []
        for c in finding_classes:
            for _ in range(rng.integers(1, 3)):
                blob, box = _place_blob(rng, image_size, lo, hi, styles[c], int(c))
                img = np.clip(img + blob_gain * blob, 0, 1)
                boxes.append(box)
        img = np.round(img * 255) / 255
        samples.append(Sample(f"s{i:05d}", img, labels, boxes))
    meta = {"seed": seed, "n": n, "image_size": image_size, "k_classes": k_classes,
            "prevalence": prevalence, "multiclass": int(multiclass)}
    return Manifest(samples, k_classes, multiclass, meta)


def _place_blob(rng, size, lo, hi, style, class_id):
    a = rng.uniform(lo, hi) * size
    b = a * style.eccentricity
    angle = rng.uniform(0, np.pi)
    # half extents of the rotated ellipse
    ey = np.sqrt((a * np.sin(angle)) ** 2 + (b * np.cos(angle)) ** 2)
    ex = np.sqrt((a * np.cos(angle)) ** 2 + (b * np.sin(angle)) ** 2)
    cy = rng.uniform(ey + 1, size - ey - 1)
    cx = rng.uniform(ex + 1, size - ex - 1)
    blob = draw_blob((size, size), cy, cx, a, b, angle, style)
    ys, xs = np.nonzero(blob)
    box = BoundingBox(int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1),
                      int(ys.max() - ys.min() + 1), class_id)
    return blob, box


# oversampling / folds ------------------------------------------------------

def oversample(manifest: Manifest, class_id: int | None = None, seed: int = 0) -> Manifest:
    """Duplicate minority samples (positive vs negative for ``class_id``) until balanced.

    ``class_id=None`` targets the rarest positive class.  Duplicates are drawn
    round-robin from a seeded shuffle of the minority and get ``#dupN`` id
    suffixes; the resulting counts are stored in ``meta``.
    """
    labels = manifest.label_matrix()
    if class_id is None:
        class_id = int(np.argmin(labels.sum(axis=0)))
    pos = np.flatnonzero(labels[:, class_id] == 1)
    neg = np.flatnonzero(labels[:, class_id] == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError(f"class {class_id} needs both positive and negative samples")
    minority, majority = (pos, neg) if len(pos) < len(neg) else (neg, pos)
    order = np.random.default_rng(seed).permutation(minority)
    samples = list(manifest.samples)
    for k in range(len(majority) - len(minority)):
        src = manifest.samples[order[k % len(order)]]
        samples.append(replace(src, id=f"{src.id}#dup{k // len(order) + 1}"))
    meta = dict(manifest.meta)
    meta.update({"oversample_class": class_id, "count_before": f"{len(pos)}/{len(neg)}",
                 "count_after": f"{max(len(pos), len(neg))}/{max(len(pos), len(neg))}"})
    return Manifest(samples, manifest.num_classes, manifest.multiclass, meta)


def kfold_split(manifest: Manifest, k: int = 5, seed: int = 0) -> np.ndarray:
    """Stratified fold ids: samples grouped by label vector, shuffled, dealt round-robin."""
    n = len(manifest)
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(manifest.samples):
        key = hashlib.sha1(s.labels.tobytes()).hexdigest()
        groups.setdefault(key, []).append(i)
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    cursor = 0
    for key in sorted(groups):
        for i in rng.permutation(groups[key]):
            folds[i] = cursor % k
            cursor += 1
    return folds


def assign_folds(manifest: Manifest, folds) -> Manifest:
    for s, f in zip(manifest.samples, folds):
        s.fold = int(f)
    return manifest


# files ----------------------------------------------------------------------

def _format_boxes(boxes) -> str:
    return ";".join(f"{b.class_id}:{b.x}:{b.y}:{b.w}:{b.h}" for b in boxes)


def _parse_boxes(text: str) -> list[BoundingBox]:
    boxes = []
    for item in filter(None, text.split(";")):
        c, x, y, w, h = (int(v) for v in item.split(":"))
        boxes.append(BoundingBox(x, y, w, h, c))
    return boxes


class DataError(ValueError):
    """Malformed manifest or image file."""


def save_manifest(manifest: Manifest, directory) -> Path:
    """Write ``images/*.png``, ``manifest.csv`` and ``dataset.meta`` under ``directory``."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    path = directory / "manifest.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "path", "labels", "boxes", "fold"])
        for s in manifest.samples:
            rel = f"images/{s.id.split('#')[0]}.png"
            if not (directory / rel).exists() or "#" not in s.id:
                Image.fromarray(np.round(s.image * 255).astype(np.uint8), mode="L").save(directory / rel)
            labels = ";".join(str(c) for c in np.flatnonzero(s.labels))
            w.writerow([s.id, rel, labels, _format_boxes(s.boxes), s.fold])
    meta = dict(manifest.meta, num_classes=manifest.num_classes, multiclass=int(manifest.multiclass))
    (directory / "dataset.meta").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    return path


def read_meta(path) -> dict:
    meta = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value")
        k, _, v = line.partition("=")
        meta[k.strip()] = v.strip()
    return meta


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def load_manifest(path) -> Manifest:
    """Read ``manifest.csv`` (or a directory containing it) plus an optional ``dataset.meta``."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    root = path.parent
    meta = read_meta(root / "dataset.meta") if (root / "dataset.meta").exists() else {}
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "path", "labels", "boxes", "fold"]:
            raise DataError(f"{path}: header must be id,path,labels,boxes,fold")
        for lineno, row in enumerate(reader, 2):
            try:
                labels = [int(c) for c in row["labels"].split(";") if c != ""]
                boxes = _parse_boxes(row["boxes"])
                fold = int(row["fold"]) if row["fold"] != "" else -1
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            rows.append((row["id"], row["path"], labels, boxes, fold, lineno))
    k = int(meta.get("num_classes", 0)) or 1 + max(
        [c for r in rows for c in r[2]] + [b.class_id for r in rows for b in r[3]] + [0])
    samples = []
    cache: dict[str, np.ndarray] = {}
    for sid, rel, labels, boxes, fold, lineno in rows:
        vec = np.zeros(k, dtype=np.int64)
        vec[labels] = 1
        img_path = root / rel
        if rel not in cache:
            if not img_path.exists():
                raise DataError(f"{path}:{lineno}: image {rel} not found")
            cache[rel] = load_image(img_path)
        try:
            s = Sample(sid, cache[rel], vec, boxes, fold, rel)
            for b in boxes:
                b.check_within(*s.image.shape)
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        samples.append(s)
    multiclass = bool(int(meta.get("multiclass", 0)))
    return Manifest(samples, k, multiclass, meta)
