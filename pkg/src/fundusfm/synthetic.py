"""Synthetic fundus-like datasets for desk-scale experiments and tests.

Each generator returns in-memory arrays plus patient grouping, and can be
written to disk as PNGs with a manifest CSV. The classification variants:

- ``mean_shift``: abnormal images are globally brighter. Trivially separable;
  good for fast end-to-end smoke runs.
- ``lesion``: both classes carry bright spots of the same color and roughly
  the same total area; abnormal images have many small ones, normal images a
  single large one. First-order image statistics are further flattened by
  per-channel re-standardization, so globally-pooled random-projection
  features barely separate the classes (full-data probes land ~0.75 AUC,
  tiny-label probes near chance), while a backbone pretrained on a disjoint
  pool of the same family separates them cleanly. That contrast is what the
  transfer comparisons need.

The quadrant variant confines the signal to one recorded quadrant per image
(for localization checks), and the vessel variant draws curvilinear dark
structures with their exact masks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .data import DISEASE_CLASSES, MANIFEST_COLUMNS
from .errors import ConfigError

_DISC_COLOR = np.array([0.82, 0.45, 0.28])  # reddish fundus base
_LESION_COLOR = np.array([0.95, 0.9, 0.45])  # bright exudate-like spots


@dataclass
class ClassificationToy:
    images: np.ndarray          # N x H x W x 3 uint8
    labels: np.ndarray          # N ints; binary or N x 8 multi-hot
    patients: list[str]
    extras: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)


@dataclass
class SegmentationToy:
    images: np.ndarray
    masks: np.ndarray           # N x H x W uint8 in {0, 1}
    patients: list[str]

    def __len__(self):
        return len(self.images)


def fundus_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth reddish disc with low-frequency structure, float in [0, 1]."""
    coarse = rng.random((size // 8 + 1, size // 8 + 1))
    smooth = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)
    yy, xx = np.mgrid[0:size, 0:size]
    center = (size - 1) / 2
    radius = np.hypot(yy - center, xx - center) / (size / 2)
    vignette = np.clip(1.15 - radius ** 2, 0.0, 1.0)
    intensity = (0.55 + 0.35 * smooth) * vignette
    return np.clip(intensity[:, :, None] * _DISC_COLOR, 0.0, 1.0)


def _to_uint8(img01: np.ndarray) -> np.ndarray:
    return np.clip(img01 * 255.0, 0, 255).astype(np.uint8)


def renormalize_image(image: np.ndarray) -> np.ndarray:
    """Per-channel standardization mapped back to uint8 around mid-gray,
    removing global mean/contrast cues while keeping local structure."""
    x = image.astype(np.float64)
    flat = x.reshape(-1, 3)
    std = flat.std(axis=0)
    std[std < 1e-6] = 1.0
    z = (flat - flat.mean(axis=0)) / std
    return np.clip(z * 40.0 + 128.0, 0, 255).astype(np.uint8).reshape(image.shape)


def _draw_spots(img01: np.ndarray, rng: np.random.Generator, n_spots: int,
                radius_range: tuple[int, int], color: np.ndarray,
                region: tuple[int, int, int, int] | None = None) -> None:
    """Blend round bright spots into the float image, in place."""
    size = img01.shape[0]
    y0, y1, x0, x1 = region if region is not None else (0, size, 0, size)
    for _ in range(n_spots):
        r = int(rng.integers(radius_range[0], radius_range[1] + 1))
        cy = int(rng.integers(y0 + r, max(y0 + r + 1, y1 - r)))
        cx = int(rng.integers(x0 + r, max(x0 + r + 1, x1 - r)))
        yy, xx = np.mgrid[0:size, 0:size]
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * (r / 1.5) ** 2)))
        alpha = np.clip(blob, 0, 1)[:, :, None] * 0.85
        img01[:] = img01 * (1 - alpha) + color * alpha


def _patient_ids(n_images: int, images_per_patient: int) -> list[str]:
    return [f"P{idx // images_per_patient:04d}" for idx in range(n_images)]


def generate_abnormality(n_images: int, size: int = 64, seed: int = 0,
                         difficulty: str = "lesion", prevalence: float = 0.5,
                         images_per_patient: int = 2) -> ClassificationToy:
    """Binary normal/abnormal toy set. Labels are assigned per patient."""
    if difficulty not in ("lesion", "mean_shift"):
        raise ConfigError(f"unknown difficulty {difficulty!r}")
    if not (0.0 < prevalence < 1.0):
        raise ConfigError("prevalence must be in (0, 1)")
    rng = np.random.default_rng(seed)
    patients = _patient_ids(n_images, images_per_patient)
    n_patients = len(set(patients))
    abnormal_patients = set(
        rng.permutation(n_patients)[: max(1, round(n_patients * prevalence))])
    images = np.empty((n_images, size, size, 3), dtype=np.uint8)
    labels = np.empty(n_images, dtype=np.int64)
    for i in range(n_images):
        label = int(int(patients[i][1:]) in abnormal_patients)
        img = fundus_texture(rng, size)
        if difficulty == "mean_shift":
            if label:
                img = np.clip(img + 0.18, 0, 1)
        elif label:
            # many small spots ...
            _draw_spots(img, rng, 6,
                        (max(2, size // 32), max(3, size // 21)), _LESION_COLOR)
        else:
            # ... vs one large spot of matched color and total area
            _draw_spots(img, rng, 1,
                        (max(5, size // 11), max(7, size // 9)), _LESION_COLOR)
        u8 = _to_uint8(img)
        images[i] = renormalize_image(u8) if difficulty == "lesion" else u8
        labels[i] = label
    return ClassificationToy(images, labels, patients)


def generate_quadrant(n_images: int, size: int = 128, seed: int = 0,
                      prevalence: float = 0.5,
                      images_per_patient: int = 2) -> ClassificationToy:
    """Abnormal images carry all signal in one quadrant (recorded in
    ``extras['quadrants']``; -1 for normals). Margin keeps the signal away
    from the quadrant boundary."""
    rng = np.random.default_rng(seed)
    patients = _patient_ids(n_images, images_per_patient)
    n_patients = len(set(patients))
    abnormal_patients = set(
        rng.permutation(n_patients)[: max(1, round(n_patients * prevalence))])
    half = size // 2
    margin = max(6, size // 10)
    images = np.empty((n_images, size, size, 3), dtype=np.uint8)
    labels = np.empty(n_images, dtype=np.int64)
    quadrants = np.full(n_images, -1, dtype=np.int64)
    for i in range(n_images):
        label = int(int(patients[i][1:]) in abnormal_patients)
        img = fundus_texture(rng, size)
        if label:
            quadrant = int(rng.integers(0, 4))
            row, col = divmod(quadrant, 2)
            region = (row * half + margin, row * half + half - margin,
                      col * half + margin, col * half + half - margin)
            _draw_spots(img, rng, int(rng.integers(4, 8)),
                        (size // 24, size // 14), _LESION_COLOR, region=region)
            quadrants[i] = quadrant
        images[i] = _to_uint8(img)
        labels[i] = label
    return ClassificationToy(images, labels, patients,
                             extras={"quadrants": quadrants})


# one characteristic spot color per disease class, cycled over image regions
_DISEASE_COLORS = np.array([
    [0.95, 0.90, 0.45], [0.40, 0.85, 0.90], [0.55, 0.95, 0.50],
    [0.90, 0.35, 0.80], [0.35, 0.45, 0.95], [0.95, 0.55, 0.25],
    [0.80, 0.80, 0.95], [0.60, 0.30, 0.30],
])


def generate_multilabel(n_images: int, size: int = 64, seed: int = 0,
                        label_probability: float = 0.25,
                        images_per_patient: int = 2) -> ClassificationToy:
    """Multi-hot toy set: each disease contributes spots of its own color in
    its own image region. Roughly ~20% of images stay normal."""
    rng = np.random.default_rng(seed)
    patients = _patient_ids(n_images, images_per_patient)
    n_classes = len(DISEASE_CLASSES)
    patient_labels: dict[str, np.ndarray] = {}
    images = np.empty((n_images, size, size, 3), dtype=np.uint8)
    labels = np.empty((n_images, n_classes), dtype=np.int64)
    cell = size // 3
    for i in range(n_images):
        pid = patients[i]
        if pid not in patient_labels:
            patient_labels[pid] = (
                rng.random(n_classes) < label_probability).astype(np.int64)
        multihot = patient_labels[pid]
        img = fundus_texture(rng, size)
        for cls in np.flatnonzero(multihot):
            row, col = divmod(int(cls), 3)
            region = (row * cell + 2, row * cell + cell - 2,
                      col * cell + 2, col * cell + cell - 2)
            _draw_spots(img, rng, 2, (max(2, size // 28), max(3, size // 18)),
                        _DISEASE_COLORS[cls], region=region)
        images[i] = _to_uint8(img)
        labels[i] = multihot
    return ClassificationToy(images, labels, patients)


def generate_vessels(n_images: int, size: int = 96, seed: int = 0,
                     images_per_patient: int = 1,
                     thickness: int | None = None) -> SegmentationToy:
    """Dark curvilinear structures on fundus texture, with exact masks."""
    rng = np.random.default_rng(seed)
    patients = _patient_ids(n_images, images_per_patient)
    images = np.empty((n_images, size, size, 3), dtype=np.uint8)
    masks = np.empty((n_images, size, size), dtype=np.uint8)
    if thickness is None:
        thickness = max(2, size // 40)
    for i in range(n_images):
        img = fundus_texture(rng, size)
        mask = np.zeros((size, size), dtype=np.uint8)
        for _ in range(int(rng.integers(2, 5))):
            # random-walk polyline with momentum
            pos = np.array([rng.uniform(0, size), rng.uniform(0, size)])
            heading = rng.uniform(0, 2 * np.pi)
            points = [pos.copy()]
            for _ in range(int(rng.integers(6, 12))):
                heading += rng.uniform(-0.7, 0.7)
                pos = pos + np.array([np.cos(heading), np.sin(heading)]) * (size / 7)
                points.append(pos.copy())
            poly = np.array(points, dtype=np.int32).reshape(-1, 1, 2)
            cv2.polylines(mask, [poly], isClosed=False, color=1,
                          thickness=thickness)
        soft = cv2.GaussianBlur(mask.astype(np.float32), (3, 3), 0)[:, :, None]
        img = img * (1 - 0.65 * np.clip(soft, 0, 1))
        images[i] = _to_uint8(img)
        masks[i] = mask
    return SegmentationToy(images, masks, patients)


def _write_png(path: Path, image_rgb: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    ok = cv2.imwrite(str(path), cv2.cvtColor(image_rgb, cv2.COLOR_RGB2BGR))
    if not ok:
        raise OSError(f"failed to write {path}")


def write_classification(data: ClassificationToy, root: str | Path,
                         name: str = "toy") -> Path:
    """Write PNGs plus a manifest CSV; returns the manifest path."""
    root = Path(root)
    multilabel = data.labels.ndim == 2
    rows = []
    for i in range(len(data)):
        rel = f"images/{name}_{i:05d}.png"
        _write_png(root / rel, data.images[i])
        row = {col: "" for col in MANIFEST_COLUMNS}
        row.update(image_path=rel, patient_id=data.patients[i], quality_flag="ok")
        if multilabel:
            for cls_name, bit in zip(DISEASE_CLASSES, data.labels[i]):
                row[cls_name] = str(int(bit))
        else:
            row["binary_label"] = str(int(data.labels[i]))
        rows.append(row)
    manifest_path = root / f"{name}_manifest.csv"
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(MANIFEST_COLUMNS))
        writer.writeheader()
        writer.writerows(rows)
    return manifest_path


def write_segmentation(data: SegmentationToy, root: str | Path,
                       name: str = "vessels") -> Path:
    root = Path(root)
    rows = []
    for i in range(len(data)):
        rel_img = f"images/{name}_{i:05d}.png"
        rel_mask = f"masks/{name}_{i:05d}.png"
        _write_png(root / rel_img, data.images[i])
        mask_path = root / rel_mask
        mask_path.parent.mkdir(parents=True, exist_ok=True)
        if not cv2.imwrite(str(mask_path), data.masks[i] * 255):
            raise OSError(f"failed to write {mask_path}")
        row = {col: "" for col in MANIFEST_COLUMNS}
        row.update(image_path=rel_img, patient_id=data.patients[i],
                   mask_path=rel_mask, quality_flag="ok")
        rows.append(row)
    manifest_path = root / f"{name}_manifest.csv"
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(MANIFEST_COLUMNS))
        writer.writeheader()
        writer.writerows(rows)
    return manifest_path


def load_image(path: str | Path) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise OSError(f"cannot read image {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def load_mask(path: str | Path) -> np.ndarray:
    gray = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if gray is None:
        raise OSError(f"cannot read mask {path}")
    return (gray > 127).astype(np.uint8)
