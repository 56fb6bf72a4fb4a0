"""Dataset manifests, label schemas, patient-grouped CV splits, and the
data-fraction sampler.

Manifest CSV schema (header required, empty cell = absent):

    image_path,patient_id,binary_label,amd,glaucoma,glaucoma_suspect,dr,pm,
    erm,rvo,other,mask_path,quality_flag

Relative image/mask paths resolve against the manifest's directory. Records
flagged ``excluded`` are kept for auditability but never enter splits or
samples.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ManifestError

DISEASE_CLASSES = ("amd", "glaucoma", "glaucoma_suspect", "dr", "pm", "erm", "rvo", "other")
REPORTED_DISEASE_CLASSES = DISEASE_CLASSES[:7]  # "other" is trained but not reported

TASK_KINDS = ("abnormality", "multi_disease", "vessel_segmentation")

MANIFEST_COLUMNS = ("image_path", "patient_id", "binary_label", *DISEASE_CLASSES,
                    "mask_path", "quality_flag")

NORMAL, ABNORMAL = 0, 1


@dataclass(frozen=True)
class FundusRecord:
    """One image: patient id, optional labels, optional segmentation mask."""

    image_path: str
    patient_id: str
    binary_label: int | None = None
    disease_labels: tuple[int, ...] | None = None
    mask_path: str | None = None
    quality_flag: str = "ok"

    def __post_init__(self):
        if self.quality_flag not in ("ok", "excluded"):
            raise ManifestError(f"quality_flag must be ok/excluded, got {self.quality_flag!r}")
        if self.binary_label is not None and self.binary_label not in (NORMAL, ABNORMAL):
            raise ManifestError(f"binary_label must be 0/1, got {self.binary_label!r}")
        if self.disease_labels is not None:
            if len(self.disease_labels) != len(DISEASE_CLASSES):
                raise ManifestError(
                    f"disease_labels needs {len(DISEASE_CLASSES)} entries, "
                    f"got {len(self.disease_labels)}")
            if any(v not in (0, 1) for v in self.disease_labels):
                raise ManifestError("disease_labels must be multi-hot 0/1")
            if self.binary_label == NORMAL and any(self.disease_labels):
                raise ManifestError(
                    "record labeled normal cannot carry disease labels")
        if self.binary_label is None and self.disease_labels is None and self.mask_path is None:
            raise ManifestError(
                "record needs at least one of binary_label, disease_labels, mask_path")

    @property
    def usable(self) -> bool:
        return self.quality_flag == "ok"

    @property
    def any_abnormal(self) -> bool:
        """Stratification key: binary abnormal, or any disease class set."""
        if self.binary_label is not None:
            return self.binary_label == ABNORMAL
        if self.disease_labels is not None:
            return any(self.disease_labels)
        return False

    def multihot(self) -> np.ndarray:
        if self.disease_labels is not None:
            return np.asarray(self.disease_labels, dtype=np.float32)
        return np.zeros(len(DISEASE_CLASSES), dtype=np.float32)


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    task_kind: str
    records: tuple[FundusRecord, ...]
    root: str = "."
    class_prevalence: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ManifestError(f"unknown task_kind {self.task_kind!r}")
        if self.task_kind == "vessel_segmentation":
            missing = [i for i, r in enumerate(self.records)
                       if r.usable and r.mask_path is None]
            if missing:
                raise ManifestError(
                    f"segmentation manifest {self.name!r} has usable records "
                    f"without mask_path at indices {missing}")
        computed = compute_prevalence(self.records)
        if self.class_prevalence:
            if dict(self.class_prevalence) != computed:
                raise ManifestError(
                    f"cached class_prevalence disagrees with recount for {self.name!r}")
        else:
            object.__setattr__(self, "class_prevalence", computed)

    def usable_indices(self) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.usable]

    def resolve_image(self, record: FundusRecord) -> Path:
        return Path(self.root) / record.image_path

    def resolve_mask(self, record: FundusRecord) -> Path:
        if record.mask_path is None:
            raise ManifestError(f"record {record.image_path!r} has no mask")
        return Path(self.root) / record.mask_path


def compute_prevalence(records) -> dict:
    """Counts of normal/abnormal plus per-disease positives over usable records."""
    counts: dict[str, int] = {"normal": 0, "abnormal": 0}
    for name in DISEASE_CLASSES:
        counts[name] = 0
    for rec in records:
        if not rec.usable:
            continue
        if rec.binary_label is not None or rec.disease_labels is not None:
            counts["abnormal" if rec.any_abnormal else "normal"] += 1
        if rec.disease_labels is not None:
            for name, v in zip(DISEASE_CLASSES, rec.disease_labels):
                counts[name] += int(v)
    return counts


def _parse_cell(value: str | None) -> str | None:
    if value is None:
        return None
    value = value.strip()
    return value or None


def load_manifest(path, task_kind: str, name: str | None = None,
                  column_mapping: dict | None = None) -> DatasetManifest:
    """Parse a manifest CSV. Parse errors name the offending line.

    ``column_mapping`` maps foreign header names onto canonical ones for
    external datasets ({"foreign_col": "canonical_col"}); several foreign
    disease columns may map to one canonical class (logical OR). Unmapped
    foreign columns are ignored. Mapping is always explicit, never by name
    similarity.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if column_mapping:
            unknown = [c for c in column_mapping.values() if c not in MANIFEST_COLUMNS]
            if unknown:
                raise ManifestError(f"mapping targets unknown columns: {unknown}")
        else:
            missing = [c for c in MANIFEST_COLUMNS if c not in header]
            if missing:
                raise ManifestError(
                    f"{path.name}: header missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            if column_mapping:
                mapped: dict[str, list] = defaultdict(list)
                for src, dst in column_mapping.items():
                    if src in row:
                        mapped[dst].append(_parse_cell(row.get(src)))
                row = {dst: _merge_mapped_cells(dst, cells)
                       for dst, cells in mapped.items()}
            try:
                records.append(_record_from_row(row))
            except (ManifestError, ValueError) as exc:
                raise ManifestError(f"{path.name}:{lineno}: {exc}") from exc
    manifest = DatasetManifest(name=name or path.stem, task_kind=task_kind,
                               records=tuple(records), root=str(path.parent))
    return manifest


def _merge_mapped_cells(dst: str, cells: list) -> str | None:
    cells = [c for c in cells if c is not None]
    if not cells:
        return None
    if dst in DISEASE_CLASSES or dst == "binary_label":
        return "1" if any(c == "1" for c in cells) else "0"
    if len(cells) > 1:
        raise ManifestError(f"multiple foreign columns map to {dst!r}")
    return cells[0]


def _record_from_row(row: dict) -> FundusRecord:
    image_path = _parse_cell(row.get("image_path"))
    patient_id = _parse_cell(row.get("patient_id"))
    if not image_path or not patient_id:
        raise ManifestError("image_path and patient_id are required")

    binary_raw = _parse_cell(row.get("binary_label"))
    binary_label = int(binary_raw) if binary_raw is not None else None

    disease_cells = [_parse_cell(row.get(c)) for c in DISEASE_CLASSES]
    if all(c is None for c in disease_cells):
        disease_labels = None
    else:
        disease_labels = tuple(int(c) if c is not None else 0 for c in disease_cells)

    return FundusRecord(
        image_path=image_path,
        patient_id=patient_id,
        binary_label=binary_label,
        disease_labels=disease_labels,
        mask_path=_parse_cell(row.get("mask_path")),
        quality_flag=_parse_cell(row.get("quality_flag")) or "ok",
    )


def save_manifest(manifest: DatasetManifest, path) -> Path:
    """Write a manifest back to CSV; load(save(m)) is record-wise equal to m."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for rec in manifest.records:
            disease = rec.disease_labels if rec.disease_labels is not None \
                else [""] * len(DISEASE_CLASSES)
            writer.writerow([
                rec.image_path,
                rec.patient_id,
                "" if rec.binary_label is None else rec.binary_label,
                *disease,
                rec.mask_path or "",
                rec.quality_flag,
            ])
    return path


@dataclass(frozen=True)
class SplitPlan:
    """Fold assignment for the usable records of one manifest."""

    n_folds: int
    seed: int
    grouping: str
    assignments: dict[int, int]  # record index -> fold index

    def fold_indices(self, fold: int) -> list[int]:
        return sorted(i for i, f in self.assignments.items() if f == fold)

    def train_indices(self, fold: int) -> list[int]:
        return sorted(i for i, f in self.assignments.items() if f != fold)

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "n_folds": self.n_folds,
            "grouping": self.grouping,
            "assignments": {str(k): v for k, v in sorted(self.assignments.items())},
        }, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        d = json.loads(text)
        return cls(n_folds=d["n_folds"], seed=d["seed"], grouping=d["grouping"],
                   assignments={int(k): v for k, v in d["assignments"].items()})


def make_splits(manifest: DatasetManifest, n_folds: int = 5, seed: int = 0,
                grouping: str = "patient") -> SplitPlan:
    """Stratified k-fold split at group level.

    Groups are patients (default) or single images. Group label for
    stratification is "any record abnormal". Groups of each class are dealt
    round-robin after a seeded shuffle of a lexicographically pre-sorted
    order, so fold membership is deterministic and survives record
    reordering. Per-fold positive-group counts land within one of the ideal.
    """
    if grouping not in ("patient", "image"):
        raise ConfigError(f"grouping must be patient/image, got {grouping!r}")
    if n_folds < 2:
        raise ConfigError("n_folds must be >= 2")

    groups: dict[str, list[int]] = defaultdict(list)
    for idx, rec in enumerate(manifest.records):
        if not rec.usable:
            continue
        key = rec.patient_id if grouping == "patient" else f"{rec.patient_id}//{rec.image_path}"
        groups[key].append(idx)
    if not groups:
        raise ConfigError("no usable records to split")
    if len(groups) < n_folds:
        # a single patient's images must never cross folds, even when that
        # leaves some folds empty
        warnings.warn(
            f"only {len(groups)} groups for {n_folds} folds; some folds will be empty")

    pos_groups, neg_groups = [], []
    for key in sorted(groups):
        indices = groups[key]
        is_pos = any(manifest.records[i].any_abnormal for i in indices)
        (pos_groups if is_pos else neg_groups).append(key)

    rng = np.random.default_rng(seed)
    assignments: dict[int, int] = {}
    fold_sizes = [0] * n_folds
    for bucket in (pos_groups, neg_groups):
        order = list(bucket)
        rng.shuffle(order)
        # start each class at the currently lightest fold so sizes stay even
        start = int(np.argmin(fold_sizes))
        for j, key in enumerate(order):
            fold = (start + j) % n_folds
            for idx in groups[key]:
                assignments[idx] = fold
                fold_sizes[fold] += 1
    return SplitPlan(n_folds=n_folds, seed=seed, grouping=grouping,
                     assignments=assignments)


def sample_fraction(manifest: DatasetManifest, train_indices, fraction: float,
                    seed: int = 0) -> list[int]:
    """Stratified subsample of a training pool for data-fraction stress tests.

    Returns ceil(fraction * pool) record indices with per-class counts
    proportional to pool prevalence within one, keeping at least one sample of
    every class present in the pool. fraction = 1.0 returns the full pool.
    """
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    pool = [i for i in train_indices if manifest.records[i].usable]
    if not pool:
        raise ConfigError("empty training pool")
    if fraction == 1.0:
        return sorted(pool)

    by_class: dict[bool, list[int]] = defaultdict(list)
    for i in sorted(pool):
        by_class[manifest.records[i].any_abnormal].append(i)

    total = math.ceil(fraction * len(pool))
    classes = sorted(by_class)  # False (normal) first, stable
    quotas = _largest_remainder_quotas(
        [fraction * len(by_class[c]) for c in classes], total)

    # floor: keep every class present in the pool represented; when no donor
    # class can spare a sample the total grows past ceil(fraction * pool)
    for k, c in enumerate(classes):
        if quotas[k] == 0:
            warnings.warn(
                f"fraction {fraction} would drop class {'abnormal' if c else 'normal'}; "
                "keeping one sample")
            quotas[k] = 1
            donors = [j for j in range(len(quotas)) if quotas[j] > 1]
            if donors:
                quotas[max(donors, key=lambda j: quotas[j])] -= 1

    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for k, c in enumerate(classes):
        members = np.array(by_class[c])
        take = min(int(quotas[k]), len(members))
        chosen.extend(rng.choice(members, size=take, replace=False).tolist())
    return sorted(chosen)


def _largest_remainder_quotas(targets: list[float], total: int) -> list[int]:
    floors = [int(math.floor(t)) for t in targets]
    remainder = total - sum(floors)
    order = sorted(range(len(targets)), key=lambda k: (-(targets[k] - floors[k]), k))
    for k in order[:remainder]:
        floors[k] += 1
    return floors


def relabel_to_binary(manifest: DatasetManifest) -> DatasetManifest:
    """Collapse disease labels to any-abnormal for binary evaluation."""
    new_records = []
    for rec in manifest.records:
        if rec.disease_labels is not None:
            label = rec.binary_label
            if label is None:
                label = ABNORMAL if any(rec.disease_labels) else NORMAL
            rec = replace(rec, binary_label=label, disease_labels=None)
        new_records.append(rec)
    return DatasetManifest(name=manifest.name, task_kind="abnormality",
                           records=tuple(new_records), root=manifest.root)
