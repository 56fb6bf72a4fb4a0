"""Training engine: LP/FT protocols, early stopping, upstream pretraining.

``train`` runs one model to its best validation epoch and returns those
weights together with a per-epoch ``TrainingLog``. ``pretrain_upstream``
wraps it for the two-stage pretraining contract and writes the resulting
backbone into the checkpoint store.
"""

from __future__ import annotations

import copy
import json
import time
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .checkpoints import (CheckpointStore, bundle_blobs, module_checksum,
                          upstream_checkpoint_id)
from .data import DatasetManifest, DISEASE_CLASSES
from .errors import ConfigError, DataError, MetricUndefinedError, TrainingDivergedError
from .losses import (dice_loss, inverse_prevalence_weights,
                     per_label_cross_entropy, weighted_cross_entropy)
from .models import ModelBundle, build_model, derive_seed, to_model_input
from .preprocess import PreprocessConfig, preprocess, preprocess_pair
from .synthetic import load_image, load_mask

PROTOCOLS = ("full_train", "linear_probe", "fine_tune")
LOSSES = ("weighted_cross_entropy", "per_label_cross_entropy", "dice_loss")
LOSS_FOR_TASK = {
    "abnormality": "weighted_cross_entropy",
    "multi_disease": "per_label_cross_entropy",
    "vessel_segmentation": "dice_loss",
}


@dataclass(frozen=True)
class TrainSpec:
    learning_rate: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)  # "momentum 0.9" read as beta1
    weight_decay: float = 1e-5
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    protocol: str = "full_train"
    loss: str | None = None            # inferred from the task when None
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.loss is not None and self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("batch_size/max_epochs must be >= 1, patience >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.class_weights is not None:
            if any(w <= 0 for w in self.class_weights):
                raise ConfigError("class weights must be strictly positive")
            object.__setattr__(self, "class_weights", tuple(self.class_weights))
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        if self.class_weights is not None:
            d["class_weights"] = list(self.class_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSpec":
        d = dict(d)
        d["betas"] = tuple(d.get("betas", (0.9, 0.999)))
        if d.get("class_weights") is not None:
            d["class_weights"] = tuple(d["class_weights"])
        return cls(**d)


@dataclass
class TrainingLog:
    entries: list = field(default_factory=list)
    best_epoch: int = -1
    best_monitor: float = float("-inf")
    stopped_early: bool = False

    def append(self, epoch: int, train_loss: float, val_monitor: float,
               lr: float, wall_seconds: float) -> None:
        self.entries.append({"epoch": epoch, "train_loss": train_loss,
                             "val_monitor": val_monitor, "lr": lr,
                             "wall_seconds": wall_seconds})

    @property
    def loss_sequence(self) -> list:
        return [e["train_loss"] for e in self.entries]

    @property
    def monitor_sequence(self) -> list:
        return [e["val_monitor"] for e in self.entries]

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for entry in self.entries:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "TrainingLog":
        log = cls()
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    log.entries.append(json.loads(line))
        if log.entries:
            best = max(log.entries, key=lambda e: e["val_monitor"])
            log.best_epoch = best["epoch"]
            log.best_monitor = best["val_monitor"]
        return log


@dataclass
class Samples:
    """In-memory training data: raw uint8 images plus per-task targets
    (binary labels, multi-hot rows, or masks)."""
    images: np.ndarray | list
    targets: np.ndarray | list
    task_kind: str

    def __post_init__(self):
        if len(self.images) != len(self.targets):
            raise DataError("images and targets must align")
        if len(self.images) == 0:
            raise DataError("empty sample set")

    def __len__(self):
        return len(self.images)


def samples_from_manifest(manifest: DatasetManifest,
                          indices=None) -> Samples:
    """Load the referenced images (and masks) for the given record indices."""
    if indices is None:
        indices = manifest.usable_indices()
    images, targets = [], []
    for idx in indices:
        record = manifest.records[idx]
        images.append(load_image(manifest.resolve_image(record)))
        if manifest.task_kind == "vessel_segmentation":
            targets.append(load_mask(manifest.resolve_mask(record)))
        elif manifest.task_kind == "multi_disease":
            targets.append(record.multihot())
        else:
            label = (record.binary_label if record.binary_label is not None
                     else int(record.any_abnormal))
            targets.append(label)
    shapes = {img.shape for img in images}
    if len(shapes) == 1:
        images = np.stack(images)
    if manifest.task_kind != "vessel_segmentation":
        targets = np.asarray(targets)
    elif len({m.shape for m in targets}) == 1:
        targets = np.stack(targets)
    return Samples(images=images, targets=targets, task_kind=manifest.task_kind)


def _resolve_loss(spec: TrainSpec, task_kind: str) -> str:
    expected = LOSS_FOR_TASK[task_kind]
    if spec.loss is None:
        return expected
    if spec.loss != expected:
        raise ConfigError(
            f"loss {spec.loss!r} does not fit task {task_kind!r} "
            f"(expected {expected!r})")
    return spec.loss


def _binary_class_weights(spec: TrainSpec, labels: np.ndarray) -> torch.Tensor:
    if spec.class_weights is not None:
        if len(spec.class_weights) != 2:
            raise ConfigError("binary task needs exactly two class weights")
        return torch.tensor(spec.class_weights, dtype=torch.float32)
    counts = np.bincount(np.asarray(labels).astype(int), minlength=2)
    if (counts == 0).any():
        warnings.warn("a class is absent from the training set; falling back "
                      "to uniform class weights")
        return torch.ones(2)
    return torch.tensor(inverse_prevalence_weights(counts), dtype=torch.float32)


def _prepare_images(images, indices, config: PreprocessConfig,
                    rng: np.random.Generator | None) -> torch.Tensor:
    batch = np.stack([preprocess(images[i], config, rng) for i in indices])
    return to_model_input(batch)


def _prepare_pairs(images, masks, indices, config: PreprocessConfig,
                   rng: np.random.Generator | None):
    outs = [preprocess_pair(images[i], masks[i], config, rng) for i in indices]
    x = to_model_input(np.stack([o[0] for o in outs]))
    m = torch.from_numpy(np.stack([o[1] for o in outs])).float()
    return x, m


def _classification_scores(bundle: ModelBundle, x: torch.Tensor,
                           batch_size: int = 64) -> np.ndarray:
    bundle.backbone.eval()
    bundle.head.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(bundle.forward(x[i:i + batch_size]).numpy())
    return np.concatenate(outs)


def _monitor_from_logits(logits: np.ndarray, targets: np.ndarray,
                         task_kind: str) -> float:
    if task_kind == "abnormality":
        scores = logits[:, 1] - logits[:, 0]  # monotone in P(abnormal)
        return metrics.auc(metrics.ScoredSet(scores=scores,
                                             labels=np.asarray(targets)))
    per_label = []
    targets = np.asarray(targets)
    for col in range(logits.shape[1]):
        labels = targets[:, col]
        if labels.min() == labels.max():
            continue
        per_label.append(metrics.auc(metrics.ScoredSet(scores=logits[:, col],
                                                       labels=labels)))
    if not per_label:
        raise MetricUndefinedError(
            "validation AUC undefined: every label is single-class")
    return float(np.mean(per_label))


def _segmentation_monitor(bundle: ModelBundle, val_x: torch.Tensor,
                          val_masks: torch.Tensor, batch_size: int = 8) -> float:
    bundle.backbone.eval()
    bundle.head.eval()
    dices = []
    with torch.no_grad():
        for i in range(0, len(val_x), batch_size):
            logits = bundle.forward(val_x[i:i + batch_size])[:, 0]
            preds = (torch.sigmoid(logits) > 0.5).numpy().astype(np.uint8)
            truth = val_masks[i:i + batch_size].numpy().astype(np.uint8)
            for p, t in zip(preds, truth):
                dices.append(metrics.dice_coefficient(p, t))
    return float(np.mean(dices))


def _snapshot(bundle: ModelBundle) -> dict:
    return {name: copy.deepcopy(module.state_dict())
            for name, module in bundle.modules().items()}


def _restore(bundle: ModelBundle, snapshot: dict) -> None:
    for name, module in bundle.modules().items():
        module.load_state_dict(snapshot[name])


def train(bundle: ModelBundle, spec: TrainSpec, train_samples: Samples,
          val_samples: Samples, preprocess_config: PreprocessConfig,
          seed: int = 0, deterministic: bool = False,
          monitor_hook=None) -> tuple[ModelBundle, TrainingLog]:
    """Train to the best validation epoch with early stopping.

    Returns the bundle holding the best-epoch weights (not last-epoch) and
    the per-epoch log. Under ``linear_probe`` the backbone stays frozen in
    eval mode, so its blobs are bit-identical before and after.

    ``monitor_hook(epoch, bundle) -> float`` substitutes the validation
    monitor (testing hook for scripted early-stop schedules).
    """
    if train_samples.task_kind != bundle.task_kind:
        raise ConfigError(f"bundle task {bundle.task_kind!r} != samples task "
                          f"{train_samples.task_kind!r}")
    if val_samples.task_kind != bundle.task_kind:
        raise ConfigError("validation samples task mismatch")
    loss_name = _resolve_loss(spec, bundle.task_kind)
    segmentation = bundle.is_segmentation
    linear_probe = spec.protocol == "linear_probe"
    if linear_probe and segmentation:
        raise ConfigError("linear_probe applies to classification heads only")

    prior_deterministic = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(deterministic)
    torch.manual_seed(derive_seed(seed, "torch"))
    try:
        return _train_inner(bundle, spec, train_samples, val_samples,
                            preprocess_config, seed, loss_name, monitor_hook)
    finally:
        torch.use_deterministic_algorithms(prior_deterministic)


def _train_inner(bundle, spec, train_samples, val_samples, preprocess_config,
                 seed, loss_name, monitor_hook):
    segmentation = bundle.is_segmentation
    linear_probe = spec.protocol == "linear_probe"
    eval_config = preprocess_config.eval_variant()
    order_rng = np.random.default_rng(derive_seed(seed, "batch-order"))
    aug_rng = np.random.default_rng(derive_seed(seed, "augment"))
    n_train = len(train_samples)
    augmented = preprocess_config.train_mode

    class_weights = None
    if loss_name == "weighted_cross_entropy":
        class_weights = _binary_class_weights(spec, train_samples.targets)

    if linear_probe:
        bundle.backbone.eval()
        bundle.backbone.requires_grad_(False)
        params = list(bundle.head.parameters())
    else:
        params = list(bundle.backbone.parameters()) + list(bundle.head.parameters())
    optimizer = torch.optim.Adam(params, lr=spec.learning_rate,
                                 betas=spec.betas,
                                 weight_decay=spec.weight_decay)

    # -- precompute fixed tensors ------------------------------------------
    all_idx = range(n_train)
    if segmentation:
        val_x, val_masks = _prepare_pairs(val_samples.images, val_samples.targets,
                                          range(len(val_samples)), eval_config, None)
        if not augmented:
            train_x, train_masks = _prepare_pairs(
                train_samples.images, train_samples.targets, all_idx, eval_config, None)
        train_targets = None
    else:
        val_x = _prepare_images(val_samples.images, range(len(val_samples)),
                                eval_config, None)
        val_masks = None
        if not augmented:
            train_x = _prepare_images(train_samples.images, all_idx, eval_config, None)
        train_targets = torch.as_tensor(np.asarray(train_samples.targets))

    # linear-probe fast path: with deterministic preprocessing the frozen
    # embeddings never change, so compute them once
    fast_probe = linear_probe and not augmented and not segmentation
    if fast_probe:
        with torch.no_grad():
            train_emb = torch.cat([bundle.backbone(train_x[i:i + 64]).mean(dim=(2, 3))
                                   for i in range(0, n_train, 64)])
            val_emb = torch.cat([bundle.backbone(val_x[i:i + 64]).mean(dim=(2, 3))
                                 for i in range(0, len(val_x), 64)])

    def compute_loss(logits, target):
        if loss_name == "weighted_cross_entropy":
            return weighted_cross_entropy(logits, target, class_weights)
        if loss_name == "per_label_cross_entropy":
            return per_label_cross_entropy(logits, target.float())
        return dice_loss(logits[:, 0], target)

    log = TrainingLog()
    best_snapshot = None
    bad_epochs = 0
    for epoch in range(spec.max_epochs):
        started = time.monotonic()
        order = order_rng.permutation(n_train)
        if not linear_probe:
            bundle.backbone.train()
        bundle.head.train()
        total_loss = 0.0
        for start in range(0, n_train, spec.batch_size):
            batch_idx = order[start:start + spec.batch_size]
            optimizer.zero_grad()
            if fast_probe:
                logits = bundle.head(train_emb[batch_idx])
                target = train_targets[batch_idx]
            elif segmentation:
                if augmented:
                    x, m = _prepare_pairs(train_samples.images,
                                          train_samples.targets, batch_idx,
                                          preprocess_config, aug_rng)
                else:
                    x, m = train_x[batch_idx], train_masks[batch_idx]
                logits, target = bundle.forward(x), m
            else:
                if augmented:
                    x = _prepare_images(train_samples.images, batch_idx,
                                        preprocess_config, aug_rng)
                else:
                    x = train_x[batch_idx]
                if linear_probe:
                    with torch.no_grad():
                        emb = bundle.backbone(x).mean(dim=(2, 3))
                    logits = bundle.head(emb)
                else:
                    logits = bundle.forward(x)
                target = train_targets[batch_idx]
            loss = compute_loss(logits, target)
            loss.backward()
            optimizer.step()
            total_loss += loss.item() * len(batch_idx)
        train_loss = total_loss / n_train
        if not np.isfinite(train_loss):
            raise TrainingDivergedError(
                f"training loss became {train_loss} at epoch {epoch}")

        if monitor_hook is not None:
            val_monitor = float(monitor_hook(epoch, bundle))
        elif segmentation:
            val_monitor = _segmentation_monitor(bundle, val_x, val_masks)
        elif fast_probe:
            bundle.head.eval()
            with torch.no_grad():
                logits = bundle.head(val_emb).numpy()
            val_monitor = _monitor_from_logits(logits, val_samples.targets,
                                               bundle.task_kind)
        else:
            logits = _classification_scores(bundle, val_x)
            val_monitor = _monitor_from_logits(logits, val_samples.targets,
                                               bundle.task_kind)
        if not np.isfinite(val_monitor):
            raise TrainingDivergedError(
                f"validation monitor became {val_monitor} at epoch {epoch}; "
                "check learning rate and data")

        log.append(epoch, train_loss, val_monitor,
                   optimizer.param_groups[0]["lr"],
                   time.monotonic() - started)
        if val_monitor > log.best_monitor:
            log.best_monitor = val_monitor
            log.best_epoch = epoch
            best_snapshot = _snapshot(bundle)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= spec.patience > 0:
                log.stopped_early = True
                break

    if best_snapshot is not None:
        _restore(bundle, best_snapshot)
    return bundle, log


def upstream_validation_split(n: int, patients, seed: int,
                              val_fraction: float = 0.2):
    """Patient-grouped holdout for upstream early stopping."""
    rng = np.random.default_rng(derive_seed(seed, "upstream-val"))
    unique = sorted(set(patients))
    rng.shuffle(unique)
    n_val = max(1, round(len(unique) * val_fraction))
    val_patients = set(unique[:n_val])
    val_idx = [i for i in range(n) if patients[i] in val_patients]
    train_idx = [i for i in range(n) if patients[i] not in val_patients]
    if not train_idx or not val_idx:
        raise DataError("upstream split left an empty side; need more patients")
    return np.asarray(train_idx), np.asarray(val_idx)


def pretrain_upstream(regime: str, samples: Samples, patients, resolution: int,
                      spec: TrainSpec, seed: int, store: CheckpointStore,
                      base_width: int = 64,
                      preprocess_config: PreprocessConfig | None = None,
                      config_hash: str | None = None,
                      deterministic: bool = False) -> str:
    """Binary abnormality pretraining producing a reusable backbone.

    ``fundus`` starts from scratch init; ``general_fundus`` starts from the
    general checkpoint, whose blobs the stage-2 initial backbone must equal
    bit-for-bit (the initial checksum is recorded in the sidecar so the
    contract stays auditable).
    """
    if regime not in ("fundus", "general_fundus"):
        raise ConfigError(f"upstream pretraining regime must be fundus or "
                          f"general_fundus, got {regime!r}")
    if samples.task_kind != "abnormality":
        raise ConfigError("upstream pretraining needs an abnormality sample set")
    if len(patients) != len(samples):
        raise DataError("patients must align with samples")
    if preprocess_config is None:
        preprocess_config = PreprocessConfig(
            resolution=resolution, strict_resolution=resolution in (256, 512, 1024))
    init_regime = "scratch" if regime == "fundus" else "general"
    bundle = build_model(init_regime, "abnormality", resolution, seed=seed,
                         base_width=base_width, store=store)
    init_checksum = module_checksum(bundle.backbone)

    train_idx, val_idx = upstream_validation_split(len(samples), patients, seed)
    labels = np.asarray(samples.targets)
    images = samples.images
    sub = lambda idx: Samples(images=[images[i] for i in idx] if isinstance(images, list)
                              else images[idx],
                              targets=labels[idx], task_kind="abnormality")
    bundle, log = train(bundle, spec, sub(train_idx), sub(val_idx),
                        preprocess_config, seed=seed, deterministic=deterministic)

    checkpoint_id = upstream_checkpoint_id(regime, resolution, base_width)
    provenance = (["scratch_init", "fundus_pretrained"] if regime == "fundus"
                  else ["general_init", "fundus_pretrained"])
    store.save(checkpoint_id, bundle_blobs(bundle),
               {"regime": regime, "provenance": provenance,
                "resolution": resolution, "epoch": log.best_epoch,
                "val_metric": log.best_monitor, "config_hash": config_hash,
                "rng_seed": seed, "init_backbone_checksum": init_checksum})
    return checkpoint_id
