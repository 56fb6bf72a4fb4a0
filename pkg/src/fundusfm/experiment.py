"""Run orchestration behind the CLI.

Each command resolves an output root (flag > config > environment variable >
./fundusfm_runs) holding a checkpoint store, an append-only run ledger, and
one directory per run named by the config's canonical hash. Completed runs
are skipped on re-invocation unless forced; failed runs move their partial
artifacts to a quarantine directory and stay re-runnable.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import shutil
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import scipy.special

import cv2

from . import metrics
from .checkpoints import (CheckpointStore, bundle_blobs,
                          ensure_general_checkpoint, general_checkpoint_id,
                          module_checksum, upstream_checkpoint_id)
from .config import ExperimentConfig, config_hash, run_name
from .data import (DISEASE_CLASSES, DatasetManifest, load_manifest,
                   make_splits, sample_fraction)
from .errors import (CheckpointMissingError, ConfigError, DataError,
                     FundusFMError, ManifestError, MetricUndefinedError)
from .explain import grad_cam, render_outputs, tsne_project
from .ledger import RunLedger, utc_now
from .models import (build_model, build_segmentation_model, derive_seed,
                     embed)
from .preprocess import PreprocessConfig, preprocess, preprocess_pair
from .synthetic import load_image
from .training import (Samples, TrainingLog, pretrain_upstream,
                       samples_from_manifest, train)

OUTPUT_ROOT_ENV = "FUNDUSFM_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "fundusfm_runs"

#: headline metric reported per task
PRIMARY_METRIC = {
    "abnormality": "auc",
    "multi_disease": "auc_macro",
    "vessel_segmentation": "dice",
}


def resolve_output_root(cli_out=None, config_output_dir=None) -> Path:
    """Flag beats config beats environment beats the cwd default."""
    chosen = (cli_out or config_output_dir or os.environ.get(OUTPUT_ROOT_ENV)
              or DEFAULT_OUTPUT_ROOT)
    root = Path(chosen)
    root.mkdir(parents=True, exist_ok=True)
    return root


def open_store(root: Path) -> CheckpointStore:
    return CheckpointStore(root / "checkpoints")


def open_ledger(root: Path) -> RunLedger:
    return RunLedger(root / "ledger.jsonl")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def mapping_hash(mapping: dict) -> str:
    """Canonical hash for the small report/external/explain configs."""
    canon = json.dumps(mapping, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# --------------------------------------------------------------------------
# bundle plumbing


def _fresh_bundle(task_kind: str, resolution: int, seed: int, base_width: int,
                  head_kind: str = "linear", regime: str = "scratch",
                  store=None):
    if task_kind == "vessel_segmentation":
        return build_segmentation_model(regime, resolution, seed=seed,
                                        base_width=base_width, store=store)
    return build_model(regime, task_kind, resolution, seed=seed,
                       base_width=base_width, head_kind=head_kind, store=store)


def _build_downstream_bundle(config: ExperimentConfig, store: CheckpointStore,
                             seed: int):
    """Regime-initialized bundle for one fold; returns (bundle, upstream id).

    Unlike the model builder, this accepts an explicit upstream checkpoint id
    so a backbone pretrained at one resolution can seed a downstream run at
    another (the fully convolutional encoder is resolution-agnostic).
    """
    cfg = config
    if cfg.regime in ("fundus", "general_fundus"):
        cid = cfg.upstream_checkpoint or upstream_checkpoint_id(
            cfg.regime, cfg.resolution, cfg.base_width)
        if not store.exists(cid):
            raise CheckpointMissingError(
                cid, f"upstream checkpoint {cid!r} not found; run the "
                     f"pretrain command for regime {cfg.regime!r} first")
        bundle = _fresh_bundle(cfg.task_kind, cfg.resolution, seed,
                               cfg.base_width)
        blobs, meta = store.load(cid)
        CheckpointStore.load_module(bundle.backbone, blobs, prefix="backbone.")
        bundle = dataclasses.replace(bundle, regime=cfg.regime,
                                     provenance=tuple(meta["provenance"]))
        return bundle, cid
    bundle = _fresh_bundle(cfg.task_kind, cfg.resolution, seed, cfg.base_width,
                           regime=cfg.regime, store=store)
    cid = general_checkpoint_id(cfg.base_width) if cfg.regime == "general" else None
    return bundle, cid


def load_bundle(store: CheckpointStore, checkpoint_id: str):
    """Rebuild a full bundle (backbone + head) from a stored run checkpoint."""
    blobs, meta = store.load(checkpoint_id)
    for needed in ("task_kind", "base_width"):
        if needed not in meta:
            raise DataError(f"checkpoint {checkpoint_id!r} sidecar lacks "
                            f"{needed!r}; cannot rebuild the model")
    bundle = _fresh_bundle(meta["task_kind"], int(meta["resolution"]), 0,
                           int(meta["base_width"]),
                           head_kind=meta.get("head_kind", "linear"))
    CheckpointStore.load_module(bundle.backbone, blobs, prefix="backbone.")
    CheckpointStore.load_module(bundle.head, blobs, prefix="head.")
    return dataclasses.replace(bundle, regime=meta["regime"],
                               provenance=tuple(meta["provenance"]))


# --------------------------------------------------------------------------
# scoring helpers


def _eval_scores(bundle, images, pp_config: PreprocessConfig,
                 batch_size: int = 32) -> np.ndarray:
    """Deterministic eval-preprocessing + forward; returns raw logits."""
    eval_cfg = pp_config.eval_variant()
    outs = []
    for start in range(0, len(images), batch_size):
        chunk = [preprocess(images[i], eval_cfg)
                 for i in range(start, min(start + batch_size, len(images)))]
        outs.append(bundle.predict(np.stack(chunk)))
    return np.concatenate(outs)


def _binary_margin(logits: np.ndarray) -> np.ndarray:
    return logits[:, 1] - logits[:, 0]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return scipy.special.expit(x)


def _macro_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean AUC over labels present in both polarities; undefined if none."""
    per_class = []
    for c in range(labels.shape[1]):
        col = labels[:, c]
        if 0 < col.sum() < len(col):
            per_class.append(metrics.auc(metrics.ScoredSet(scores[:, c], col)))
    if not per_class:
        raise MetricUndefinedError("no label column has both classes present")
    return float(np.mean(per_class))


def _eval_segmentation_fold(bundle, samples: Samples,
                            pp_config: PreprocessConfig) -> float:
    """Mean Dice at threshold 0.5 over one held-out fold."""
    eval_cfg = pp_config.eval_variant()
    dices = []
    for i in range(len(samples.images)):
        img, mask = preprocess_pair(samples.images[i], samples.targets[i],
                                    eval_cfg)
        logits = bundle.predict(img[None])[0, :, :, 0]
        pred = (logits > 0.0).astype(int)
        dices.append(metrics.dice_coefficient(pred, mask.astype(int)))
    return float(np.mean(dices))


# --------------------------------------------------------------------------
# pretrain


def run_pretrain(config: ExperimentConfig, *, out=None, force: bool = False,
                 deterministic: bool = False) -> tuple[str, bool]:
    """Produce upstream weights; returns (checkpoint id, skipped flag).

    Regime ``general`` registers the stage-1 general-image weights;
    ``fundus``/``general_fundus`` train the upstream abnormality task on the
    configured manifest.
    """
    cfg = config
    if cfg.task_kind != "abnormality":
        raise ConfigError("task_kind: upstream pretraining is the binary "
                          "abnormality task")
    if cfg.regime == "scratch":
        raise ConfigError("regime: 'scratch' has no pretraining stage")
    root = resolve_output_root(out, cfg.output_dir)
    store, ledger = open_store(root), open_ledger(root)
    chash = config_hash(cfg)

    if cfg.regime == "general":
        target = general_checkpoint_id(cfg.base_width)
    else:
        target = upstream_checkpoint_id(cfg.regime, cfg.resolution,
                                        cfg.base_width)
    if ledger.is_completed(chash) and store.exists(target) and not force:
        return target, True

    started = utc_now()
    ledger.append({"kind": "pretrain", "config_hash": chash,
                   "status": "running", "started": started})
    try:
        if cfg.regime == "general":
            cid = ensure_general_checkpoint(store, cfg.base_width,
                                            seed=cfg.seed)
        else:
            if cfg.regime == "general_fundus" and not store.exists(
                    general_checkpoint_id(cfg.base_width)):
                raise CheckpointMissingError(
                    general_checkpoint_id(cfg.base_width),
                    "stage-1 general weights missing; run the pretrain "
                    "command with regime 'general' first")
            manifest = load_manifest(cfg.manifest_path, "abnormality")
            usable = manifest.usable_indices()
            samples = samples_from_manifest(manifest, usable)
            patients = [manifest.records[i].patient_id for i in usable]
            cid = pretrain_upstream(cfg.regime, samples, patients,
                                    cfg.resolution, cfg.spec, cfg.seed, store,
                                    base_width=cfg.base_width,
                                    preprocess_config=cfg.preprocess,
                                    config_hash=chash,
                                    deterministic=deterministic)
    except BaseException as exc:
        ledger.append({"kind": "pretrain", "config_hash": chash,
                       "status": "failed", "error": str(exc),
                       "started": started, "finished": utc_now()})
        raise
    ledger.append({"kind": "pretrain", "config_hash": chash,
                   "status": "completed", "config": cfg.to_dict(),
                   "checkpoints": [cid], "started": started,
                   "finished": utc_now()})
    return cid, False


# --------------------------------------------------------------------------
# downstream


def _fold_metrics(config: ExperimentConfig, bundle, test_samples: Samples,
                  val_scores, val_labels) -> tuple[dict, np.ndarray | None]:
    """Held-out-fold metrics; returns (entry, pooled binary scores or None)."""
    cfg = config
    if cfg.task_kind == "vessel_segmentation":
        return {"dice": _eval_segmentation_fold(bundle, test_samples,
                                                cfg.preprocess)}, None
    logits = _eval_scores(bundle, test_samples.images, cfg.preprocess)
    if cfg.task_kind == "abnormality":
        margin = _binary_margin(logits)
        labels = np.asarray(test_samples.targets).astype(int)
        entry = {"auc": metrics.auc(metrics.ScoredSet(margin, labels))}
        return entry, margin
    # multi_disease: macro AUC plus per-class F1 at one shared threshold
    # selected on the training-side validation scores (never on the test fold)
    scores = _sigmoid(logits)
    labels = np.asarray(test_samples.targets).astype(int)
    shared, _ = metrics.select_shared_threshold_jaccard(
        _sigmoid(val_scores), val_labels.astype(int),
        metrics.default_threshold_grid(), per_class=False)
    f1s, _ = metrics.f1_per_class(scores, labels, shared)
    entry = {"auc_macro": _macro_auc(scores, labels),
             "f1_macro": float(f1s.mean()), "threshold": float(shared)}
    entry.update({f"f1_{name}": float(f1s[c])
                  for c, name in enumerate(DISEASE_CLASSES)})
    return entry, None


def _write_table3_csv(path: Path, config: ExperimentConfig,
                      report: metrics.MetricReport) -> None:
    """One-row per-class F1 summary with its shared threshold."""
    header = ["model", "threshold", *DISEASE_CLASSES]
    label = f"{config.regime}({config.protocol})"
    row = [label, f"{report.mean['threshold']:.2f}"]
    row += [f"{report.mean[f'f1_{name}']:.4f}" for name in DISEASE_CLASSES]
    path.write_text(metrics.render_csv_table(header, [row]))


def _resolve_reference_scores(cfg: ExperimentConfig, root: Path,
                              ledger: RunLedger):
    """Pooled out-of-fold scores of the named reference run."""
    wanted = cfg.reference
    match = None
    for record in ledger.completed_runs({"kind": "downstream"}):
        if record["config_hash"].startswith(wanted):
            match = record
            break
    if match is None:
        raise ConfigError(f"reference: no completed downstream run matches "
                          f"{wanted!r}")
    scores_path = Path(match["run_dir"]) / "scores.npz"
    if not scores_path.exists():
        raise DataError(f"reference run {wanted!r} kept no scores at "
                        f"{scores_path}")
    with np.load(scores_path) as npz:
        return (npz["indices"], npz["scores"], npz["labels"],
                match["config_hash"])


def run_downstream(config: ExperimentConfig, *, out=None, force: bool = False,
                   deterministic: bool = False) -> tuple[Path, bool]:
    """Cross-validated train/eval of one grid cell; returns (report path,
    skipped flag)."""
    cfg = config
    root = resolve_output_root(out, cfg.output_dir)
    store, ledger = open_store(root), open_ledger(root)
    chash = config_hash(cfg)
    name = run_name(cfg)
    run_dir = root / "runs" / name

    if ledger.is_completed(chash) and not force:
        latest = ledger.latest(chash)
        return Path(latest["report_path"]), True
    if run_dir.exists():
        shutil.rmtree(run_dir)

    started = utc_now()
    ledger.append({"kind": "downstream", "config_hash": chash,
                   "status": "running", "run_dir": str(run_dir),
                   "started": started})
    # accumulated by the body so a mid-run failure still reports what it made
    facts = {"checkpoints": [], "freeze_proofs": [], "upstream": None}
    try:
        report_path = _downstream_body(cfg, root, store, run_dir, chash,
                                       deterministic, facts)
    except BaseException as exc:
        quarantine = root / "quarantine" / f"{name}_{started.replace(':', '-')}"
        if run_dir.exists():
            quarantine.parent.mkdir(parents=True, exist_ok=True)
            shutil.move(str(run_dir), str(quarantine))
        ledger.append({"kind": "downstream", "config_hash": chash,
                       "status": "failed", "error": str(exc),
                       "run_dir": str(run_dir),
                       "quarantine": str(quarantine) if quarantine.exists() else None,
                       "checkpoints": facts["checkpoints"],
                       "started": started, "finished": utc_now()})
        raise
    ledger.append({"kind": "downstream", "config_hash": chash,
                   "status": "completed", "config": cfg.to_dict(),
                   "run_dir": str(run_dir), "report_path": str(report_path),
                   "checkpoints": facts["checkpoints"],
                   "upstream_checkpoint": facts["upstream"],
                   "freeze_proofs": facts["freeze_proofs"],
                   "started": started, "finished": utc_now()})
    return report_path, False


def _stratified_val_carve(train_pool, manifest: DatasetManifest, seed: int):
    """Patient-grouped ~20% early-stopping carve that keeps both label
    polarities represented (plain patient sampling can land a single-class
    validation set at desk scale, leaving the AUC monitor undefined)."""
    rng = np.random.default_rng(seed)
    patient_labels: dict[str, list[int]] = {}
    for i in train_pool:
        record = manifest.records[i]
        patient_labels.setdefault(record.patient_id, []).append(
            int(record.any_abnormal))
    patients = sorted(patient_labels)
    positive = [p for p in patients
                if np.mean(patient_labels[p]) >= 0.5]
    negative = [p for p in patients if p not in set(positive)]
    val_patients: set[str] = set()
    for group in (negative, positive):
        if not group:
            continue
        picked = list(group)
        rng.shuffle(picked)
        val_patients.update(picked[:max(1, round(0.2 * len(picked)))])
    train_idx = [i for i in train_pool
                 if manifest.records[i].patient_id not in val_patients]
    val_idx = [i for i in train_pool
               if manifest.records[i].patient_id in val_patients]
    if not train_idx or not val_idx:
        raise DataError("validation carve left an empty side; need more "
                        "patients at this fraction")
    return train_idx, val_idx


def _downstream_body(cfg: ExperimentConfig, root: Path, store: CheckpointStore,
                     run_dir: Path, chash: str, deterministic: bool,
                     facts: dict) -> Path:
    manifest = load_manifest(cfg.manifest_path, cfg.task_kind)
    split = make_splits(manifest, n_folds=cfg.n_folds, seed=cfg.seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "config.json",
                {"config": cfg.to_dict(), "config_hash": chash})
    (run_dir / "split_plan.json").write_text(split.to_json())

    fold_ckpts = facts["checkpoints"]
    freeze_proofs = facts["freeze_proofs"]
    per_fold: list[dict] = []
    pooled: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []

    for fold in range(cfg.n_folds):
        fold_seed = derive_seed(cfg.seed, f"fold-{fold}")
        bundle, upstream = _build_downstream_bundle(cfg, store, fold_seed)
        facts["upstream"] = upstream
        pre_checksum = module_checksum(bundle.backbone)

        train_pool = split.train_indices(fold)
        if cfg.fraction < 1.0:
            train_pool = sample_fraction(
                manifest, train_pool, cfg.fraction,
                seed=derive_seed(cfg.seed, f"fraction-{fold}"))
        try:
            train_idx, val_idx = _stratified_val_carve(
                train_pool, manifest,
                seed=derive_seed(cfg.seed, f"val-{fold}"))
        except DataError:
            warnings.warn(f"fold {fold}: too few patients to carve a "
                          "validation set; early stopping monitors the "
                          "training subset")
            train_idx = val_idx = list(train_pool)

        train_samples = samples_from_manifest(manifest, train_idx)
        val_samples = samples_from_manifest(manifest, val_idx)
        test_samples = samples_from_manifest(manifest, split.fold_indices(fold))

        bundle, log = train(bundle, cfg.spec, train_samples, val_samples,
                            cfg.preprocess, seed=fold_seed,
                            deterministic=deterministic)
        log.to_jsonl(run_dir / f"training_log_fold{fold}.jsonl")

        post_checksum = module_checksum(bundle.backbone)
        proof = {"fold": fold, "pre": pre_checksum, "post": post_checksum,
                 "equal": pre_checksum == post_checksum}
        freeze_proofs.append(proof)
        if cfg.protocol == "linear_probe" and not proof["equal"]:
            raise FundusFMError(
                f"fold {fold}: linear probing mutated the backbone "
                f"({pre_checksum[:12]} -> {post_checksum[:12]})")

        cid = f"run_{chash[:12]}_fold{fold}"
        store.save(cid, bundle_blobs(bundle), {
            "regime": bundle.regime, "provenance": list(bundle.provenance),
            "resolution": cfg.resolution, "task_kind": cfg.task_kind,
            "base_width": cfg.base_width, "head_kind": bundle.head_kind,
            "protocol": cfg.protocol, "config_hash": chash, "fold": fold,
            "epoch": log.best_epoch, "val_metric": log.best_monitor,
            "rng_seed": fold_seed,
        })
        fold_ckpts.append(cid)

        if cfg.task_kind == "multi_disease":
            val_scores = _eval_scores(bundle, val_samples.images,
                                      cfg.preprocess)
            val_labels = np.asarray(val_samples.targets)
        else:
            val_scores = val_labels = None
        entry, margin = _fold_metrics(cfg, bundle, test_samples,
                                      val_scores, val_labels)
        per_fold.append(entry)
        if margin is not None:
            test_idx = np.asarray(split.fold_indices(fold))
            labels = np.asarray(test_samples.targets).astype(int)
            pooled.append((test_idx, margin, labels))

    thresholds = {}
    if cfg.task_kind == "multi_disease":
        thresholds["shared"] = float(np.mean([e["threshold"]
                                              for e in per_fold]))

    tests = []
    if pooled:
        indices = np.concatenate([p[0] for p in pooled])
        order = np.argsort(indices)
        indices = indices[order]
        scores = np.concatenate([p[1] for p in pooled])[order]
        labels = np.concatenate([p[2] for p in pooled])[order]
        np.savez(run_dir / "scores.npz", indices=indices, scores=scores,
                 labels=labels)
        if cfg.reference:
            ledger = open_ledger(root)
            ref_idx, ref_scores, ref_labels, ref_hash = \
                _resolve_reference_scores(cfg, root, ledger)
            if (len(ref_idx) != len(indices)
                    or not np.array_equal(ref_idx, indices)
                    or not np.array_equal(ref_labels, labels)):
                raise DataError("reference run scored different instances; "
                                "AUCs are not comparable")
            tests.append(metrics.delong_test(
                metrics.ScoredSet(scores, labels),
                metrics.ScoredSet(ref_scores, ref_labels),
                label_a=chash[:12], label_b=ref_hash[:12]))

    report = metrics.aggregate_cv(per_fold, thresholds=thresholds,
                                  tests=tests, dataset=manifest.name)
    report_path = run_dir / "report.json"
    report_path.write_text(report.to_json() + "\n")
    if cfg.task_kind == "multi_disease":
        _write_table3_csv(run_dir / "per_class_f1.csv", cfg, report)
    return report_path


# --------------------------------------------------------------------------
# external validation


def run_external(mapping: dict, *, out=None, force: bool = False) -> tuple[Path, bool]:
    """Evaluation-only validation of a finished run on a foreign dataset.

    ``mapping`` needs: ``run`` (config-hash prefix of a completed downstream
    run), ``manifest_path``, ``dataset_name``; optional ``column_mapping``
    translating foreign manifest headers, and ``output_dir``.
    """
    for required in ("run", "manifest_path", "dataset_name"):
        if required not in mapping:
            raise ConfigError(f"{required}: required field missing")
    root = resolve_output_root(out, mapping.get("output_dir"))
    store, ledger = open_store(root), open_ledger(root)
    ehash = mapping_hash({k: v for k, v in mapping.items()
                          if k != "output_dir"})
    if ledger.is_completed(ehash) and not force:
        return Path(ledger.latest(ehash)["report_path"]), True

    source = None
    for record in ledger.completed_runs({"kind": "downstream"}):
        if record["config_hash"].startswith(str(mapping["run"])):
            source = record
            break
    if source is None:
        raise ConfigError(f"run: no completed downstream run matches "
                          f"{mapping['run']!r}")

    started = utc_now()
    ledger.append({"kind": "external", "config_hash": ehash,
                   "status": "running", "started": started})
    try:
        report_path = _external_body(mapping, root, store, source, ehash)
    except BaseException as exc:
        ledger.append({"kind": "external", "config_hash": ehash,
                       "status": "failed", "error": str(exc),
                       "started": started, "finished": utc_now()})
        raise
    ledger.append({"kind": "external", "config_hash": ehash,
                   "status": "completed", "config": dict(mapping),
                   "source_run": source["config_hash"],
                   "dataset": mapping["dataset_name"],
                   "report_path": str(report_path),
                   "checkpoints": list(source["checkpoints"]),
                   "started": started, "finished": utc_now()})
    return report_path, False


def _load_external_manifest(mapping: dict, task_kind: str) -> DatasetManifest:
    try:
        return load_manifest(mapping["manifest_path"], task_kind,
                             name=mapping["dataset_name"],
                             column_mapping=mapping.get("column_mapping"))
    except ManifestError as exc:
        raise DataError(f"cannot map dataset {mapping['dataset_name']!r} onto "
                        f"a {task_kind} model: {exc}") from exc


def _external_body(mapping: dict, root: Path, store: CheckpointStore,
                   source: dict, ehash: str) -> Path:
    task_kind = source["config"]["task_kind"]
    if task_kind == "vessel_segmentation":
        raise ConfigError("external validation covers classification runs")
    manifest = _load_external_manifest(mapping, task_kind)
    usable = manifest.usable_indices()
    if not usable:
        raise DataError(f"dataset {mapping['dataset_name']!r} has no usable "
                        "records")
    if task_kind == "abnormality":
        collapsed = [i for i in usable
                     if manifest.records[i].binary_label is None
                     and manifest.records[i].disease_labels is not None]
        if collapsed:
            warnings.warn(f"{len(collapsed)} records carry disease labels "
                          "only; collapsing to any-abnormal for binary "
                          "evaluation")
    else:
        missing = [i for i in usable
                   if manifest.records[i].disease_labels is None]
        if missing:
            raise DataError(
                f"dataset {mapping['dataset_name']!r} lacks disease labels "
                f"on {len(missing)} records; cannot map onto an "
                f"{len(DISEASE_CLASSES)}-class head")
    samples = samples_from_manifest(manifest, usable)

    pp = PreprocessConfig(resolution=int(source["config"]["resolution"]),
                          augmentations=(), strict_resolution=False)
    per_fold = []
    for cid in source["checkpoints"]:
        bundle = load_bundle(store, cid)
        logits = _eval_scores(bundle, samples.images, pp)
        if task_kind == "abnormality":
            labels = np.asarray(samples.targets).astype(int)
            per_fold.append({"auc": metrics.auc(
                metrics.ScoredSet(_binary_margin(logits), labels))})
        else:
            labels = np.asarray(samples.targets).astype(int)
            per_fold.append({"auc_macro": _macro_auc(_sigmoid(logits),
                                                     labels)})

    report = metrics.aggregate_cv(per_fold, dataset=mapping["dataset_name"])
    out_dir = root / "external" / f"{mapping['dataset_name']}_{ehash[:12]}"
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "config.json",
                {"config": dict(mapping), "config_hash": ehash})
    report_path = out_dir / "report.json"
    report_path.write_text(report.to_json() + "\n")
    return report_path


# --------------------------------------------------------------------------
# report


def _metric_of(record: dict) -> tuple[str, float, float]:
    task = record.get("config", {}).get("task_kind", "abnormality")
    metric = PRIMARY_METRIC.get(task, "auc")
    report = metrics.MetricReport.from_json(
        Path(record["report_path"]).read_text())
    if metric not in report.mean:
        metric = sorted(report.mean)[0]
    return metric, report.mean[metric], report.std[metric]


def _series_plot(path: Path, series: dict, xlabel: str, ylabel: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        for label in sorted(series):
            xs, ys = zip(*sorted(series[label]))
            ax.plot(xs, ys, marker="o", label=label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, dpi=150, metadata={"Software": None})
    finally:
        plt.close(fig)


def run_report(*, out=None, where: dict | None = None,
               report_dir=None) -> list[Path]:
    """Tables and plots over completed runs matching a filter.

    Emits a Markdown + CSV summary table, fraction-vs-metric and
    resolution-vs-metric line plots per (task, protocol) group, and a
    combined per-class F1 table when multi-disease runs are present.
    Regeneration from an unchanged ledger is byte-identical.
    """
    root = resolve_output_root(out, None)
    ledger = open_ledger(root)
    matched = [r for r in ledger.completed_runs(where)
               if r["kind"] in ("downstream", "external")]
    if not matched:
        raise DataError("no completed runs match the report filter")
    out_dir = Path(report_dir) if report_dir else root / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    header = ["kind", "task", "regime", "protocol", "resolution", "fraction",
              "dataset", "metric", "value"]
    rows = []
    fraction_series: dict[tuple, dict] = {}
    resolution_series: dict[tuple, dict] = {}
    for record in matched:
        config = record.get("config", {})
        metric, mean, std = _metric_of(record)
        cell = metrics.format_mean_std(mean, std)
        if record["kind"] == "external":
            source = record.get("source_run", "")[:12]
            rows.append(["external", "", source, "", "", "",
                         record.get("dataset", ""), metric, cell])
            continue
        task = config["task_kind"]
        regime, protocol = config["regime"], config["protocol"]
        resolution, fraction = config["resolution"], config["fraction"]
        rows.append(["downstream", task, regime, protocol, str(resolution),
                     f"{fraction:g}", "", metric, cell])
        fraction_series.setdefault((task, protocol, resolution), {}) \
            .setdefault(regime, []).append((fraction, mean))
        resolution_series.setdefault((task, protocol, fraction), {}) \
            .setdefault(regime, []).append((resolution, mean))
    rows.sort()

    for suffix, renderer in (("md", metrics.render_markdown_table),
                             ("csv", metrics.render_csv_table)):
        path = out_dir / f"summary.{suffix}"
        path.write_text(renderer(header, rows))
        written.append(path)

    for (task, protocol, resolution), series in sorted(fraction_series.items()):
        if len({x for pts in series.values() for x, _ in pts}) < 2:
            continue
        path = out_dir / f"fraction_vs_{PRIMARY_METRIC[task]}_{task}_{protocol}_r{resolution}.png"
        _series_plot(path, series, "training fraction", PRIMARY_METRIC[task])
        written.append(path)
    for (task, protocol, fraction), series in sorted(resolution_series.items()):
        if len({x for pts in series.values() for x, _ in pts}) < 2:
            continue
        path = out_dir / f"resolution_vs_{PRIMARY_METRIC[task]}_{task}_{protocol}_f{fraction:g}.png"
        _series_plot(path, series, "input resolution", PRIMARY_METRIC[task])
        written.append(path)

    f1_rows = []
    for record in matched:
        config = record.get("config", {})
        if record["kind"] != "downstream" or config.get("task_kind") != "multi_disease":
            continue
        csv_path = Path(record["run_dir"]) / "per_class_f1.csv"
        if csv_path.exists():
            f1_rows.append(csv_path.read_text().splitlines()[1])
    if f1_rows:
        path = out_dir / "multi_disease_f1.csv"
        header_line = ",".join(["model", "threshold", *DISEASE_CLASSES])
        path.write_text("\n".join([header_line, *sorted(f1_rows)]) + "\n")
        written.append(path)

    sources = {"generated_from": sorted({r["config_hash"] for r in matched}),
               "files": sorted(p.name for p in written)}
    sources_path = out_dir / "sources.json"
    _write_json(sources_path, sources)
    written.append(sources_path)
    return written


# --------------------------------------------------------------------------
# explain


def run_explain(mapping: dict, *, out=None, seed: int = 0) -> list[Path]:
    """Saliency maps (and an embedding projection) for a finished run.

    ``mapping`` needs ``run`` or ``checkpoint`` plus ``manifest_path``;
    optional: ``n_images`` (default 8), ``target_class`` (default 1),
    ``source_layer``, ``tsne`` (default true), ``perplexity``,
    ``n_embeddings``, ``output_dir``.
    """
    if not mapping.get("run") and not mapping.get("checkpoint"):
        raise ConfigError("run/checkpoint: one of the two is required")
    if "manifest_path" not in mapping:
        raise ConfigError("manifest_path: required field missing")
    root = resolve_output_root(out, mapping.get("output_dir"))
    store, ledger = open_store(root), open_ledger(root)
    ehash = mapping_hash({k: v for k, v in mapping.items()
                          if k != "output_dir"})

    cid = mapping.get("checkpoint")
    if cid is None:
        for record in ledger.completed_runs({"kind": "downstream"}):
            if record["config_hash"].startswith(str(mapping["run"])):
                cid = record["checkpoints"][0]
                break
        if cid is None:
            raise ConfigError(f"run: no completed downstream run matches "
                              f"{mapping['run']!r}")
    bundle = load_bundle(store, cid)
    if bundle.is_segmentation:
        raise ConfigError("explain covers classification checkpoints")

    manifest = load_manifest(mapping["manifest_path"], bundle.task_kind)
    usable = manifest.usable_indices()
    n_images = int(mapping.get("n_images", 8))
    target_class = int(mapping.get("target_class", 1))
    layer = mapping.get("source_layer", "layer4")
    pp = PreprocessConfig(resolution=bundle.resolution, augmentations=(),
                          strict_resolution=False)
    eval_cfg = pp.eval_variant()

    saliency, display = [], []
    for idx in usable[:n_images]:
        record = manifest.records[idx]
        raw = load_image(manifest.resolve_image(record))
        prepared = preprocess(raw, eval_cfg)
        ref = Path(record.image_path).stem
        saliency.append(grad_cam(bundle, prepared, target_class,
                                 source_layer=layer, record_ref=ref))
        display.append(cv2.resize(raw, (bundle.resolution, bundle.resolution),
                                  interpolation=cv2.INTER_AREA))

    projections = []
    label_names = None
    if mapping.get("tsne", True):
        perplexity = float(mapping.get("perplexity", 30.0))
        n_embed = min(int(mapping.get("n_embeddings", 400)), len(usable))
        picked = usable[:n_embed]
        if n_embed > 3 * perplexity:
            samples = samples_from_manifest(manifest, picked)
            batch = np.stack([preprocess(samples.images[i], eval_cfg)
                              for i in range(len(picked))])
            embeddings = embed(bundle, batch)
            targets = np.asarray(samples.targets)
            labels = (targets.argmax(axis=1) if targets.ndim == 2
                      else targets.astype(int))
            projections.append(tsne_project(embeddings, labels,
                                            perplexity=perplexity, seed=seed))
            label_names = ({c: n for c, n in enumerate(DISEASE_CLASSES)}
                           if targets.ndim == 2
                           else {0: "normal", 1: "abnormal"})
        else:
            warnings.warn(f"skipping the projection: {n_embed} embeddings "
                          f"cannot support perplexity {perplexity:g} "
                          "(need N > 3 * perplexity)")

    out_dir = root / "explain" / f"explain_{ehash[:12]}"
    written = render_outputs(out_dir, saliency=saliency, images=display,
                             projections=projections, label_names=label_names)
    _write_json(out_dir / "config.json",
                {"config": dict(mapping), "config_hash": ehash,
                 "checkpoint": cid})
    written.append(out_dir / "config.json")
    ledger.append({"kind": "explain", "config_hash": ehash,
                   "status": "completed", "config": dict(mapping),
                   "checkpoints": [cid], "out_dir": str(out_dir),
                   "files": sorted(p.name for p in written),
                   "started": utc_now(), "finished": utc_now()})
    return written


# --------------------------------------------------------------------------
# audit


def run_audit(*, out=None) -> list[str]:
    """Cross-check ledger, run directories, checkpoints, and reports.

    Returns violation strings; empty means the artifact tree is consistent.
    Quarantined artifacts of failed runs are exempt.
    """
    root = resolve_output_root(out, None)
    ledger = open_ledger(root)
    records = ledger.records()
    violations: list[str] = []

    latest: dict[str, dict] = {}
    for record in records:
        latest[record["config_hash"]] = record

    known_dirs = {record.get("run_dir") for record in records
                  if record.get("run_dir")}
    known_ckpts: set[str] = set()
    for record in records:
        known_ckpts.update(record.get("checkpoints") or [])
        if record.get("upstream_checkpoint"):
            known_ckpts.add(record["upstream_checkpoint"])

    runs_dir = root / "runs"
    if runs_dir.exists():
        for run_dir in sorted(p for p in runs_dir.iterdir() if p.is_dir()):
            if str(run_dir) not in known_dirs:
                violations.append(f"orphan run directory: {run_dir}")
                continue
            config_json = run_dir / "config.json"
            if not config_json.exists():
                violations.append(f"run directory without config.json: "
                                  f"{run_dir}")
                continue
            stated = json.loads(config_json.read_text()).get("config_hash")
            if not stated or not run_dir.name.endswith(stated[:12]):
                violations.append(f"config hash mismatch in {run_dir}: "
                                  f"directory vs {stated[:12]}")

    for chash, record in sorted(latest.items()):
        if record["status"] != "completed":
            continue
        for key in ("report_path", "run_dir", "out_dir"):
            path = record.get(key)
            if path and not Path(path).exists():
                violations.append(f"completed run {chash[:12]} lost its "
                                  f"{key}: {path}")
        store = open_store(root)
        for cid in record.get("checkpoints") or []:
            if not store.exists(cid):
                violations.append(f"completed run {chash[:12]} references "
                                  f"missing checkpoint {cid!r}")

    store = open_store(root)
    for cid in store.list_ids():
        if cid not in known_ckpts:
            violations.append(f"orphan checkpoint not in the ledger: {cid!r}")

    reports_dir = root / "reports"
    if reports_dir.exists():
        sources_path = reports_dir / "sources.json"
        if not sources_path.exists():
            violations.append(f"report directory without sources.json: "
                              f"{reports_dir}")
        else:
            listed = set(json.loads(sources_path.read_text())["files"])
            listed.add("sources.json")
            for path in sorted(reports_dir.iterdir()):
                if path.name not in listed:
                    violations.append(f"orphan report artifact: {path}")
    return violations
