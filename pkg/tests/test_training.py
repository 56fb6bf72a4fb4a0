"""Tests for the training engine: protocols, early stopping, pretraining."""

import numpy as np
import pytest
import torch

from fundusfm import metrics
from fundusfm.checkpoints import (
    CheckpointStore,
    ensure_general_checkpoint,
    general_checkpoint_id,
    module_checksum,
)
from fundusfm.errors import ConfigError, TrainingDivergedError
from fundusfm.models import ResNetBackbone, build_model, build_segmentation_model
from fundusfm.preprocess import Augmentation, PreprocessConfig, preprocess
from fundusfm.synthetic import (
    generate_abnormality,
    generate_multilabel,
    generate_vessels,
    write_classification,
)
from fundusfm.data import load_manifest
from fundusfm.training import (
    Samples,
    TrainingLog,
    TrainSpec,
    _binary_class_weights,
    pretrain_upstream,
    samples_from_manifest,
    train,
    upstream_validation_split,
)

W = 8
PLAIN = PreprocessConfig(resolution=64, augmentations=(), strict_resolution=False)


def binary_samples(n=120, seed=0, difficulty="mean_shift", size=64):
    data = generate_abnormality(n, size=size, seed=seed, difficulty=difficulty)
    cut = int(n * 0.8)
    tr = Samples(images=data.images[:cut], targets=data.labels[:cut],
                 task_kind="abnormality")
    va = Samples(images=data.images[cut:], targets=data.labels[cut:],
                 task_kind="abnormality")
    return tr, va, data


class TestTrainSpec:
    def test_defaults_follow_reference_protocol(self):
        spec = TrainSpec()
        assert spec.learning_rate == 1e-5
        assert spec.betas == (0.9, 0.999)
        assert spec.weight_decay == 1e-5
        assert spec.batch_size == 32
        assert spec.max_epochs == 100
        assert spec.patience == 10

    def test_roundtrip(self):
        spec = TrainSpec(learning_rate=1e-3, protocol="linear_probe",
                         class_weights=(0.625, 2.5))
        assert TrainSpec.from_dict(spec.to_dict()) == spec

    @pytest.mark.parametrize("kwargs", [
        {"protocol": "distill"},
        {"loss": "hinge"},
        {"batch_size": 0},
        {"learning_rate": 0.0},
        {"class_weights": (1.0, -1.0)},
    ])
    def test_invalid_specs_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            TrainSpec(**kwargs)


class TestTrainingLog:
    def test_jsonl_roundtrip(self, tmp_path):
        log = TrainingLog()
        log.append(0, 0.9, 0.5, 1e-3, 0.1)
        log.append(1, 0.5, 0.8, 1e-3, 0.1)
        log.best_epoch, log.best_monitor = 1, 0.8
        path = tmp_path / "log.jsonl"
        log.to_jsonl(path)
        loaded = TrainingLog.from_jsonl(path)
        assert loaded.entries == log.entries
        assert loaded.best_epoch == 1
        assert loaded.best_monitor == 0.8

    def test_entry_schema(self):
        log = TrainingLog()
        log.append(0, 1.0, 0.5, 1e-5, 2.0)
        assert set(log.entries[0]) == {"epoch", "train_loss", "val_monitor",
                                       "lr", "wall_seconds"}


class TestLinearProbeFreeze:
    def test_fast_path_backbone_bit_identical(self):
        tr, va, _ = binary_samples()
        bundle = build_model("scratch", "abnormality", 64, seed=1, base_width=W)
        before = module_checksum(bundle.backbone)
        spec = TrainSpec(learning_rate=1e-2, max_epochs=3, patience=3,
                         protocol="linear_probe")
        bundle, _ = train(bundle, spec, tr, va, PLAIN, seed=0)
        assert module_checksum(bundle.backbone) == before

    def test_augmented_path_backbone_bit_identical(self):
        # stochastic augmentations force per-batch forward passes through the
        # frozen backbone; BN statistics must still not move
        tr, va, _ = binary_samples(n=60)
        bundle = build_model("scratch", "abnormality", 64, seed=2, base_width=W)
        before = module_checksum(bundle.backbone)
        cfg = PreprocessConfig(resolution=64,
                               augmentations=(Augmentation("horizontal_flip", p=0.5),),
                               train_mode=True, strict_resolution=False)
        spec = TrainSpec(learning_rate=1e-2, max_epochs=2, patience=2,
                         protocol="linear_probe")
        bundle, _ = train(bundle, spec, tr, va, cfg, seed=0)
        assert module_checksum(bundle.backbone) == before

    def test_head_does_change(self):
        tr, va, _ = binary_samples()
        bundle = build_model("scratch", "abnormality", 64, seed=3, base_width=W)
        head_before = module_checksum(bundle.head)
        spec = TrainSpec(learning_rate=1e-2, max_epochs=2, patience=2,
                         protocol="linear_probe")
        bundle, _ = train(bundle, spec, tr, va, PLAIN, seed=0)
        assert module_checksum(bundle.head) != head_before


class TestFineTuning:
    def test_separable_toy_reaches_high_auc(self):
        tr, va, data = binary_samples(n=200, seed=5)
        # the toy really is separable: a raw pixel-mean threshold must do it
        pixel_scores = data.images.reshape(len(data.images), -1).mean(axis=1)
        oracle = metrics.auc(metrics.ScoredSet(scores=pixel_scores,
                                               labels=data.labels))
        assert oracle >= 0.99
        bundle = build_model("scratch", "abnormality", 64, seed=0, base_width=W)
        spec = TrainSpec(learning_rate=1e-3, max_epochs=20, patience=20,
                         protocol="fine_tune")
        bundle, log = train(bundle, spec, tr, va, PLAIN, seed=0)
        assert log.best_monitor >= 0.95
        assert len(log.entries) <= 20

    def test_best_epoch_weights_reproduce_logged_monitor(self):
        tr, va, _ = binary_samples(n=80, seed=6)
        bundle = build_model("scratch", "abnormality", 64, seed=0, base_width=W)
        spec = TrainSpec(learning_rate=1e-3, max_epochs=4, patience=4)
        bundle, log = train(bundle, spec, tr, va, PLAIN, seed=0, deterministic=True)
        logits = bundle.predict(np.stack([preprocess(img, PLAIN)
                                          for img in va.images]))
        scored = metrics.ScoredSet(scores=logits[:, 1] - logits[:, 0],
                                   labels=np.asarray(va.targets))
        assert metrics.auc(scored) == log.best_monitor


class TestEarlyStopping:
    def test_scripted_monitor_halts_and_restores_peak(self):
        tr, va, _ = binary_samples(n=40, seed=7)
        bundle = build_model("scratch", "abnormality", 64, seed=0, base_width=W)
        schedule = [0.2, 0.5, 0.9, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05]
        head_sums = {}

        def hook(epoch, b):
            head_sums[epoch] = module_checksum(b.head)
            return schedule[epoch]

        spec = TrainSpec(learning_rate=1e-3, max_epochs=30, patience=5)
        bundle, log = train(bundle, spec, tr, va, PLAIN, seed=0, monitor_hook=hook)
        assert log.best_epoch == 2
        assert log.stopped_early
        assert len(log.entries) == 8  # peak at 2, five bad epochs after
        assert module_checksum(bundle.head) == head_sums[2]

    def test_nan_monitor_aborts(self):
        tr, va, _ = binary_samples(n=40, seed=8)
        bundle = build_model("scratch", "abnormality", 64, seed=0, base_width=W)
        spec = TrainSpec(learning_rate=1e-3, max_epochs=5, patience=5)
        with pytest.raises(TrainingDivergedError):
            train(bundle, spec, tr, va, PLAIN, seed=0,
                  monitor_hook=lambda e, b: float("nan"))

    def test_patience_zero_disables_early_stop(self):
        tr, va, _ = binary_samples(n=40, seed=9)
        bundle = build_model("scratch", "abnormality", 64, seed=0, base_width=W)
        spec = TrainSpec(learning_rate=1e-3, max_epochs=4, patience=0)
        _, log = train(bundle, spec, tr, va, PLAIN, seed=0,
                       monitor_hook=lambda e, b: -float(e))
        assert len(log.entries) == 4
        assert not log.stopped_early


class TestDeterminism:
    def test_same_seed_reproduces_loss_sequence(self):
        tr, va, _ = binary_samples(n=60, seed=10)
        logs = []
        for _ in range(2):
            bundle = build_model("scratch", "abnormality", 64, seed=4, base_width=W)
            _, log = train(bundle, TrainSpec(learning_rate=1e-3, max_epochs=3,
                                             patience=3),
                           tr, va, PLAIN, seed=21, deterministic=True)
            logs.append(log)
        assert logs[0].loss_sequence == logs[1].loss_sequence
        assert logs[0].monitor_sequence == logs[1].monitor_sequence

    def test_different_seed_changes_course(self):
        tr, va, _ = binary_samples(n=60, seed=10)
        seqs = []
        for seed in (0, 1):
            bundle = build_model("scratch", "abnormality", 64, seed=4, base_width=W)
            _, log = train(bundle, TrainSpec(learning_rate=1e-3, max_epochs=2,
                                             patience=2),
                           tr, va, PLAIN, seed=seed)
            seqs.append(log.loss_sequence)
        assert seqs[0] != seqs[1]


class TestTaskPaths:
    def test_multilabel_training_runs(self):
        data = generate_multilabel(60, size=48, seed=0)
        tr = Samples(images=data.images[:48], targets=data.labels[:48],
                     task_kind="multi_disease")
        va = Samples(images=data.images[48:], targets=data.labels[48:],
                     task_kind="multi_disease")
        cfg = PreprocessConfig(resolution=48, augmentations=(),
                               strict_resolution=False)
        bundle = build_model("scratch", "multi_disease", 48, seed=0, base_width=W)
        _, log = train(bundle, TrainSpec(learning_rate=1e-3, max_epochs=2,
                                         patience=2), tr, va, cfg, seed=0)
        assert len(log.entries) == 2
        assert 0.0 <= log.best_monitor <= 1.0

    def test_segmentation_training_runs(self):
        data = generate_vessels(24, size=64, seed=0)
        tr = Samples(images=data.images[:18], targets=data.masks[:18],
                     task_kind="vessel_segmentation")
        va = Samples(images=data.images[18:], targets=data.masks[18:],
                     task_kind="vessel_segmentation")
        bundle = build_segmentation_model("scratch", 64, seed=0, base_width=W)
        _, log = train(bundle, TrainSpec(learning_rate=1e-3, max_epochs=2,
                                         patience=2, protocol="fine_tune"),
                       tr, va, PLAIN, seed=0)
        assert len(log.entries) == 2
        assert 0.0 <= log.best_monitor <= 1.0

    def test_loss_task_mismatch_rejected(self):
        tr, va, _ = binary_samples(n=40)
        bundle = build_model("scratch", "abnormality", 64, seed=0, base_width=W)
        spec = TrainSpec(loss="dice_loss")
        with pytest.raises(ConfigError):
            train(bundle, spec, tr, va, PLAIN, seed=0)

    def test_samples_task_mismatch_rejected(self):
        tr, va, _ = binary_samples(n=40)
        bundle = build_model("scratch", "multi_disease", 64, seed=0, base_width=W)
        with pytest.raises(ConfigError):
            train(bundle, TrainSpec(), tr, va, PLAIN, seed=0)

    def test_linear_probe_rejected_for_segmentation(self):
        data = generate_vessels(8, size=64, seed=0)
        samples = Samples(images=data.images, targets=data.masks,
                          task_kind="vessel_segmentation")
        bundle = build_segmentation_model("scratch", 64, seed=0, base_width=W)
        with pytest.raises(ConfigError):
            train(bundle, TrainSpec(protocol="linear_probe"), samples, samples,
                  PLAIN, seed=0)


class TestClassWeights:
    def test_default_inverse_prevalence_eighty_twenty(self):
        labels = np.array([0] * 80 + [1] * 20)
        weights = _binary_class_weights(TrainSpec(), labels)
        assert np.allclose(weights.numpy(), [0.625, 2.5], atol=1e-6)
        prevalence = np.array([0.8, 0.2])
        assert abs(float(weights.numpy() @ prevalence) - 1.0) <= 1e-6

    def test_explicit_weights_pass_through(self):
        weights = _binary_class_weights(TrainSpec(class_weights=(1.0, 3.0)),
                                        np.array([0, 1]))
        assert weights.tolist() == [1.0, 3.0]

    def test_missing_class_warns_and_uses_uniform(self):
        tr, va, _ = binary_samples(n=40, seed=11)
        one_class = Samples(images=tr.images,
                            targets=np.ones(len(tr), dtype=np.int64),
                            task_kind="abnormality")
        bundle = build_model("scratch", "abnormality", 64, seed=0, base_width=W)
        spec = TrainSpec(learning_rate=1e-3, max_epochs=1, patience=1)
        with pytest.warns(UserWarning, match="uniform"):
            train(bundle, spec, one_class, va, PLAIN, seed=0,
                  monitor_hook=lambda e, b: 0.5)


class TestUpstream:
    def _pool(self, n=100, seed=12):
        data = generate_abnormality(n, size=64, seed=seed, difficulty="mean_shift")
        return Samples(images=data.images, targets=data.labels,
                       task_kind="abnormality"), data.patients

    def test_fundus_provenance(self, tmp_path):
        store = CheckpointStore(tmp_path)
        samples, patients = self._pool()
        spec = TrainSpec(learning_rate=1e-3, max_epochs=2, patience=2)
        ckpt_id = pretrain_upstream("fundus", samples, patients, 64, spec, 0,
                                    store, base_width=W, preprocess_config=PLAIN)
        _, meta = store.load(ckpt_id)
        assert meta["provenance"] == ["scratch_init", "fundus_pretrained"]
        assert ckpt_id == f"upstream_fundus_r64_w{W}"

    def test_general_fundus_two_stage_contract(self, tmp_path):
        store = CheckpointStore(tmp_path)
        ensure_general_checkpoint(store, W, seed=0)
        samples, patients = self._pool()
        spec = TrainSpec(learning_rate=1e-3, max_epochs=2, patience=2)
        ckpt_id = pretrain_upstream("general_fundus", samples, patients, 64,
                                    spec, 0, store, base_width=W,
                                    preprocess_config=PLAIN)
        _, meta = store.load(ckpt_id)
        assert meta["provenance"] == ["general_init", "fundus_pretrained"]
        general_blobs, _ = store.load(general_checkpoint_id(W))
        reference = ResNetBackbone(W)
        store.load_module(reference, general_blobs, prefix="backbone.")
        assert meta["init_backbone_checksum"] == module_checksum(reference)

    def test_sidecar_records_run_facts(self, tmp_path):
        store = CheckpointStore(tmp_path)
        samples, patients = self._pool(n=80, seed=13)
        spec = TrainSpec(learning_rate=1e-3, max_epochs=2, patience=2)
        ckpt_id = pretrain_upstream("fundus", samples, patients, 64, spec, 33,
                                    store, base_width=W, preprocess_config=PLAIN,
                                    config_hash="abc123")
        _, meta = store.load(ckpt_id)
        assert meta["rng_seed"] == 33
        assert meta["config_hash"] == "abc123"
        assert meta["resolution"] == 64
        assert 0 <= meta["epoch"] < 2
        assert 0.0 <= meta["val_metric"] <= 1.0

    def test_wrong_regime_rejected(self, tmp_path):
        samples, patients = self._pool(n=20)
        with pytest.raises(ConfigError):
            pretrain_upstream("scratch", samples, patients, 64, TrainSpec(), 0,
                              CheckpointStore(tmp_path), base_width=W)

    def test_split_is_patient_grouped(self):
        patients = [f"P{idx // 4:03d}" for idx in range(80)]
        train_idx, val_idx = upstream_validation_split(80, patients, seed=0)
        train_patients = {patients[i] for i in train_idx}
        val_patients = {patients[i] for i in val_idx}
        assert not (train_patients & val_patients)
        assert len(train_idx) + len(val_idx) == 80


class TestSamplesLoading:
    def test_from_binary_manifest(self, tmp_path):
        data = generate_abnormality(10, size=48, seed=0)
        manifest = load_manifest(write_classification(data, tmp_path, "toy"),
                                 task_kind="abnormality")
        samples = samples_from_manifest(manifest)
        assert len(samples) == 10
        assert np.array_equal(np.asarray(samples.targets), data.labels)
        assert np.array_equal(samples.images[3], data.images[3])

    def test_subset_by_indices(self, tmp_path):
        data = generate_abnormality(10, size=48, seed=0)
        manifest = load_manifest(write_classification(data, tmp_path, "toy"),
                                 task_kind="abnormality")
        samples = samples_from_manifest(manifest, indices=[1, 4, 7])
        assert len(samples) == 3
        assert samples.targets[1] == data.labels[4]
