"""Tests for experiment config parsing, grid expansion, and hashing."""

import pytest

from fundusfm.config import (ExperimentConfig, config_hash, expand_grid,
                             load_experiment_configs, load_yaml_mapping,
                             run_name)
from fundusfm.errors import ConfigError

MINIMAL = {
    "task_kind": "abnormality",
    "regime": "scratch",
    "resolution": 256,
    "protocol": "linear_probe",
    "manifest_path": "data/manifest.csv",
}


class TestFromMapping:
    def test_minimal_mapping_fills_defaults(self):
        cfg = ExperimentConfig.from_mapping(MINIMAL)
        assert cfg.fraction == 1.0
        assert cfg.n_folds == 5
        assert cfg.base_width == 64
        assert cfg.spec.protocol == "linear_probe"
        assert cfg.preprocess.resolution == 256
        assert cfg.upstream_checkpoint is None

    @pytest.mark.parametrize("missing", ["task_kind", "regime", "resolution",
                                         "protocol", "manifest_path"])
    def test_missing_required_field_named(self, missing):
        mapping = {k: v for k, v in MINIMAL.items() if k != missing}
        with pytest.raises(ConfigError, match=missing):
            ExperimentConfig.from_mapping(mapping)

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            ExperimentConfig.from_mapping({**MINIMAL, "learning_rate": 0.1})

    @pytest.mark.parametrize("field,value", [
        ("task_kind", "segmentation"),
        ("regime", "imagenet"),
        ("protocol", "probe"),
        ("fraction", 0.0),
        ("fraction", 1.5),
        ("n_folds", 1),
        ("base_width", 0),
    ])
    def test_invalid_values_name_the_field(self, field, value):
        with pytest.raises(ConfigError, match=field):
            ExperimentConfig.from_mapping({**MINIMAL, field: value})

    def test_spec_protocol_conflict(self):
        mapping = {**MINIMAL, "spec": {"protocol": "fine_tune"}}
        with pytest.raises(ConfigError, match="protocol"):
            ExperimentConfig.from_mapping(mapping)

    def test_spec_error_carries_field_path(self):
        mapping = {**MINIMAL, "spec": {"learning_rate": -1.0}}
        with pytest.raises(ConfigError, match="spec"):
            ExperimentConfig.from_mapping(mapping)

    def test_preprocess_resolution_conflict(self):
        mapping = {**MINIMAL, "preprocess": {"resolution": 512,
                                             "augmentations": []}}
        with pytest.raises(ConfigError, match="preprocess.resolution"):
            ExperimentConfig.from_mapping(mapping)

    def test_relative_paths_resolve_against_base_dir(self, tmp_path):
        cfg = ExperimentConfig.from_mapping(
            {**MINIMAL, "output_dir": "out"}, base_dir=tmp_path)
        assert cfg.manifest_path == str(tmp_path / "data" / "manifest.csv")
        assert cfg.output_dir == str(tmp_path / "out")


class TestHashing:
    def test_field_order_does_not_change_hash(self):
        forward = ExperimentConfig.from_mapping(dict(MINIMAL))
        backward = ExperimentConfig.from_mapping(
            dict(reversed(list(MINIMAL.items()))))
        assert config_hash(forward) == config_hash(backward)

    def test_output_dir_excluded_from_hash(self):
        plain = ExperimentConfig.from_mapping(MINIMAL)
        placed = ExperimentConfig.from_mapping({**MINIMAL,
                                                "output_dir": "elsewhere"})
        assert config_hash(plain) == config_hash(placed)

    def test_semantic_change_changes_hash(self):
        plain = ExperimentConfig.from_mapping(MINIMAL)
        changed = ExperimentConfig.from_mapping({**MINIMAL, "fraction": 0.5})
        assert config_hash(plain) != config_hash(changed)

    def test_run_name_readable_and_hash_suffixed(self):
        cfg = ExperimentConfig.from_mapping({**MINIMAL, "fraction": 0.1})
        name = run_name(cfg)
        assert name.startswith("abnormality_scratch_linear_probe_r256_f0.1_")
        assert name.endswith(config_hash(cfg)[:12])


class TestGridExpansion:
    def test_no_grid_is_single_cell(self):
        assert expand_grid(dict(MINIMAL)) == [MINIMAL]

    def test_cross_product_in_sorted_key_order(self):
        cells = expand_grid({**MINIMAL,
                             "grid": {"regime": ["scratch", "fundus"],
                                      "fraction": [0.1, 1.0]}})
        assert len(cells) == 4
        combos = [(c["fraction"], c["regime"]) for c in cells]
        assert combos == [(0.1, "scratch"), (0.1, "fundus"),
                          (1.0, "scratch"), (1.0, "fundus")]
        assert all("grid" not in c for c in cells)

    def test_dotted_keys_override_nested_sections(self):
        cells = expand_grid({**MINIMAL, "spec": {"batch_size": 4},
                             "grid": {"spec.max_epochs": [1, 2]}})
        assert [c["spec"] for c in cells] == [
            {"batch_size": 4, "max_epochs": 1},
            {"batch_size": 4, "max_epochs": 2}]

    def test_grid_cells_do_not_share_nested_state(self):
        cells = expand_grid({**MINIMAL, "spec": {"batch_size": 4},
                             "grid": {"spec.max_epochs": [1, 2]}})
        cells[0]["spec"]["batch_size"] = 99
        assert cells[1]["spec"]["batch_size"] == 4

    def test_empty_grid_list_rejected(self):
        with pytest.raises(ConfigError, match="grid.regime"):
            expand_grid({**MINIMAL, "grid": {"regime": []}})


class TestLoading:
    def test_yaml_roundtrip_with_grid(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text(
            "task_kind: abnormality\n"
            "regime: scratch\n"
            "resolution: 256\n"
            "protocol: linear_probe\n"
            "manifest_path: data/m.csv\n"
            "grid:\n  fraction: [0.1, 1.0]\n")
        cells = load_experiment_configs(path)
        assert [c.fraction for c in cells] == [0.1, 1.0]
        assert cells[0].manifest_path == str(tmp_path / "data" / "m.csv")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_experiment_configs(tmp_path / "absent.yaml")

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("task_kind: [unclosed\n")
        with pytest.raises(ConfigError, match="YAML"):
            load_experiment_configs(path)

    def test_non_mapping_document(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- a\n- b\n")
        with pytest.raises(ConfigError, match="mapping"):
            load_yaml_mapping(path)
