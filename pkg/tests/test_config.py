"""
Tests for config.py
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from config import (
    DataConfig, DatasetSchema, ExperimentConfig, FinetuneConfig, ModelConfig, OptimConfig,
    apply_overrides, load_config, output_root,
)
from errors import ConfigurationError


class TestModelConfig:
    """Tests for architecture validation."""

    def test_defaults_are_valid(self):
        config = ModelConfig()
        assert config.quantiles == [0.5, 0.9]
        assert config.seq_len == 24 and config.n_static == 0

    def test_width_must_split_into_heads(self):
        with pytest.raises(ConfigurationError, match="heads"):
            ModelConfig(model_dim=30)

    def test_patch_must_divide_history(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(patch_len=5)
        assert ModelConfig(patch_len=4).seq_len == 6

    @pytest.mark.parametrize("quantiles", [[0.9], [0.5, 0.5], [0.9, 0.5], [0.5, 1.0]])
    def test_bad_quantiles(self, quantiles):
        with pytest.raises(ConfigurationError):
            ModelConfig(quantiles=quantiles)

    def test_qkcv_needs_encoder(self):
        with pytest.raises(ConfigurationError, match="encoder"):
            ModelConfig(variant="v2")

    def test_unused_encoder(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(encoder="sce", static_cardinalities=[3])

    def test_compressor_is_vanilla_only(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(variant="v1", encoder="sce", static_path="compressor", static_cardinalities=[3])

    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(variant="v4")

    def test_qkcv_layers(self):
        config = ModelConfig(variant="v3", encoder="mlp", static_cardinalities=[3], qkcv_layers=[1])
        assert not config.uses_qkcv(0) and config.uses_qkcv(1)
        with pytest.raises(ConfigurationError):
            ModelConfig(variant="v3", encoder="mlp", static_cardinalities=[3], qkcv_layers=[2])

    def test_combiner_context_resolution(self):
        assert ModelConfig(variant="v3", encoder="sce", static_cardinalities=[3]).combiner_position
        assert not ModelConfig(variant="v1", encoder="sce", static_cardinalities=[3]).combiner_position
        assert not ModelConfig(variant="v3", encoder="sce", static_cardinalities=[3],
                               combiner_context="none").combiner_position
        assert ModelConfig(variant="v2", encoder="sce", static_cardinalities=[3],
                           combiner_context="position").combiner_position
        with pytest.raises(ConfigurationError):
            ModelConfig(combiner_context="time")

    def test_default_static_names(self):
        config = ModelConfig(variant="v1", encoder="sce", static_cardinalities=[3, 5])
        assert config.static_names == ["static_0", "static_1"]


class TestOtherSections:
    """Tests for the optimiser, data and fine-tuning sections."""

    def test_optim_ranges(self):
        with pytest.raises(ConfigurationError):
            OptimConfig(learning_rate=-1.0)
        with pytest.raises(ConfigurationError):
            OptimConfig(batch_size=0)

    def test_csv_source_needs_path(self):
        with pytest.raises(ConfigurationError):
            DataConfig(source="csv")

    def test_boundaries(self):
        assert DataConfig(boundaries=[10, 15]).resolve_boundaries(100) == (10, 15)
        assert DataConfig(train_fraction=0.5, val_fraction=0.25).resolve_boundaries(20) == (10, 15)

    @pytest.mark.parametrize("boundaries", [["x", "y"], [1.5, 3], [True, 4]])
    def test_boundaries_must_be_integers(self, boundaries):
        with pytest.raises(ConfigurationError, match="integer"):
            DataConfig(boundaries=boundaries)

    def test_schema_from_mapping(self):
        data = DataConfig(source="csv", path="panel.csv", schema={"static_columns": ["region"]})
        assert isinstance(data.schema, DatasetSchema)
        assert data.schema.static_columns == ["region"]

    def test_schema_cardinalities_align(self):
        with pytest.raises(ConfigurationError):
            DatasetSchema(static_columns=["a", "b"], cardinalities=[3])

    def test_base_model_is_category_free(self):
        model = ModelConfig(variant="v1", encoder="sce", static_cardinalities=[4], n_layers=2)
        base = FinetuneConfig(base_layers=3, patch_len=4).base_model(model)
        assert (base.variant, base.encoder, base.n_layers, base.patch_len) == ("vanilla", "none", 3, 4)

    def test_finetune_modes_checked(self):
        with pytest.raises(ConfigurationError):
            FinetuneConfig(modes=["pl", "lora"])
        with pytest.raises(ConfigurationError):
            FinetuneConfig(variants=["vanilla"])


class TestRunDocument:
    """Tests for loading run documents and overrides."""

    def test_overrides_parse_yaml_scalars(self):
        document = apply_overrides({}, ["model.variant=v3", "model.quantiles=[0.1,0.5,0.9]", "optim.max_steps=7"])
        assert document == {"model": {"variant": "v3", "quantiles": [0.1, 0.5, 0.9]}, "optim": {"max_steps": 7}}

    def test_override_needs_field(self):
        with pytest.raises(ConfigurationError):
            apply_overrides({}, ["model"])
        with pytest.raises(ConfigurationError):
            apply_overrides({}, ["model=v1"])

    def test_unparseable_override_value(self):
        with pytest.raises(ConfigurationError, match="unparseable"):
            apply_overrides({}, ["model.variant=["])

    @pytest.mark.parametrize("override", ["model.quantiles=[a,b]", "data.boundaries=[x,y]", "optim.max_steps=many"])
    def test_ill_typed_override(self, override):
        with pytest.raises(ConfigurationError):
            load_config(None, [override])

    def test_override_wins_over_file(self, write_config):
        path = write_config({"optim": {"max_steps": 100, "batch_size": 8}})
        cfg = load_config(path, ["optim.max_steps=5"])
        assert cfg.optim.max_steps == 5 and cfg.optim.batch_size == 8

    def test_unknown_section(self, write_config):
        with pytest.raises(ConfigurationError, match="sections"):
            load_config(write_config({"trainer": {}}))

    def test_unknown_key(self, write_config):
        with pytest.raises(ConfigurationError, match="max_step"):
            load_config(write_config({"optim": {"max_step": 3}}))

    def test_invalid_yaml(self, temp_data_dir):
        path = Path(temp_data_dir) / "broken.yaml"
        path.write_text("model: [unclosed\n")
        with pytest.raises(ConfigurationError):
            load_config(str(path))

    def test_dict_round_trip(self, small_run_document):
        cfg = ExperimentConfig.from_dict(small_run_document)
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg

    def test_output_root_from_environment(self, monkeypatch, temp_data_dir):
        monkeypatch.setenv("QKCV_OUTPUT_ROOT", temp_data_dir)
        assert output_root() == Path(temp_data_dir)
