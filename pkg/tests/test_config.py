"""Run-config schema validation, overrides, and typed views."""

import json

import pytest

from cascadematch.config import (ConfigError, DEFAULTS, RunConfig,
                                 load_run_config, validate_document)


class TestDefaults:
    def test_defaults_validate(self):
        run = load_run_config()
        assert run.seed == 0
        assert run.doc == DEFAULTS

    def test_pipeline_config_view(self):
        cfg = load_run_config().pipeline_config()
        assert cfg.scales == (8, 4, 2)
        assert cfg.threshold == 0.2
        assert cfg.cross_variant == "lw"

    def test_train_config_view(self):
        cfg = load_run_config().train_config(stage="cascade_2c", steps=7)
        assert cfg.stage == "cascade_2c"
        assert cfg.steps == 7
        assert cfg.gamma == 2.0


class TestValidation:
    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="modle"):
            validate_document({"modle": {}})

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="model"):
            load_run_config(overrides=("model.window=3",))

    def test_enum_violation(self):
        with pytest.raises(ConfigError):
            load_run_config(overrides=("detector.kind=blur",))

    def test_range_violation(self):
        with pytest.raises(ConfigError):
            load_run_config(overrides=("train.steps=0",))

    def test_cross_field_violation(self):
        # schema-valid scales that do not halve are caught downstream
        with pytest.raises(ConfigError):
            load_run_config(overrides=("model.scales=[8,2]",))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        bad = tmp_path / "run.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            load_run_config(bad)


class TestOverrides:
    def test_values_are_json_parsed(self):
        run = load_run_config(overrides=(
            "model.threshold=0.1",
            "detector.kind=nms",        # bare string form
            "train.cosine_decay=false",
            "eval.auc_px=[1,2]",
        ))
        assert run.doc["model"]["threshold"] == 0.1
        assert run.doc["detector"]["kind"] == "nms"
        assert run.doc["train"]["cosine_decay"] is False
        assert run.doc["eval"]["auc_px"] == [1, 2]

    def test_bad_override_shape(self):
        with pytest.raises(ConfigError):
            load_run_config(overrides=("model.threshold",))
        with pytest.raises(ConfigError):
            load_run_config(overrides=("=3",))

    def test_file_then_override_precedence(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"train": {"steps": 7}, "seed": 4}))
        run = load_run_config(path, overrides=("train.steps=3",))
        assert run.doc["train"]["steps"] == 3
        assert run.seed == 4

    def test_self_params_reach_attention_config(self):
        run = load_run_config(overrides=("model.self_params.lsa_window=5",))
        attn = run.pipeline_config().attention_config(4, "lsa")
        assert attn.lsa_window == 5

    def test_unknown_self_param_rejected(self):
        with pytest.raises(ConfigError):
            load_run_config(overrides=("model.self_params.window=5",))


class TestRoundTrip:
    def test_save_and_reload(self, tmp_path):
        run = load_run_config(overrides=("model.heads=2", "seed=3"))
        path = tmp_path / "saved.json"
        run.save(path)
        again = load_run_config(path)
        assert again.doc == run.doc

    def test_progressive_stage_allowed(self):
        run = load_run_config(overrides=("train.stage=progressive",))
        assert isinstance(run, RunConfig)
        # per-phase configs are built with an explicit stage
        assert run.train_config(stage="coarse_only").stage == "coarse_only"
