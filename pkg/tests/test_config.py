import json

import pytest

from dfpir.config import (ConfigError, build_model, dataset_spec, default_config, dump_config, load_config,
                          model_config, parse_override, train_config)
from dfpir.prompts import write_prompt_file


class TestLoad:
    def test_defaults_are_valid(self):
        cfg = load_config()
        assert cfg == default_config()
        assert model_config(cfg).channels == 16

    def test_file_and_overrides(self, tiny_run_config):
        cfg = load_config(tiny_run_config, ["dgpb.gamma=0.5", "model.tasks=[\"derain\",\"dehaze\"]"], seed=4,
                          epochs=3)
        mc = model_config(cfg)
        assert mc.gamma == 0.5 and mc.tasks == ("derain", "dehaze") and mc.seed == 4
        assert train_config(cfg).epochs == 3
        assert dataset_spec(cfg).tasks == ("derain", "dehaze")

    def test_string_override(self):
        assert parse_override("dgpb.mask_mode=additive") == ("dgpb.mask_mode", "additive")
        assert parse_override("train.lr=1e-3") == ("train.lr", 1e-3)

    @pytest.mark.parametrize("override", ["model.widht=3", "model=3", "noequals", "dgpb.gamma=0",
                                          "data.tasks=[\"snow\"]", "data.patch=12", "train.batch_size=0",
                                          "seed=-1", "dgpb.mask_axis=\"diag\""])
    def test_bad_override(self, override):
        with pytest.raises(ConfigError):
            load_config(overrides=[override])

    def test_unknown_file_key(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"model": {"chanels": 8}}))
        with pytest.raises(ConfigError):
            load_config(path)

    @pytest.mark.parametrize("text", ["{not json", "[1, 2]"])
    def test_malformed_file(self, tmp_path, text):
        path = tmp_path / "c.json"
        path.write_text(text)
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.json")

    def test_dump_is_stable(self):
        a = dump_config(load_config())
        assert a == dump_config(json.loads(a))


class TestPrompts:
    def test_file_source(self, tmp_path):
        path = tmp_path / "p.dfpe"
        write_prompt_file(path, {t: [0.1 * (i + 1), -0.3 * i] * 4
                                 for i, t in enumerate(("noise25", "derain", "dehaze"))})
        cfg = load_config(overrides=["model.prompt_dim=8", "model.channels=4", f"prompts.source={path}"])
        assert build_model(cfg).prompts.source == "file"

    def test_identical_prompts_rejected(self, tmp_path):
        path = tmp_path / "p.dfpe"
        write_prompt_file(path, {t: [0.1] * 8 for t in ("noise25", "derain", "dehaze")})
        cfg = load_config(overrides=["model.prompt_dim=8", "model.channels=4", f"prompts.source={path}"])
        with pytest.raises(ConfigError):
            build_model(cfg)

    def test_file_with_wrong_tasks(self, tmp_path):
        path = tmp_path / "p.dfpe"
        write_prompt_file(path, {"derain": [0.1] * 8})
        cfg = load_config(overrides=["model.prompt_dim=8", f"prompts.source={path}"])
        with pytest.raises(ConfigError):
            build_model(cfg)

    def test_missing_prompt_file(self, tmp_path):
        cfg = load_config(overrides=[f"prompts.source={tmp_path / 'none.dfpe'}"])
        with pytest.raises(ConfigError):
            build_model(cfg)
