import json

import pytest

from piscolab.config import (
    MODES,
    ExperimentConfig,
    build_config,
    config_hash,
    desk_task_grids,
    load_config_file,
    parse_augment,
    to_json_dict,
)
from piscolab.env import make_task_grids
from piscolab.errors import ConfigError
from piscolab.pisco import Compose, RandomRotation, RandomShift


class TestModeDefaults:
    def test_denovo(self):
        cfg = build_config(mode="DeNovo")
        assert cfg.freeze_upto is None
        assert cfg.ppo.head_lr == 5e-4
        assert cfg.ppo.encoder_lr == 5e-4
        assert cfg.ppo.pisco_weight == 0.0

    def test_frozen_freezes_whole_encoder(self):
        cfg = build_config(mode="Frozen")
        assert cfg.freeze_upto == "Linear"
        assert cfg.ppo.head_lr == 1e-3
        assert cfg.ppo.pisco_weight == 0.0

    def test_finetuned_decoupled_lrs(self):
        cfg = build_config(mode="Finetuned")
        assert cfg.freeze_upto is None
        assert cfg.ppo.head_lr == 1e-3
        assert cfg.ppo.encoder_lr == 1e-4

    def test_frozen_finetuned_partial_freeze(self):
        cfg = build_config(mode="FrozenFinetuned")
        assert cfg.freeze_upto == "Conv3"
        assert cfg.ppo.head_lr == 1e-3
        assert cfg.ppo.encoder_lr == 1e-4

    def test_frozen_pisco_enables_consistency_loss(self):
        cfg = build_config(mode="FrozenPisco")
        assert cfg.freeze_upto == "Conv3"
        assert cfg.ppo.pisco_weight == 0.01
        assert cfg.ppo.pisco_kind == "policy_kl"

    def test_frozen_simsiam_uses_cosine(self):
        cfg = build_config(mode="FrozenSimSiam")
        assert cfg.freeze_upto == "Conv3"
        assert cfg.ppo.pisco_weight == 0.01
        assert cfg.ppo.pisco_kind == "negative_cosine"

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            build_config(mode="Fancy")

    def test_all_modes_build(self):
        for mode in MODES:
            assert isinstance(build_config(mode=mode), ExperimentConfig)


class TestProfiles:
    def test_paper_profile_sizes(self):
        cfg = build_config(profile="paper")
        assert cfg.ppo.iterations == 500
        assert cfg.ppo.episodes_per_iter == 80
        assert cfg.ppo.updates_per_iter == 320

    def test_desk_profile_sizes(self):
        cfg = build_config(profile="desk")
        assert cfg.ppo.iterations == 200
        assert cfg.ppo.batch_size == 64

    def test_unknown_profile(self):
        with pytest.raises(ConfigError):
            build_config(profile="laptop")

    def test_desk_grids_shape(self):
        src, dst = desk_task_grids()
        assert len(src) == 4
        assert len(dst) == 4
        for a, b in zip(src, dst):
            assert b.obstacle_x == a.obstacle_x + 2
            assert b.floor_y == a.floor_y + 2

    def test_desk_grids_subset_of_full(self):
        full_src, full_dst = make_task_grids()
        src, dst = desk_task_grids()
        assert all(t in full_src for t in src)
        assert all(t in full_dst for t in dst)
        assert not set(src) & set(dst)


class TestPrecedence:
    def test_file_overrides_defaults(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"ppo": {"iterations": 7}, "seed": 5}))
        cfg = build_config(config_file=str(p))
        assert cfg.ppo.iterations == 7
        assert cfg.seed == 5

    def test_cli_overrides_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"ppo": {"iterations": 7}, "seed": 5}))
        cfg = build_config(config_file=str(p), seed=9, iterations=11)
        assert cfg.seed == 9
        assert cfg.ppo.iterations == 11

    def test_mode_from_file_sets_defaults(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"mode": "Finetuned"}))
        cfg = build_config(config_file=str(p))
        assert cfg.ppo.encoder_lr == 1e-4

    def test_explicit_lr_beats_mode_default(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"mode": "Finetuned", "ppo": {"encoder_lr": 3e-4}}))
        cfg = build_config(config_file=str(p))
        assert cfg.ppo.encoder_lr == 3e-4

    def test_freeze_override(self):
        cfg = build_config(mode="FrozenPisco", freeze_upto="Conv2")
        assert cfg.freeze_upto == "Conv2"

    def test_freeze_none_string(self):
        cfg = build_config(mode="Frozen", freeze_upto="none")
        assert cfg.freeze_upto is None

    def test_unknown_top_level_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"modee": "Frozen"}))
        with pytest.raises(ConfigError):
            build_config(config_file=str(p))

    def test_unknown_ppo_key(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"ppo": {"clip": 0.2}}))
        with pytest.raises(ConfigError):
            build_config(config_file=str(p))

    def test_bad_value_surfaces_config_error(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"ppo": {"gamma": 1.5}}))
        with pytest.raises(ConfigError):
            build_config(config_file=str(p))

    def test_missing_file(self):
        with pytest.raises(FileNotFoundError):
            load_config_file("/nonexistent/config.json")


class TestAugmentParsing:
    def test_shift(self):
        assert parse_augment({"kind": "shift", "pad": 3}) == RandomShift(pad=3)

    def test_rotation(self):
        spec = parse_augment({"kind": "rotation", "max_deg": 9.0})
        assert spec == RandomRotation(max_deg=9.0)

    def test_compose(self):
        spec = parse_augment({"kind": "compose", "specs": [
            {"kind": "shift", "pad": 2}, {"kind": "rotation", "max_deg": 4.0}]})
        assert spec == Compose(specs=(RandomShift(2), RandomRotation(4.0)))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            parse_augment({"kind": "blur"})

    def test_from_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"mode": "FrozenPisco",
                                 "pisco": {"augment": {"kind": "rotation",
                                                       "max_deg": 6.0}}}))
        cfg = build_config(config_file=str(p))
        assert cfg.ppo.augment == RandomRotation(6.0)

    def test_pisco_overrides(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"mode": "FrozenPisco",
                                 "pisco": {"weight": 0.05,
                                           "use_projector": False}}))
        cfg = build_config(config_file=str(p))
        assert cfg.ppo.pisco_weight == 0.05
        assert cfg.ppo.use_projector is False


class TestHashAndRoundTrip:
    def test_hash_stable(self):
        a = build_config(mode="Frozen", seed=3)
        b = build_config(mode="Frozen", seed=3)
        assert config_hash(a) == config_hash(b)

    def test_hash_sensitive_to_fields(self):
        a = build_config(mode="Frozen", seed=3)
        b = build_config(mode="Frozen", seed=4)
        c = build_config(mode="Frozen", seed=3, iterations=9)
        assert config_hash(a) != config_hash(b)
        assert config_hash(a) != config_hash(c)

    def test_json_round_trip(self, tmp_path):
        cfg = build_config(mode="FrozenSimSiam", seed=12, iterations=17)
        p = tmp_path / "echo.json"
        p.write_text(json.dumps(to_json_dict(cfg)))
        again = build_config(config_file=str(p))
        assert again == cfg
        assert config_hash(again) == config_hash(cfg)

    def test_out_dir_env_default(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PISCO_OUT_DIR", str(tmp_path / "runs"))
        cfg = build_config()
        assert cfg.out_dir == str(tmp_path / "runs")

    def test_out_dir_flag_beats_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PISCO_OUT_DIR", str(tmp_path / "envruns"))
        cfg = build_config(out_dir=str(tmp_path / "cli"))
        assert cfg.out_dir == str(tmp_path / "cli")
