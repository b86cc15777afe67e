"""Config defaults, YAML snapshots, overrides, and validation."""

import dataclasses

import pytest

from dicad.config import (
    RunConfig,
    apply_overrides,
    config_from_dict,
    config_to_dict,
    default_config,
    load_config,
    save_config,
    validate_config,
)
from dicad.errors import ConfigError


class TestDefaults:
    def test_defaults_are_valid(self):
        validate_config(default_config())

    def test_published_operating_point(self):
        cfg = default_config()
        assert cfg.schedule.beta_start == 0.0015
        assert cfg.schedule.beta_end == 0.0195
        assert cfg.schedule.total_steps == 1000
        assert cfg.depth.t_max == 80
        assert cfg.depth.num_bins == 10
        assert cfg.depth.min_bin == 2
        assert cfg.depth.num_neighbors == 20
        assert cfg.depth.round_multiple == 10
        assert cfg.sampling.steps == 10
        assert cfg.maps.latent_weight == 0.85
        assert cfg.maps.smoothing_sigma == 4.0
        assert cfg.maps.blocks == (2, 3)
        assert cfg.denoiser.learning_rate == 1e-4
        assert cfg.denoiser.weight_decay == 0.01

    def test_sections_are_frozen(self):
        cfg = default_config()
        with pytest.raises(dataclasses.FrozenInstanceError):
            cfg.depth.t_max = 5


class TestDictRoundTrip:
    def test_round_trip_preserves_everything(self):
        cfg = apply_overrides(
            default_config(),
            ["depth.t_max=60", "maps.blocks=1,2,3", "seed=7", "sampling.eta=2.5"],
        )
        assert config_from_dict(config_to_dict(cfg)) == cfg

    def test_tuples_become_lists_in_dict(self):
        raw = config_to_dict(default_config())
        assert raw["maps"]["blocks"] == [2, 3]
        assert raw["extractor"]["widths"] == [16, 32, 64, 128]

    def test_partial_dict_fills_defaults(self):
        cfg = config_from_dict({"depth": {"t_max": 40}})
        assert cfg.depth.t_max == 40
        assert cfg.depth.num_bins == 10
        assert cfg.maps.latent_weight == 0.85

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown config section 'sampler'"):
            config_from_dict({"sampler": {"steps": 5}})

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key 'depth.tmax'"):
            config_from_dict({"depth": {"tmax": 40}})

    def test_non_mapping_root_rejected(self):
        with pytest.raises(ConfigError, match="mapping"):
            config_from_dict(["depth"])

    def test_wrong_value_type_rejected(self):
        with pytest.raises(ConfigError, match="depth.t_max expects an integer"):
            config_from_dict({"depth": {"t_max": "eighty"}})


class TestYamlFiles:
    def test_save_load_round_trip(self, tmp_path):
        cfg = apply_overrides(default_config(), ["data.resolution=32", "seed=3"])
        path = tmp_path / "config.yaml"
        save_config(path, cfg)
        assert load_config(path) == cfg

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.yaml")

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("depth: [unclosed\n")
        with pytest.raises(ConfigError, match="not valid YAML"):
            load_config(path)

    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        assert load_config(path) == default_config()

    def test_no_stray_tmp_file(self, tmp_path):
        save_config(tmp_path / "config.yaml", default_config())
        assert sorted(p.name for p in tmp_path.iterdir()) == ["config.yaml"]


class TestOverrides:
    def test_int_coercion(self):
        cfg = apply_overrides(default_config(), ["depth.t_max=40"])
        assert cfg.depth.t_max == 40

    def test_float_coercion(self):
        cfg = apply_overrides(default_config(), ["sampling.eta=2.5"])
        assert cfg.sampling.eta == 2.5

    def test_bool_coercion(self):
        cfg = apply_overrides(default_config(), ["adapt.rebuild_index=false"])
        assert cfg.adapt.rebuild_index is False

    def test_tuple_coercion(self):
        cfg = apply_overrides(default_config(), ["maps.blocks=1,3"])
        assert cfg.maps.blocks == (1, 3)

    def test_string_passthrough(self):
        cfg = apply_overrides(default_config(), ["codec.kind=identity"])
        assert cfg.codec.kind == "identity"

    def test_bare_seed(self):
        assert apply_overrides(default_config(), ["seed=41"]).seed == 41

    def test_later_override_wins(self):
        cfg = apply_overrides(default_config(), ["depth.t_max=40", "depth.t_max=60"])
        assert cfg.depth.t_max == 60

    def test_original_untouched(self):
        base = default_config()
        apply_overrides(base, ["depth.t_max=40"])
        assert base.depth.t_max == 80

    @pytest.mark.parametrize(
        "item, pattern",
        [
            ("depth.t_max", "not of the form"),
            ("t_max=40", "needs a section prefix"),
            ("nosuch.t_max=40", "unknown config section"),
            ("depth.nosuch=40", "unknown config key"),
            ("depth.t_max=forty", "expects an integer"),
            ("sampling.eta=fast", "expects a number"),
            ("adapt.rebuild_index=maybe", "expects a boolean"),
            ("maps.blocks=a,b", "expects a list of integers"),
            ("seed=x", "seed expects an integer"),
        ],
    )
    def test_bad_overrides(self, item, pattern):
        with pytest.raises(ConfigError, match=pattern):
            apply_overrides(default_config(), [item])


class TestValidation:
    @pytest.mark.parametrize(
        "overrides, pattern",
        [
            (["data.source=database"], "data.source"),
            (["data.source=folder"], "requires data.root"),
            (["data.resolution=4"], "resolution"),
            (["schedule.beta_start=0"], "beta_start"),
            (["schedule.beta_start=0.5", "schedule.beta_end=0.4"], "beta_start"),
            (["depth.t_max=2000"], "exceeds schedule.total_steps"),
            (["depth.t_max=0"], "t_max"),
            (["depth.min_bin=11"], "min_bin"),
            (["depth.min_bin=0"], "min_bin"),
            (["depth.num_neighbors=200"], "training images"),
            (["depth.block=5"], "extractor range"),
            (["depth.block=0"], "extractor range"),
            (["maps.blocks=9"], "extractor range"),
            (["maps.latent_weight=1.5"], "latent_weight"),
            (["maps.smoothing_sigma=-1"], "smoothing_sigma"),
            (["maps.normalization=zscore"], "normalization"),
            (["sampling.steps=0"], "sampling.steps"),
            (["sampling.eta=-1"], "sampling.eta"),
            (["sampling.omega=2"], "sampling.omega"),
            (["codec.kind=vae"], "codec.kind"),
            (["data.resolution=66"], "not divisible by codec.factor"),
            (["codec.factor=64"], "downsampling factor"),
            (["adapt.epochs=4"], "adapt.epochs"),
            (["adapt.learning_rate=0"], "adapt.learning_rate"),
            (["eval.fpr_limit=0"], "fpr_limit"),
            (["eval.threshold_fpr=1"], "threshold_fpr"),
            (["eval.calibration_count=0"], "calibration_count"),
            (["denoiser.batch_size=0"], "denoiser.batch_size"),
            (["codec.learning_rate=0"], "codec.learning_rate"),
        ],
    )
    def test_rejects(self, overrides, pattern):
        cfg = apply_overrides(default_config(), overrides)
        with pytest.raises(ConfigError, match=pattern):
            validate_config(cfg)

    def test_folder_source_with_root_passes(self):
        cfg = apply_overrides(
            default_config(), ["data.source=folder", "data.root=/data/visa"]
        )
        validate_config(cfg)

    def test_identity_codec_skips_factor_checks(self):
        # identity keeps full resolution; factor value is irrelevant then
        cfg = apply_overrides(
            default_config(), ["codec.kind=identity", "codec.factor=7"]
        )
        validate_config(cfg)
