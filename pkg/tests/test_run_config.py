"""
Tests for run config parsing and its typed views.
"""
import pytest

from config import SECTION_DEFAULTS
from modules.errors import ConfigError
from modules.run_config import RunConfig, format_value, parse_value


class TestParseValue:
    def test_types_follow_defaults(self):
        assert parse_value("3", 1, "x") == 3
        assert parse_value("0.5", 1.0, "x") == 0.5
        assert parse_value("TRUE", False, "x") is True
        assert parse_value("'avg'", "max", "x") == "avg"

    @pytest.mark.parametrize("raw,default", [("1.5", 1), ("yes", True), ("abc", 0.1)])
    def test_type_errors(self, raw, default):
        with pytest.raises(ConfigError):
            parse_value(raw, default, "x")

    def test_format(self):
        assert format_value(True) == "true"
        assert format_value(0.1) == "0.1"
        assert format_value(7) == "7"


class TestRunConfig:
    def test_defaults(self):
        config = RunConfig()
        assert config.values == {section: dict(d) for section, d in SECTION_DEFAULTS.items()}

    def test_sections_and_dotted_keys(self):
        config = RunConfig.from_text(
            "# comment\n"
            "[train]\n"
            "lr = 0.005\n"
            "epochs = 3\n"
            "data.num_classes = 4\n"
            "[backbone]\n"
            "; another comment\n"
            "stages = 8, 16\n"
        )
        assert config.values["train"]["lr"] == 0.005
        assert config.values["train"]["epochs"] == 3
        assert config.values["data"]["num_classes"] == 4
        assert config.stage_widths() == [8, 16]

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            RunConfig.from_text("[train]\nlearning_rate = 0.1\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            RunConfig.from_text("[model]\nlr = 0.1\n")

    def test_key_outside_section(self):
        with pytest.raises(ConfigError):
            RunConfig.from_text("lr = 0.1\n")

    def test_unparseable_line(self):
        with pytest.raises(ConfigError):
            RunConfig.from_text("[train]\njust words\n")

    def test_invalid_value_caught_at_load(self):
        with pytest.raises(ConfigError):
            RunConfig.from_text("[train]\nmomentum = 1.5\n")
        with pytest.raises(ConfigError):
            RunConfig.from_text("[localize]\nthreshold = 1.0\n")

    def test_backbone_must_fit_data(self):
        with pytest.raises(ConfigError):
            RunConfig.from_text("[data]\nimage_size = 20\n")

    def test_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("[train]\nlr = 0.5\nepochs = 2\n", encoding="utf-8")
        config = RunConfig.load(path, ["train.lr=0.25", "backbone.attention_maps = 4"])
        assert config.values["train"]["lr"] == 0.25
        assert config.values["train"]["epochs"] == 2
        assert config.values["backbone"]["attention_maps"] == 4

    def test_override_needs_section(self):
        with pytest.raises(ConfigError):
            RunConfig.load(None, ["lr=0.1"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            RunConfig.load(tmp_path / "missing.cfg")

    def test_text_round_trip(self):
        config = RunConfig.load(None, ["train.lam=0.0", "train.pool=max", "data.use_marker=false"])
        again = RunConfig.from_text(config.to_text())
        assert again.values == config.values
        assert again.to_text() == config.to_text()

    def test_typed_views(self):
        config = RunConfig.load(None, ["data.image_size=32", "backbone.stages=4,8", "backbone.attention_maps=2",
                                       "upsampler.width=3", "train.bap_mode=spatial"])
        backbone = config.backbone_config()
        assert backbone.input_size == 32 and backbone.feature_channels == 8
        upsampler = config.upsampler_config(backbone)
        assert (upsampler.in_size, upsampler.out_size, upsampler.width) == (8, 32, 3)
        assert config.train_config().bap_mode == "spatial"
        assert config.synth_config().image_size == 32

    def test_bad_stage_list(self):
        with pytest.raises(ConfigError):
            RunConfig.load(None, ["backbone.stages=8,x"])
