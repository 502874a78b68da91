"""Config file parsing, defaults, and range validation."""
import pytest

from promptood.config import RunConfig, load_config, parse_config
from promptood.errors import ParseError


class TestDefaults:
    def test_empty_file_gives_documented_defaults(self):
        cfg = parse_config("")
        assert cfg.lambda_pos == 1e-5
        assert cfg.lambda_neg == 1e-3
        assert (cfg.k_text, cfg.k_patch, cfg.k_cross) == (2, 10, 8)
        assert cfg.m_in == 10.0
        assert cfg.vig_layers == 4
        assert cfg.tau == 0.01
        assert cfg.pooling == "mean"

    def test_missing_path_gives_defaults(self):
        assert load_config(None) == RunConfig()

    def test_shipped_config_files_parse(self):
        small = load_config("configs/cifar100.conf")
        assert small == RunConfig()
        large = load_config("configs/imagenet1k.conf")
        assert (large.k_text, large.k_patch, large.k_cross) == (2, 20, 18)
        assert large.vig_layers == 5
        assert large.m_in == 12.0


class TestParsing:
    def test_single_override(self):
        cfg = parse_config("k_patch = 10\n")
        assert cfg.k_patch == 10
        assert cfg.k_text == 2  # untouched default

    def test_comments_and_blanks(self):
        cfg = parse_config("# comment\n\nseed = 7  # trailing\n")
        assert cfg.seed == 7

    def test_unknown_key_is_hard_error(self):
        with pytest.raises(ParseError) as err:
            parse_config("mystery = 1\n")
        assert err.value.line == 1

    def test_repeated_key_rejected(self):
        with pytest.raises(ParseError) as err:
            parse_config("seed = 1\nseed = 2\n")
        assert err.value.line == 2

    def test_bad_value(self):
        with pytest.raises(ParseError):
            parse_config("seed = banana\n")

    def test_missing_equals(self):
        with pytest.raises(ParseError):
            parse_config("seed 1\n")


class TestRanges:
    def test_negative_tau_reports_its_line(self):
        with pytest.raises(ParseError) as err:
            parse_config("seed = 1\ntau = -1\n")
        assert err.value.line == 2

    @pytest.mark.parametrize(
        "line",
        [
            "tau = 0",
            "lambda_pos = -1e-9",
            "t_energy = 0",
            "n_features = 0",
            "k_cross = 0",
            "vig_layers = 0",
            "hidden_dim = -1",
            "lr_vig = 0",
            "epochs_adapter = -1",
            "pooling = median",
        ],
    )
    def test_out_of_range_values(self, line):
        with pytest.raises(ParseError):
            parse_config(line + "\n")

    def test_programmatic_construction_validates_too(self):
        with pytest.raises(ParseError):
            RunConfig(tau=-1.0)


class TestViews:
    def test_hidden_dim_auto(self):
        assert RunConfig().hidden_dim_for(32) == 64
        assert RunConfig(hidden_dim=48).hidden_dim_for(32) == 48

    def test_module_views_carry_values(self):
        cfg = RunConfig(tau=0.5, lambda_pos=0.1, m_in=-2.0, k_cross=3)
        assert cfg.loss_weights().tau == 0.5
        assert cfg.loss_weights().lambda_pos == 0.1
        assert cfg.energy().margin_in == -2.0
        assert cfg.topk().k_cross == 3
