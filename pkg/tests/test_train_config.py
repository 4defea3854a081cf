"""Config grammar and LR schedule tests."""

import pytest
from hypothesis import given
from hypothesis import strategies as st

from maskpipe.errors import ConfigurationError
from maskpipe.train_config import (
    TrainConfig,
    lr_at,
    parse_config,
    parse_key_values,
    serialize_config,
)

# The detection model's published settings, as they appear in print: several
# pairs per line, spaces around '=', keys containing spaces.
DETECTION_BLOCK = """\
batch=8 width=512 height=512 channels=3 momentum=0.9 decay=0.0005 angle=0 saturation = 1.5 exposure = 1.5 hue=.1
learning rate=0.001 burn in=100 max batches = 5000 policy=steps steps=4000,4500 scales=.1,.1
"""

CLASSIFIER_BLOCK = """\
batch=64 width=32 height=32 channels=3 momentum=0.9 decay=0.0005 learning rate=0.0001
"""


class TestParseKeyValues:
    def test_multi_pair_line(self):
        pairs, warnings = parse_key_values("a=1 b = 2 c=3,4\n")
        assert [(k, v) for k, v, _ in pairs] == [("a", "1"), ("b", "2"), ("c", "3,4")]
        assert warnings == []

    def test_spaced_keys_normalized(self):
        pairs, _ = parse_key_values("burn in=100 max batches = 5000")
        assert [(k, v) for k, v, _ in pairs] == [("burn_in", "100"), ("max_batches", "5000")]

    def test_comments_and_sections_skipped(self):
        pairs, warnings = parse_key_values("# top\n[net]\nbatch=8 # inline\n")
        assert [(k, v) for k, v, _ in pairs] == [("batch", "8")]
        assert warnings == []

    def test_junk_line_warns(self):
        pairs, warnings = parse_key_values("hello world\n")
        assert pairs == []
        assert "line 1" in warnings[0]


class TestParseConfig:
    def test_published_detection_settings(self):
        cfg = parse_config(DETECTION_BLOCK)
        assert cfg.batch == 8
        assert (cfg.width, cfg.height, cfg.channels) == (512, 512, 3)
        assert cfg.momentum == 0.9
        assert cfg.decay == 0.0005
        assert cfg.angle == 0.0
        assert (cfg.saturation, cfg.exposure, cfg.hue) == (1.5, 1.5, 0.1)
        assert cfg.learning_rate == 0.001
        assert cfg.burn_in == 100
        assert cfg.max_batches == 5000
        assert cfg.policy == "steps"
        assert cfg.steps == (4000, 4500)
        assert cfg.scales == (0.1, 0.1)
        assert cfg.warnings == ()

    def test_classifier_block_parses_with_same_grammar(self):
        cfg = parse_config(CLASSIFIER_BLOCK)
        assert cfg.batch == 64
        assert (cfg.width, cfg.height) == (32, 32)
        assert cfg.learning_rate == 0.0001

    def test_empty_text_all_defaults(self):
        cfg = parse_config("")
        assert cfg == TrainConfig()
        assert cfg.warnings == ()
        assert (cfg.alpha, cfg.beta) == (1.25, 1.0)

    def test_unknown_key_warns(self):
        cfg = parse_config("batch=8\nfoo=7\n")
        assert cfg.batch == 8
        assert any("foo" in w for w in cfg.warnings)

    def test_decreasing_steps_rejected(self):
        with pytest.raises(ConfigurationError, match="increasing"):
            parse_config("steps=4500,4000 scales=.1,.1")

    def test_unparseable_value_names_line(self):
        with pytest.raises(ConfigurationError, match="line 2"):
            parse_config("batch=8\nwidth=lots\n")

    def test_scale_step_length_mismatch(self):
        with pytest.raises(ConfigurationError):
            parse_config("steps=100,200 scales=.1")

    def test_burn_in_bound(self):
        with pytest.raises(ConfigurationError):
            parse_config("burn in=6000")

    def test_bad_loss_weights(self):
        with pytest.raises(ConfigurationError):
            parse_config("alpha=2 beta=1.5")


class TestRoundTrip:
    @pytest.mark.parametrize(
        "cfg",
        [
            TrainConfig(),
            TrainConfig(batch=64, width=32, height=32, learning_rate=0.0001),
            TrainConfig(steps=(10, 20, 30), scales=(0.5, 0.2, 0.1), burn_in=5, max_batches=100),
        ],
    )
    def test_parse_serialize_identity(self, cfg):
        assert parse_config(serialize_config(cfg)) == cfg

    @given(
        batch=st.integers(1, 512),
        momentum=st.floats(0, 1, allow_nan=False),
        learning_rate=st.floats(1e-8, 1.0, allow_nan=False),
        burn_in=st.integers(0, 100),
        steps=st.lists(st.integers(1, 10_000), min_size=0, max_size=4, unique=True),
        scale=st.floats(0.01, 1.0, allow_nan=False),
        alpha=st.floats(0, 1.5, allow_nan=False),
    )
    def test_round_trip_random_configs(
        self, batch, momentum, learning_rate, burn_in, steps, scale, alpha
    ):
        cfg = TrainConfig(
            batch=batch,
            momentum=momentum,
            learning_rate=learning_rate,
            burn_in=burn_in,
            max_batches=20_000,
            steps=tuple(sorted(steps)),
            scales=(scale,) * len(steps),
            alpha=alpha,
        )
        assert parse_config(serialize_config(cfg)) == cfg


class TestLrSchedule:
    @pytest.fixture
    def cfg(self):
        return parse_config(DETECTION_BLOCK)

    def test_base_rate_after_burn_in(self, cfg):
        assert lr_at(cfg, 200) == pytest.approx(0.001, abs=1e-15)

    def test_after_first_step(self, cfg):
        assert lr_at(cfg, 4250) == pytest.approx(0.0001, rel=1e-12)

    def test_after_both_steps(self, cfg):
        assert lr_at(cfg, 4600) == pytest.approx(0.00001, rel=1e-12)

    def test_burn_in_curve(self, cfg):
        assert lr_at(cfg, 0) == 0.0
        assert lr_at(cfg, 50) == pytest.approx(0.001 * 0.5**4, rel=1e-12)
        assert lr_at(cfg, cfg.burn_in) == 0.001  # curve meets the base rate

    def test_piecewise_constant_non_increasing(self, cfg):
        rates = [lr_at(cfg, i) for i in range(cfg.burn_in, cfg.max_batches + 1)]
        assert all(b <= a for a, b in zip(rates, rates[1:]))
        distinct = sorted(set(rates), reverse=True)
        assert distinct == [0.001, pytest.approx(0.0001), pytest.approx(0.00001)]
