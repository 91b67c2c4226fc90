from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamvit.config import ModelConfig, desk_config, format_config, load_config, paper_config, parse_config, save_config
from streamvit.errors import ConfigError


def test_desk_defaults():
    cfg = desk_config()
    assert cfg.grid == (8, 8)
    assert (cfg.channels, cfg.layers, cfg.stages, cfg.heads, cfg.window, cfg.memory_capacity) == (32, 4, 4, 4, 4, 8)
    assert cfg.fusion_init == 1e-4
    assert cfg.layers_per_stage == 1


def test_vit_b16_shape():
    cfg = paper_config()
    assert cfg.grid == (14, 14)
    assert (cfg.layers, cfg.stages, cfg.channels, cfg.heads) == (12, 4, 768, 12)
    assert cfg.effective_window is None
    assert paper_config(mode="frame").effective_window == 14


def test_round_trip_is_identity(tmp_path):
    cfg = desk_config(memory_capacity=None, dtype="f32", adaptor_channels=(8, 16, 32, 64), mode="frame")
    text = format_config(cfg)
    assert parse_config(text) == cfg
    assert format_config(parse_config(text)) == text
    save_config(cfg, tmp_path / "c.cfg")
    assert load_config(tmp_path / "c.cfg") == cfg
    assert "memory_capacity = inf" in text


@settings(max_examples=40, deadline=None)
@given(m=st.one_of(st.none(), st.integers(1, 64)), heads=st.sampled_from([1, 2, 4, 8]),
       mode=st.sampled_from(["frame", "sequence"]), seed=st.integers(0, 2 ** 31), fusion=st.floats(0, 1))
def test_round_trip_property(m, heads, mode, seed, fusion):
    cfg = desk_config(memory_capacity=m, heads=heads, mode=mode, seed=seed, fusion_init=fusion)
    assert parse_config(format_config(cfg)) == cfg


def test_partial_file_and_comments():
    cfg = parse_config("# comment\nchannels = 16   # narrow\n\nheads=2\nmemory_capacity = unbounded\n")
    assert (cfg.channels, cfg.heads, cfg.memory_capacity) == (16, 2, None)


@pytest.mark.parametrize("text, msg", [
    ("colour = red\n", "unknown config key"),
    ("heads = 2\nheads = 4\n", "duplicate"),
    ("heads 2\n", "expected 'key = value'"),
    ("heads = two\n", "bad value"),
    ("temporal_pos_embed = maybe\n", "bad value"),
])
def test_parse_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text)


@pytest.mark.parametrize("kwargs", [
    dict(heads=5), dict(layers=6, stages=4), dict(patch=5), dict(memory_capacity=0), dict(mode="video"),
    dict(dtype="f16"), dict(window=0), dict(image_h=24, image_w=24, patch=4),   # 24 not divisible by 32
    dict(temporal_pos_embed=True, memory_capacity=None), dict(adaptor_channels=(1, 2)),
])
def test_invalid_configs_fail_loudly(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_sequence_mode_ignores_pyramid_divisibility():
    cfg = desk_config(image_h=24, image_w=24, mode="sequence")
    assert cfg.grid == (6, 6)
