import pytest

from hvqa.config import RunConfig, preset
from hvqa.errors import ConfigError


def test_text_round_trip():
    cfg = preset("clevr").with_overrides({"attention.mode": "adahan", "train.lr": 3e-4})
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_every_field_has_default():
    cfg = RunConfig()
    assert all(v is not None for _, v in cfg.items())
    assert RunConfig.from_text("") == cfg


def test_comments_and_blank_lines():
    cfg = RunConfig.from_text("# header\n\nattention.mode = adahan  # inline\n")
    assert cfg.attention.mode == "adahan"


@pytest.mark.parametrize(
    "text,line,column",
    [
        ("attention.mode = han\nattention.mod = hard\n", 2, 1),
        ("train.lr = fast\n", 1, 12),
        ("  model.d\n", 1, 3),
    ],
)
def test_errors_carry_position(text, line, column):
    with pytest.raises(ConfigError) as err:
        RunConfig.from_text(text)
    assert (err.value.line, err.value.column) == (line, column)


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="attention.mod"):
        RunConfig().with_overrides({"attention.mod": "hard"})


@pytest.mark.parametrize(
    "key,value",
    [
        ("attention.fraction", 0),
        ("attention.fraction", 1.5),
        ("attention.hops", 0),
        ("attention.mode", "hard"),
        ("train.batch_size", 0),
        ("model.dropout", 1.0),
    ],
)
def test_invalid_values(key, value):
    with pytest.raises(ConfigError):
        RunConfig().with_overrides({key: value})


def test_soft_requires_sum():
    with pytest.raises(ConfigError):
        RunConfig().with_overrides({"attention.mode": "soft", "aggregation.kind": "rn"})


def test_hash_tracks_content():
    a, b = RunConfig(), RunConfig()
    assert a.hash() == b.hash()
    assert a.hash() != a.with_overrides({"train.seed": 1}).hash()


def test_grids():
    assert preset("desk").grid() == (4, 4)
    assert preset("clevr").grid() == (8, 8)


def test_defaults_documented_values():
    cfg = RunConfig()
    assert (cfg.train.lr, cfg.train.l2, cfg.attention.hops, cfg.model.alignment_depth) == (1e-4, 1e-5, 2, 2)
    assert (cfg.train.plateau_windows, cfg.train.plateau_delta) == (3, 0.001)
