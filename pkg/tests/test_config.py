import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dasd.config import (
    ConfigError,
    ExperimentConfig,
    InvalidValue,
    UnknownKey,
    from_dict,
    parse_config,
    preset,
)


def test_empty_object_gives_paper_defaults():
    cfg = parse_config("{}")
    assert cfg == ExperimentConfig()
    assert cfg.backbone.num_layers == 12 and cfg.backbone.model_dim == 512
    assert cfg.adapter.d_u == 32 and cfg.loss.tau == 0.01
    assert (cfg.loss.lambda_adv, cfg.loss.lambda_sc) == (1.0, 0.1)
    assert (cfg.cross_lingual.lr, cfg.cross_modal.lr) == (2e-4, 6e-6)
    assert parse_config("") == cfg


def test_desk_preset_values():
    cfg = preset("desk")
    assert (cfg.backbone.num_layers, cfg.backbone.model_dim, cfg.adapter.d_u) == (4, 64, 8)
    assert (cfg.cross_lingual.steps, cfg.cross_modal.steps) == (2000, 500)
    assert cfg.world.k_styles == 4 and cfg.world.n_concepts == 200
    assert parse_config('{"profile": "desk"}') == cfg


@pytest.mark.parametrize("text,kind", [
    ('{"loss": {"tau": 0}}', InvalidValue),
    ('{"loss": {"tau": -1}}', InvalidValue),
    ('{"adapter": {"d_u": 512}}', InvalidValue),
    ('{"adapter": {"use_fsr": false, "use_fsa": false}}', InvalidValue),
    ('{"cross_lingual": {"warmup": 1.0}}', InvalidValue),
    ('{"world": {"split": [0.5, 0.5]}}', InvalidValue),
    ('{"profile": "cluster"}', InvalidValue),
    ('{"seed": -1}', InvalidValue),
    ('{"adapter": {"bogus": 1}}', UnknownKey),
    ('{"nonsense": 1}', UnknownKey),
    ("[1, 2]", InvalidValue),
    ("{not json", InvalidValue),
])
def test_invalid_configs(text, kind):
    with pytest.raises(kind):
        parse_config(text)


def test_all_problems_reported_together():
    with pytest.raises(ConfigError) as err:
        parse_config('{"loss": {"tau": 0, "lambda_adv": -1}, "cross_modal": {"lr": 0}}')
    assert len(err.value.problems) == 3


def test_unknown_keys_listed_with_path():
    with pytest.raises(UnknownKey) as err:
        parse_config('{"adapter": {"bogus": 1}, "extra": 2}')
    joined = " ".join(err.value.problems)
    assert "adapter.bogus" in joined and "extra" in joined


def test_desk_adapter_rule():
    with pytest.raises(InvalidValue):
        preset("desk").replace(adapter={"d_u": 16, "d_z": 32})


def test_replace_is_a_copy():
    base = preset("desk")
    other = base.replace(adapter={"dynamic": False})
    assert base.adapter.dynamic and not other.adapter.dynamic
    assert base.hash() != other.hash()


def test_json_round_trip_and_hash_stability():
    cfg = preset("desk").replace(seed=3, loss={"tau": 0.05})
    back = from_dict(json.loads(cfg.to_json()))
    assert back == cfg and back.hash() == cfg.hash()
    assert len(cfg.hash()) == 16


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-4, 10), st.floats(0, 5), st.floats(0, 5), st.integers(0, 2**31))
def test_valid_values_round_trip(tau, adv, sc, seed):
    cfg = from_dict({"seed": seed, "loss": {"tau": tau, "lambda_adv": adv, "lambda_sc": sc}})
    assert parse_config(cfg.to_json()) == cfg
