import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nfarec.config import PRESETS, Config, ConfigError, from_preset, parse_pairs


def test_defaults_round_trip():
    cfg = Config()
    assert Config.parse(cfg.serialize()) == cfg


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.floats(0, 10, allow_nan=False), st.floats(0, 1), st.booleans(),
       st.sampled_from([",", "\t", "::", ";"]), st.integers(1, 200))
def test_parse_serialize_parse_idempotent(order, beta2, delta2, flag, delim, epochs):
    cfg = Config(order=order, beta2=beta2, delta2=delta2, no_seq=flag, delimiter=delim, epochs=epochs)
    once = Config.parse(cfg.serialize())
    assert once == cfg
    assert Config.parse(once.serialize()) == once


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="'batchsize'"):
        parse_pairs("order = 2\nbatchsize = 5\n")


@pytest.mark.parametrize("text", ["order = two", "no_seq = maybe", "lr = fast", "just words"])
def test_bad_values(text):
    with pytest.raises(ConfigError):
        Config.parse(text)


@pytest.mark.parametrize("field,value", [("beta1", -1.0), ("delta2", -0.1), ("n_mci", 0), ("order", 0)])
def test_domain_checks(field, value):
    with pytest.raises(ConfigError):
        Config(**{field: value})


def test_comments_and_blank_lines():
    assert Config.parse("# tuned\n\norder = 3\n").order == 3


@pytest.mark.parametrize("name,weights", [
    ("yelp2023", (0.12, 1.49, 1.2, 1e-3)),
    ("movielens", (1.47, 3.99, 1.2, 0.5)),
    ("recipes", (0.12, 3.81, 1.0, 1e-5)),
    ("books", (0.25, 3.53, 1.2, 1e-5)),
    ("beauty", (0.62, 3.74, 1.2, 1e-3)),
])
def test_presets(name, weights):
    cfg = from_preset(name)
    assert (cfg.beta1, cfg.beta2, cfg.delta, cfg.delta2) == weights
    assert set(PRESETS) == {"yelp2023", "movielens", "recipes", "books", "beauty"}


def test_file_overrides_preset_named_in_file():
    cfg = Config.parse("preset = books\nbeta1 = 0.5\n")
    assert cfg.beta1 == 0.5 and cfg.beta2 == 3.53


def test_unknown_preset():
    with pytest.raises(ConfigError):
        from_preset("netflix")
