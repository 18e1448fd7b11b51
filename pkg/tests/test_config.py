import pytest
from hypothesis import given, settings, strategies as st

from dafe.config import DEFAULTS, Config, load_config, parse_config_text
from dafe.errors import ConfigError


def test_defaults_validate():
    c = Config()
    assert c["seed"] == 0 and c["loss.alpha1"] > c["loss.alpha2"] > 0


def test_parse_types_and_comments():
    c = parse_config_text("""
        # a comment
        seed = 7
        loss.alpha1 = 2.0   # trailing comment
        stack.maps = 4, 5, 6
        mining.per_identity = true
        loss.kind = triplet
    """)
    assert c["seed"] == 7 and c["loss.alpha1"] == 2.0
    assert c["stack.maps"] == (4, 5, 6)
    assert c["mining.per_identity"] is True and c["loss.kind"] == "triplet"


def test_unknown_key_and_bad_values():
    with pytest.raises(ConfigError, match="unknown"):
        parse_config_text("no.such.key = 1")
    with pytest.raises(ConfigError):
        parse_config_text("seed = seven")
    with pytest.raises(ConfigError):
        parse_config_text("just a line")
    with pytest.raises(ConfigError):
        parse_config_text("loss.kind = hinge")
    with pytest.raises(ConfigError):
        parse_config_text("stack.maps = 4, 5")
    with pytest.raises(ConfigError):
        parse_config_text("mining.batch_images = 1")
    with pytest.raises(ConfigError):
        parse_config_text("preset = huge")


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 5), st.floats(0.01, 5))
def test_margin_order_enforced(a1, a2):
    text = f"loss.alpha1 = {a1!r}\nloss.alpha2 = {a2!r}\n"
    if a1 > a2:
        assert parse_config_text(text)["loss.alpha1"] == a1
    else:
        with pytest.raises(ConfigError):
            parse_config_text(text)


def test_round_trip_text():
    c = parse_config_text("seed = 3\nstack.pool = 2, 2, 1\ntrain.augment = yes\n")
    again = parse_config_text(c.to_text())
    assert again.values == c.values


def test_full_scale_preset():
    c = parse_config_text("preset = paper\n")
    assert c["preproc.size"] == 150 and c["stack.maps"] == (40, 100, 40)
    assert c["preproc.pca"] == 500 and c["feature.mode"] == "third_layer"


def test_seed_overrides(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("seed = 3\n")
    assert load_config(path, environ={})["seed"] == 3
    assert load_config(path, environ={"DAFE_SEED": "11"})["seed"] == 11
    assert load_config(path, seed=5, environ={"DAFE_SEED": "11"})["seed"] == 5
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.txt")


def test_updated_copies():
    c = Config()
    d = c.updated(train__lr=0.5)
    assert d["train.lr"] == 0.5 and c["train.lr"] == DEFAULTS["train.lr"]
    with pytest.raises(ConfigError):
        c.updated(loss__alpha2=9.0)


def test_negative_counts_rejected():
    for key in ("preproc.pca", "train.monitor_every", "train.checkpoint_every"):
        with pytest.raises(ConfigError, match=key):
            parse_config_text(f"{key} = -1")
