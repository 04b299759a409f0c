import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relisten.config import ConfigError, RunConfig, load_config, parse_config_text


def test_defaults():
    c = RunConfig()
    assert (c.k, c.gap_minutes, c.d, c.B, c.H, c.alpha, c.n_test, c.n_val) == (10, 20.0, 128, 2, 2, 0.5, 10, 5)
    assert c.batch_size == 512 and c.neg_beta == 0.5 and c.time_unit == "hours"
    assert c.gap_seconds == 1200 and c.time_scale == 3600.0


@pytest.mark.parametrize(
    "bad", [dict(d=10, H=3), dict(lam=1.5), dict(lr=-1.0), dict(alpha=0.0), dict(time_unit="weeks"), dict(neg_mode="x"), dict(L=0)]
)
def test_invalid(bad):
    with pytest.raises(ConfigError):
        RunConfig(**bad)


def test_text_round_trip(tmp_path):
    c = RunConfig(lam=0.25, residual=True, embeddings_path="/x/e.txt", seed=4)
    path = tmp_path / "c.txt"
    path.write_text(c.to_text())
    assert "lambda=0.25" in c.to_text()
    assert load_config(path) == c


def test_overrides_and_comments(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# comment\nd = 16\nH=4  # trailing\nlambda=1\n")
    c = load_config(path, seed=7)
    assert (c.d, c.H, c.lam, c.seed) == (16, 4, 1.0, 7)


def test_unknown_key_and_bad_value():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"nope": "1"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"d": "many"})
    with pytest.raises(ConfigError):
        parse_config_text("just words")


def test_trainable_embeddings_default():
    assert RunConfig().embeddings_trainable
    assert not RunConfig(embeddings_path="e.txt").embeddings_trainable
    assert RunConfig(embeddings_path="e.txt", trainable_embeddings=True).embeddings_trainable


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 64), st.sampled_from([1, 2, 4]), st.floats(0, 1), st.booleans())
def test_round_trip_property(d, H, lam, residual):
    c = RunConfig(d=d * H, H=H, lam=lam, residual=residual)
    assert RunConfig.from_dict(parse_config_text(c.to_text())) == c
