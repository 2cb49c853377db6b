import pytest
from hypothesis import given, settings, strategies as st

from rescl.config import ConfigError, ExperimentConfig, config_from_text, load_config


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.seeds == (0, 1, 2)
    assert cfg.rescl_base == 1e-4 and cfg.lwf_base == 1.0
    assert cfg.train.iterations == 2000 and cfg.train.batch_size == 64 and cfg.train.lr == 0.1
    assert cfg.loss.temperature == 2.0 and cfg.loss.lam_dec == 1e-4


def test_text_roundtrip_and_digest():
    cfg = load_config(overrides=["iterations=300", "seeds=0,4", "flip=true", "alpha_norm=l2"])
    assert cfg.train.iterations == 300 and cfg.seeds == (0, 4) and cfg.train.flip
    assert cfg.loss.alpha_norm == "l2"
    back = config_from_text(cfg.to_text())
    assert back == cfg and back.digest() == cfg.digest()
    assert ExperimentConfig().digest() != cfg.digest()


def test_file_then_overrides(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("# desk run\nscenario = A-to-B\niterations=100\nlam_dec=0.001  # decay\n")
    cfg = load_config(path, {"iterations": "50"})
    assert cfg.scenario == "A-to-B" and cfg.train.iterations == 50 and cfg.loss.lam_dec == 0.001


@pytest.mark.parametrize("text", ["nonsense", "bogus_key=1", "iterations=abc", "flip=maybe", "lr=-1",
                                  "temperature=0", "seed=3"])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        config_from_text(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


@settings(max_examples=30, deadline=None)
@given(it=st.integers(0, 10_000), lam=st.floats(0, 10), seeds=st.lists(st.integers(0, 99), min_size=1, max_size=4))
def test_roundtrip_property(it, lam, seeds):
    cfg = load_config(overrides={"iterations": str(it), "lam": repr(lam), "seeds": ",".join(map(str, seeds))})
    assert config_from_text(cfg.to_text()) == cfg
