import pytest

from fedcil.config import ExperimentConfig, Mechanisms, apply_overrides, load_config, parse_value
from fedcil.errors import ConfigError


def test_documented_defaults():
    c = ExperimentConfig()
    assert (c.global_rounds, c.local_epochs, c.lr, c.tau, c.beta, c.gamma) == (5, 5, 1e-3, 2.0, 1.5, 2.0)
    assert (c.lambda_distill, c.lambda_replay, c.lambda_distill_max, c.lambda_replay_max) == (0.5, 0.3, 1.5, 1.0)
    assert (c.memory_budget, c.num_clients, c.dirichlet_alpha) == (1000, 5, 0.5)
    assert (c.num_classes, c.num_tasks) == (12, 3)
    assert c.seeds == (0, 1, 2, 3, 4)


def test_overrides_parse_toml_scalars():
    assert parse_value("3") == 3 and parse_value("0.5") == 0.5 and parse_value("true") is True
    assert parse_value("[1, 2]") == [1, 2] and parse_value("abc") == "abc"
    raw = apply_overrides({}, ["seed=7", "methods.gp=false"])
    assert raw == {"seed": 7, "methods": {"gp": False}}


def test_load_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('num_clients = 3\nhidden = [16, 8]\n[methods]\ndc = false\n', encoding="utf-8")
    cfg = load_config(path, ["lr=1"])
    assert cfg.num_clients == 3 and cfg.hidden == (16, 8) and cfg.lr == 1.0
    assert cfg.methods == Mechanisms(dc=False)


def test_missing_file_names_path(tmp_path):
    with pytest.raises(ConfigError, match="absent.toml"):
        load_config(tmp_path / "absent.toml")


@pytest.mark.parametrize("override,field", [
    ("num_clients=0", "num_clients"),
    ("beta=1.0", "beta"),
    ("tau=-1", "tau"),
    ("bogus=1", "bogus"),
    ("methods.xx=true", "xx"),
    ("hidden=[0]", "hidden"),
])
def test_validation_names_field(override, field):
    with pytest.raises(ConfigError, match=field):
        load_config(None, [override])


def test_digest_tracks_content():
    a = ExperimentConfig()
    assert a.digest() == ExperimentConfig().digest()
    assert a.digest() != a.replace(seed=1).digest()
    assert ExperimentConfig.from_dict(a.to_dict()) == a


def test_mechanism_labels():
    assert Mechanisms.none().label() == "FedAvg (none)"
    assert Mechanisms().label() == "Full (all)"
    assert Mechanisms.only("cw", "kd").label() == "+CW+KD"


def test_shipped_config_matches_defaults():
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / "default.toml"
    assert load_config(path) == ExperimentConfig()
