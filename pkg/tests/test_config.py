import itertools
import json

import pytest

from viti.config import (
    OUT_DIR_ENV, RunConfig, defaults, dump_config, load_config, parse_config_text, resolve, save_config,
)
from viti.errors import ConfigError

DEFAULT, FILE, FLAG = 0.2, 0.3, 0.4


@pytest.mark.parametrize("in_file,in_flags", list(itertools.product([False, True], repeat=2)))
def test_precedence_matrix(tmp_path, in_file, in_flags):
    path = None
    if in_file:
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"alpha0": FILE, "seed": 7}))
    flags = {"alpha0": FLAG if in_flags else None, "seed": None}
    cfg = resolve(flags, path)
    expected = FLAG if in_flags else FILE if in_file else DEFAULT
    assert cfg.alpha0 == expected
    assert cfg.seed == (7 if in_file else 0)


def test_env_sets_default_out_dir_only(monkeypatch, tmp_path):
    monkeypatch.setenv(OUT_DIR_ENV, "/tmp/somewhere")
    assert defaults()["out_dir"] == "/tmp/somewhere"
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"out_dir": "from-file"}))
    assert resolve({}, path).out_dir == "from-file"
    assert resolve({"out_dir": "flag"}, path).out_dir == "flag"


def test_round_trip(tmp_path):
    cfg = RunConfig(model="m.bin", alpha0=0.35, beta=0.2, seed=3, beta_end=0.004)
    path = tmp_path / "c.json"
    save_config(cfg, path)
    back = load_config(path)
    assert back == cfg
    assert dump_config(back) == path.read_text()


@pytest.mark.parametrize("text,key", [
    ('{"alpha": 0.1}', "alpha"),
    ('{"alpha0": 1.5}', "alpha0"),
    ('{"beta": 0}', "beta"),
    ('{"seed": "abc"}', "seed"),
    ('{"workers": 0}', "workers"),
    ('{"beta_start": 0.1, "beta_end": 0.01}', "beta_start"),
    ('{"alpha0": [0.1]}', "alpha0"),
    ('[1, 2]', "config"),
    ("not json", "config"),
    ('{"format_version": 9}', "format_version"),
])
def test_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as e:
        RunConfig(**{**defaults(), **parse_config_text(text)})
    assert e.value.key == key
    assert key in str(e.value)


def test_require_reports_missing_path(tmp_path):
    with pytest.raises(ConfigError) as e:
        RunConfig().require("model")
    assert e.value.key == "model"
    with pytest.raises(ConfigError):
        RunConfig(model=str(tmp_path / "none.bin")).require("model")


def test_missing_config_file():
    with pytest.raises(ConfigError) as e:
        resolve({}, "/nonexistent/c.json")
    assert e.value.key == "config"
