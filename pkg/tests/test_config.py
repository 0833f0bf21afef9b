import json
import math

import pytest

from taris.config import PRESETS, ConfigError, TarisConfig, load_config, parse_count


def test_presets():
    desk = load_config("desk")
    assert (desk.layers, desk.hidden, desk.dff, desk.e_la, desk.d_la, desk.d_lb, desk.lam) == (2, 64, 64, 11, 1, 1, 0.01)
    assert math.isinf(desk.e_lb)
    paper = load_config("paper")
    assert (paper.layers, paper.hidden, paper.dff, paper.batch_size, paper.epochs) == (6, 256, 256, 32, 120)
    assert paper.stages == [math.inf, 10.0, 0.0, -5.0]
    assert set(PRESETS) == {"desk", "paper"}


def test_precedence(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"hidden": 32, "layers": 3, "e_lb": "inf"}))
    cfg = load_config("paper", path, layers=4)
    assert (cfg.hidden, cfg.layers, cfg.dff) == (32, 4, 256)


def test_round_trip_with_infinities():
    cfg = load_config("desk", d_la=math.inf)
    data = json.loads(json.dumps(cfg.to_dict()))
    assert data["d_la"] == "inf"
    assert TarisConfig.from_dict(data) == cfg


@pytest.mark.parametrize("bad", [{"modality": "text"}, {"fusion": "max"}, {"gate": "relu"}, {"e_la": -1},
                                 {"hidden": 0}, {"budget_rule": "ceil"}, {"stages": []}, {"frame_ms": 0}])
def test_invalid_values(bad):
    with pytest.raises(ConfigError):
        load_config("desk", **bad)


def test_unknown_key_and_preset(tmp_path):
    with pytest.raises(ConfigError, match="unknown config keys"):
        TarisConfig.from_dict({"heads": 2})
    with pytest.raises(ConfigError):
        load_config("huge")
    with pytest.raises(ConfigError):
        load_config("desk", tmp_path / "missing.json")


def test_parse_count():
    assert parse_count("inf") == math.inf
    assert parse_count("3") == 3 and isinstance(parse_count("3"), int)
    assert parse_count("2.5") == 2.5
