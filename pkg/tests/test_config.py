from __future__ import annotations

import json
import math

import pytest

from simota_kit.config import ConfigError, RunConfig, from_dict, load


def test_defaults_and_round_trip():
    cfg = RunConfig()
    assert cfg.assigner.lam == 3.0
    assert cfg.fit.assigner == "simota"
    assert from_dict(cfg.to_json()) == cfg
    text = json.dumps(cfg.to_json(), allow_nan=False)
    assert json.loads(text)["fpn"]["scale_ranges"][-1][1] is None


def test_sections_and_alias():
    cfg = from_dict({"seed": 7, "assigner": {"lambda": 1.5, "k_cap": 4}, "fit": {"steps": 20},
                     "fpn": {"input_size": [64, 64], "scale_ranges": [[0, 64], [64, 128], [128, None]]}})
    assert cfg.assigner.lam == 1.5 and cfg.assigner.k_cap == 4
    assert cfg.fit.steps == 20
    assert cfg.fit.seed == cfg.augment.seed == 7
    assert cfg.fpn.input_size == (64, 64)
    assert math.isinf(cfg.fpn.scale_ranges[-1][1])
    assert from_dict(cfg.to_json()) == cfg


def test_overrides_win():
    cfg = from_dict({"seed": 1, "preset": "small", "fit": {"assigner": "multi3x3"}},
                    {"seed": 2, "preset": "large", "assigner": "one_to_one"})
    assert cfg.seed == 2
    assert cfg.augment.scale_jitter == (0.1, 2.0) and cfg.augment.mixup_enabled
    assert cfg.fit.assigner == "one_to_one"


@pytest.mark.parametrize("data,path", [
    ({"fit": {"nope": 1}}, "fit.nope"),
    ({"extra": 1}, "extra"),
    ({"assigner": {"lambda": 1, "lam": 2}}, "assigner.lam"),
    ({"seed": -1}, "seed"),
    ({"seed": 2**64}, "seed"),
    ({"preset": "medium"}, "preset"),
    ({"fit": {"steps": 0}}, "fit"),
    ({"fpn": {"scale_ranges": 3}}, "fpn.scale_ranges"),
    ({"num_classes": "3"}, "num_classes"),
    ([], "config"),
])
def test_errors_name_the_key(data, path):
    with pytest.raises(ConfigError, match=path.replace(".", r"\.")):
        from_dict(data)


def test_load_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"seed": 5}')
    assert load(p).seed == 5
    assert load(None).seed == 0
    p.write_text('{"seed": 5,\n  }')
    with pytest.raises(ConfigError, match="line 2 column"):
        load(p)
    with pytest.raises(ConfigError, match="cannot read"):
        load(tmp_path / "missing.json")
