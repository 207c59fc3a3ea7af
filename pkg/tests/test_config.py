import json

import pytest

from deqei.config import ConfigError, ExperimentConfig, load_config, parse_config
from deqei.rng import fnv1a64


def test_defaults_parse():
    cfg = parse_config("{}")
    assert cfg == ExperimentConfig().with_seed(0)
    assert cfg.solver.forward.tol == 1e-5 and cfg.solver.backward.max_iter == 200


def test_hash_ignores_output_dir_and_key_order():
    a = parse_config('{"seed": 3, "output_dir": "a", "train": {"epochs": 2, "batch_size": 4}}')
    b = parse_config('{"train": {"batch_size": 4, "epochs": 2}, "output_dir": "b", "seed": 3}')
    assert a.hash() == b.hash()
    assert a.hash() != parse_config('{"seed": 4}').hash()
    assert len(a.hash()) == 16


def test_hash_is_fnv1a_of_canonical_json():
    cfg = parse_config('{"seed": 1}')
    assert cfg.hash() == f"{fnv1a64(cfg.canonical().encode()):016x}"
    assert " " not in cfg.canonical()
    assert "output_dir" not in json.loads(cfg.canonical())


def test_fnv1a_reference_values():
    assert fnv1a64(b"") == 0xcbf29ce484222325
    assert fnv1a64(b"a") == 0xaf63dc4c8601ec8c


def test_loss_seed_follows_root_seed():
    cfg = parse_config('{"seed": 9}')
    assert cfg.loss.seed == 9
    assert cfg.with_seed(4).loss.seed == 4
    with pytest.raises(ConfigError, match="loss.seed"):
        parse_config('{"loss": {"seed": 2}}')


def test_unknown_key_reports_line():
    text = '{\n  "seed": 1,\n  "train": {\n    "epoch": 3\n  }\n}'
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "cfg.json")
    assert exc.value.line == 4
    assert "cfg.json:4" in str(exc.value) and "train.epoch" in str(exc.value)


@pytest.mark.parametrize("text,fragment", [
    ('{"seed": "one"}', "seed"),
    ('{"train": {"epochs": true}}', "train.epochs"),
    ('{"train": {"learning_rate": 0}}', "learning_rate"),
    ('{"task": {"name": "deblur"}}', "deblur"),
    ('{"solver": {"forward": {"tol": -1}}}', "tol"),
    ('{"model": 3}', "model"),
    ('{"seed": 1,}', "invalid JSON"),
])
def test_invalid_configs(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_int_accepted_for_float_and_null_for_optional():
    cfg = parse_config('{"model": {"eta": 1, "iterative_eta": null}}')
    assert cfg.model.eta == 1.0 and isinstance(cfg.model.eta, float)
    assert cfg.model.iterative_eta is None


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")


def test_round_trip_through_echo():
    cfg = parse_config('{"seed": 5, "task": {"name": "tomography", "size": 32}, "loss": {"alpha": 10}}')
    again = parse_config(json.dumps(cfg.to_dict()))
    assert again == cfg and again.hash() == cfg.hash()
