#!/usr/bin/env python3
import json
import os
import sys

import pytest

# Add project root to path
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)

from src.config import (
    ADiceConfig,
    EnhanceConfig,
    RunConfig,
    TrainConfig,
    apply_overrides,
    build_config,
    config_hash,
    load_config,
)
from src.errors import InvalidConfigError


def test_defaults_match_published_hyperparameters():
    cfg = TrainConfig()
    assert cfg.lambda_ == 10.0
    assert cfg.lr == 0.001
    assert cfg.epochs == 20
    assert cfg.use_difference_aware
    assert (cfg.a_steps, cfg.b_steps) == (1, 1)
    assert EnhanceConfig().alpha_grid == [0.0, 0.3, 0.5, 0.7, 1.0]
    assert EnhanceConfig().sign_mode == "pathological_residue"
    adice = ADiceConfig()
    assert (adice.eval_lr, adice.epochs, adice.repeats) == (0.1, 20, 3)
    assert (adice.optimizer, adice.momentum, adice.grad_clip) == ("sgd", 0.9, 1.0)


@pytest.mark.parametrize("field,value", [("lambda_", 0.0), ("lambda_", -1.0), ("lr", 0.0), ("epochs", 0)])
def test_train_config_invariants(field, value):
    with pytest.raises(InvalidConfigError):
        build_config(TrainConfig, {field: value})


def test_enhance_and_adice_invariants():
    with pytest.raises(InvalidConfigError):
        build_config(EnhanceConfig, {"alpha_grid": []})
    with pytest.raises(InvalidConfigError):
        build_config(EnhanceConfig, {"alpha_grid": [0.0, -0.1]})
    with pytest.raises(InvalidConfigError):
        build_config(ADiceConfig, {"eval_lr": 0})
    with pytest.raises(InvalidConfigError):
        build_config(ADiceConfig, {"repeats": 3, "seeds": [1, 2]})
    with pytest.raises(InvalidConfigError):
        build_config(ADiceConfig, {"momentum": 1.0})
    with pytest.raises(InvalidConfigError):
        build_config(ADiceConfig, {"grad_clip": 0})
    assert build_config(ADiceConfig, {"grad_clip": None, "optimizer": "adam"}).grad_clip is None
    assert ADiceConfig(repeats=2, seeds=[7, 8, 9]).repeat_seeds() == [7, 8]
    assert ADiceConfig(repeats=3).repeat_seeds() == [0, 1, 2]


def test_unknown_field_rejected():
    with pytest.raises(InvalidConfigError):
        build_config(TrainConfig, {"lamda": 5})


def test_hash_stable_under_key_reordering():
    a = {"subcommand": "train", "out_dir": "x", "seed": 1, "configs": {"train": {"lr": 0.1, "epochs": 2}}}
    b = {"configs": {"train": {"epochs": 2, "lr": 0.1}}, "seed": 1, "out_dir": "x", "subcommand": "train"}
    assert config_hash(a) == config_hash(b)
    assert RunConfig(**a).config_hash == RunConfig(**b).config_hash
    assert config_hash(TrainConfig()) == config_hash(TrainConfig())
    assert config_hash(TrainConfig(lambda_=5.0)) != config_hash(TrainConfig())


def test_overrides_parse_json_values_and_nest():
    data = apply_overrides({"train": {"lr": 0.1}}, [
        "train.lambda_=5",
        "train.generator.residual_head=true",
        "train.wce_mode=literal",
        "train.betas=[0.5, 0.9]",
    ])
    assert data["train"] == {
        "lr": 0.1,
        "lambda_": 5,
        "generator": {"residual_head": True},
        "wce_mode": "literal",
        "betas": [0.5, 0.9],
    }
    with pytest.raises(InvalidConfigError):
        apply_overrides({}, ["no_equals_sign"])


def test_load_config_file_plus_overrides(tmp_path):
    path = tmp_path / "train.json"
    path.write_text(json.dumps({"lambda_": 20.0, "batch_size": 2}))
    cfg = load_config(TrainConfig, str(path), ["epochs=3"])
    assert (cfg.lambda_, cfg.batch_size, cfg.epochs) == (20.0, 2, 3)

    with pytest.raises(InvalidConfigError):
        load_config(TrainConfig, str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(InvalidConfigError):
        load_config(TrainConfig, str(bad))


def test_error_payload_is_json_ready():
    try:
        build_config(TrainConfig, {"lambda_": 0})
    except InvalidConfigError as e:
        payload = e.to_dict()
        assert payload["error"] == "InvalidConfigError"
        json.dumps(payload)
