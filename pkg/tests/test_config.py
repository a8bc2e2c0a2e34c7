import json

import pytest

from skelcon.config import (
    PROFILES, OptimizerConfig, RunConfig, config_from_dict, load_config, profile_defaults,
    save_config, tiny_config,
)
from skelcon.errors import ConfigError

SYNTH = {"dataset": {"synthetic": {"classes": 3, "per_class": 4}}}


def test_standard_defaults():
    cfg = config_from_dict(SYNTH)
    assert cfg.profile == "standard"
    assert cfg.frames == 64
    assert cfg.encoder.gcn_channels == (64, 256, 64)
    assert cfg.encoder.model_dim == 2048 and cfg.encoder.heads == 8
    assert cfg.contrast.tau == 0.2 and cfg.contrast.momentum == 0.999
    assert cfg.contrast.queue_size == 8192
    assert cfg.contrast.weights == (0.25, 0.25, 0.25, 0.25)
    assert cfg.augment.spatial.k == 8 and cfg.augment.temporal.r == 6
    p = cfg.pretrain
    assert (p.lr, p.momentum, p.weight_decay, p.milestones, p.epochs, p.batch_size) == (
        0.01, 0.9, 1e-4, (350,), 450, 64)
    assert (cfg.probe.lr, cfg.probe.milestones, cfg.probe.epochs, cfg.probe.batch_size) == (
        2.0, (50, 70), 80, 1024)
    assert (cfg.finetune.lr, cfg.finetune.batch_size) == (0.1, 32)


def test_small_corpus_profile():
    cfg = config_from_dict({**SYNTH, "profile": "small_corpus"})
    assert cfg.contrast.queue_size == 2048
    assert cfg.pretrain.weight_decay == 1e-3


def test_tiny_profile_is_consistent():
    cfg = tiny_config()
    assert cfg.encoder.num_frames == cfg.frames
    assert cfg.frames % cfg.augment.temporal.s == 0
    assert cfg.pretrain.epochs == 30


def test_overrides_merge_into_profile():
    cfg = config_from_dict({**SYNTH, "profile": "tiny", "encoder": {"heads": 2}})
    assert cfg.encoder.heads == 2
    assert cfg.encoder.model_dim == profile_defaults("tiny")["encoder"]["model_dim"]


@pytest.mark.parametrize("data, field", [
    ({}, "dataset"),
    ({"dataset": {}}, "dataset"),
    ({**SYNTH, "profile": "huge"}, "profile"),
    ({**SYNTH, "frames": "64"}, "frames"),
    ({**SYNTH, "contrast": {"tau": 0}}, "contrast.tau"),
    ({**SYNTH, "contrast": {"momentum": 1.5}}, "contrast.momentum"),
    ({**SYNTH, "contrast": {"weights": [1, 1]}}, "contrast.weights"),
    ({**SYNTH, "pretrain": {"milestones": [5, 2]}}, "pretrain.milestones"),
    ({**SYNTH, "pretrain": {"lr": -1}}, "pretrain.lr"),
    ({**SYNTH, "encoder": {"num_frames": 32}}, "encoder.num_frames"),
    ({**SYNTH, "augment": {"temporal": {"s": 10}}}, "s"),
    ({**SYNTH, "augment": {"transforms": [["blur", 0.5]]}}, "augment.transforms"),
    ({**SYNTH, "surprise": 1}, "surprise"),
    ({**SYNTH, "encoder": {"depth": 3}}, "encoder.depth"),
    ({"dataset": {"synthetic": {"classes": 1}}}, "dataset.synthetic.classes"),
    ({**SYNTH, "semi_fraction": 0}, "semi_fraction"),
])
def test_validation_names_the_field(data, field):
    with pytest.raises(ConfigError) as err:
        config_from_dict(data)
    assert field in str(err.value)


def test_hash_is_stable_and_sensitive():
    a = config_from_dict(SYNTH)
    b = config_from_dict(json.loads(json.dumps(SYNTH)))
    assert a.config_hash() == b.config_hash() and len(a.config_hash()) == 32
    assert a.replace(output_dir="elsewhere").config_hash() == a.config_hash()
    assert a.replace(seed=1).config_hash() != a.config_hash()


def test_save_load_roundtrip(tmp_path):
    cfg = tiny_config(seed=7)
    save_config(cfg, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()


def test_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "c.json")


def test_lr_schedule():
    opt = OptimizerConfig(lr=0.01, milestones=(2,))
    assert [opt.lr_at(e) for e in range(4)] == [0.01, 0.01, 0.001, 0.001]
    assert opt.lr_at(2) == 0.001
    two = OptimizerConfig(lr=2.0, milestones=(50, 70))
    assert two.lr_at(49) == 2.0
    assert two.lr_at(50) == pytest.approx(0.2)
    assert two.lr_at(79) == pytest.approx(0.02)


def test_profiles_listed():
    assert set(PROFILES) == {"standard", "small_corpus", "tiny"}
    assert isinstance(tiny_config(), RunConfig)
