"""Config grammar, defaults, validation messages."""

import pytest

from attrface.config import RunConfig, parse_config_text
from attrface.errors import ConfigError


def test_empty_config_is_the_default_run():
    cfg = RunConfig.from_text("")
    assert cfg["data.identities"] == 32
    assert cfg["train.epochs"] == 25
    assert cfg["train.lr_steps"] == (4, 10, 17)
    assert cfg["network.fusion"] == "dual"
    assert cfg["eval.far_targets"] == (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)


def test_comments_and_blank_lines():
    cfg = RunConfig.from_text("""
# a comment
data.identities = 16

train.epochs = 5
train.lr_steps = 1,3
""")
    assert cfg["data.identities"] == 16
    assert cfg["train.epochs"] == 5


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="unknown key 'data.wat'"):
        parse_config_text("data.wat = 3")


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("data.identities = 3\ndata.identities = 4")


def test_bad_value_reported_with_line():
    with pytest.raises(ConfigError, match=":1"):
        RunConfig.from_text("data.identities = many")


def test_missing_equals():
    with pytest.raises(ConfigError, match="key = value"):
        RunConfig.from_text("data.identities 3")


def test_nonpositive_attribute_weight_rejected():
    with pytest.raises(ConfigError, match="must be > 0"):
        RunConfig.from_text("attributes.weights = 1,0,0.5,0.5,0.5")


def test_nonpositive_lambda_rejected():
    with pytest.raises(ConfigError, match="lambda_fr"):
        RunConfig.from_text("network.lambda_fr = -1")


def test_reduction_must_divide_embedding():
    with pytest.raises(ConfigError, match="divide"):
        RunConfig.from_text("network.embedding = 30\nnetwork.reduction = 8")


def test_lr_steps_must_precede_epochs():
    with pytest.raises(ConfigError, match="train.epochs"):
        RunConfig.from_text("train.epochs = 10\ntrain.lr_steps = 4,10")


def test_backbone_parse_and_error():
    cfg = RunConfig.from_text("network.backbone = 4:2,8:1")
    assert cfg["network.backbone"] == ((4, 2), (8, 1))
    with pytest.raises(ConfigError, match="channels:stride"):
        RunConfig.from_text("network.backbone = 4x2")


def test_names_weights_arity():
    with pytest.raises(ConfigError, match="entries"):
        RunConfig.from_text("attributes.names = male,bald\n"
                            "attributes.weights = 1,1,0.5")


def test_attribute_use_bounds():
    with pytest.raises(ConfigError, match="attributes.use"):
        RunConfig.from_text("attributes.use = 9")


def test_typed_views_consistent():
    cfg = RunConfig.from_text("""
data.identities = 12
data.eval_identities = 4
attributes.use = 2
network.embedding = 16
network.reduction = 4
train.epochs = 3
train.lr_steps = 1
""")
    spec = cfg.synthetic_spec()
    assert spec.n_identities == 12 and spec.eval_identities == 4
    ncfg = cfg.network_config()
    assert ncfg.n_identities == 8
    assert ncfg.attribute_names == ("male", "bald")
    tcfg = cfg.train_config()
    assert tcfg.epochs == 3 and tcfg.lr_steps == (1,)


def test_derived_and_master_seed():
    cfg = RunConfig.from_text("")
    alt = cfg.derived({"network.fusion": "se"})
    assert alt["network.fusion"] == "se" and cfg["network.fusion"] == "dual"
    seeded = cfg.with_master_seed(7)
    for key in ("data.seed", "network.seed", "train.seed", "eval.seed"):
        assert seeded[key] == 7


def test_unknown_fusion_choice():
    with pytest.raises(ConfigError, match="network.fusion"):
        RunConfig.from_text("network.fusion = blendomatic")
