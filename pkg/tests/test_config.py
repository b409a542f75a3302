import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcdnet.config import RunConfig, apply_pairs, dump_config, load_config, loads_config, parse_pairs, to_pairs
from pcdnet.errors import ConfigurationError, DataError


def test_defaults_round_trip():
    text = dump_config(RunConfig())
    assert to_pairs(loads_config(text)) == to_pairs(RunConfig())
    assert dump_config(loads_config(text)) == text


def test_partial_file_canonicalizes():
    text = """
    # ablation run
    tree = aflw21
    train.base_lr = 0.05
    train.lr_drop_every = inf
    synth.yaw_range = [-60, 60]
    model.conditioning = false
    paths.manifest = data/train.jsonl
    """
    cfg = loads_config(text)
    assert cfg.train.base_lr == 0.05 and math.isinf(cfg.train.lr_drop_every)
    assert cfg.synth.yaw_range == (-60.0, 60.0)
    assert cfg.model.conditioning is False
    assert cfg.paths["manifest"] == "data/train.jsonl"
    canon = dump_config(cfg)
    assert "train.lr_drop_every = inf\n" in canon
    assert dump_config(loads_config(canon)) == canon
    assert cfg.variant() == "no-conditioning"


def test_seed_drives_training():
    cfg = loads_config("seed = 5")
    assert cfg.train.seed == 5
    with pytest.raises(ConfigurationError):
        loads_config("train.seed = 5")


def test_synth_follows_tree_and_size():
    cfg = loads_config("tree = cofw29\nimage_size = 32")
    assert cfg.synth.tree == "cofw29" and cfg.synth.image_size == 32


@pytest.mark.parametrize("text", [
    "nonsense",
    "bogus = 1",
    "train.nope = 1",
    "train.base_lr.x = 1",
    "a.b = 1",
    "seed = 1\nseed = 2",
    "model.conditioning = 3",
    "model.dtype = float16",
    "train.epochs = 0",
    "image_size = big",
    "eval.normalizer = eyes",
])
def test_malformed_configs_rejected(text):
    with pytest.raises(ConfigurationError):
        loads_config(text)


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError):
        load_config(tmp_path / "absent.cfg")
    p = tmp_path / "run.cfg"
    p.write_text("seed = 3\n")
    assert load_config(p).seed == 3


def test_values_and_comments():
    pairs = parse_pairs("a = 1  # one\nb = -inf\nc = some/path\nd = [1, 2]\ne = \"quoted\"\n")
    assert pairs == {"a": 1, "b": -math.inf, "c": "some/path", "d": [1, 2], "e": "quoted"}


@settings(max_examples=40, deadline=None)
@given(lr=st.floats(1e-5, 1.0), epochs=st.integers(1, 50), mining=st.booleans(),
       cond=st.booleans(), seed=st.integers(0, 2**31 - 1), drop=st.one_of(st.just(math.inf), st.integers(1, 9)))
def test_round_trip_property(lr, epochs, mining, cond, seed, drop):
    cfg = apply_pairs(RunConfig(), {"train.base_lr": lr, "train.epochs": epochs, "train.mining": mining,
                                    "model.conditioning": cond, "seed": seed, "train.lr_drop_every": drop})
    text = dump_config(cfg)
    again = loads_config(text)
    assert to_pairs(again) == to_pairs(cfg)
    assert again.train == cfg.train and again.model == cfg.model
    assert dump_config(again) == text
