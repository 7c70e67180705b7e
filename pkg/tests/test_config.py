import pytest

from hyqut.config import (RunConfig, TrainConfig, config_diff, dump_config, load_config, parse_config,
                          with_overrides)
from hyqut.errors import ConfigError, DataError

TOY = """
[model]
vocab_size = auto
hidden_size = 16
num_hidden_layers = 1
num_attention_heads = 4
num_key_value_heads = 2
intermediate_size = 24
max_position_embeddings = 32
seq_len = 8
replace = [Wq]

[projector]
n_q = 3

[train]
total_steps = 40
"""


def test_parse_and_defaults():
    run = parse_config(TOY, vocab_size=20)
    assert run.model.vocab_size == 20
    assert "Wq" in run.model.replace
    assert run.model.projector.variant == "A8M"
    assert run.train.warmup_steps == 2 and run.train.cycle_steps == 38


def test_auto_vocab_needs_tokenizer():
    with pytest.raises(ConfigError, match="vocab_size"):
        parse_config(TOY)


def test_vocab_mismatch():
    with pytest.raises(ConfigError, match="tokenizer"):
        parse_config(TOY.replace("auto", "30"), vocab_size=20)


@pytest.mark.parametrize("bad,key", [
    ("[model]\nhiden_size = 3\n", "hiden_size"),
    ("[train]\nlr = 1\n", "lr"),
    ("[projector]\nqubits = 3\n", "qubits"),
    ("[model]\nhidden_size = big\n", "hidden_size"),
    ("[extra]\na = 1\n", "extra"),
])
def test_errors_name_the_key(bad, key):
    with pytest.raises(ConfigError, match=key):
        parse_config(bad)


def test_train_validation():
    with pytest.raises(ConfigError):
        TrainConfig(fd_delta=1e-2)
    with pytest.raises(ConfigError):
        TrainConfig(grad_mode="spsa")
    with pytest.raises(ConfigError):
        TrainConfig(eta_min=1.0, eta_max=0.1)
    with pytest.raises(ConfigError):
        TrainConfig(total_steps=10, warmup_steps=10)


def test_dump_round_trip():
    run = parse_config(TOY, vocab_size=20)
    again = parse_config(dump_config(run))
    assert again == run
    assert dump_config(again) == dump_config(run)


def test_diff_and_overrides():
    run = parse_config(TOY, vocab_size=20)
    other = with_overrides(run, projector={"n_q": 4}, train={"seed": 9})
    diff = config_diff(run, other)
    assert diff == ["projector.n_q: 3 != 4", "train.seed: 0 != 9"]
    assert isinstance(other, RunConfig)


def test_load_missing(tmp_path):
    with pytest.raises(DataError):
        load_config(tmp_path / "none.cfg")
