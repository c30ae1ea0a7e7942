from __future__ import annotations

from pathlib import Path

import pytest

from rankcav.cav import CavLoss
from rankcav.config import (
    ENV_OUT,
    ConceptConfig,
    DatasetConfig,
    RunConfig,
    TcavConfig,
    load_config,
    parse_config,
)
from rankcav.exceptions import ConfigError
from rankcav.synth import Concept, Split
from rankcav.tcav import Method
from rankcav.training import BudgetUnit

FULL = """
[run]
seed = 3
out = results

[dataset]
n = 500
grid_size = 6
nonlinear = yes
weights = 0.5, 1.0, 0.2, -0.8, -0.3, 0.1

[train]
pretrain_steps = 10
pretrain_budget = epochs
encoder_widths = 32, 8

[concepts]
n_per_concept = 40
concepts = Water, Vegetation, ImperviousSurface
loss = logistic

[tcav]
layers = 0, 2
methods = plain
split = val
cav_seeds = 2
"""


def test_defaults_without_a_file():
    config = load_config(environ={})
    assert config == RunConfig()
    assert config.out == Path("runs")
    assert config.tcav.layers is None
    assert config.concepts.concepts == tuple(Concept)


def test_full_file_is_typed():
    config = parse_config(FULL, environ={})
    assert config.seed == 3
    assert config.out == Path("results")
    assert config.dataset.n == 500
    assert config.dataset.nonlinear is True
    assert config.dataset.model.weights[-1] == 0.1
    assert config.train.encoder_widths == (32, 8)
    assert config.train.pretrain_budget is BudgetUnit.EPOCHS
    assert config.concepts.concepts == (Concept.WATER, Concept.VEGETATION, Concept.IMPERVIOUS_SURFACE)
    assert config.concepts.cav.loss is CavLoss.LOGISTIC
    assert config.tcav.layers == (0, 2)
    assert config.tcav.methods == (Method.PLAIN,)
    assert config.tcav.split is Split.VAL
    assert config.tcav.cav_seeds == 2


def test_run_seed_drives_training_seed():
    config = parse_config(FULL, environ={})
    assert config.train.seed == 3
    assert config.with_overrides(seed=9).train.seed == 9


def test_environment_overrides_file_output():
    config = parse_config(FULL, environ={ENV_OUT: "/tmp/elsewhere"})
    assert config.out == Path("/tmp/elsewhere")


def test_overrides_skip_none():
    config = RunConfig(seed=4)
    assert config.with_overrides(seed=None, out=Path("x")) == RunConfig(seed=4, out=Path("x"))


def test_all_layers_keyword():
    config = parse_config("[tcav]\nlayers = all\n", environ={})
    assert config.tcav.layers is None
    assert config.tcav.resolve_layers(3) == (0, 1, 2)


@pytest.mark.parametrize(
    "text",
    [
        "[bogus]\nx = 1\n",
        "[train]\nseed = 4\n",
        "[train]\nunknown_key = 1\n",
        "[dataset]\nn = many\n",
        "[dataset]\nn = 10\n",
        "[dataset]\nnonlinear = perhaps\n",
        "[train]\noptimizer = lbfgs\n",
        "[concepts]\nconcepts = Water\n",
        "[tcav]\nbins = 1\n",
        "[tcav]\ncav_seeds = 0\n",
        "[concepts]\nregularization = 0\n",
        "[run]\nseed = -1\n",
        "[run]\nverbose = 1\n",
        "not an ini file",
    ],
)
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text, environ={})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini", environ={})


def test_load_from_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(FULL, encoding="utf-8")
    assert load_config(path, environ={}) == parse_config(FULL, environ={})


def test_section_validation():
    with pytest.raises(ConfigError):
        DatasetConfig(split_fractions=(0.5, 0.5))
    with pytest.raises(ConfigError):
        ConceptConfig(n_per_concept=5)
    with pytest.raises(ConfigError):
        TcavConfig(layers=())
    with pytest.raises(ConfigError):
        TcavConfig(ig_steps=1)
    with pytest.raises(ConfigError):
        TcavConfig(layers=(0, 5)).resolve_layers(3)


def test_documented_example_matches_the_defaults():
    example = Path(__file__).resolve().parent.parent / "docs" / "example.ini"
    assert load_config(example, environ={}) == RunConfig(seed=7, out=Path("runs/example"))
