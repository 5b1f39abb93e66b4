from __future__ import annotations

import pytest

from semadc.config import RunConfig, dump_toml, load_config, parse_overrides
from semadc.errors import ConfigError


def test_defaults_validate():
    cfg = load_config()
    assert cfg.knn.k == 10
    assert cfg.train.peak_lr == 1e-2
    assert cfg.sweep.shots == [1, 2, 5, 10, 15, 25, 50]
    assert cfg.data.split_ratios == (0.7, 0.1, 0.2)


def test_unknown_key_in_file_names_key_and_line(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text("seed = 1\n\n[knn]\nk = 5\nbandwith = 2.0\n")
    with pytest.raises(ConfigError, match=r"run\.toml:5: unknown config key 'knn\.bandwith'"):
        load_config(p)


def test_unknown_key_in_override():
    with pytest.raises(ConfigError, match="command-line override: unknown config key 'knn.bandwith'"):
        load_config(overrides={"knn.bandwith": "3"})


def test_unknown_section():
    with pytest.raises(ConfigError, match="unknown config key 'nope'"):
        load_config(overrides={"nope.x": "1"})


@pytest.mark.parametrize(
    "key,value",
    [("knn.k", "0"), ("train.min_lr", "1.0"), ("data.split_ratios", "[0.5, 0.5, 0.5]"),
     ("sweep.shots", "[5, 1]"), ("sweep.methods", "[\"svm\"]"), ("tsne.perplexity", "-1"),
     ("synth.num_classes", "13"), ("train.epochs", "1.5"), ("knn.normalize", "maybe"),
     ("crop.layer1.size", "[0, 3]"), ("crop.bogus.size", "[3, 3]"), ("embed.backend", "\"dino\"")],
)
def test_module_invariants_enforced_at_parse_time(key, value):
    with pytest.raises(ConfigError):
        load_config(overrides={key: value})


def test_overrides_and_types(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text("seed = 4\n[train]\npeak_lr = 0.5\n[crop.layer2]\nsize = [340, 340]\n")
    cfg = load_config(p, parse_overrides(["train.peak_lr=1e-3", "sweep.shots=2,4", "knn.normalize=true",
                                          "pseudo.max_unlabeled=none"]))
    assert cfg.seed == 4
    assert cfg.train.peak_lr == 1e-3
    assert cfg.sweep.shots == [2, 4]
    assert cfg.knn.normalize is True
    assert cfg.pseudo.max_unlabeled is None
    assert cfg.crop_for(2).crop_size == (340, 340)
    assert cfg.crop_for(1).crop_size is None


def test_malformed_override():
    with pytest.raises(ConfigError):
        parse_overrides(["knn.k"])


def test_missing_and_broken_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.toml")
    (tmp_path / "bad.toml").write_text("[knn\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.toml")


def test_dump_round_trip(tmp_path):
    cfg = load_config(overrides={"seed": 9, "crop.default.size": "[100, 120]", "tsne.max_points": "50",
                                 "train.lr_values": "[0.01, 0.001]"})
    p = tmp_path / "echo.toml"
    p.write_text(dump_toml(cfg))
    assert load_config(p) == cfg
    assert isinstance(cfg, RunConfig)


def test_module_objects():
    cfg = load_config(overrides={"train.head": "\"mlp\"", "train.hidden": "64", "seed": "3"})
    tc = cfg.train_config()
    assert tc.hidden == 64 and tc.seed == 3
    assert cfg.train_config(seed=8, peak_lr=0.1).peak_lr == 0.1
    assert cfg.pseudo_config().train == tc
    assert cfg.kernel(3).k == 3
    assert cfg.tsne_config().seed == 3
    assert cfg.synth_spec().seed == 3
