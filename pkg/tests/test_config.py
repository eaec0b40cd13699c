import warnings

import pytest

from vertikit.config import RunConfig, load_config, parse_seeds, reference_text, substream
from vertikit.errors import ConfigError
from vertikit.harness import MeanCollapseWarning


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "empty.ini").write_text("")
    cfg = load_config(tmp_path / "empty.ini")
    assert cfg == load_config()
    assert cfg.pretrain.mask_ratio == 0.75 and cfg.downstream.batch_size == 32 and cfg.data.split == "9:1"
    assert cfg.codec.seed == substream(0, "codec") != cfg.pretrain.seed


def test_override_wins_and_is_echoed(tmp_path):
    (tmp_path / "a.ini").write_text("[pretrain]\nmask_ratio = 0.5\nepochs = 3\n")
    cfg = load_config(tmp_path / "a.ini", ["pretrain.mask_ratio=0.9"])
    assert cfg.pretrain.mask_ratio == 0.9 and cfg.pretrain.epochs == 3
    assert cfg.downstream.mask_ratio == 0.9
    echoed = cfg.echo(tmp_path / "out").read_text()
    assert "mask_ratio = 0.9\n" in echoed


@pytest.mark.parametrize("override,key", [
    ("pretrain.mask_rate=0.9", "pretrain.mask_rate"),
    ("optim.lr=1", "optim"),
    ("codec.epochs=ten", "codec.epochs"),
    ("rollout.flat=maybe", "rollout.flat"),
    ("pretrain.mask_ratio=1.5", r"\[pretrain\] mask_ratio"),
    ("ablation.which=depth", "ablation.which"),
    ("data.seeds=1", r"\[data\]"),
])
def test_bad_keys_are_named(override, key):
    with pytest.raises(ConfigError, match=key):
        load_config(None, [override])


def test_malformed_override():
    with pytest.raises(ConfigError):
        load_config(None, ["mask_ratio"])
    with pytest.raises(ConfigError):
        load_config(None, ["mask_ratio=0.5"])


def test_large_batch_accepted_with_warning():
    with pytest.warns(MeanCollapseWarning):
        cfg = load_config(None, ["downstream.batch_size=512"])
    assert cfg.downstream.batch_size == 512


def test_echo_round_trips(tmp_path):
    cfg = load_config(None, ["run.seed=7", "data.seeds=4", "data.split=3:1", "downstream.use_goal=false",
                             "terrain.roughness=0.5"])
    path = cfg.echo(tmp_path)
    again = load_config(path)
    assert again == cfg and isinstance(again, RunConfig)
    assert again.to_ini() == path.read_text()


def test_seed_substreams_follow_global_seed():
    a, b = load_config(None, ["run.seed=1"]), load_config(None, ["run.seed=2"])
    assert a.codec.seed != b.codec.seed and a.pretrain.seed != b.pretrain.seed
    assert load_config(None, ["run.seed=1", "codec.seed=5"]).codec.seed == 5


def test_parse_seeds():
    assert parse_seeds("0-9") == list(range(10))
    assert parse_seeds("0,1,2") == [0, 1, 2]
    assert parse_seeds("0-2,7") == [0, 1, 2, 7]
    for bad in ("", "a", "1-x"):
        with pytest.raises(ConfigError):
            parse_seeds(bad)


def test_reference_lists_every_section():
    text = reference_text()
    for section in ("run", "terrain", "vehicle", "data", "codec", "pretrain", "downstream", "ablation", "rollout"):
        assert f"[{section}]" in text
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        body = "\n".join(line for line in text.splitlines() if not line.startswith("#"))
        assert RunConfig().to_ini().count("[") == body.count("[")
