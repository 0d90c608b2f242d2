import json

import numpy as np
import pytest

from gttdi import cli
from gttdi import config as cfgmod
from gttdi.data import load_cache

TINY_TOML = """
seed = 4

[scenario]
n_sensors = 6
n_days = 10
points_per_day = 24
slices = 2

[train]
epochs = 2
batch_size = 8

[model]
graph_head_dim = 4
graph_out = 8
sem_out = 8
enc_heads = 2
enc_ff_mult = 2

[embed]
dim = 4
epochs = 1

[graph]
n_neighbors = 2
"""


@pytest.fixture
def run_dir(tmp_path):
    (tmp_path / "c.toml").write_text(TINY_TOML)
    return tmp_path


def call(run_dir, *args):
    return cli.main([*args, "--config", str(run_dir / "c.toml"), "--out", str(run_dir), "--quiet"])


def test_defaults_roundtrip(tmp_path, capsys):
    assert cli.main(["--print-defaults"]) == 0
    text = capsys.readouterr().out
    (tmp_path / "d.toml").write_text(text)
    assert cfgmod.load(tmp_path / "d.toml") == cfgmod.RunConfig()


def test_config_errors(tmp_path):
    (tmp_path / "bad.toml").write_text("[train]\nepochs = 2\nbogus = 1\n")
    with pytest.raises(cfgmod.ConfigError, match="bogus"):
        cfgmod.load(tmp_path / "bad.toml")
    (tmp_path / "bad2.toml").write_text("[nope]\n")
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.load(tmp_path / "bad2.toml")
    (tmp_path / "bad3.toml").write_text("[eval]\nlabels = ['road_id', 'colour']\n")
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.load(tmp_path / "bad3.toml")


def test_config_hash_tracks_seed():
    a = cfgmod.RunConfig()
    assert cfgmod.config_hash(a) == cfgmod.config_hash(cfgmod.RunConfig())
    assert cfgmod.config_hash(a) != cfgmod.config_hash(cfgmod.with_seed(a, 9))


def test_full_cli_pipeline(run_dir):
    for cmd in ("generate", "corrupt", "build-graph", "embed", "train", "impute", "evaluate"):
        assert call(run_dir, cmd) == 0, cmd
        manifest = json.loads((run_dir / f"manifest-{cmd}.json").read_text())
        assert manifest["seed"] == 4 and len(manifest["config_hash"]) == 64
        assert {"numpy", "python", "gttdi"} <= set(manifest["versions"])
    for name in ("data.csv", "network.json", "corrupted.bin", "edges.txt", "embeddings.txt", "checkpoint.bin",
                 "train_log.jsonl", "imputed.bin", "reports/metrics.jsonl", "reports/metrics.txt",
                 "reports/metrics.png"):
        assert (run_dir / name).exists(), name
    rows = [json.loads(l) for l in (run_dir / "reports/metrics.jsonl").read_text().splitlines()]
    assert {r["method"] for r in rows} == {"GT-TDI", "HA", "KNN"}
    log = [json.loads(l) for l in (run_dir / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [1, 2]
    imputed = load_cache(run_dir / "imputed.bin")
    corrupted = load_cache(run_dir / "corrupted.bin")
    assert imputed.mask.all()
    assert np.array_equal(imputed.values[corrupted.mask], corrupted.values[corrupted.mask])


def test_corrupt_flags(run_dir):
    assert call(run_dir, "generate") == 0
    assert call(run_dir, "corrupt", "--pattern", "nm", "--rate", "0.3") == 0
    meta = json.loads((run_dir / "corrupted.json").read_text())
    assert meta == {"pattern": "nm", "rate": 0.3}
    t = load_cache(run_dir / "corrupted.bin")
    _, mask = t.daily()
    assert np.all(mask.all(axis=2) | ~mask.any(axis=2))


def test_errors_are_single_json_lines(run_dir, capsys):
    assert call(run_dir, "train") != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    rec = json.loads(err[0])
    assert rec["error"] == "missing-input" and rec["path"].endswith("network.json")
    (run_dir / "broken.toml").write_text("seed = [")
    assert cli.main(["generate", "--config", str(run_dir / "broken.toml"), "--out", str(run_dir)]) != 0
    rec = json.loads(capsys.readouterr().err)
    assert rec["error"] == "malformed-config" and rec["path"].endswith("broken.toml")
    assert cli.main(["corrupt", "--rate", "1.5", "--out", str(run_dir)]) != 0
    assert json.loads(capsys.readouterr().err)["error"] == "bad-argument"
    assert cli.main([]) != 0
    assert cli.main(["frobnicate"]) != 0


def test_ablate_command(run_dir):
    assert call(run_dir, "ablate", "--axis", "pattern_edges", "--rate", "0.5") == 0
    rows = [json.loads(l) for l in (run_dir / "reports/ablation-pattern_edges.jsonl").read_text().splitlines()]
    assert [r["method"] for r in rows] == ["pattern_edges=on", "pattern_edges=off"]
    assert (run_dir / "reports/ablation-pattern_edges.png").stat().st_size > 0
