import csv
import json

import pytest

from s2il.cli import main
from s2il.config import ExperimentConfig, format_config, load_config, parse_config
from s2il.errors import ConfigError

TINY = """\
# small end-to-end setting
data.classes = 4
data.per_class = 10
data.image_size = 8
stream.base = 2
stream.increment = 1
model.channels = (4, 6)
model.pool = (True, False)
model.proxies_per_class = 2
train.epochs = 1
train.finetune_epochs = 1
train.batch_size = 8
exemplar.budget = 4
sweep.modes = ['none', 's2il']
sweep.include_oracle = True
seeds = [0, 1]
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def test_round_trip_of_defaults_and_custom():
    for cfg in (ExperimentConfig(), parse_config(TINY)):
        assert parse_config(format_config(cfg)) == cfg


def test_parsed_values():
    cfg = parse_config(TINY + "ssim.p = 0.5\nssim.power_mode = plain\n")
    assert cfg.model.channels == (4, 6)
    assert cfg.ssim.p == 0.5 and cfg.ssim.power_mode == "plain"
    assert cfg.seeds == [0, 1]
    assert cfg.train.epochs == 1


@pytest.mark.parametrize("text", [
    "nonsense line",
    "foo.bar = 1",
    "train.nope = 3",
    "train.epochs = 1\ntrain.epochs = 2",
    "sweep.modes = ['eq9']",
    "train.distill = 'bogus'",
    "ssim.c1 = -1",
    "seeds = []",
    "seeds = ['a']",
    "sweep.components = ['lx']",
    "train.epochs = [1,",
])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_grid_size_is_product_of_axes():
    cfg = parse_config("sweep.modes = ['s2il', 'none']\nsweep.p = [0.1, 1]\nsweep.r = [1, 4, 8]\n"
                       "sweep.components = ['lcs', 'cs']\n")
    assert cfg.grid_size() == 2 * 2 * 3 * 2
    points = cfg.sweep_points()
    assert len(points) == cfg.grid_size()
    assert len({p.name for p in points}) == len(points)
    p = next(p for p in points if p.components == "cs")
    assert p.ssim_params(cfg.ssim).use_l is False


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_gen_data(tmp_path, tiny_config, capsys):
    out = tmp_path / "d.bin"
    assert main(["gen-data", "--config", str(tiny_config), "--out", str(out)]) == 0
    assert "32 train, 8 test" in capsys.readouterr().out
    assert out.read_bytes()[:4] == b"S2IL"


def test_exit_codes(tmp_path, tiny_config):
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("train.epochs = oops = 3\nwhat\n")
    assert main(["run", "--config", str(bad_cfg), "--out", str(tmp_path / "x")]) == 2
    assert main(["report", "--out", str(tmp_path / "nothing")]) == 3
    assert main(["gen-data", "--config", str(tiny_config), "--out", str(tmp_path / "no" / "d.bin")]) == 3


def test_failed_run_leaves_marker(tmp_path, tiny_config):
    corrupt = tmp_path / "corrupt.bin"
    corrupt.write_bytes(b"JUNK" * 10)
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY + f"data.path = {str(corrupt)!r}\n")
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 3
    assert (out / "FAILED").exists()
    assert json.loads((out / "manifest.json").read_text())["status"] == "failed"


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    out = root / "out"
    codes, snapshots = [], []
    # the same config (including the output directory) run twice
    for _ in range(2):
        codes.append(main(["run", "--config", str(cfg), "--out", str(out)]))
        snapshots.append({f: (out / f).read_bytes() for f in ("manifest.json", "accuracy.csv", "metrics.csv")})
    return codes, out, snapshots


def test_end_to_end_run(tiny_runs, capsys):
    codes, out, _ = tiny_runs
    assert codes == [0, 0]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert not (out / "FAILED").exists()
    echoed = parse_config(manifest["config"])
    assert echoed == parse_config(TINY + f"output.dir = {str(out)!r}\n")
    runs = manifest["runs"]
    assert sorted({r["point"] for r in runs}) == ["none", "oracle", "s2il"]
    assert len(runs) == 6
    for name, entry in manifest["aggregate"].items():
        assert set(entry["aia"]["per_seed"]) == {"0", "1"}
        assert "mean" in entry["aia"] and "std" in entry["aia"]
    with open(out / "accuracy.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 * (1 + 2 + 3)
    assert (out / "metrics.csv").exists() and (out / "deviation.csv").exists()
    assert main(["report", "--out", str(out)]) == 0
    assert "aia" in capsys.readouterr().out


def test_rerun_is_identical_modulo_timestamps(tiny_runs):
    _, _, (first, second) = tiny_runs
    ma, mb = (json.loads(s["manifest.json"]) for s in (first, second))
    for m in (ma, mb):
        m.pop("started")
        m.pop("finished")
    assert ma == mb
    assert first["accuracy.csv"] == second["accuracy.csv"]
    assert first["metrics.csv"] == second["metrics.csv"]


def test_sweep_isolation_by_initial_checksum(tiny_runs):
    _, out, _ = tiny_runs
    runs = json.loads((out / "manifest.json").read_text())["runs"]
    for seed in (0, 1):
        sums = {r["initial_checksum"] for r in runs if r["seed"] == seed}
        assert len(sums) == 1
    assert runs[0]["initial_checksum"] != next(r for r in runs if r["seed"] == 1)["initial_checksum"]


def test_mode_and_seed_overrides(tmp_path, tiny_config):
    out = tmp_path / "o"
    assert main(["run", "--config", str(tiny_config), "--out", str(out), "--mode", "eq1", "--seed", "3"]) == 0
    runs = json.loads((out / "manifest.json").read_text())["runs"]
    assert {(r["point"], r["seed"]) for r in runs} == {("eq1", 3), ("oracle", 3)}
