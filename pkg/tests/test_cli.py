import csv
import io
import json
import math
import os

import numpy as np
import pytest

from fpf_gain import __version__, cli
from fpf_gain.cli import ConfigError, RunConfig, main, parse_config, run

T_OFF = math.exp(-1.0) / (1.0 + math.exp(-1.0))
PHI_C = 0.25 / (4.0 * T_OFF)
K_TWO = T_OFF * (1 - T_OFF) * (2.0 * PHI_C + 0.25) / 0.5


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# parsing


def test_minimal_gain_sweep_defaults():
    cfg = parse_config({"seed": 1, "output": "out.csv"}, command="gain-sweep")
    p = cfg.params
    assert p["Ns"] == [200] and p["dims"] == [1] and p["sigma_sq"] == 0.2 and p["M"] == 100
    eps = np.array(p["epsilons"])
    assert eps[0] == pytest.approx(0.01) and eps[-1] == pytest.approx(10.0)
    np.testing.assert_allclose(np.diff(np.log(eps)), np.log(eps[1] / eps[0]))
    assert p["iterations"] == 1000
    assert cfg.threads == 1


def test_filter_and_benes_defaults():
    fs = parse_config({"seed": 0, "output": "o.csv"}, command="filter-static").params
    assert (fs["N"], fs["sigma_w"], fs["dt"], fs["steps"], fs["epsilon"], fs["iterations"]) == (200, 0.1, 0.001, 500, 0.1, 100)
    bn = parse_config({"seed": 0, "output": "o.csv"}, command="benes").params
    assert (bn["mu"], bn["sigma_B"], bn["h1"], bn["h2"], bn["x0"], bn["dt"], bn["T"]) == (0.5, 0.8, 0.4, 0.0, 1.0, 0.01, 10.0)


@pytest.mark.parametrize("data, path", [
    ({"seed": 1, "output": "o.csv", "dt": -0.1}, "dt"),
    ({"seed": 1, "output": "o.csv", "steps": 0}, "steps"),
    ({"seed": 1, "output": "o.csv", "bogus": 3}, "bogus"),
    ({"output": "o.csv"}, "seed"),
    ({"seed": 1}, "output"),
    ({"seed": -1, "output": "o.csv"}, "seed"),
    ({"seed": 1, "output": "o.csv", "methods": ["sir", "kalman"]}, "methods[1]"),
    ({"seed": 1, "output": "o.csv", "epsilon": "big"}, "epsilon"),
    ({"seed": 1, "output": "o.csv", "command": "bench"}, "command"),
])
def test_config_errors_name_the_field(data, path):
    with pytest.raises(ConfigError) as info:
        parse_config(data, command="filter-static")
    assert info.value.path == path
    assert str(info.value).startswith(path)


def test_unknown_command_and_bad_json():
    with pytest.raises(ConfigError):
        parse_config({"seed": 1, "output": "o"}, command="plot")
    with pytest.raises(ConfigError):
        parse_config("{not json", command="bench")


def test_flag_overrides():
    cfg = parse_config({"seed": 1, "output": "a.csv", "threads": 2}, command="bench", seed=7, output="b.csv", threads=4)
    assert (cfg.seed, cfg.output, cfg.threads) == (7, "b.csv", 4)


@pytest.mark.parametrize("command", cli.COMMANDS)
def test_config_round_trip(command):
    cfg = parse_config({"seed": 3, "output": "x.csv"}, command=command)
    again = parse_config(cfg.to_json())
    assert again == cfg
    assert isinstance(again, RunConfig)


# running


def test_gain_once_two_particle_fixture(tmp_path, capsys):
    out = str(tmp_path / "g.csv")
    cfg_path = write_config(tmp_path, {"positions": [0.0, 1.0], "epsilon": 0.25, "tol": 0.0, "iterations": 20000})
    assert main(["gain-once", "--config", cfg_path, "--seed", "0", "--out", out]) == 0
    rows = read_csv(out)
    assert rows[0] == ["particle", "method", "k_1"]
    dm = [float(r[2]) for r in rows[1:] if r[1] == "diffusion-map"]
    np.testing.assert_allclose(dm, [K_TWO, K_TWO], rtol=1e-12)
    const = [float(r[2]) for r in rows[1:] if r[1] == "constant"]
    np.testing.assert_allclose(const, [0.25, 0.25])
    printed = capsys.readouterr().out
    assert printed == open(out).read()


def test_gain_sweep_schema_and_sidecar(tmp_path):
    out = str(tmp_path / "s.csv")
    cfg = parse_config({"seed": 2, "output": out, "M": 2, "epsilons": [0.5, 2.0], "Ns": [20]}, command="gain-sweep")
    assert run(cfg, stdout=io.StringIO()) == 0
    rows = read_csv(out)
    assert rows[0] == ["epsilon", "N", "d", "method", "mse", "wall_time_s"]
    assert len(rows) == 1 + 4
    for row in rows[1:]:
        float(row[0]), int(row[1]), int(row[2])
        assert row[3] in ("constant", "diffusion-map")
        assert float(row[4]) >= 0
        assert row[5] == "nan"
    side = json.loads(open(out + ".config.json").read())
    assert side["seed"] == 2 and side["version"] == __version__
    assert parse_config(side["config"]) == cfg


def test_gain_sweep_timing_column(tmp_path):
    out = str(tmp_path / "t.csv")
    cfg = parse_config({"seed": 2, "output": out, "M": 1, "epsilons": [1.0], "Ns": [20], "timing": True}, command="gain-sweep")
    assert run(cfg, stdout=io.StringIO()) == 0
    assert all(float(r[5]) >= 0 for r in read_csv(out)[1:])


def test_seventeen_significant_digits():
    assert cli.fmt(0.1) == "0.10000000000000001"
    assert float(cli.fmt(1 / 3)) == 1 / 3
    assert cli.fmt(np.int64(5)) == "5"
    assert cli.fmt(True) == "true"


def test_filter_and_benes_schema(tmp_path):
    for command, extra in (("filter-static", {"steps": 5, "M": 1, "N": 10}), ("benes", {"T": 0.05, "M": 1, "N": 10})):
        out = str(tmp_path / f"{command}.csv")
        buf = io.StringIO()
        cfg = parse_config({"seed": 1, "output": out, **extra}, command=command)
        assert run(cfg, stdout=buf) == 0
        rows = read_csv(out)
        assert rows[0] == ["t", "method", "mse"]
        assert len(rows) == 1 + 6 * 3
        assert {r[1] for r in rows[1:]} == {"fpf-dm", "fpf-const", "sir"}
        assert "time-averaged mse" in buf.getvalue()


def test_bench_schema_and_slopes(tmp_path):
    out = str(tmp_path / "b.csv")
    buf = io.StringIO()
    cfg = parse_config({"seed": 1, "output": out, "Ns": [50, 100], "repeats": 1, "iterations": 2}, command="bench")
    assert run(cfg, stdout=buf) == 0
    assert read_csv(out)[0] == ["N", "method", "seconds"]
    lines = buf.getvalue().splitlines()
    assert [ln.split(":")[0] for ln in lines] == ["slope constant", "slope diffusion-map"]


def test_exit_codes(tmp_path, capsys):
    bad = write_config(tmp_path, {"dt": -1}, "bad.json")
    assert main(["filter-static", "--config", bad, "--seed", "1", "--out", str(tmp_path / "x.csv")]) == cli.EXIT_CONFIG
    assert "dt" in capsys.readouterr().err
    assert main(["bench", "--config", str(tmp_path / "missing.json"), "--seed", "1", "--out", "x"]) == cli.EXIT_IO
    target = str(tmp_path / "no" / "such" / "dir" / "x.csv")
    assert main(["gain-once", "--seed", "1", "--out", target]) == cli.EXIT_IO
    assert not os.path.exists(target)


def test_all_cells_failing_exits_3(tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise cli.experiments.FpfGainError("nope")

    monkeypatch.setattr(cli.experiments, "diffusion_map_gain", broken)
    out = str(tmp_path / "f.csv")
    cfg = parse_config({"seed": 1, "output": out, "M": 1, "Ns": [10], "epsilons": [1.0], "methods": ["diffusion-map"]},
                       command="gain-sweep")
    assert run(cfg, stdout=io.StringIO()) == cli.EXIT_NUMERICAL
    assert not os.path.exists(out)


def test_failed_write_leaves_no_partial_file(tmp_path, monkeypatch):
    target = tmp_path / "r.csv"
    target.write_text("old\n")

    def explode(*args, **kwargs):
        raise OSError("disk full")

    monkeypatch.setattr(cli.os, "replace", explode)
    with pytest.raises(OSError):
        cli.atomic_write(str(target), "new\n")
    assert target.read_text() == "old\n"
    assert [p.name for p in tmp_path.iterdir()] == ["r.csv"]


def test_same_config_gives_identical_csv(tmp_path):
    cfg_path = write_config(tmp_path, {"M": 3, "epsilons": [0.2, 1.0], "Ns": [30]})
    outs = []
    for i, threads in enumerate(("1", "1", "3")):
        out = str(tmp_path / f"r{i}.csv")
        assert main(["gain-sweep", "--config", cfg_path, "--seed", "5", "--out", out, "--threads", threads]) == 0
        outs.append(open(out, "rb").read())
    assert outs[0] == outs[1] == outs[2]


def test_log_level_from_environment(monkeypatch):
    import logging

    monkeypatch.setenv("FPF_GAIN_LOG", "debug")
    root = logging.getLogger()
    saved = root.handlers[:], root.level
    root.handlers = []
    try:
        cli._configure_logging()
        assert root.level == logging.DEBUG
    finally:
        root.handlers, root.level = saved[0], saved[1]
