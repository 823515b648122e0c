import subprocess
import sys

import numpy as np
import pytest

from bapm.cli import main, parse_args, read_config_file
from bapm.design import Method
from bapm.harness import read_report


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# scenario\nn = 32\n--iterations=5\nmethods = mh,cr\nlearning_rate = 0.2\n")
    args = parse_args(["simulate", "--config", str(cfg), "--iterations", "7"])
    assert args.n == 32 and args.iterations == 7
    assert args.methods == (Method.MH, Method.CR)
    assert args.learning_rate == 0.2


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = red\n")
    with pytest.raises(SystemExit):
        parse_args(["simulate", "--config", str(cfg)])


def test_malformed_config(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("just words\n")
    with pytest.raises(ValueError):
        read_config_file(str(cfg))


def test_simulate_writes_csv(tmp_path, capsys):
    out = tmp_path / "res.csv"
    rc = main([
        "simulate", "--n", "16", "--n-rel", "10", "--n-irr", "2", "--iterations", "2",
        "--methods", "cr,mh,bapm", "--trees", "10", "--out", str(out),
    ])
    assert rc == 0
    rows = read_report(str(out))
    assert [r.method for r in rows] == ["BAPM", "MH", "CR"]
    assert "rematching inequality violations: 0/2" in capsys.readouterr().out


def test_semisynth(tmp_path, capsys):
    rng = np.random.default_rng(0)
    n = 40
    x = rng.normal(size=(n, 2))
    t = np.tile([1, 0], n // 2)
    y = x[:, 0] + t + rng.normal(size=n)
    data = tmp_path / "exp.csv"
    data.write_text("y,t,a,b\n" + "".join(f"{y[i]},{t[i]},{x[i, 0]},{x[i, 1]}\n" for i in range(n)))
    out = tmp_path / "semi.csv"
    rc = main([
        "semisynth", "--data", str(data), "--outcome", "y", "--treatment", "t", "--ensemble", "2",
        "--n", "16", "--iterations", "2", "--methods", "cr,cr+", "--trees", "10", "--out", str(out),
    ])
    assert rc == 0
    assert out.read_text().splitlines()[1].startswith(",,CR,")
    assert "population ATE" in capsys.readouterr().out


def test_semisynth_needs_data():
    with pytest.raises(SystemExit):
        main(["semisynth", "--n", "16"])


def test_diagnose(capsys):
    rc = main(["diagnose", "--n", "16", "--scenario", "10,2", "--trees", "10"])
    assert rc == 0
    text = capsys.readouterr().out
    assert "weighted distance total" in text and "imbalance term" in text


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "bapm", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "simulate" in r.stdout
