import csv
import json
import math

import numpy as np
import pytest

from powmfg.cli import main

DESK = """seed = 7
[grid]
nx = 50
ny = 50
[equilibrium]
n_time_steps = 64
[simulation]
n_agents = 1000
dt = 0.5
T = 100.0
"""

# small market where jumps are frequent but thinning stays valid at dt = 0.05
TOY = """seed = 3
[grid]
nx = 30
ny = 30
dx = 1.0
db = 1.0
[market]
theta1 = 1.0
theta2 = 1.0
theta3 = 0.0
unit_cost = 0.05
sigma = 2.0
discount = 0.01
beta = 1.5
node_growth_a = 1000000.0
node_growth_b = 0.0
[protocol]
base_reward = 0.02
[equilibrium]
horizon = 20.0
n_time_steps = 11
store_every = 2
[simulation]
dt = 0.05
n_agents = 1000
"""


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def column(path, k):
    return np.array([float(r[k]) for r in rows(path)[1:]])


@pytest.fixture(scope="module")
def configs(tmp_path_factory):
    d = tmp_path_factory.mktemp("cfg")
    (d / "desk.toml").write_text(DESK)
    (d / "toy.toml").write_text(TOY)
    return d


@pytest.fixture(scope="module")
def desk_transient(configs, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "desk"
    assert main(["transient", str(configs / "desk.toml"), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def toy_transient(configs, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "toy"
    assert main(["transient", str(configs / "toy.toml"), "--out", str(out)]) == 0
    return out


def test_protocol_single(capsys):
    assert main(["protocol", "--blocks", "0"]) == 0
    header, line = capsys.readouterr().out.strip().splitlines()
    rec = dict(zip(header.split(","), line.split(",")))
    assert float(rec["reward [token]"]) == 50.0
    assert float(rec["supply [token]"]) == 100800.0


def test_protocol_sweep(capsys, tmp_path):
    assert main(["protocol", "--sweep-halvings", "--out", str(tmp_path / "p.csv")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 34
    supply = column(tmp_path / "p.csv", 3)
    assert len(supply) == 33
    assert supply[-1] == pytest.approx(2.1e7, rel=1e-6)
    assert np.all(np.diff(supply) >= 0)


def test_protocol_usage_errors(capsys):
    with pytest.raises(SystemExit) as err:
        main(["protocol"])
    assert err.value.code == 2
    assert "usage" in capsys.readouterr().err
    assert main(["protocol", "--blocks", "-1"]) == 2
    with pytest.raises(SystemExit) as err:
        main(["protocol", "--blocks", "x"])
    assert err.value.code == 2


def test_steady_outputs_and_rerun(configs, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["steady", str(configs / "desk.toml"), "--out", str(a)]) == 0
    assert main(["steady", str(configs / "desk.toml"), "--out", str(b)]) == 0
    expected = {"v_inf.csv", "alpha_inf.csv", "m_inf.csv", "eta_inf.csv", "diagnostics.json", "manifest.json"}
    assert {p.name for p in a.iterdir()} == expected
    for name in expected - {"manifest.json", "diagnostics.json"}:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    man = json.loads((a / "manifest.json").read_text())
    assert man["status"] == "ok"
    assert {f["name"] for f in man["files"]} == expected - {"manifest.json"}
    assert man["config"]["grid"]["nx"] == 50


def test_bad_grid_is_rejected(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[grid]\nnx = 1\n")
    assert main(["steady", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o" / "manifest.json").exists()


def test_unknown_key_and_missing_config(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"grid": {"nz": 4}}))
    assert main(["steady", str(cfg)]) == 2
    assert main(["steady"]) == 2
    assert main(["steady", str(tmp_path / "nope.toml")]) == 2


def test_run_dir_from_environment(configs, tmp_path, monkeypatch):
    monkeypatch.setenv("MFG_RUN_DIR", str(tmp_path))
    cfg = tmp_path / "tiny.toml"
    cfg.write_text("[grid]\nnx = 12\nny = 12\n")
    assert main(["steady", str(cfg)]) == 0
    assert (tmp_path / "steady_tiny" / "manifest.json").is_file()


def test_transient_outputs(desk_transient):
    d = desk_transient
    for name in ("alpha_bar.csv", "path.csv", "wealth_marginal.csv", "diagnostics.json", "slices/index.csv"):
        assert (d / name).is_file()
    abar = column(d / "alpha_bar.csv", 1)
    assert len(abar) == 64
    assert np.all(np.diff(abar) >= -1e-12 * abar.max())
    first = np.array([float(x) for x in rows(d / "wealth_marginal.csv")[1][1:]])
    x = np.arange(1, 50)
    assert np.allclose(first[1:], np.exp(-x), rtol=1e-12)
    assert first.sum() == pytest.approx(1.0)
    man = json.loads((d / "manifest.json").read_text())
    assert all((d / f["name"]).is_file() for f in man["files"])


def test_resume_from_manifest(desk_transient, tmp_path):
    out = tmp_path / "again"
    assert main(["transient", "--from-manifest", str(desk_transient), "--out", str(out)]) == 0
    old = json.loads((desk_transient / "diagnostics.json").read_text())
    new = json.loads((out / "diagnostics.json").read_text())
    assert new["transient"]["residual_history"][-1] == old["transient"]["residual_history"][-1]
    assert (out / "alpha_bar.csv").read_bytes() == (desk_transient / "alpha_bar.csv").read_bytes()


def test_simulate_determinism(configs, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"s{k}"
        assert main(["simulate", str(configs / "toy.toml"), "--agents", "1000", "--seed", "7", "--out", str(out)]) == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].glob("snapshot_*.csv"))
    assert names
    for n in names:
        assert (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()


def test_simulate_thread_independence(configs, tmp_path):
    threaded = tmp_path / "threads.toml"
    threaded.write_text(TOY.replace("seed = 3", "seed = 3\nthreads = 4"))
    a, b = tmp_path / "one", tmp_path / "four"
    assert main(["simulate", str(configs / "toy.toml"), "--agents", "5000", "--out", str(a)]) == 0
    assert main(["simulate", str(threaded), "--agents", "5000", "--out", str(b)]) == 0
    for p in a.glob("snapshot_*.csv"):
        assert p.read_bytes() == (b / p.name).read_bytes()


def test_simulate_reference_distances_shrink(configs, toy_transient, tmp_path):
    means = []
    for n in (1000, 10000, 100000):
        out = tmp_path / f"v{n}"
        assert main(["simulate", str(configs / "toy.toml"), "--agents", str(n), "--reference", str(toy_transient), "--out", str(out)]) == 0
        dist = column(out / "distances.csv", 1)
        assert dist[0] < 0.5
        means.append(dist[1:].mean())
    assert means[0] > means[1] > means[2]


def test_simulate_missing_reference(configs, tmp_path):
    assert main(["simulate", str(configs / "toy.toml"), "--reference", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2


def test_fit(tmp_path, capsys):
    t = np.linspace(1, 50, 20)
    data = tmp_path / "nodes.csv"
    data.write_text("t,value\n" + "".join(f"{float(a)!r},{float(2.5 * a**1.5)!r}\n" for a in t))
    assert main(["fit", str(data), "--model", "power", "--out", str(tmp_path / "fit.json")]) == 0
    res = json.loads((tmp_path / "fit.json").read_text())
    assert res["coefficients"][0] == pytest.approx(2.5, rel=1e-9)
    assert res["coefficients"][1] == pytest.approx(1.5, rel=1e-9)
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert main(["fit", str(empty), "--model", "power"]) == 2


def test_analyze(desk_transient, tmp_path):
    out = tmp_path / "an"
    assert main(["analyze", str(desk_transient), "--out", str(out)]) == 0
    for name in ("attack_cost.csv", "attack_cost.json", "active_nodes.csv", "inflation.csv", "summary.json"):
        assert (out / name).is_file()
    rep = json.loads((out / "attack_cost.json").read_text())
    assert rep["fractions"] == [0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45]
    cost = np.array(rep["cost_matrix"])
    assert np.all(np.diff(cost, axis=1) >= 0)
    infl = column(out / "inflation.csv", 2)
    assert np.all(np.diff(infl) <= 0)
    assert main(["analyze", str(tmp_path / "missing")]) == 2
