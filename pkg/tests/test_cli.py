import csv
import json

import numpy as np
import pytest

from omfrac import __version__
from omfrac.cli import EXIT_ASSUMPTION, EXIT_CONFIG, EXIT_OK, figure_names, load_figure, main

SIN1 = {"family": "sinusoidal", "c": 1.0, "n": 1}
DW = {"family": "double_well", "a": 1.0}


def run(tmp_path, command, cfg, *extra, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    out = tmp_path / "out"
    return main([command, "--config", str(p), "--out", str(out), *extra]), out


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def test_om_eval_standard_line(tmp_path):
    cfg = {"noise": {"H": 0.5, "sigma": {"family": "constant", "c": 1.0}}, "drift": {"family": "zero"}, "x0": 0.0, "path": {"kind": "phi", "affine": [0.0, 1.0]}}
    code, out = run(tmp_path, "om-eval", cfg)
    assert code == EXIT_OK
    rep = json.loads((out / "om_eval.json").read_text())
    assert rep["result"]["J"] == pytest.approx(-0.5, abs=1e-12)
    assert rep["config"] == cfg


def test_om_eval_path_from_csv(tmp_path):
    t = np.linspace(0, 1, 33)
    (tmp_path / "p.csv").write_text("t,phi\n" + "".join(f"{a!r},{a!r}\n" for a in t.tolist()))
    cfg = {"grid": {"T": 1.0, "n": 33}, "noise": {"H": 0.5, "sigma": {"family": "constant", "c": 1.0}}, "drift": {"family": "zero"}, "x0": 0.0, "path": {"kind": "phi", "csv": "p.csv", "column": "phi"}}
    code, out = run(tmp_path, "om-eval", cfg)
    assert code == EXIT_OK
    assert json.loads((out / "om_eval.json").read_text())["result"]["J"] == pytest.approx(-0.5, abs=1e-12)
    cfg["path"]["column"] = "nope"
    assert run(tmp_path, "om-eval", cfg)[0] == EXIT_CONFIG
    cfg["path"] = {"kind": "phi", "values": [0.0, 1.0]}
    assert run(tmp_path, "om-eval", cfg)[0] == EXIT_CONFIG


def test_check_example_one_ratio(tmp_path):
    cfg = {"noise": {"H": 0.6, "sigma": SIN1}, "drift": DW, "beta": 0.34}
    code, out = run(tmp_path, "check", cfg)
    assert code == EXIT_OK
    res = json.loads((out / "check.json").read_text())["result"]
    assert 1.015 <= res["ratio"] <= 1.04
    assert res["passed"]


def test_om_eval_singular_window_violation(tmp_path, capsys):
    cfg = {"noise": {"H": 0.3, "sigma": SIN1}, "drift": DW, "beta": 0.2, "x0": -1.0, "path": {"kind": "phi_dot", "affine": [2.0, 0.0]}}
    code, out = run(tmp_path, "om-eval", cfg)
    assert code == EXIT_ASSUMPTION
    assert "beta_window" in capsys.readouterr().err
    assert (out / "om_eval.json").exists()
    assert run(tmp_path, "om-eval", cfg, "--force")[0] == EXIT_OK


def test_mpp_trivial_line(tmp_path):
    cfg = {"noise": {"H": 0.5, "sigma": {"family": "constant", "c": 1.0}}, "drift": {"family": "zero"}, "x0": 0.0, "x1": 1.0}
    code, out = run(tmp_path, "mpp", cfg)
    assert code == EXIT_OK
    head, data = read_csv(out / "mpp.csv")
    assert head == ["t", "phi", "el_residual"]
    assert np.max(np.abs(data[:, 1] - data[:, 0])) <= 1e-6
    man = json.loads((out / "mpp_manifest.json").read_text())
    assert man["outputs"] == ["mpp.csv", "mpp.json"]
    assert man["result"]["converged"] is True


@pytest.mark.parametrize("H,beta", [(0.3, None), (0.5, None), (0.6, 0.34)])
def test_mpp_example_one_converges(tmp_path, H, beta):
    cfg = {"noise": {"H": H, "sigma": SIN1}, "drift": DW, "x0": -1.0, "x1": 1.0}
    if beta is not None:
        cfg["beta"] = beta
    code, out = run(tmp_path, "mpp", cfg)
    assert code == EXIT_OK
    assert json.loads((out / "mpp.json").read_text())["converged"] is True


def test_mpp_missing_x1(tmp_path):
    cfg = {"noise": {"H": 0.5, "sigma": SIN1}, "drift": DW, "x0": -1.0}
    assert run(tmp_path, "mpp", cfg)[0] == EXIT_CONFIG


def test_simulate_zero_paths(tmp_path):
    cfg = {"noise": {"H": 0.5, "sigma": SIN1}, "drift": DW, "x0": -1.0, "n_paths": 0}
    assert run(tmp_path, "simulate", cfg)[0] == EXIT_CONFIG


@pytest.mark.parametrize(
    "cfg",
    [
        {"noise": {"H": 0.5, "sigma": SIN1}, "drift": DW, "x0": -1.0, "x1": 1.0, "colour": "red"},
        {"noise": {"H": 0.5, "sigma": {"family": "cosine", "c": 1}}, "drift": DW, "x0": -1.0, "x1": 1.0},
        {"noise": {"H": 1.5, "sigma": SIN1}, "drift": DW, "x0": -1.0, "x1": 1.0},
        {"noise": {"H": 0.5, "sigma": {"family": "constant", "c": -1.0}}, "drift": DW, "x0": -1.0, "x1": 1.0},
        {"noise": {"H": 0.5, "sigma": SIN1}, "drift": DW, "x0": -1.0, "x1": 1.0, "grid": {"n": 2}},
        [1, 2, 3],
    ],
)
def test_malformed_configs_exit_2(tmp_path, cfg):
    assert run(tmp_path, "mpp", cfg)[0] == EXIT_CONFIG


def test_bad_json_and_missing_file(tmp_path):
    (tmp_path / "bad.json").write_text("{nope")
    assert main(["check", "--config", str(tmp_path / "bad.json")]) == EXIT_CONFIG
    assert main(["check", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_figure_recipe_fig1a(tmp_path):
    cfg = load_figure("fig1a")
    cfg["n_paths"] = 300
    code, out = run(tmp_path, "simulate", cfg)
    assert code == EXIT_OK
    head, paths = read_csv(out / "paths.csv")
    assert head[0] == "t" and len(head) == 101 and paths.shape[0] == 257
    head, means = read_csv(out / "mean.csv")
    assert head == ["t", "mean", "conditioned_mean", "window_mean"]
    head, mpp = read_csv(out / "mpp.csv")
    assert head == ["t", "phi"] and mpp[0, 1] == -1.0
    man = json.loads((out / "simulate_manifest.json").read_text())
    assert man["outputs"] == ["mean.csv", "mpp.csv", "paths.csv"]
    assert 0.0 < man["result"]["transition_fraction"] < 1.0


def test_figure_panels_are_the_nine_example_runs():
    names = figure_names()
    assert names == [f"fig1{c}" for c in "abcdefghi"]
    seen = set()
    for name in names:
        f = load_figure(name)
        s = f["noise"]["sigma"]
        seen.add((f["noise"]["H"], s["c"], s["n"]))
        assert f["drift"] == DW and f["x0"] == -1.0 and f["mpp"]["x1"] == 1.0
        assert ("beta" in f) == (f["noise"]["H"] == 0.6)
    assert seen == {(H, c, n) for H in (0.3, 0.5, 0.6) for c, n in ((1, 1), (1, 4), (0.5, 1))}


def test_figures_subset(tmp_path):
    code = main(["figures", "--out", str(tmp_path), "--dry-run"])
    assert code == EXIT_OK
    p = tmp_path / "f.json"
    p.write_text(json.dumps({"panels": ["fig1d"], "n_paths": 50, "grid": {"T": 1.0, "n": 65}, "export_paths": 5}))
    assert main(["figures", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_OK
    man = json.loads((tmp_path / "o" / "figures_manifest.json").read_text())
    assert set(man["result"]) == {"fig1d"}
    assert (tmp_path / "o" / "fig1d" / "paths.csv").exists()
    p.write_text(json.dumps({"panels": ["fig9z"]}))
    assert main(["figures", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_smallball_brownian_slope(tmp_path):
    cfg = {"noise": {"H": 0.5, "sigma": {"family": "constant", "c": 1.0}}, "norm": {"kind": "sup"}, "n_samples": 20000, "seed": 3}
    code, out = run(tmp_path, "smallball", cfg)
    assert code == EXIT_OK
    res = json.loads((out / "smallball_manifest.json").read_text())["result"]
    assert res["fit"]["slope"] == pytest.approx(2.0, abs=0.3)
    assert res["theory_slope"] == 2.0
    head, _ = read_csv(out / "smallball.csv")
    assert head == ["epsilon", "p_hat", "stderr", "reliable"]


def test_manifest_shape_and_idempotence(tmp_path):
    cfg = {"noise": {"H": 0.7, "sigma": SIN1}, "drift": DW, "x0": -1.0, "n_paths": 40, "seed": 5, "grid": {"n": 65}}
    code, out = run(tmp_path, "simulate", cfg)
    assert code == EXIT_OK
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    text = (out / "simulate_manifest.json").read_text(encoding="utf-8")
    man = json.loads(text)
    assert list(man) == sorted(man)
    assert man["tool"] == "omfrac" and man["version"] == __version__
    assert man["config"] == cfg
    assert text.endswith("\n") and "\r" not in text
    assert main(["simulate", "--config", str(tmp_path / "cfg.json"), "--out", str(out)]) == EXIT_OK
    second = {p.name: p.read_bytes() for p in out.iterdir()}
    assert first.keys() == second.keys()
    for k in first:
        if k.endswith(".json"):
            a, b = json.loads(first[k]), json.loads(second[k])
            a.pop("timestamp"), b.pop("timestamp")
            assert a == b
        else:
            assert first[k] == second[k]


def test_seed_override_changes_output(tmp_path):
    cfg = {"noise": {"H": 0.5, "sigma": SIN1}, "drift": DW, "x0": -1.0, "n_paths": 10, "grid": {"n": 33}}
    _, out = run(tmp_path, "simulate", cfg, "--seed", "1")
    a = (out / "paths.csv").read_text()
    assert json.loads((out / "simulate_manifest.json").read_text())["config"]["seed"] == 1
    _, out = run(tmp_path, "simulate", cfg, "--seed", "2")
    assert (out / "paths.csv").read_text() != a


@pytest.mark.parametrize(
    "command,cfg",
    [
        ("check", {"noise": {"H": 0.3, "sigma": SIN1}, "drift": DW}),
        ("mpp", {"noise": {"H": 0.3, "sigma": SIN1}, "drift": DW, "x0": -1.0, "x1": 1.0}),
        ("smallball", {"noise": {"H": 0.3, "sigma": SIN1}, "norm": {"kind": "holder", "beta": 0.1}, "n_samples": 10**6}),
    ],
)
def test_dry_run_validates_without_output(tmp_path, command, cfg, capsys):
    code, out = run(tmp_path, command, cfg, "--dry-run")
    assert code == EXIT_OK
    assert not out.exists()
    assert "config valid" in capsys.readouterr().out


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out
