import csv
import json
import os

import numpy as np
import pytest

from reuse_vr import cli
from reuse_vr import diagnostics as dg


def write_ridge(tmp, n=50, d=10, seed=3, lam=None):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, d))
    b = A @ rng.standard_normal(d) + 0.5 * rng.standard_normal(n)
    np.savetxt(tmp / "A.csv", A, delimiter=",")
    np.savetxt(tmp / "b.csv", b, delimiter=",")
    meta = {"matrix": "A.csv", "labels": "b.csv", "link": "squared"}
    if lam is not None:
        meta["lambda"] = lam
    (tmp / "ridge.json").write_text(json.dumps(meta))
    return str(tmp / "ridge.json")


def write_mdp(tmp, transitions, rewards, gamma=0.9, name="m.json", **extra):
    S = max(t["s"] for t in transitions) + 1
    actions = [[a for a in range(1 + max(t["a"] for t in transitions if t["s"] == s))] for s in range(S)]
    data = {"states": S, "actions": actions, "transitions": transitions, "rewards": rewards,
            "gamma": gamma}
    data.update(extra)
    (tmp / name).write_text(json.dumps(data))
    return str(tmp / name)


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_fsm_sweep_rows_and_reuse_ratio(tmp_path):
    prob = write_ridge(tmp_path)
    out = str(tmp_path / "sweep.csv")
    code = cli.main(["sweep", "--kind", "fsm", "--problem", prob, "--knob-grid", "1mu,4mu,16mu",
                     "--trials", "2", "--out", out])
    assert code == 0
    rows = read_rows(out)
    assert len(rows) == 6
    assert list(rows[0]) == cli.HEADER
    side = json.loads((tmp_path / "sweep.json").read_text())
    for k in range(0, 6, 2):
        std, reu = rows[k], rows[k + 1]
        assert (std["mode"], reu["mode"]) == ("Standard", "Reuse")
        n_outer = side["cells"][k]["trials"][0]["extra"]["n_outer"]
        assert int(std["distinct"]) == n_outer * int(reu["distinct"])
        assert float(reu["success_lcb"]) > 0
        assert std["secs"] == ""
    assert side["monotone"] == {"Reuse": True, "Standard": True}


def test_one_state_dmdp(tmp_path):
    prob = write_mdp(tmp_path, [{"s": 0, "a": 0, "probs": [[0, 1.0]]}], [1.0])
    out = str(tmp_path / "d.csv")
    assert cli.main(["dmdp", "--problem", prob, "--knob-grid", "0.5", "--trials", "3",
                     "--eps", "0.1", "--out", out]) == 0
    row = read_rows(out)[0]
    assert float(row["mean_err"]) <= 0.1
    assert row["knob"] == "0.5" and row["mode"] == "Reuse"


def test_tvcheck_matches_probe(tmp_path):
    out = tmp_path / "tv.json"
    assert cli.main(["tvcheck", "--seeds", "4", "--inner", "300", "--seed", "7", "--out", str(out)]) == 0
    sub, u, noise = dg.scalar_ridge_probe(0.01, 0.05, 0.05)
    ref = dg.pseudoindependence_probe(sub, u, 4, 300, noise, 0.05, 0.05, accuracy=0.01,
                                      seed_determined=True, master_seed=7)
    assert json.loads(out.read_text()) == json.loads(json.dumps(ref))


def test_validate_reports_bad_row_and_reward(tmp_path):
    prob = write_mdp(tmp_path, [{"s": 0, "a": 0, "probs": [[0, 0.49], [1, 0.5]]},
                                {"s": 1, "a": 0, "probs": [[1, 1.0]]}], [0.5, 1.5])
    rep = cli.validate_problem(prob, "mdp")
    assert not rep["ok"]
    text = "\n".join(rep["errors"])
    assert "transitions[0] (s=0, a=0): row sums to 0.99" in text
    assert "rewards (s=1, a=0): 1.5 exceeds 1" in text


def test_validate_infers_shape(tmp_path):
    rep = cli.validate_problem(write_ridge(tmp_path, n=12, d=3), "fsm")
    assert rep["ok"] and (rep["info"]["n"], rep["info"]["d"]) == (12, 3)


def test_validate_reports_csv_lines(tmp_path):
    (tmp_path / "M.csv").write_text("1,2\n3,x\n4\n")
    rep = cli.validate_problem(str(tmp_path / "M.csv"), "matrix")
    assert "matrix line 2: non-numeric field" in rep["errors"]
    assert "matrix line 3: expected 2 fields, got 1" in rep["errors"]


def test_invalid_problem_exits_2(tmp_path, capsys):
    prob = write_mdp(tmp_path, [{"s": 0, "a": 0, "probs": [[0, 0.5]]}], [0.5])
    assert cli.main(["dmdp", "--problem", prob, "--knob-grid", "0.5"]) == 2
    assert "row sums to 0.5" in capsys.readouterr().err


def test_knob_below_mu_exits_2(tmp_path, capsys):
    prob = write_ridge(tmp_path)
    assert cli.main(["fsm", "--problem", prob, "--knob-grid", "0.5mu"]) == 2
    assert "below mu" in capsys.readouterr().err


def test_abbreviated_flags_rejected(tmp_path):
    with pytest.raises(SystemExit):
        cli.main(["fsm", "--prob", "x.json"])


def test_reruns_are_byte_identical(tmp_path):
    prob = write_ridge(tmp_path)
    texts = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        cwd = os.getcwd()
        os.chdir(d)
        try:
            assert cli.main(["fsm", "--problem", prob, "--mode", "Standard,Noisy,Reuse",
                             "--trials", "2", "--seed", "11", "--out", "t.csv"]) == 0
        finally:
            os.chdir(cwd)
        texts.append(((d / "t.csv").read_bytes(), (d / "t.json").read_bytes()))
    assert texts[0] == texts[1]


def test_game_and_topev_commands(tmp_path):
    rng = np.random.default_rng(0)
    np.savetxt(tmp_path / "G.csv", rng.standard_normal((3, 2)), delimiter=",")
    (tmp_path / "g.json").write_text(json.dumps({"matrix": "G.csv", "domain": "ball_ball"}))
    out = str(tmp_path / "g.csv")
    assert cli.main(["game22", "--problem", str(tmp_path / "g.json"), "--trials", "2",
                     "--eps", "0.1", "--out", out]) == 0
    row = read_rows(out)[0]
    assert row["knob"] == "auto" and float(row["mean_err"]) <= 0.1
    np.savetxt(tmp_path / "E.csv", np.diag([2.0, 1.0]), delimiter=",")
    out = str(tmp_path / "e.csv")
    assert cli.main(["topev", "--problem", str(tmp_path / "E.csv"), "--trials", "2", "--out", out]) == 0
    assert float(read_rows(out)[0]["mean_err"]) <= 0.05
