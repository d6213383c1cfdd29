import csv
import json

import numpy as np
import pytest

from pqlmm.cli import main, parse_target, read_dataset, ColumnMap, ValidationError
from pqlmm.simulate import SimDesign, generate_poisson_intercept, generate_section5


def write_csv(path, design, ids=None, integer_y=True):
    p = design.p_f
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster_id", "y"] + [f"x{k + 1}" for k in range(p)])
        for i, c in enumerate(design.clusters):
            cid = ids[i] if ids else f"c{i}"
            for j in range(c.n):
                y = int(c.y[j]) if integer_y else repr(float(c.y[j]))
                w.writerow([cid, y] + [repr(float(v)) for v in c.X[j]])


@pytest.fixture
def poisson_csv(tmp_path):
    data, _ = generate_section5(SimDesign(m=20, n=15, seed=2))
    path = tmp_path / "data.csv"
    write_csv(path, data)
    return path


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_toy_gaussian_fit_matches_mixed_model_equations(tmp_path, capsys):
    rows = [("a", 1.2, 1, 0.3), ("a", 0.7, 1, -0.4), ("a", 2.1, 1, 1.1),
            ("b", -0.5, 1, 0.2), ("b", 0.1, 1, -1.0), ("b", 0.4, 1, 0.5), ("b", 1.0, 1, 0.9)]
    path = tmp_path / "toy.csv"
    path.write_text("cluster_id,y,x1,x2\n" + "".join(f"{c},{y},{a},{b}\n" for c, y, a, b in rows))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"family": "gaussian", "solver": {"g_update_mode": "fixed"}}))
    out = tmp_path / "fit.json"
    code, _, _ = run(["fit", path, "--config", cfg, "--out", out], capsys)
    assert code == 0
    art = json.loads(out.read_text())
    X = np.array([[1, r[3]] for r in rows], dtype=float)
    y = np.array([r[1] for r in rows])
    Z = np.zeros((7, 4))
    Z[:3, :2], Z[3:, 2:] = X[:3], X[3:]
    W = np.hstack([X, Z])
    P = np.zeros((6, 6))
    P[2:, 2:] = np.eye(4)
    sol = np.linalg.solve(W.T @ W + P, W.T @ y)
    np.testing.assert_allclose(art["beta"], sol[:2], atol=1e-8)
    np.testing.assert_allclose(art["b"]["a"], sol[2:4], atol=1e-8)
    np.testing.assert_allclose(art["b"]["b"], sol[4:], atol=1e-8)
    assert art["cluster_order"] == ["a", "b"]


def test_fit_then_infer_round_trip(poisson_csv, tmp_path, capsys):
    fit = tmp_path / "fit.json"
    assert run(["fit", poisson_csv, "--family", "poisson", "--out", fit], capsys)[0] == 0
    argv = ["infer", fit, poisson_csv, "--target", "beta:1", "--target", "gap:cluster=c7",
            "--target", "b:cluster=c2,k=3", "--target", "lp:cluster=c1,a=1:0:0:0:0", "--seed", 4]
    code, out1, _ = run(argv, capsys)
    assert code == 0
    code, out2, _ = run(argv, capsys)
    assert out1 == out2
    recs = json.loads(out1)["records"]
    assert recs[0]["basis"] == "normal" and recs[0]["regime"] == "unconditional"
    assert len(recs) == 1 + 5 + 1 + 1


def test_conditional_regime_from_the_command_line(poisson_csv, tmp_path, capsys):
    fit = tmp_path / "fit.json"
    run(["fit", poisson_csv, "--family", "poisson", "--out", fit], capsys)
    code, out, _ = run(["infer", fit, poisson_csv, "--target", "beta:2", "--regime", "conditional"], capsys)
    assert code == 0
    assert json.loads(out)["records"][0]["regime"] == "conditional"


def test_auto_rule_picks_the_mixture_for_many_small_clusters(tmp_path, capsys):
    data, _ = generate_poisson_intercept(400, 25, 1.0, rng_seed=3)
    path = tmp_path / "ri.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster_id", "y", "x1"])
        for i, c in enumerate(data.clusters):
            w.writerows([[i, int(v), 1.0] for v in c.y])
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"family": "poisson", "columns": {"fixed": [], "random": ["x1"]}}))
    fit = tmp_path / "fit.json"
    assert run(["fit", path, "--config", cfg, "--out", fit], capsys)[0] == 0
    code, out, _ = run(["infer", fit, path, "--target", "gap:cluster=7", "--regime", "auto",
                        "--seed", 1], capsys)
    assert code == 0
    assert json.loads(out)["records"][0]["basis"] == "mixN"


def test_missing_seed_is_drawn_and_printed(poisson_csv, tmp_path, capsys):
    fit = tmp_path / "fit.json"
    run(["fit", poisson_csv, "--family", "poisson", "--out", fit], capsys)
    code, out, err = run(["infer", fit, poisson_csv, "--target", "gap:cluster=c0"], capsys)
    assert code == 0 and "seed:" in err
    assert json.loads(out)["seed"] == int(err.split("seed:")[1].split()[0])


def test_stale_artifact_is_rejected(poisson_csv, tmp_path, capsys):
    fit = tmp_path / "fit.json"
    run(["fit", poisson_csv, "--family", "poisson", "--out", fit], capsys)
    with open(poisson_csv, "a") as fh:
        fh.write("c0,1,1,0,0,0,0\n")
    code, _, err = run(["infer", fit, poisson_csv, "--target", "beta:1"], capsys)
    assert code == 1 and "stale" in err


def test_invalid_level_is_a_validation_error(poisson_csv, tmp_path, capsys):
    fit = tmp_path / "fit.json"
    run(["fit", poisson_csv, "--family", "poisson", "--out", fit], capsys)
    code, _, err = run(["infer", fit, poisson_csv, "--target", "beta:1", "--level", 1.5], capsys)
    assert code == 1 and "level" in err


@pytest.mark.parametrize("content, message", [
    ("", "empty file"),
    ("cluster_id,y,x1,x1\n1,2,3,4\n", "duplicate"),
    ("cluster_id,y,x1\n1,2,abc\n", "line 2, column 'x1'"),
    ("cluster_id,y,x1\n1,2,1\n1,3\n", "line 3"),
    ("cluster_id,x1\n1,2\n", "missing columns"),
])
def test_parse_errors(tmp_path, capsys, content, message):
    path = tmp_path / "bad.csv"
    path.write_text(content)
    code, _, err = run(["fit", path], capsys)
    assert code == 1 and message in err


def test_missing_file_is_an_io_error(tmp_path, capsys):
    assert run(["fit", tmp_path / "nope.csv"], capsys)[0] == 3


def test_unknown_config_keys_are_rejected(poisson_csv, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"family": "poisson", "colour": "blue"}))
    code, _, err = run(["fit", poisson_csv, "--config", cfg], capsys)
    assert code == 1 and "colour" in err
    cfg.write_text(json.dumps({"solver": {"tolerance": 1}}))
    assert run(["fit", poisson_csv, "--config", cfg], capsys)[0] == 1


def test_non_convergence_writes_partial_artifact(poisson_csv, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"family": "poisson", "solver": {"max_newton_iters": 1, "max_outer_iters": 1}}))
    out = tmp_path / "fit.json"
    code, _, _ = run(["fit", poisson_csv, "--config", cfg, "--out", out], capsys)
    assert code == 2
    assert json.loads(out.read_text())["diagnostics"]["converged"] is False


def test_cluster_order_is_first_appearance(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("cluster_id,y,x1\nz,1,1\na,2,1\nz,3,1\nm,4,1\n")
    design, ids, fixed, random = read_dataset(path, ColumnMap())
    assert ids == ["z", "a", "m"] and list(design.sizes) == [2, 1, 1]
    assert fixed == random == ["x1"]


@pytest.mark.parametrize("spec, expected", [
    ("beta:2", {"kind": "beta", "k": 1}),
    ("b:cluster=7,k=1", {"kind": "b", "cluster": "7", "k": 0}),
    ("gap:cluster=abc", {"kind": "gap", "cluster": "abc"}),
    ("lp:cluster=3,a=1:0.5", {"kind": "lp", "cluster": "3", "a": [1.0, 0.5]}),
])
def test_target_parsing(spec, expected):
    assert parse_target(spec) == expected


@pytest.mark.parametrize("spec", ["beta:0", "beta:x", "gap:7", "b:k=1", "lp:cluster=1", "foo:1", "beta"])
def test_bad_targets(spec):
    with pytest.raises(ValidationError):
        parse_target(spec)


def test_simulate_dry_run_and_validation(tmp_path, capsys):
    code, out, _ = run(["simulate", "--dry-run", "--seed", 3], capsys)
    assert code == 0
    plan = json.loads(out)
    assert [(c["m"], c["n"]) for c in plan["cells"]] == [(25, 25), (25, 100), (100, 25), (100, 100)]
    assert not list(tmp_path.iterdir())
    assert run(["simulate", "--family", "banana"], capsys)[0] == 1
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"grid": [[0, 5]]}))
    assert run(["simulate", "--config", cfg, "--dry-run"], capsys)[0] == 1


def test_simulate_writes_deterministic_reports(tmp_path, capsys):
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"family": "poisson", "grid": [[10, 10], [12, 8]], "replicates": 3,
                               "n_draws": 500}))
    for name in ("one", "two"):
        assert run(["simulate", "--config", cfg, "--seed", 5, "--out", tmp_path / name], capsys)[0] == 0
    for f in ("report.csv", "report.json"):
        assert (tmp_path / "one" / f).read_bytes() == (tmp_path / "two" / f).read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "one" / "report.csv")))
    assert {(r["m"], r["n"]) for r in rows} == {("10", "10"), ("12", "8")}
    assert {r["target"] for r in rows} >= {"beta", "b1"}
