import csv
import json

import numpy as np
import pytest

from bilevel_smooth import cli
from bilevel_smooth.corpus import corpus_get
from bilevel_smooth.solver import SolverConfig


def _report(path):
    data = json.loads((path / "report.json").read_text())
    data["record"].pop("wall_time")
    return data


def test_solve_qp_kink(tmp_path):
    assert cli.main(["solve", "qp_kink", "--seed", "1", "--out", str(tmp_path)]) == 0
    rec = json.loads((tmp_path / "report.json").read_text())["record"]
    assert rec["status"] == "ResConverged"
    assert rec["infease"] <= 1e-6
    assert set(cli.RECORD_COLUMNS) <= set(rec)


def test_solve_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cli.main(["solve", "qp_kink", "--seed", "1", "--out", str(a)])
    cli.main(["solve", "qp_kink", "--seed", "1", "--out", str(b)])
    assert _report(a) == _report(b)


def test_solve_unknown_problem(tmp_path, capsys):
    assert cli.main(["solve", "nosuch", "--out", str(tmp_path)]) == 1
    assert "nosuch" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["solve"],
    ["solve", "qp_kink", "--seed", "-1"],
    ["solve", "qp_kink", "--beta", "abc"],
    ["batch", "--reps", "0"],
    ["frobnicate"],
])
def test_bad_flags_exit_1(argv):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 1


def test_invalid_config_value_exit_1(tmp_path):
    assert cli.main(["solve", "qp_kink", "--delta1", "0.99", "--out", str(tmp_path)]) == 1


def test_non_converged_exit_2(tmp_path):
    assert cli.main(["solve", "kink_solution", "--max-outer", "5", "--out", str(tmp_path)]) == 2


def test_trace_file(tmp_path):
    cli.main(["solve", "qp_kink", "--trace", "--out", str(tmp_path)])
    with open(tmp_path / "trace_qp_kink_0.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and list(rows[0]) == cli.TRACE_COLUMNS


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "cfg.txt"
    cfg_file.write_text("# settings\nbeta = 0.5\nrho-bar = 1e-6\n--c1 = 10\n")
    args = cli.build_parser().parse_args(["solve", "qp_kink", "--config", str(cfg_file), "--beta", "0.6"])
    cfg = cli.build_config(args)
    assert cfg.beta == 0.6 and cfg.rho_bar == 1e-6 and cfg.c1 == 10.0
    assert cfg.delta0 == SolverConfig().delta0


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("nonsense = 1\n")
    with pytest.raises(ValueError):
        cli.read_config_file(bad)
    bad.write_text("beta 0.5\n")
    with pytest.raises(ValueError):
        cli.read_config_file(bad)


def test_every_config_field_has_a_flag():
    args = cli.build_parser().parse_args(["solve", "qp_kink", "--rho-bar", "1e-6", "--eps", "1e-8"])
    for name in SolverConfig.field_names():
        assert hasattr(args, name)
    assert args.rho_bar == 1e-6 and args.eps == 1e-8


def test_perturbed_start_reproducible():
    prob = corpus_get("quad_2x2")
    a = cli.perturbed_start(prob, np.random.default_rng(5))
    b = cli.perturbed_start(prob, np.random.default_rng(5))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert np.max(np.abs(a[0] - prob.x0)) < 0.1


def test_batch_single_rep(tmp_path):
    code = cli.main(["batch", "--reps", "1", "--problems", "qp_kink", "lin_upper_con",
                     "--out", str(tmp_path)])
    assert code == 0
    with open(tmp_path / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == cli.SUMMARY_COLUMNS
    for name in ("qp_kink", "lin_upper_con"):
        run = next(r for r in rows if r["kind"] == "run" and r["problem"] == name)
        med = next(r for r in rows if r["kind"] == "median" and r["problem"] == name)
        for col in ("F_val", "f_val", "R_F", "infease", "iterations"):
            assert float(med[col]) == pytest.approx(float(run[col]))
    for fname in ("fig_rF.dat", "fig_rf.dat", "fig_time.dat", "fig_infease.dat"):
        vals = np.loadtxt(tmp_path / fname, ndmin=2)
        assert vals.shape == (2, 2)
        assert np.all(np.diff(vals[:, 1]) >= 0)


def test_batch_independent_of_workers(tmp_path):
    args = ["batch", "--reps", "2", "--problems", "qp_kink", "active_lower"]
    cli.main(args + ["--out", str(tmp_path / "one")])
    cli.main(args + ["--workers", "2", "--out", str(tmp_path / "two")])

    def records(p):
        recs = json.loads((p / "report.json").read_text())["records"]
        for r in recs:
            r.pop("wall_time")
        return recs

    assert records(tmp_path / "one") == records(tmp_path / "two")


def test_batch_empty_filter(tmp_path):
    assert cli.main(["batch", "--problems", "nothing_matches", "--out", str(tmp_path)]) == 1


def test_check_shipped_corpus(capsys):
    assert cli.main(["check"]) == 0


def test_check_unknown_problem():
    assert cli.main(["check", "--problems", "nosuch"]) == 1


def _bad_hessian(scale):
    prob = corpus_get("quartic_lower")
    f_yy = prob.f_yy
    return prob.replace(name="bad", f_yy=lambda x, y: np.asarray(f_yy(x, y)) * scale)


def test_check_flags_wrong_hessian():
    bad = cli.run_check([_bad_hessian(1.5)], 1e-5, points=5)
    assert any(name == "bad" and item == "f_yy" for name, item, _ in bad)


def test_check_loose_tolerance_accepts_small_perturbation():
    prob = _bad_hessian(1.0 + 1e-3)
    assert cli.run_check([prob], 1e-5, points=5)
    assert cli.run_check([prob], 1e-1, points=5) == []


def test_check_tol_flag():
    assert cli.main(["check", "--tol", "1e-1", "--problems", "qp_kink"]) == 0


def test_identity_errors_small():
    errs = cli.identity_errors(10_000, np.random.default_rng(0))
    assert max(errs.values()) <= 1e-9


def test_problem_file_solve(tmp_path):
    path = tmp_path / "p.txt"
    path.write_text("name = filed\nd = 1\nl = 1\nF = x1^2 - 2*x1 + 1 + y1^2 - 2*y1 + 1\n"
                    "f = 0.5*y1^2 - x1*y1\ng = -y1\nx0 = 0.5\ny0 = 0.5\nxbox = -2 2\nybox = -2 2\n"
                    "F_star = 0\nf_star = -0.5\nx_star = 1\ny_star = 1\n")
    # the expanded polynomial F loses digits near the optimum, so a roundoff stall is allowed
    assert cli.main(["solve", str(path), "--out", str(tmp_path / "o")]) in (0, 2)
    rec = json.loads((tmp_path / "o" / "report.json").read_text())["record"]
    assert rec["problem"] == "filed"
    assert rec["status"] in ("ResConverged", "Stalled")
    assert abs(rec["x"][0] - 1.0) <= 1e-3 and rec["infease"] <= 1e-6
