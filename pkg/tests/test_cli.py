import csv
import hashlib
import json

import numpy as np
import pytest

from vandisc.cli import main
from vandisc.hjb import solve_discounted
from vandisc.model import builtin_problem


def read_manifest(out_dir):
    with open(out_dir / "manifest.json") as fh:
        return json.load(fh)


def test_solve_hjb_outputs_and_manifest(tmp_path, capsys):
    code = main(["solve-hjb", "--problem", "builtin:decay_quadratic",
                 "--lam", "0.5", "--grid-n", "51", "--out-dir", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert "decay_quadratic" in out and "residual" in out

    manifest = read_manifest(tmp_path)
    assert manifest["problem"] == "decay_quadratic"
    assert manifest["problem_hash"] == builtin_problem("decay_quadratic").problem_hash()
    assert manifest["argv"][0] == "vandisc"
    assert set(manifest["outputs"]) == {"field.csv", "field.json"}
    for name, digest in manifest["outputs"].items():
        data = (tmp_path / name).read_bytes()
        assert hashlib.sha256(data).hexdigest() == digest

    with open(tmp_path / "field.json") as fh:
        summary = json.load(fh)
    assert summary["lambda"] == 0.5
    assert summary["grid_n"] == [51]
    assert summary["residual_norm"] <= 1e-6


def test_field_csv_round_trips_doubles(tmp_path):
    main(["solve-hjb", "--problem", "builtin:decay_quadratic",
          "--lam", "0.5", "--grid-n", "51", "--out-dir", str(tmp_path)])
    field = solve_discounted(builtin_problem("decay_quadratic"), 0.5, 51)
    with open(tmp_path / "field.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 51
    w_csv = np.array([float(r["w"]) for r in rows])
    np.testing.assert_array_equal(w_csv, field.values)  # %.17g is lossless
    x_csv = np.array([float(r["x1"]) for r in rows])
    np.testing.assert_array_equal(x_csv, field.grid.axes[0])


def test_audit_flags_expanding(tmp_path, capsys):
    code = main(["audit", "--problem", "builtin:expanding",
                 "--out-dir", str(tmp_path)])
    assert code == 2
    out = capsys.readouterr().out
    assert "[FAIL] nonexpansivity" in out
    assert "witness" in out
    with open(tmp_path / "audit.json") as fh:
        audit = json.load(fh)
    by_name = {r["name"]: r for r in audit["reports"]}
    assert by_name["nonexpansivity"]["passed"] is False
    assert by_name["nonexpansivity"]["witness"] is not None
    assert by_name["lipschitz_audit"]["passed"] is True


def test_check_conditions_flags_radial_failure(tmp_path, capsys):
    code = main(["check-conditions", "--problem", "builtin:elliptic_ou",
                 "--lambdas", "0.5,0.25", "--grid-n", "51",
                 "--out-dir", str(tmp_path)])
    assert code == 2
    out = capsys.readouterr().out
    assert "[FAIL] radial_monotonicity" in out
    with open(tmp_path / "conditions.json") as fh:
        summary = json.load(fh)
    by_name = {r["name"]: r for r in summary["reports"]}
    assert by_name["radial_monotonicity"]["passed"] is False
    assert by_name["radial_monotonicity"]["witness"]["drop"] > 0


def test_bsde_subcommand_runs_bound_check(tmp_path, capsys):
    code = main(["bsde", "--problem", "builtin:constant_cost", "--lam", "0.5",
                 "--x0", "0", "--dt", "0.05", "--paths", "64",
                 "--out-dir", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert "[PASS] y_bound_check" in out
    with open(tmp_path / "bsde.json") as fh:
        summary = json.load(fh)
    # frozen unit cost: y0 = (1 - e^{-lam m}) / lam up to discretisation
    assert summary["y0"] == pytest.approx(2.0, abs=0.1)
    assert summary["truncation_horizon"] > 1.0
    with open(tmp_path / "ypath.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert float(rows[0]["y_mean"]) == pytest.approx(summary["y0"])


def test_dpp_check_passes_constant(tmp_path, capsys):
    code = main(["dpp-check", "--problem", "builtin:constant_cost",
                 "--lam", "0.5", "--x0", "0", "--t-list", "0.25",
                 "--grid-n", "51", "--dt", "0.05", "--paths", "64",
                 "--out-dir", str(tmp_path)])
    assert code == 0
    assert "[PASS] dpp" in capsys.readouterr().out
    with open(tmp_path / "dpp.json") as fh:
        summary = json.load(fh)
    assert summary["results"][0]["residual"] <= 1e-10


def test_represent_subcommand(tmp_path, capsys):
    code = main(["represent", "--problem", "builtin:split_homogeneous",
                 "--x0", "0.5", "--t-grid", "1,2", "--dt", "0.05",
                 "--paths", "128", "--out-dir", str(tmp_path)])
    assert code == 0
    with open(tmp_path / "represent.json") as fh:
        summary = json.load(fh)
    assert summary["x0"] == [0.5]
    assert summary["value"] <= 0.5 ** 2 + 1e-9


def test_unknown_problem_exits_one(tmp_path, capsys):
    code = main(["solve-hjb", "--problem", "builtin:nope", "--lam", "0.5"])
    assert code == 1
    err = capsys.readouterr().err
    assert "error:" in err and "unknown builtin" in err
    code = main(["solve-hjb", "--problem", str(tmp_path / "missing.cfg"),
                 "--lam", "0.5"])
    assert code == 1


def test_bad_policy_spec_exits_one(capsys):
    code = main(["bsde", "--problem", "builtin:constant_cost", "--lam", "0.5",
                 "--x0", "0", "--policy", "constant:7"])
    assert code == 1
    assert "out of range" in capsys.readouterr().err


def test_no_out_dir_still_reports(capsys):
    code = main(["solve-hjb", "--problem", "builtin:constant_cost",
                 "--lam", "1.0", "--grid-n", "21"])
    assert code == 0
    assert "constant_cost" in capsys.readouterr().out
