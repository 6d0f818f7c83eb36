import json

import pytest

from hesslab.cli import main


def _run(tmp_path, name, *args, monkeypatch=None):
    out = tmp_path / name
    code = main([*args, "--out", str(out), "--threads", "2"])
    return code, out


def test_theory_curve_writes_csvs_and_manifest(tmp_path):
    code, out = _run(tmp_path, "tc", "theory-curve", "--n-in", "30", "--n-hidden", "10")
    assert code == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["manifest.json", "pdf_chi2.csv", "pdf_convolution.csv", "pdf_mixture.csv", "pdf_mp.csv"]
    lines = (out / "pdf_mp.csv").read_text().splitlines()
    assert lines[0].startswith("# hesslab") and lines[1] == "x,pdf"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["n_in"] == 30 and manifest["config"]["command"] == "theory-curve"


def test_malformed_config_leaves_no_outputs(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text("{oops")
    code, out = _run(tmp_path, "o", "spectrum", "--config", str(cfg))
    assert code == 2
    assert not out.exists()


def test_bad_values_are_config_errors(tmp_path):
    assert _run(tmp_path, "a", "spectrum", "--ensemble", "0")[0] == 2
    assert _run(tmp_path, "b", "rank-scan", "--grid", "5:2")[0] == 2
    assert _run(tmp_path, "c", "spectrum", "--activation", "poly")[0] == 2


def test_config_file_then_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_in": 4, "n_hidden": 3, "ensemble": 5, "seed": 2}))
    code, out = _run(tmp_path, "o", "spectrum", "--config", str(cfg), "--n-hidden", "6", "--ks-max", "1.0")
    assert code == 0
    resolved = json.loads((out / "manifest.json").read_text())["config"]
    assert (resolved["n_in"], resolved["n_hidden"], resolved["ensemble"], resolved["seed"]) == (4, 6, 5, 2)


def test_identical_runs_are_byte_identical(tmp_path):
    args = ("spectrum", "--n-in", "5", "--n-hidden", "7", "--ensemble", "20", "--seed", "3", "--ks-max", "1")
    _, a = _run(tmp_path, "a", *args)
    _, b = _run(tmp_path, "b", *args)
    for name in ("eigenvalues.csv", "density.csv", "theory_overlay.csv", "ks_report.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_env_seed_overrides_flag(tmp_path, monkeypatch):
    monkeypatch.setenv("HESSLAB_SEED", "17")
    code, out = _run(tmp_path, "o", "theory-curve", "--seed", "3")
    assert code == 0
    assert json.loads((out / "manifest.json").read_text())["config"]["seed"] == 17


def test_threshold_breach_still_writes(tmp_path):
    code, out = _run(tmp_path, "o", "spectrum", "--n-in", "4", "--n-hidden", "4", "--ensemble", "3",
                     "--ks-max", "1e-6")
    assert code == 4
    assert json.loads((out / "ks_report.json").read_text())["pass"] is False


def test_rank_scan_quadratic(tmp_path):
    code, out = _run(tmp_path, "o", "rank-scan", "--activation", "quadratic", "--grid", "2:5")
    assert code == 0
    rows = (out / "rank_scan.csv").read_text().splitlines()
    assert rows[1] == "n_in,n_hidden,rank,n_eff_predicted,match"
    assert all(r.endswith("true") for r in rows[2:])


def test_verify_linear(tmp_path):
    code, out = _run(tmp_path, "o", "verify", "--n-in", "3", "--n-hidden", "4", "--mc-samples", "100000")
    assert code == 0
    rep = json.loads((out / "verdict.json").read_text())
    assert rep["overall"] == "pass" and rep["eigenstructure"]["verdict"] == "pass"


def test_dynamics_command(tmp_path):
    code, out = _run(tmp_path, "o", "dynamics", "--n-in", "3", "--n-hidden", "4", "--ensemble", "4",
                     "--steps", "400", "--rate-tol", "0.5")
    assert code == 0
    fit = json.loads((out / "fit_report.json").read_text())
    assert set(fit) == {"rate", "two_lambda_min", "rel_err"}
    assert (out / "predicted.csv").read_text().splitlines()[1] == "t,loss_pred"


def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
