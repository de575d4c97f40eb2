import csv
import io
import json

import numpy as np
import pytest

from weakhom.cli import main
from weakhom.errors import ConfigError, RankDeficientError
from weakhom.study import CSV_COLUMNS, StudyConfig, fit_rates, parse_epsilon, run_study, verify_lemmas

LAM_1D = {"A": {"kind": "laminate", "values": [1.0, 4.0]}, "B": {"kind": "constant", "value": 0.5}, "resolution": 2}


def tiny_1d(**kw):
    base = dict(dim=1, cell=LAM_1D, law={"kind": "bernoulli", "p": 0.5}, epsilons=["1/4", "1/8", "1/16"],
                etas=[0.0, 0.1, 0.2], replicates=3, mesh_ratio=8, seed=3, method="direct")
    base.update(kw)
    return StudyConfig.from_dict(base)


def tiny_2d(**kw):
    base = dict(dim=2, cell={"A": {"kind": "sinusoidal", "mean": 2.0, "amplitude": 1.0},
                             "B": {"kind": "constant", "value": 0.5}},
                law={"kind": "bernoulli", "p": 0.5}, epsilons=["1/2", "1/4"], etas=[0.0, 0.1],
                replicates=2, mesh_ratio=4, chi_radius=2, seed=1)
    base.update(kw)
    return StudyConfig.from_dict(base)


# configuration -----------------------------------------------------------------


@pytest.mark.parametrize("value,expected", [("1/8", 0.125), (0.25, 0.25), ("0.0625", 0.0625), (1, 1.0)])
def test_parse_epsilon(value, expected):
    assert parse_epsilon(value) == expected


@pytest.mark.parametrize("value", ["0.3", 0.3, "1/0", "abc", -0.5])
def test_parse_epsilon_rejects(value):
    with pytest.raises(ConfigError):
        parse_epsilon(value)


@pytest.mark.parametrize("change", [{"replicates": 0}, {"dim": 3}, {"etas": []}, {"etas": [-0.1]},
                                    {"mesh_ratio": 3, "dim": 2}, {"method": "gmres"}, {"bogus": 1},
                                    {"cell": {"B": {"kind": "constant", "value": 1.0}}},
                                    {"law": {"kind": "gaussian"}}])
def test_config_rejects_invalid(change):
    with pytest.raises(ConfigError):
        tiny_1d(**change)


def test_config_from_toml_and_json_agree(tmp_path):
    cfg = tiny_1d()
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    (tmp_path / "c.toml").write_text(
        'dim = 1\nepsilons = ["1/4", "1/8", "1/16"]\netas = [0.0, 0.1, 0.2]\nreplicates = 3\n'
        'mesh_ratio = 8\nseed = 3\nmethod = "direct"\n'
        '[cell]\nresolution = 2\n[cell.A]\nkind = "laminate"\nvalues = [1.0, 4.0]\n'
        '[cell.B]\nkind = "constant"\nvalue = 0.5\n[law]\nkind = "bernoulli"\np = 0.5\n')
    assert StudyConfig.from_file(tmp_path / "c.toml").to_dict() == StudyConfig.from_file(tmp_path / "c.json").to_dict()


def test_shipped_configs_parse():
    from pathlib import Path

    for p in sorted(Path(__file__).parent.parent.joinpath("configs").iterdir()):
        StudyConfig.from_file(p)


# rate fits -----------------------------------------------------------------------


def test_slope_fit_exact_sqrt():
    rows = [{"eps": 2.0**-k, "eta": 0.0, "err_H1": np.sqrt(2.0**-k)} for k in range(2, 7)]
    assert fit_rates(rows, "eps_slope_at_eta0")["slope"] == pytest.approx(0.5, abs=1e-12)


def test_slope_fit_against_eps_log():
    eps = 2.0 ** -np.arange(2, 7)
    rows = [{"eps": e, "err_H1": e * np.log(1 / e)} for e in eps]
    assert fit_rates(rows, "eps_slope", against="eps_log")["slope"] == pytest.approx(1.0, abs=1e-12)


def test_full_model_recovers_coefficients():
    rows = [{"eps": e, "eta": h, "err_H1": 3 * np.sqrt(e) + 7 * h**2}
            for e in (1 / 4, 1 / 8, 1 / 16, 1 / 32) for h in (0.0, 0.05, 0.1, 0.2)]
    fit = fit_rates(rows, "full_model")
    np.testing.assert_allclose(fit["coefficients"], [3, 0, 7], atol=1e-8)
    assert fit["relative_residual"] < 1e-10


def test_full_model_coefficients_nonnegative():
    rng = np.random.default_rng(4)
    rows = [{"eps": e, "eta": h, "err_H1": np.sqrt(e) - 0.5 * h * np.sqrt(e * np.log(1 / e)) + rng.uniform(0, 0.01)}
            for e in (1 / 4, 1 / 8, 1 / 16) for h in (0.0, 0.1, 0.2)]
    fit = fit_rates(rows, "full_model")
    assert min(fit["coefficients"]) >= 0.0
    assert fit["relative_residual"] > 0.0


def test_full_model_rank_deficient():
    rows = [{"eps": e, "eta": 0.0, "err_H1": np.sqrt(e)} for e in (1 / 4, 1 / 8, 1 / 16, 1 / 32, 1 / 64, 1 / 128)]
    with pytest.raises(RankDeficientError):
        fit_rates(rows, "full_model")


def test_fit_needs_enough_rows():
    with pytest.raises(ValueError):
        fit_rates([{"eps": 0.25, "err_H1": 1.0}] * 2, "eps_slope")
    with pytest.raises(ValueError):
        fit_rates([{"eps": 0.25, "eta": 0.1, "err_H1": 1.0}] * 5, "full_model")


# run_study ------------------------------------------------------------------------


def test_study_shape_and_fields():
    rep = run_study(tiny_1d())
    assert [(r["eps"], r["eta"]) for r in rep.rows] == [(e, h) for e in (0.25, 0.125, 0.0625) for h in (0.0, 0.1, 0.2)]
    for r in rep.rows:
        assert r["status"] == "ok" and r["err_H1"] >= 0 and r["stderr"] >= 0
        assert r["M"] == (1 if r["eta"] == 0 else 3)
    assert "eps_slope_at_eta0" in rep.fits and "full_model" in rep.fits
    assert min(rep.fits["full_model"]["coefficients"]) >= 0


def test_eta_zero_study_is_deterministic_periodic():
    rep = run_study(tiny_1d(etas=[0.0], replicates=7))
    assert all(r["M"] == 1 and r["stderr"] == 0.0 for r in rep.rows)
    assert 0.85 <= rep.fits["eps_slope_at_eta0"]["slope"] <= 1.15


def test_failures_are_recorded():
    cfg = tiny_1d(law={"kind": "uniform", "a": -10.0, "b": -5.0}, etas=[0.0, 1.0], epsilons=["1/4"])
    rep = run_study(cfg)
    assert [r["status"] for r in rep.rows] == ["ok", "failed"]
    assert rep.failures and "Ellipticity" in rep.failures[0]["error"]
    assert rep.rows[1]["err_H1"] is None
    assert rep.to_csv().splitlines()[2].endswith(",failed")


def test_csv_schema():
    rep = run_study(tiny_1d())
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 10
    payload = json.loads(rep.to_json())
    assert payload["schema_version"] == 1 and len(payload["rows"]) == 9


def test_study_deterministic_and_thread_independent():
    a = run_study(tiny_2d())
    b = run_study(tiny_2d())
    c = run_study(tiny_2d(threads=3))
    assert a.to_csv() == b.to_csv() and a.to_json() == b.to_json()
    assert a.to_csv() == c.to_csv()


def test_seed_changes_random_rows_only():
    a = run_study(tiny_1d())
    b = run_study(tiny_1d(seed=99))
    for ra, rb in zip(a.rows, b.rows):
        if ra["eta"] == 0.0:
            assert ra["err_H1"] == rb["err_H1"]
    assert any(ra["err_H1"] != rb["err_H1"] for ra, rb in zip(a.rows, b.rows) if ra["eta"] > 0)


def test_monte_carlo_doubling_consistent():
    kw = dict(epsilons=["1/8"], etas=[0.2], law={"kind": "uniform", "a": 0.0, "b": 1.0})
    a = run_study(tiny_1d(replicates=16, **kw)).rows[0]
    b = run_study(tiny_1d(replicates=32, **kw)).rows[0]
    assert abs(a["err_H1"] - b["err_H1"]) < 3 * np.hypot(a["stderr"], b["stderr"])


def test_verify_b_zero_is_trivial():
    cfg = tiny_1d(cell={"A": LAM_1D["A"], "resolution": 2})
    ledger = {c.name: c for c in verify_lemmas(cfg)}
    for name in ("eta_expansion.residual_drift", "decomposition.identity_residual", "phi.sum_h1_sq_drift",
                 "phi.linf_over_eps_drift"):
        assert ledger[name].passed
    assert ledger["decomposition.identity_residual"].value == 0.0


def test_verify_1d_decomposition_identity():
    ledger = {c.name: c for c in verify_lemmas(tiny_1d())}
    assert ledger["decomposition.identity_residual"].value <= 1e-8


# command line -----------------------------------------------------------------------


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({**tiny_1d().to_dict(), "out_dir": str(tmp_path / "out")}))
    return p


def test_cli_cell(cfg_file, capsys):
    assert main(["cell", str(cfg_file)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["A_star"][0][0] == pytest.approx(1.6, abs=1e-10)


def test_cli_study_writes_reports(cfg_file, tmp_path):
    assert main(["study", str(cfg_file), "--out-dir", str(tmp_path / "o2"), "--threads", "2"]) == 0
    first = (tmp_path / "o2" / "study.csv").read_bytes()
    assert main(["study", str(cfg_file), "--out-dir", str(tmp_path / "o2")]) == 0
    assert (tmp_path / "o2" / "study.csv").read_bytes() == first
    assert "threads" not in json.loads((tmp_path / "o2" / "study.json").read_text())["config"]
    assert main(["study", str(cfg_file), "--out-dir", str(tmp_path / "o3")]) == 0
    assert (tmp_path / "o3" / "study.json").read_bytes() == (tmp_path / "o2" / "study.json").read_bytes()


def test_cli_seed_override(cfg_file, tmp_path):
    main(["study", str(cfg_file), "--out-dir", str(tmp_path / "a")])
    main(["study", str(cfg_file), "--out-dir", str(tmp_path / "b"), "--seed", "12"])
    assert (tmp_path / "a" / "study.csv").read_text() != (tmp_path / "b" / "study.csv").read_text()


def test_cli_solve_exports(cfg_file, tmp_path):
    assert main(["solve", str(cfg_file), "--eps", "1/8", "--eta", "0.1"]) == 0
    meta = json.loads((tmp_path / "out" / "solve.json").read_text())
    u = np.fromfile(tmp_path / "out" / "u.f64", dtype="<f8")
    assert u.size == np.prod(meta["node_shape"]) and meta["errors"]["H1"] >= 0


def test_cli_verify_exit_code(cfg_file, tmp_path):
    code = main(["verify", str(cfg_file)])
    ledger = json.loads((tmp_path / "out" / "verify.json").read_text())
    assert code == (0 if all(c["passed"] for c in ledger) else 1)


def test_cli_oracle1d(cfg_file, tmp_path):
    assert main(["oracle1d", str(cfg_file)]) == 0
    assert (tmp_path / "out" / "oracle1d.json").exists()


def test_cli_infrastructure_errors(tmp_path):
    assert main(["study", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dim": 1}))
    assert main(["cell", str(bad)]) == 2
    with pytest.raises(SystemExit):
        main(["nonsense"])


def test_reference_config_shape():
    # reference laminate config at reduced size: one eta, one row per eps, each with a standard error
    from pathlib import Path

    cfg = StudyConfig.from_file(Path(__file__).parent.parent / "configs" / "reference_2d.json")
    cfg.replicates, cfg.mesh_ratio, cfg.epsilons = 2, 4, cfg.epsilons[:3]
    rep = run_study(cfg)
    assert [r["eta"] for r in rep.rows] == [0.1] * 3
    assert all(r["status"] == "ok" and r["stderr"] > 0 for r in rep.rows)
