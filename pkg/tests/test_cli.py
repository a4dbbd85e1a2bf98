import csv
import json

import pytest

from attnloc.cli import main


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_spp_theory_outputs(tmp_path):
    assert main(["spp-theory", "--out", str(tmp_path), "--xi", "0,512", "--eta", "0.01,1000", "--pairs", ""]) == 0
    flat = _rows(tmp_path / "rho_xi0_eta0.01.csv")
    assert flat[0] == ["theta", "rho"] and len(flat) == 1001
    vals = [float(r[1]) for r in flat[1:]]
    assert max(vals) - min(vals) < 1e-6  # uniform regime
    idx = {(float(r[0]), float(r[1])): r for r in _rows(tmp_path / "spp_theory_index.csv")[1:]}
    assert abs(float(idx[(512.0, 0.01)][4]) - 1 / 5.12) < 0.02
    assert float(idx[(0.0, 1000.0)][3]) < 0.01
    echo = json.loads((tmp_path / "config-echo.json").read_text())
    assert echo["command"] == "spp-theory" and echo["xi"] == [0.0, 512.0]


def test_config_precedence_and_roundtrip(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"xi": [1.0], "eta": [0.5], "n_theta": 11, "pairs": []}))
    out1 = tmp_path / "a"
    assert main(["spp-theory", "--config", str(cfg), "--out", str(out1), "--n-theta", "21"]) == 0
    echo = json.loads((out1 / "config-echo.json").read_text())
    assert echo["n_theta"] == 21 and echo["xi"] == [1.0]
    out2 = tmp_path / "b"
    assert main(["spp-theory", "--config", str(out1 / "config-echo.json"), "--out", str(out2)]) == 0
    assert (out1 / "rho_xi1_eta0.5.csv").read_bytes() == (out2 / "rho_xi1_eta0.5.csv").read_bytes()


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(SystemExit):
        main(["spp-theory", "--config", str(cfg), "--out", str(tmp_path)])


def test_spp_mc_small(tmp_path):
    args = ["spp-mc", "--out", str(tmp_path), "--d", "16", "--T", "12", "--n-walks", "50", "--n-draws", "2",
            "--means", "0,0.5", "--scales", "0,0.1"]
    assert main(args) == 0
    prof = _rows(tmp_path / "spp_mc_profiles.csv")
    assert len(prof) == 5 and len(prof[0]) == 2 + 12
    zero = [r for r in prof[1:] if float(r[0]) == 0 and float(r[1]) == 0][0]
    assert all(float(v) == 1.0 for v in zero[2:])
    assert len(_rows(tmp_path / "entropy_heatmap.csv")) == 5


def test_verify_quick_and_fault(tmp_path):
    assert main(["verify", "--quick", "--out", str(tmp_path / "ok")]) == 0
    rep = json.loads((tmp_path / "ok" / "verify-report.json").read_text())
    assert rep["passed"] and any(c["name"] == "walk_formula_audit" for c in rep["checks"])
    assert _rows(tmp_path / "ok" / "walk_moment_audit.csv")[0][0] == "formula-id"
    assert main(["verify", "--quick", "--inject-fault", "--out", str(tmp_path / "bad")]) == 1
    bad = json.loads((tmp_path / "bad" / "verify-report.json").read_text())
    assert any(n.startswith("limit_localization") for n in bad["failed_mandatory"])


def test_train_and_plots(tmp_path):
    out = tmp_path / "t"
    args = ["train", "--out", str(out), "--iters", "20", "--log-every", "5", "--d", "6", "--T", "8",
            "--batch-size", "8", "--eval-size", "8", "--kappa2", "0,1"]
    assert main(args) == 0
    summ = _rows(out / "train_summary.csv")
    assert summ[0] == ["kappa2", "final_scale", "final_trace", "final_entropy", "final_loss"] and len(summ) == 3
    evo = _rows(out / "spp_evolution_k2_1.csv")
    assert len(evo) == 1 + 4 and len(evo[0]) == 8
    assert main(["plots", "--out", str(out)]) == 0
    script = (out / "plot_train.gp").read_text()
    assert "(A)" in script and "(D)" in script


def test_train_zero_iterations(tmp_path):
    assert main(["train", "--out", str(tmp_path), "--iters", "0", "--d", "4", "--T", "5", "--kappa2", "0"]) == 0
    assert len(_rows(tmp_path / "spp_evolution_k2_0.csv")) == 2


def test_train_missing_corpus(tmp_path):
    rc = main(["train", "--out", str(tmp_path), "--data-source", "corpus", "--corpus", str(tmp_path / "nope")])
    assert rc == 2


def test_plots_missing_inputs(tmp_path, capsys):
    assert main(["plots", "--out", str(tmp_path), "--what", "train"]) == 2
    assert "train_summary.csv" in capsys.readouterr().err
