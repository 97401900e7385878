import json
import subprocess
import sys

import numpy as np

from microgridctl.cli import main
from microgridctl.certify import certificate_to_json
from microgridctl import data as bundled


CASE = str(bundled.data_path(bundled.CASE14))
GAINS = str(bundled.data_path(bundled.GAINS14))
SYNTH = str(bundled.data_path(bundled.GAINS14_SYNTH))
CERT = str(bundled.data_path(bundled.CERT14))


def test_check_case(capsys):
    assert main(["check-case", CASE]) == 0
    out = capsys.readouterr().out
    assert "(a) PASS" in out
    assert "(f) not checked" in out


def test_check_case_bad_file(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["check-case", str(bad)]) == 1


def test_bounds_text_and_json(capsys):
    assert main(["bounds", CASE]) == 0
    out = capsys.readouterr().out
    assert "blocks: [[0, 1, 2], [5], [7]]" in out
    assert main(["bounds", CASE, "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["blocks"] == [[0, 1, 2], [5], [7]]
    assert len(doc["per_block"]) == 3


def test_certify_verifies_bundled_certificate(capsys):
    assert main(["certify", CASE, SYNTH, "--cert", CERT]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out


def test_certify_rejects_mismatched_digest(capsys):
    # the table gains are not the ones this certificate covers
    assert main(["certify", CASE, GAINS, "--cert", CERT]) == 3


def test_certify_rejects_corrupted_certificate(tmp_path, capsys):
    cert = bundled.bundled_certificate()
    U = np.array(cert.U)
    U[0, 0] *= 1.1
    from microgridctl.certify import StabilityCertificate

    bad = StabilityCertificate(U=U, eps=cert.eps, xi=cert.xi, zeta=cert.zeta, d=cert.d,
                               hull_kind=cert.hull_kind, zeta_mode=cert.zeta_mode,
                               digest=cert.digest, meta=cert.meta)
    path = tmp_path / "bad_cert.json"
    path.write_text(certificate_to_json(bad))
    assert main(["certify", CASE, SYNTH, "--cert", str(path)]) == 3


def test_simulate_and_metrics(tmp_path, capsys):
    scen = tmp_path / "scen.json"
    scen.write_text(json.dumps({
        "events": [{"t": 0.05, "kind": "load_step", "bus": 9, "dP": 0.01, "dQ": 0.005}],
        "sim": {"t_end": 0.2, "dt": 0.005, "record_stride": 2},
    }))
    out_csv = tmp_path / "trace.csv"
    assert main(["simulate", CASE, GAINS, str(scen), "--out", str(out_csv)]) == 0
    header = out_csv.read_text().splitlines()[0]
    assert header.startswith("t,theta_0,")
    assert "sharing_err_P" in header
    captured = capsys.readouterr().out
    assert "final sharing error" in captured

    assert main(["metrics", str(out_csv), "--case", CASE]) == 0
    assert main(["metrics", str(out_csv)]) == 0


def test_simulate_infeasible_load_is_numerical_failure(tmp_path, capsys):
    # constant-power demand far beyond deliverable power: the algebraic
    # solve has no solution and the run must exit with the numerical code
    case = tmp_path / "case.json"
    case.write_text(json.dumps({
        "buses": [
            {"id": 0, "kind": "inverter", "E_min": 0.9, "E_max": 1.1,
             "P_star": 1.0, "Q_star": 0.5},
            {"id": 1, "kind": "inverter", "E_min": 0.9, "E_max": 1.1,
             "P_star": 1.0, "Q_star": 0.5},
            {"id": 2, "kind": "load", "E_min": 0.9, "E_max": 1.1,
             "load": {"kind": "constant_power", "P": 0.2, "Q": 0.05}},
        ],
        "lines": [{"from": 0, "to": 2, "R": 0.02, "X": 0.3},
                  {"from": 1, "to": 2, "R": 0.02, "X": 0.3}],
        "comm_edges": [[0, 1]],
        "params": {"gamma_deg": 30.0, "f0_hz": 50.0, "base_mva": 1.0, "base_kv": 0.4},
    }))
    gains = tmp_path / "gains.json"
    gains.write_text(json.dumps({
        "rate_limits": {"freq_dev_max_hz": 0.3, "E_dot_max_pu_per_s": 0.05},
        "gains_mrad_mV": {"0": [[-10.0, 0.0], [0.0, -10.0]],
                          "1": [[-10.0, 0.0], [0.0, -10.0]]},
    }))
    scen = tmp_path / "scen.json"
    scen.write_text(json.dumps({
        "events": [{"t": 0.01, "kind": "load_step", "bus": 2, "dP": 60.0, "dQ": 30.0}],
        "sim": {"t_end": 0.1, "dt": 0.005},
    }))
    assert main(["simulate", str(case), str(gains), str(scen)]) == 2


def test_module_entrypoint_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "microgridctl.cli", "check-case", CASE],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "(a) PASS" in proc.stdout
