import json

import pytest

import microgridctl as mg
from microgridctl import data as bundled


def make_case(buses, lines, comm_edges, gamma_deg=15.0, f0=50.0):
    """Compact case builder for tests."""
    doc = {
        "buses": buses,
        "lines": lines,
        "comm_edges": comm_edges,
        "params": {"gamma_deg": gamma_deg, "f0_hz": f0, "base_mva": 1.0, "base_kv": 0.4},
    }
    return mg.parse_case(json.dumps(doc))


def inverter(i, P=1.0, Q=0.5, lo=0.9, hi=1.1):
    return {"id": i, "kind": "inverter", "E_min": lo, "E_max": hi, "P_star": P, "Q_star": Q}


def pq_load(i, P=0.0, Q=0.0, lo=0.9, hi=1.1):
    return {"id": i, "kind": "load", "E_min": lo, "E_max": hi,
            "load": {"kind": "constant_power", "P": P, "Q": Q}}


def z_load(i, G=0.0, B=0.0, lo=0.9, hi=1.1):
    return {"id": i, "kind": "load", "E_min": lo, "E_max": hi,
            "load": {"kind": "constant_impedance", "G": G, "B": B}}


def line(f, t, R=0.0, X=0.1, B_sh=0.0, I_max=None):
    rec = {"from": f, "to": t, "R": R, "X": X, "B_sh": B_sh}
    if I_max is not None:
        rec["I_max"] = I_max
    return rec


@pytest.fixture(scope="session")
def case14():
    return bundled.bundled_case()


@pytest.fixture(scope="session")
def Y14(case14):
    return mg.build_admittance(case14)


@pytest.fixture(scope="session")
def gains14():
    return bundled.bundled_gains()


@pytest.fixture(scope="session")
def gains14_synth():
    return bundled.bundled_synth_gains()


@pytest.fixture(scope="session")
def cert14():
    return bundled.bundled_certificate()


@pytest.fixture(scope="session")
def hull14(case14, Y14):
    from microgridctl import certify

    return certify.build_hull(case14, Y14)


@pytest.fixture()
def two_bus_inductive():
    """Two inverters joined by a purely inductive unit line."""
    return make_case(
        [inverter(0), inverter(1, P=0.5, Q=0.25)],
        [line(0, 1, R=0.0, X=1.0)],
        [[0, 1]],
    )


@pytest.fixture()
def triangle_case():
    """Two inverters and one constant-power load on a lossy triangle."""
    return make_case(
        [inverter(0, P=1.0, Q=0.5), inverter(1, P=0.5, Q=0.25),
         pq_load(2, P=0.6, Q=0.25)],
        [line(0, 1, R=0.05, X=0.1), line(0, 2, R=0.04, X=0.12), line(1, 2, R=0.06, X=0.13)],
        [[0, 1]],
        gamma_deg=20.0,
    )


@pytest.fixture()
def path3_inverters():
    """Three inverters on an acyclic path, mixed R/X, hypothesis-clean."""
    return make_case(
        [inverter(0, P=1.0, Q=0.4), inverter(1, P=0.8, Q=0.3), inverter(2, P=0.6, Q=0.2)],
        [line(0, 1, R=0.05, X=0.10), line(1, 2, R=0.08, X=0.12)],
        [[0, 1], [1, 2]],
    )
