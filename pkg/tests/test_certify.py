import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import microgridctl as mg
from microgridctl import certify
from microgridctl.certify import (
    BlockBounds,
    CapacityBox,
    CertificateError,
    IntervalHull,
    StabilityCertificate,
    SynthesisError,
    ZETA_LITERAL,
    _margin_stack,
    block_feasibility,
    blocks_of,
    build_basis,
    build_hull,
    certificate_for_gains,
    certificate_to_json,
    certification_vertices,
    effective_angle,
    entry_bounds,
    hypothesis_violations,
    parse_certificate,
    reduced_laplacian,
    sample_interior_profiles,
    stage1_gains,
    vertex_samples,
    verify_certificate,
    zeta_estimate,
)
from microgridctl.controller import GainSet
from microgridctl.netmodel import ValidationError, laplacian
from microgridctl.powerflow import VoltageProfile, jacobians

from conftest import inverter, line, make_case, pq_load, z_load


# -- consensus basis ----------------------------------------------------------


def test_basis_two_inverters_last_columns():
    basis = build_basis(2)
    assert basis.T.shape == (4, 4)
    r = 1 / math.sqrt(2)
    assert np.allclose(basis.T[:, 2], [r, 0, r, 0])
    assert np.allclose(basis.T[:, 3], [0, r, 0, r])


@pytest.mark.parametrize("n_inv", [2, 3, 5, 8])
def test_basis_orthogonality(n_inv):
    basis = build_basis(n_inv)
    m = 2 * n_inv
    assert np.abs(basis.T.T @ basis.T - np.eye(m)).max() < 1e-12


@pytest.mark.parametrize("edges,n_inv", [
    ([(0, 1)], 2),
    ([(0, 1), (1, 2)], 3),
    ([(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)], 5),
])
def test_laplacian_kron_kills_last_basis_columns(edges, n_inv):
    lap = laplacian(edges, range(n_inv))
    basis = build_basis(n_inv)
    prod = lap.kron2() @ basis.T
    assert np.abs(prod[:, -2:]).max() < 1e-12
    # and the reduced Laplacian block is positive definite for connected graphs
    L1 = reduced_laplacian(lap.kron2(), basis)
    assert np.linalg.eigvalsh(L1)[0] > 1e-9


def test_basis_needs_two_inverters():
    with pytest.raises(ValidationError):
        build_basis(1)


# -- electrical blocks ----------------------------------------------------------


def test_14bus_blocks(case14):
    assert blocks_of(case14) == ((0, 1, 2), (5,), (7,))


def test_all_inverter_network_single_block(path3_inverters):
    assert blocks_of(path3_inverters) == ((0, 1, 2),)


def test_load_separated_inverters_are_singletons():
    case = make_case(
        [inverter(0), inverter(1, P=0.5, Q=0.2), pq_load(2)],
        [line(0, 2), line(1, 2)],
        [[0, 1]],
    )
    assert blocks_of(case) == ((0,), (1,))


# -- vertex samples ---------------------------------------------------------------


def test_two_bus_vertex_count(two_bus_inductive):
    vs = vertex_samples(two_bus_inductive)
    assert len(vs.samples) == (2 ** 2) * 3
    assert not any(vs.cycle_flags)
    for prof in vs.samples:
        assert prof.in_security_set(two_bus_inductive, tol=1e-12)


def test_triangle_mesh_vertex_count_and_flags():
    case = make_case(
        [inverter(0), inverter(1, P=0.5, Q=0.2), inverter(2, P=0.4, Q=0.2)],
        [line(0, 1, R=0.05, X=0.1), line(1, 2, R=0.05, X=0.1), line(0, 2, R=0.05, X=0.1)],
        [[0, 1], [1, 2]],
        gamma_deg=15.0,
    )
    vs = vertex_samples(case)
    assert len(vs.samples) == (2 ** 3) * (3 ** 3)
    # the non-tree edge inherits sums of tree gaps: some combinations overshoot
    assert any(vs.cycle_flags)
    assert not all(vs.cycle_flags)


def test_vertex_hypothesis_violation_raises():
    # R/X = 1 folds to 45 deg; 45 + 60 > 90 violates the corner hypothesis
    case = make_case(
        [inverter(0), inverter(1)],
        [line(0, 1, R=0.1, X=0.1)],
        [[0, 1]],
        gamma_deg=60.0,
    )
    with pytest.raises(ValidationError, match="hypothesis"):
        vertex_samples(case)


def test_vertex_budget_guard(case14, Y14):
    with pytest.raises(ValidationError, match="per-block"):
        vertex_samples(case14, Y14)


def test_effective_angle_folding():
    assert math.isclose(effective_angle(math.pi / 2), math.pi / 2)
    assert math.isclose(effective_angle(-math.pi / 2), math.pi / 2)
    assert math.isclose(effective_angle(math.radians(103.6)), math.radians(76.4), abs_tol=1e-12)
    assert math.isclose(effective_angle(0.1), 0.1)


def test_14bus_hypothesis_failures_are_the_low_r_over_x_lines(case14, Y14):
    keys = {k for k, _, _ in hypothesis_violations(case14, Y14)}
    assert keys == {(0, 4), (1, 2)}  # the two lines with atan(R/X) < gamma


# -- entry bounds -----------------------------------------------------------------


def test_two_bus_lossless_bounds_extremes(two_bus_inductive):
    Y = mg.build_admittance(two_bus_inductive)
    bb = entry_bounds(two_bus_inductive, Y, (0, 1))
    g = two_bus_inductive.gamma
    lo, hi = 0.9, 1.1
    # dP_0/dtheta_0 / P*_0 = -E0 E1 sin(delta - pi/2) = E0 E1 cos(delta):
    # extremes over the box at delta = +-gamma (min) and delta = 0 (max)
    assert math.isclose(bb.J_hi[0, 0], hi * hi * 1.0)
    assert math.isclose(bb.J_lo[0, 0], lo * lo * math.cos(g))
    # dP_0/dtheta_1 = E0 E1 sin(delta - pi/2): odd part peaks at the corners
    assert math.isclose(bb.J_lo[0, 2], -hi * hi * 1.0)
    assert math.isclose(bb.J_hi[0, 2], -lo * lo * math.cos(g))


def test_acyclic_interior_containment(path3_inverters):
    Y = mg.build_admittance(path3_inverters)
    bb = entry_bounds(path3_inverters, Y, (0, 1, 2))
    rng_profiles = sample_interior_profiles(path3_inverters, 300, seed=42)
    for x in rng_profiles:
        J = jacobians(path3_inverters, Y, x).J_I
        assert np.all(J >= bb.J_lo - 1e-9)
        assert np.all(J <= bb.J_hi + 1e-9)


def test_containment_holds_on_hypothesis_violating_line():
    # atan(R/X) ~ 11.3 deg < gamma = 20 deg: the sine summand peaks inside
    case = make_case(
        [inverter(0), inverter(1, P=0.5, Q=0.2)],
        [line(0, 1, R=0.05, X=0.25)],
        [[0, 1]],
        gamma_deg=20.0,
    )
    Y = mg.build_admittance(case)
    assert hypothesis_violations(case, Y)
    bb = entry_bounds(case, Y, (0, 1))
    for x in sample_interior_profiles(case, 400, seed=9):
        J = jacobians(case, Y, x).J_I
        assert np.all(J >= bb.J_lo - 1e-9)
        assert np.all(J <= bb.J_hi + 1e-9)


def test_entry_bounds_from_samples_path(path3_inverters):
    Y = mg.build_admittance(path3_inverters)
    vs = vertex_samples(path3_inverters)
    bb = entry_bounds(path3_inverters, Y, (0, 1, 2), samples=vs.samples)
    bb_direct = entry_bounds(path3_inverters, Y, (0, 1, 2))
    # direct corner evaluation also sweeps stationary angles, so it can only widen
    assert np.all(bb_direct.J_hi >= bb.J_hi - 1e-12)
    assert np.all(bb_direct.J_lo <= bb.J_lo + 1e-12)


def test_hull_global_assembly(hull14, case14):
    n_i = case14.n_inverters
    assert hull14.J_lo.shape == (2 * n_i, 2 * n_i)
    # off-block entries are identically zero
    idx0 = hull14.block_positions(0)
    idx2 = hull14.block_positions(2)
    assert np.all(hull14.J_lo[np.ix_(idx0, idx2)] == 0.0)
    assert np.all(hull14.J_hi[np.ix_(idx0, idx2)] == 0.0)
    assert np.all(hull14.J_lo <= hull14.J_hi)


# -- block feasibility --------------------------------------------------------------


def _unit_hull(D_stacks, blocks):
    per_block = []
    n = 0
    for blk, D in zip(blocks, D_stacks):
        D = np.asarray(D, dtype=float)
        per_block.append(BlockBounds(
            block=tuple(blk),
            relevant_buses=tuple(blk),
            relevant_edges=(),
            J_lo=D.min(axis=0),
            J_hi=D.max(axis=0),
            D_stack=D,
        ))
        n += len(blk)
    order = tuple(sorted(b for blk in blocks for b in blk))
    return IntervalHull(
        blocks=tuple(tuple(b) for b in blocks),
        per_block=tuple(per_block),
        kind=certify.HULL_JBAR,
        J_lo=np.zeros((2 * n, 2 * n)),
        J_hi=np.zeros((2 * n, 2 * n)),
        inverter_order=order,
    )


def test_block_feasibility_identity_cases():
    hull = _unit_hull([[np.eye(2)]], [(0,)])
    ok = block_feasibility(GainSet(blocks={0: -np.eye(2)}), hull, d=1.9)
    assert ok.passed and math.isclose(ok.worst, -2.0)
    bad = block_feasibility(GainSet(blocks={0: np.eye(2)}), hull, d=0.1)
    assert not bad.passed and math.isclose(bad.worst, 2.0)


def test_block_feasibility_on_bundled_pair(hull14, gains14_synth, gains14):
    feas = block_feasibility(gains14_synth, hull14, d=0.2)
    assert feas.passed
    assert feas.worst <= -0.2
    # the published table gains are not block-feasible on this hull
    table = block_feasibility(gains14, hull14, d=1e-9)
    assert not table.passed


def test_dbar_hull_enumerates_small_blocks():
    lo = 0.5 * np.eye(2)
    hi = 2.0 * np.eye(2)
    bb = BlockBounds(block=(0,), relevant_buses=(0,), relevant_edges=(),
                     J_lo=lo, J_hi=hi, D_stack=np.stack([lo, hi]))
    hull = IntervalHull(blocks=((0,),), per_block=(bb,), kind=certify.HULL_DBAR,
                        J_lo=lo, J_hi=hi, inverter_order=(0,))
    verts = hull.block_vertices(0)
    assert verts.shape == (16, 2, 2)
    with pytest.raises(ValidationError, match="vertices"):
        hull.block_vertices(0, budget=8)


# -- quadratic-form margins -----------------------------------------------------------


def test_scalar_schur_identity_case():
    """U=I, A = -a I: the margin sign matches -2a + eps*zeta + xi + 1/eps."""
    a, eps, xi, zeta = 4.0, 0.5, 0.1, 1.0
    A = -a * np.eye(2)
    margins = _margin_stack(A[None, :, :], np.eye(2), eps, xi, zeta, ZETA_LITERAL)
    schur = -2 * a + eps * zeta + xi + 1 / eps
    assert (margins.max() <= 0) == (schur <= 0)
    a_small = 0.5  # makes the Schur combination positive
    A2 = -a_small * np.eye(2)
    margins2 = _margin_stack(A2[None, :, :], np.eye(2), eps, xi, zeta, ZETA_LITERAL)
    schur2 = -2 * a_small + eps * zeta + xi + 1 / eps
    assert (margins2.max() <= 0) == (schur2 <= 0)
    assert margins2.max() > 0


def test_margin_monotone_in_xi():
    rng = np.random.default_rng(0)
    A = -np.eye(4) - 0.1 * rng.standard_normal((1, 4, 4))
    U = np.eye(4)
    m_small = _margin_stack(A, U, 1.0, 0.01, 0.1, "squared").max()
    m_large = _margin_stack(A, U, 1.0, 0.5, 0.1, "squared").max()
    assert m_small <= m_large


def test_certificate_field_validation():
    with pytest.raises(ValidationError, match="xi"):
        StabilityCertificate(U=np.eye(2), eps=1.0, xi=0.0, zeta=0.1, d=0.1)
    with pytest.raises(ValidationError, match="positive definite"):
        StabilityCertificate(U=-np.eye(2), eps=1.0, xi=0.1, zeta=0.1, d=0.1)
    with pytest.raises(ValidationError, match="symmetric"):
        StabilityCertificate(U=np.array([[1.0, 0.5], [0.0, 1.0]]), eps=1.0, xi=0.1,
                             zeta=0.1, d=0.1)


def test_certificate_json_roundtrip(cert14):
    again = parse_certificate(certificate_to_json(cert14))
    assert np.array_equal(again.U, cert14.U)
    assert again.xi == cert14.xi and again.zeta == cert14.zeta
    assert again.digest == cert14.digest


def test_certificate_digest_mismatch_rejected(tmp_path, case14, gains14, cert14):
    path = tmp_path / "cert.json"
    path.write_text(certificate_to_json(cert14))
    with pytest.raises(CertificateError, match="digest"):
        certify.load_certificate(path, case14, gains14)  # wrong gains for this cert


def test_verify_bundled_certificate(case14, gains14_synth, cert14, hull14):
    vmats = certification_vertices(hull14)
    report = verify_certificate(case14, gains14_synth, cert14, vertex_matrices=vmats)
    assert report.passed
    assert report.worst <= 1e-9
    assert report.n_vertices == vmats.shape[0]


def test_certification_vertices_block_structure(hull14):
    vmats = certification_vertices(hull14)
    idx0 = hull14.block_positions(0)
    idx1 = hull14.block_positions(1)
    assert np.all(vmats[:, idx0][:, :, idx1] == 0.0)
    # every block slice appears in that block's own vertex list
    D0 = hull14.block_vertices(0)
    sample = vmats[0][np.ix_(idx0, idx0)]
    assert any(np.array_equal(sample, D) for D in D0)


# -- synthesis ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def separated_pair_case():
    """Two single-inverter blocks separated by a load bus."""
    return make_case(
        [inverter(0, P=1.0, Q=0.5), inverter(1, P=0.5, Q=0.25),
         z_load(2, G=0.4, B=0.15)],
        [line(0, 2, R=0.03, X=0.12), line(1, 2, R=0.04, X=0.15)],
        [[0, 1]],
    )


def test_synthesize_on_separated_pair(separated_pair_case):
    gains, cert = certify.synthesize_gains(separated_pair_case, stage1_iters=120)
    hull = build_hull(separated_pair_case)
    feas = block_feasibility(gains, hull, d=cert.d - 1e-9)
    assert feas.passed
    report = verify_certificate(separated_pair_case, gains, cert)
    assert report.passed
    # descent from -I keeps the stabilizing sign pattern
    for K in gains.blocks.values():
        assert K[0, 0] < 0 and K[1, 1] < 0


def test_stage1_scalar_hull_returns_negative_definite_direction(separated_pair_case):
    hull = _unit_hull([[0.5 * np.eye(2), 2.0 * np.eye(2)],
                       [0.5 * np.eye(2), 2.0 * np.eye(2)]], [(0,), (1,)])
    box = CapacityBox.default_from_case(separated_pair_case)
    gains = stage1_gains(separated_pair_case, hull, (0.3 * 2 * math.pi, 0.05), box,
                         iters=80)
    for K in gains.blocks.values():
        sym = K + K.T
        assert np.linalg.eigvalsh(sym)[-1] < 0.0
    feas = block_feasibility(gains, hull, d=1e-6)
    assert feas.passed


def test_stage1_clean_failure_on_sign_indefinite_hull(separated_pair_case):
    D = np.array([[1.0, 0.2], [-0.1, 0.8]])
    hull = _unit_hull([[D, -D], [D, -D]], [(0,), (1,)])
    box = CapacityBox.default_from_case(separated_pair_case)
    with pytest.raises(SynthesisError, match="stage 1"):
        stage1_gains(separated_pair_case, hull, (0.3 * 2 * math.pi, 0.05), box, iters=40)


def test_certificate_for_infeasible_gains_raises(separated_pair_case):
    bad = GainSet(blocks={0: np.eye(2) * 0.01, 1: np.eye(2) * 0.01})  # wrong sign
    with pytest.raises(SynthesisError, match="block feasibility"):
        certificate_for_gains(separated_pair_case, bad)


# -- zeta estimate ----------------------------------------------------------------


def test_zeta_zero_without_loads(two_bus_inductive):
    gains = GainSet(blocks={0: -0.01 * np.eye(2), 1: -0.01 * np.eye(2)})
    est = zeta_estimate(two_bus_inductive, gains, [VoltageProfile.flat(2)])
    assert est.zeta == 0.0
    assert est.kappa == 0.0


def test_zeta_zero_with_zero_gain_single_inverter():
    case = make_case([inverter(0), pq_load(1, P=0.2, Q=0.1)], [line(0, 1)], [])
    gains = GainSet(blocks={0: np.zeros((2, 2))})
    est = zeta_estimate(case, gains, [VoltageProfile.flat(2)])
    assert est.zeta == 0.0
    assert est.gain_norm == 0.0


def test_zeta_recorded_for_bundled(cert14):
    assert cert14.zeta > 0
    assert cert14.meta["zeta_requested"] > cert14.zeta
    assert cert14.meta["zeta_shortfall"] is True


# -- interlacing spot check ----------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=2, max_value=10), st.integers(min_value=0, max_value=2 ** 30))
def test_principal_submatrix_interlacing(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    H = 0.5 * (A + A.T)
    c = 0.3
    H -= (np.linalg.eigvalsh(H)[-1] + c) * np.eye(n)
    keep = sorted(rng.choice(n, size=rng.integers(1, n + 1), replace=False))
    sub = H[np.ix_(keep, keep)]
    assert np.linalg.eigvalsh(sub)[-1] <= -c + 1e-12
