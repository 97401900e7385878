"""Consensus-controlled inverter microgrid simulator and certification toolkit."""

from .netmodel import (
    AdmittanceMatrix,
    Bus,
    CaseError,
    Line,
    Load,
    NetworkCase,
    ParseError,
    ValidationError,
    build_admittance,
    case_to_json,
    laplacian,
    load_case,
    parse_case,
)
from .powerflow import (
    InjectionVector,
    JacobianPair,
    NewtonError,
    VoltageProfile,
    check_existence,
    injections,
    jacobians,
    kappa_bound,
    solve_loads,
)
from .controller import (
    ControlState,
    GainSet,
    control_derivative,
    frequency_of,
    load_gains,
    parse_gains,
    project_security,
)
from .certify import (
    CapacityBox,
    CertificateError,
    IntervalHull,
    StabilityCertificate,
    SynthesisError,
    VertexSet,
    block_feasibility,
    blocks_of,
    build_basis,
    build_hull,
    certificate_for_gains,
    certification_vertices,
    entry_bounds,
    load_certificate,
    synthesize_gains,
    verify_certificate,
    vertex_samples,
    zeta_estimate,
)
from .contingency import (
    FaultEvent,
    OperatingCondition,
    apply_event,
    inherited_feasibility,
)
from .sim import (
    Scenario,
    SimConfig,
    SimulationError,
    Trace,
    load_scenario,
    metrics,
    parse_scenario,
    read_trace_csv,
    run_scenario,
    solve_equilibrium,
    step,
    write_trace_csv,
)

__version__ = "0.1.0"
