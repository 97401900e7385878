"""Closed-loop time-domain simulation.

Semi-explicit index-1 DAE: the inverter states integrate the distributed
control law (fixed-step 4-stage explicit by default, explicit Euler
optionally) while the load-bus states are re-solved algebraically at every
stage with warm starts.  Scenario events reconfigure the operating
condition between steps.  Traces are deterministic: fixed step, fixed
iteration order, no wall-clock anywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .netmodel import Load, NetworkCase, ParseError, ValidationError
from .powerflow import (
    NewtonError,
    VoltageProfile,
    full_jacobian,
    injections_raw,
    solve_algebraic,
)
from .controller import GainSet, frequency_of
from .contingency import (
    COMM_LOSS,
    DER_LOSS,
    LOAD_STEP,
    FaultEvent,
    OperatingCondition,
    apply_event,
)

RK4 = "rk4"
EULER = "euler"


class SimulationError(RuntimeError):
    """A step failed even after time-step halving."""


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    t_end: float = 1.0
    integrator: str = RK4
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    record_stride: int = 1

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValidationError("dt must be positive")
        if self.t_end < self.dt:
            raise ValidationError("t_end must be at least one step")
        if self.integrator not in (RK4, EULER):
            raise ValidationError(f"unknown integrator {self.integrator!r}")
        if self.record_stride < 1:
            raise ValidationError("record_stride must be >= 1")


@dataclass(frozen=True)
class Scenario:
    events: tuple[FaultEvent, ...]
    config: SimConfig


def parse_scenario(text: str, case: NetworkCase | None = None) -> Scenario:
    """Parse a JSON scenario: ``{"events": [...], "sim": {...}}``.

    Event times are seconds; events are validated against the case when
    one is supplied and come out sorted by time.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON in scenario: {exc}") from None
    events = []
    for rec in raw.get("events", []):
        try:
            kind = rec["kind"]
            t = float(rec["t"])
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"bad event record {rec!r}: {exc}") from None
        if kind == LOAD_STEP:
            ev = FaultEvent(time=t, kind=kind, bus=int(rec["bus"]),
                            dP=float(rec.get("dP", 0.0)), dQ=float(rec.get("dQ", 0.0)))
        elif kind == DER_LOSS:
            residual = None
            if "residual" in rec:
                r = rec["residual"]
                residual = Load.constant_power(float(r.get("P", 0.0)), float(r.get("Q", 0.0)))
            ev = FaultEvent(time=t, kind=kind, bus=int(rec["bus"]), residual=residual)
        elif kind == COMM_LOSS:
            a, b = rec["edge"]
            ev = FaultEvent(time=t, kind=kind, edge=(int(a), int(b)))
        else:
            raise ParseError(f"unknown event kind {kind!r}")
        if case is not None:
            ev.validate_against(case)
        events.append(ev)
    events.sort(key=lambda e: e.time)
    sim = raw.get("sim", {})
    config = SimConfig(
        dt=float(sim.get("dt", 1e-3)),
        t_end=float(sim.get("t_end", 1.0)),
        integrator=sim.get("integrator", RK4),
        newton_tol=float(sim.get("newton_tol", 1e-10)),
        newton_max_iter=int(sim.get("newton_max_iter", 50)),
        record_stride=int(sim.get("record_stride", 1)),
    )
    return Scenario(events=tuple(events), config=config)


def load_scenario(path, case: NetworkCase | None = None) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read(), case)


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------


@dataclass
class Trace:
    """Recorded time series on a uniform grid.

    theta/E cover every bus; P/Q/f cover the case's inverter buses (dead
    inverters keep their column: injections go to zero, frequency to nan).
    """

    t: np.ndarray
    theta: np.ndarray
    E: np.ndarray
    P_inv: np.ndarray
    Q_inv: np.ndarray
    f_inv: np.ndarray
    clamp_active: np.ndarray
    angle_violation: np.ndarray
    newton_iters: np.ndarray
    sharing_P: np.ndarray
    sharing_Q: np.ndarray
    bus_ids: tuple[int, ...]
    inverter_ids: tuple[int, ...]
    meta: dict = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return len(self.t)


def write_trace_csv(trace: Trace, path):
    """CSV with one header row; floats carry 17 significant digits."""
    cols = ["t"]
    cols += [f"theta_{i}" for i in trace.bus_ids]
    cols += [f"E_{i}" for i in trace.bus_ids]
    cols += [f"P_{i}" for i in trace.inverter_ids]
    cols += [f"Q_{i}" for i in trace.inverter_ids]
    cols += [f"f_{i}" for i in trace.inverter_ids]
    cols += ["clamp_active", "angle_violation", "newton_iters", "sharing_err_P", "sharing_err_Q"]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for r in range(trace.n_rows):
            vals = [f"{trace.t[r]:.17g}"]
            vals += [f"{v:.17g}" for v in trace.theta[r]]
            vals += [f"{v:.17g}" for v in trace.E[r]]
            vals += [f"{v:.17g}" for v in trace.P_inv[r]]
            vals += [f"{v:.17g}" for v in trace.Q_inv[r]]
            vals += [f"{v:.17g}" for v in trace.f_inv[r]]
            vals.append(str(int(trace.clamp_active[r])))
            vals.append(str(int(trace.angle_violation[r])))
            vals.append(str(int(trace.newton_iters[r])))
            vals.append(f"{trace.sharing_P[r]:.17g}")
            vals.append(f"{trace.sharing_Q[r]:.17g}")
            fh.write(",".join(vals) + "\n")


def read_trace_csv(path) -> Trace:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    col = {name: k for k, name in enumerate(header)}
    bus_ids = tuple(int(n.split("_")[1]) for n in header if n.startswith("theta_"))
    inverter_ids = tuple(int(n.split("_")[1]) for n in header if n.startswith("P_"))
    pick = lambda names: data[:, [col[n] for n in names]]
    return Trace(
        t=data[:, col["t"]],
        theta=pick([f"theta_{i}" for i in bus_ids]),
        E=pick([f"E_{i}" for i in bus_ids]),
        P_inv=pick([f"P_{i}" for i in inverter_ids]),
        Q_inv=pick([f"Q_{i}" for i in inverter_ids]),
        f_inv=pick([f"f_{i}" for i in inverter_ids]),
        clamp_active=data[:, col["clamp_active"]].astype(int),
        angle_violation=data[:, col["angle_violation"]].astype(int),
        newton_iters=data[:, col["newton_iters"]].astype(int),
        sharing_P=data[:, col["sharing_err_P"]],
        sharing_Q=data[:, col["sharing_err_Q"]],
        bus_ids=bus_ids,
        inverter_ids=inverter_ids,
        meta={},
    )


# ---------------------------------------------------------------------------
# equilibrium initial condition
# ---------------------------------------------------------------------------


def solve_equilibrium(
    case: NetworkCase,
    Y,
    condition: OperatingCondition | None = None,
    pin_E: float | None = None,
    tol: float = 1e-10,
    max_iter: int = 80,
) -> VoltageProfile:
    """Newton solve of the proportional-sharing operating point.

    Unknowns are the common sharing levels (alpha, beta), the non-reference
    inverter states, and the algebraic-bus states, with the reference
    inverter pinned at angle 0 and magnitude ``pin_E``.  With ``pin_E``
    omitted, the pin is auto-centered: solve once at nominal, then shift
    the whole profile so its magnitude range sits mid-box (the sharing
    equilibrium family is one-dimensional in the voltage level).
    """
    if condition is None:
        condition = OperatingCondition.initial(case)
    if pin_E is None:
        x_nom = solve_equilibrium(case, Y, condition, pin_E=1.0, tol=tol, max_iter=max_iter)
        box_mid = 0.5 * (case.e_min().min() + case.e_max().max())
        prof_mid = 0.5 * (x_nom.E.min() + x_nom.E.max())
        ref = condition.active_inverters[0]
        pin = 1.0 + (box_mid - prof_mid)
        pin = min(max(pin, case.buses[ref].E_min), case.buses[ref].E_max)
        if abs(pin - 1.0) < 1e-9:
            return x_nom
        return solve_equilibrium(case, Y, condition, pin_E=pin, tol=tol, max_iter=max_iter)
    active = list(condition.active_inverters)
    alg = list(condition.algebraic_ids(case))
    loads = condition.effective_loads(case)
    ref = active[0]
    free_inv = active[1:]
    n = case.n

    theta = np.zeros(n)
    E = np.ones(n)
    E[ref] = pin_E
    p_star = np.array([case.buses[i].P_star for i in active])
    q_star = np.array([case.buses[i].Q_star for i in active])
    total_p = sum(loads[j].demand(1.0)[0] for j in alg)
    total_q = sum(loads[j].demand(1.0)[1] for j in alg)
    alpha = total_p / p_star.sum() if p_star.sum() != 0 else 0.0
    beta = total_q / q_star.sum() if q_star.sum() != 0 else 0.0

    n_free = len(free_inv)
    n_alg = len(alg)

    def residual(th, e, a, b):
        P, Q = injections_raw(Y, th, e)
        g = np.empty(2 * len(active) + 2 * n_alg)
        for k, i in enumerate(active):
            g[2 * k] = P[i] - a * p_star[k]
            g[2 * k + 1] = Q[i] - b * q_star[k]
        for k, j in enumerate(alg):
            pd, qd = loads[j].demand(e[j])
            g[2 * len(active) + 2 * k] = P[j] + pd
            g[2 * len(active) + 2 * k + 1] = Q[j] + qd
        return g

    def jac(th, e):
        dP_dth, dP_dE, dQ_dth, dQ_dE = full_jacobian(Y, th, e)
        rows = 2 * len(active) + 2 * n_alg
        cols = 2 + 2 * n_free + 2 * n_alg
        J = np.zeros((rows, cols))
        var_ids = free_inv + alg  # theta/E pairs, after (alpha, beta)
        for r, i in enumerate(active):
            J[2 * r, 0] = -p_star[r]
            J[2 * r + 1, 1] = -q_star[r]
        row_buses = active + alg
        for r, i in enumerate(row_buses):
            for c, j in enumerate(var_ids):
                J[2 * r, 2 + 2 * c] = dP_dth[i, j]
                J[2 * r, 2 + 2 * c + 1] = dP_dE[i, j]
                J[2 * r + 1, 2 + 2 * c] = dQ_dth[i, j]
                J[2 * r + 1, 2 + 2 * c + 1] = dQ_dE[i, j]
        for k, j in enumerate(alg):
            dpd, dqd = loads[j].demand_derivative(e[j])
            r = len(active) + k
            c = n_free + k
            J[2 * r, 2 + 2 * c + 1] += dpd
            J[2 * r + 1, 2 + 2 * c + 1] += dqd
        return J

    g = residual(theta, E, alpha, beta)
    norm = np.abs(g).max()
    var_ids = free_inv + alg
    for it in range(max_iter):
        if norm <= tol:
            return VoltageProfile(theta=theta, E=E)
        J = jac(theta, E)
        try:
            step = np.linalg.solve(J, g)
        except np.linalg.LinAlgError:
            raise NewtonError("singular Jacobian in equilibrium solve", residual=norm) from None
        lam = 1.0
        th0, E0, a0, b0 = theta.copy(), E.copy(), alpha, beta
        for _ in range(30):
            alpha = a0 - lam * step[0]
            beta = b0 - lam * step[1]
            theta = th0.copy()
            E = E0.copy()
            for c, j in enumerate(var_ids):
                theta[j] = th0[j] - lam * step[2 + 2 * c]
                E[j] = max(E0[j] - lam * step[2 + 2 * c + 1], 1e-6)
            g_new = residual(theta, E, alpha, beta)
            norm_new = np.abs(g_new).max()
            if norm_new < norm or norm_new <= tol:
                break
            lam *= 0.5
        g, norm = g_new, norm_new
    if norm <= tol:
        return VoltageProfile(theta=theta, E=E)
    raise NewtonError(
        f"equilibrium solve did not converge (residual {norm:.3e})", residual=norm
    )


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------


class _Engine:
    """Mutable integration state; rebuilds condition caches on events."""

    def __init__(self, case: NetworkCase, gains: GainSet, config: SimConfig, Y):
        self.case = case
        self.gains = gains
        self.config = config
        self.Y = Y
        self.theta = np.zeros(case.n)
        self.E = np.ones(case.n)
        self.set_condition(OperatingCondition.initial(case))

    def set_condition(self, cond: OperatingCondition):
        self.cond = cond
        case = self.case
        self.active = list(cond.active_inverters)
        self.act = np.asarray(self.active, dtype=int)
        lap = cond.lap()
        self.L = lap.L
        self.K_stack = np.array([self.gains.blocks[i] for i in self.active])
        self.alg_ids = list(cond.algebraic_ids(case))
        self.loads = cond.effective_loads(case)
        self.p_star = np.array([case.buses[i].P_star for i in self.active])
        self.q_star = np.array([case.buses[i].Q_star for i in self.active])
        self.e_lo = np.array([case.buses[i].E_min for i in self.active])
        self.e_hi = np.array([case.buses[i].E_max for i in self.active])

    def resolve_algebraic(self) -> int:
        return solve_algebraic(
            self.Y, self.theta, self.E, self.alg_ids, self.loads,
            tol=self.config.newton_tol, max_iter=self.config.newton_max_iter,
        )

    def derivative(self):
        """Rate-saturated, voltage-clamped (theta_dot, E_dot) per active inverter."""
        P, Q = injections_raw(self.Y, self.theta, self.E)
        act = self.act
        S = np.empty((len(act), 2))
        S[:, 0] = P[act] / self.p_star
        S[:, 1] = Q[act] / self.q_star
        mix = self.L @ S
        xdot = np.einsum("kij,kj->ki", self.K_stack, mix)
        np.clip(xdot[:, 0], -self.gains.theta_dot_max, self.gains.theta_dot_max, out=xdot[:, 0])
        np.clip(xdot[:, 1], -self.gains.E_dot_max, self.gains.E_dot_max, out=xdot[:, 1])
        e_act = self.E[act]
        clamp = ((e_act >= self.e_hi) & (xdot[:, 1] > 0.0)) | (
            (e_act <= self.e_lo) & (xdot[:, 1] < 0.0)
        )
        xdot[clamp, 1] = 0.0
        return xdot, int(clamp.sum()), P, Q

    def _stage_apply(self, th0, E0, k, c, dt):
        act = self.act
        self.theta[act] = th0 + c * dt * k[:, 0]
        self.E[act] = E0 + c * dt * k[:, 1]

    def _try_step(self, dt: float) -> int:
        act = self.act
        th0 = self.theta[act].copy()
        E0 = self.E[act].copy()
        its = 0
        if self.config.integrator == EULER:
            k1, _, _, _ = self.derivative()
            self._stage_apply(th0, E0, k1, 1.0, dt)
            its += self.resolve_algebraic()
            return its
        k1, _, _, _ = self.derivative()
        self._stage_apply(th0, E0, k1, 0.5, dt)
        its += self.resolve_algebraic()
        k2, _, _, _ = self.derivative()
        self._stage_apply(th0, E0, k2, 0.5, dt)
        its += self.resolve_algebraic()
        k3, _, _, _ = self.derivative()
        self._stage_apply(th0, E0, k3, 1.0, dt)
        its += self.resolve_algebraic()
        k4, _, _, _ = self.derivative()
        self.theta[act] = th0 + (dt / 6.0) * (k1[:, 0] + 2 * k2[:, 0] + 2 * k3[:, 0] + k4[:, 0])
        self.E[act] = E0 + (dt / 6.0) * (k1[:, 1] + 2 * k2[:, 1] + 2 * k3[:, 1] + k4[:, 1])
        its += self.resolve_algebraic()
        return its

    def advance(self, dt: float, depth: int = 0) -> int:
        """One step of size dt; on Newton failure halve up to 4 times."""
        theta_save = self.theta.copy()
        E_save = self.E.copy()
        try:
            return self._try_step(dt)
        except NewtonError as exc:
            self.theta[:] = theta_save
            self.E[:] = E_save
            if depth >= 4:
                raise SimulationError(
                    f"step failed after 4 halvings (dt={dt:.3e}): {exc}"
                ) from exc
            its = self.advance(0.5 * dt, depth + 1)
            its += self.advance(0.5 * dt, depth + 1)
            return its


def step(case: NetworkCase, gains: GainSet, condition: OperatingCondition,
         x: VoltageProfile, config: SimConfig, Y=None) -> VoltageProfile:
    """Advance one DAE step from a consistent state (public single-step API)."""
    from .netmodel import build_admittance

    if Y is None:
        Y = build_admittance(case)
    eng = _Engine(case, gains, config, Y)
    eng.set_condition(condition)
    eng.theta[:] = x.theta
    eng.E[:] = x.E
    eng.resolve_algebraic()
    eng.advance(config.dt)
    return VoltageProfile(theta=eng.theta.copy(), E=eng.E.copy())


def run_scenario(
    case: NetworkCase,
    gains: GainSet,
    scenario: Scenario,
    config: SimConfig | None = None,
    Y=None,
    initial: VoltageProfile | None = None,
) -> Trace:
    """Integrate the closed loop through a scenario and record a trace.

    Starts from the solved pre-event sharing equilibrium (flat-start load
    solve as fallback), applies events at the first grid time at or after
    their timestamp, and records every ``record_stride`` steps.
    """
    from .netmodel import build_admittance

    cfg = config or scenario.config
    if Y is None:
        Y = build_admittance(case)
    eng = _Engine(case, gains, cfg, Y)

    if initial is not None:
        eng.theta[:] = initial.theta
        eng.E[:] = initial.E
        eng.resolve_algebraic()
    else:
        try:
            x0 = solve_equilibrium(case, Y, eng.cond)
            eng.theta[:] = x0.theta
            eng.E[:] = x0.E
        except NewtonError:
            eng.resolve_algebraic()

    n_steps = int(round(cfg.t_end / cfg.dt))
    if abs(n_steps * cfg.dt - cfg.t_end) > 1e-9 * max(1.0, cfg.t_end):
        raise ValidationError("t_end must be an integer number of steps")
    events = list(scenario.events)
    ev_idx = 0

    inv_ids = list(case.inverter_ids)
    inv_arr = np.asarray(inv_ids, dtype=int)
    n_rec = n_steps // cfg.record_stride + 1
    rec = {
        "t": np.empty(n_rec),
        "theta": np.empty((n_rec, case.n)),
        "E": np.empty((n_rec, case.n)),
        "P": np.empty((n_rec, len(inv_ids))),
        "Q": np.empty((n_rec, len(inv_ids))),
        "f": np.empty((n_rec, len(inv_ids))),
        "clamp": np.zeros(n_rec, dtype=int),
        "angle": np.zeros(n_rec, dtype=int),
        "its": np.zeros(n_rec, dtype=int),
        "shP": np.empty(n_rec),
        "shQ": np.empty(n_rec),
    }
    lines_f = np.array([ln.from_bus for ln in case.lines], dtype=int)
    lines_t = np.array([ln.to_bus for ln in case.lines], dtype=int)
    uncertified = False
    its_accum = 0
    row = 0
    event_times_applied = []

    def record(t):
        nonlocal row, its_accum
        xdot, n_clamp, P, Q = eng.derivative()
        rec["t"][row] = t
        rec["theta"][row] = eng.theta
        rec["E"][row] = eng.E
        rec["P"][row] = P[inv_arr]
        rec["Q"][row] = Q[inv_arr]
        freq = np.full(len(inv_ids), np.nan)
        for k, i in enumerate(eng.active):
            freq[inv_ids.index(i)] = frequency_of(xdot[k, 0], case.omega0)
        rec["f"][row] = freq
        rec["clamp"][row] = n_clamp
        if len(lines_f):
            max_ang = np.abs(eng.theta[lines_f] - eng.theta[lines_t]).max()
            rec["angle"][row] = 1 if max_ang > case.gamma + 1e-12 else 0
        rec["its"][row] = its_accum
        ratios_p = P[eng.act] / eng.p_star
        ratios_q = Q[eng.act] / eng.q_star
        rec["shP"][row] = ratios_p.max() - ratios_p.min()
        rec["shQ"][row] = ratios_q.max() - ratios_q.min()
        its_accum = 0
        row += 1

    for k_step in range(n_steps + 1):
        t = k_step * cfg.dt
        changed = False
        while ev_idx < len(events) and events[ev_idx].time <= t + 1e-12:
            eng.set_condition(apply_event(case, eng.cond, events[ev_idx]))
            event_times_applied.append(t)
            ev_idx += 1
            changed = True
        if changed:
            its_accum += eng.resolve_algebraic()
            uncertified = uncertified or not eng.cond.certified
        if k_step % cfg.record_stride == 0:
            record(t)
        if k_step < n_steps:
            its_accum += eng.advance(cfg.dt)

    trace = Trace(
        t=rec["t"],
        theta=rec["theta"],
        E=rec["E"],
        P_inv=rec["P"],
        Q_inv=rec["Q"],
        f_inv=rec["f"],
        clamp_active=rec["clamp"],
        angle_violation=rec["angle"],
        newton_iters=rec["its"],
        sharing_P=rec["shP"],
        sharing_Q=rec["shQ"],
        bus_ids=tuple(range(case.n)),
        inverter_ids=tuple(inv_ids),
        meta={
            "f0_hz": case.omega0 / (2 * math.pi),
            "gamma": case.gamma,
            "uncertified": uncertified,
            "event_times": tuple(event_times_applied),
            "final_active": tuple(eng.active),
        },
    )
    return trace


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsSummary:
    final_sharing_P: float
    final_sharing_Q: float
    time_to_sharing_tol: float | None
    sharing_tol: float
    freq_min: float
    freq_max: float
    max_freq_dev: float | None
    E_min_seen: float
    E_max_seen: float
    voltage_violations: int | None
    max_branch_angle: float | None
    branch_angle_limit: float | None
    clamp_steps: int
    max_newton_iters: int
    uncertified: bool

    def format(self) -> str:
        out = [
            f"final sharing error      P {self.final_sharing_P:.3e}   Q {self.final_sharing_Q:.3e}",
            f"time to sharing < {self.sharing_tol:g}: "
            + (f"{self.time_to_sharing_tol:.3f} s" if self.time_to_sharing_tol is not None else "never"),
            f"frequency range          [{self.freq_min:.6f}, {self.freq_max:.6f}] Hz",
        ]
        if self.max_freq_dev is not None:
            out.append(f"max |f - f0|             {self.max_freq_dev:.3e} Hz")
        out.append(f"voltage range            [{self.E_min_seen:.5f}, {self.E_max_seen:.5f}] p.u.")
        if self.voltage_violations is not None:
            out.append(f"voltage-bound violations {self.voltage_violations} recorded steps")
        if self.max_branch_angle is not None:
            lim = math.degrees(self.branch_angle_limit) if self.branch_angle_limit else float("nan")
            out.append(
                f"max branch angle         {math.degrees(self.max_branch_angle):.3f} deg"
                f" (limit {lim:.1f} deg)"
            )
        out.append(f"voltage clamps           {self.clamp_steps} recorded steps")
        out.append(f"max Newton iters/record  {self.max_newton_iters}")
        if self.uncertified:
            out.append("WARNING: condition left the certified family (comm graph disconnected)")
        return "\n".join(out)


def metrics(trace: Trace, case: NetworkCase | None = None,
            sharing_tol: float = 1e-3) -> MetricsSummary:
    """Summary of sharing, frequency, voltage, and angle behavior.

    Bound-based figures (frequency deviation, voltage violations, branch
    angles) need the case; they are None when it is absent and the trace
    metadata does not carry the limits.
    """
    f0 = None
    gamma = None
    if case is not None:
        f0 = case.omega0 / (2 * math.pi)
        gamma = case.gamma
    elif trace.meta:
        f0 = trace.meta.get("f0_hz")
        gamma = trace.meta.get("gamma")

    sh_p = trace.sharing_P
    ok = sh_p <= sharing_tol
    t_ok = None
    if ok[-1]:
        idx = len(ok) - 1
        while idx > 0 and ok[idx - 1]:
            idx -= 1
        t_ok = float(trace.t[idx])

    fmin = float(np.nanmin(trace.f_inv))
    fmax = float(np.nanmax(trace.f_inv))
    max_dev = max(abs(fmin - f0), abs(fmax - f0)) if f0 is not None else None

    viol = None
    if case is not None:
        lo, hi = case.e_min(), case.e_max()
        viol = int(np.sum(np.any((trace.E < lo - 1e-12) | (trace.E > hi + 1e-12), axis=1)))

    max_ang = None
    if case is not None and case.lines:
        fb = np.array([ln.from_bus for ln in case.lines], dtype=int)
        tb = np.array([ln.to_bus for ln in case.lines], dtype=int)
        max_ang = float(np.abs(trace.theta[:, fb] - trace.theta[:, tb]).max())

    return MetricsSummary(
        final_sharing_P=float(trace.sharing_P[-1]),
        final_sharing_Q=float(trace.sharing_Q[-1]),
        time_to_sharing_tol=t_ok,
        sharing_tol=sharing_tol,
        freq_min=fmin,
        freq_max=fmax,
        max_freq_dev=max_dev,
        E_min_seen=float(trace.E.min()),
        E_max_seen=float(trace.E.max()),
        voltage_violations=viol,
        max_branch_angle=max_ang,
        branch_angle_limit=gamma,
        clamp_steps=int(np.sum(trace.clamp_active > 0)),
        max_newton_iters=int(trace.newton_iters.max()),
        uncertified=bool(trace.meta.get("uncertified", False)),
    )


def velocity_ratio_violations(trace: Trace, case: NetworkCase, kappa: float,
                              margin: float = 0.01, gate: float = 1e-9):
    """Finite-difference check of ||xdot_L|| <= (kappa+margin) ||xdot_I||.

    Runs over consecutive recorded rows, skipping intervals that straddle a
    scenario event (the algebraic states jump there while the inverter
    states do not).  Valid for traces whose inverter/load partition never
    changed.  Returns (row index, ratio) pairs that violate the bound.
    """
    inv = np.asarray(case.inverter_ids, dtype=int)
    load = np.asarray(case.load_ids, dtype=int)
    ev_times = trace.meta.get("event_times", ())
    out = []
    for r in range(1, trace.n_rows):
        t0, t1 = trace.t[r - 1], trace.t[r]
        if any(t0 < te <= t1 or t0 <= te < t1 for te in ev_times):
            continue
        d_inv = np.concatenate(
            [trace.theta[r, inv] - trace.theta[r - 1, inv], trace.E[r, inv] - trace.E[r - 1, inv]]
        )
        d_load = np.concatenate(
            [trace.theta[r, load] - trace.theta[r - 1, load], trace.E[r, load] - trace.E[r - 1, load]]
        )
        dt = t1 - t0
        v_inv = np.linalg.norm(d_inv) / dt
        if v_inv <= gate:
            continue
        v_load = np.linalg.norm(d_load) / dt
        if v_load > (kappa + margin) * v_inv:
            out.append((r, v_load / v_inv))
    return out
