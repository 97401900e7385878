"""Microgrid network data model.

Buses, distribution lines, the bus admittance matrix, the inverter
communication graph, and security limits, plus case-file parsing and
validation.  Everything here is immutable after construction and safe to
share across workers.

Conventions (per-unit throughout):
  * bus ids are dense integers 0..n-1,
  * the state ordering is inverter buses first (ascending id), then load
    buses (ascending id),
  * a constant-impedance load with admittance G - jB consumes P = G*E^2
    and Q = B*E^2 at voltage magnitude E (B > 0 means inductive),
  * angles are radians internally; case files carry degrees and Hz.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

INVERTER = "inverter"
LOAD = "load"

CONSTANT_POWER = "constant_power"
CONSTANT_IMPEDANCE = "constant_impedance"


class CaseError(ValueError):
    """Base class for case-file problems."""


class ParseError(CaseError):
    """The case text could not be decoded (bad JSON, missing field...)."""


class ValidationError(CaseError):
    """A decoded case violates a data-model invariant."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Load:
    """Load model at a bus: constant power or constant impedance.

    ``P``/``Q`` are consumed power (positive = consumption) for the
    constant-power kind; ``G``/``B`` are the admittance parameters for the
    constant-impedance kind.  Exactly one parameter pair is populated.
    """

    kind: str
    P: float = 0.0
    Q: float = 0.0
    G: float = 0.0
    B: float = 0.0

    def __post_init__(self):
        if self.kind not in (CONSTANT_POWER, CONSTANT_IMPEDANCE):
            raise ValidationError(f"unknown load kind {self.kind!r}")
        if self.kind == CONSTANT_POWER and (self.G != 0.0 or self.B != 0.0):
            raise ValidationError("constant_power load must not set G/B")
        if self.kind == CONSTANT_IMPEDANCE and (self.P != 0.0 or self.Q != 0.0):
            raise ValidationError("constant_impedance load must not set P/Q")

    @staticmethod
    def constant_power(P: float, Q: float) -> "Load":
        return Load(kind=CONSTANT_POWER, P=P, Q=Q)

    @staticmethod
    def constant_impedance(G: float, B: float) -> "Load":
        return Load(kind=CONSTANT_IMPEDANCE, G=G, B=B)

    def demand(self, E: float):
        """Consumed (P, Q) at voltage magnitude E."""
        if self.kind == CONSTANT_POWER:
            return self.P, self.Q
        return self.G * E * E, self.B * E * E

    def demand_derivative(self, E: float):
        """d(P, Q)/dE of the consumed power."""
        if self.kind == CONSTANT_POWER:
            return 0.0, 0.0
        return 2.0 * self.G * E, 2.0 * self.B * E

    def shunt_admittance(self) -> complex:
        """Equivalent shunt admittance G - jB (constant-impedance only)."""
        if self.kind != CONSTANT_IMPEDANCE:
            raise ValidationError("only constant_impedance loads map to a shunt")
        return complex(self.G, -self.B)


@dataclass(frozen=True)
class Bus:
    """A network bus: either an inverter (with nominal P*, Q*) or a load."""

    id: int
    kind: str
    E_min: float
    E_max: float
    P_star: float = 0.0
    Q_star: float = 0.0
    load: Load | None = None

    def __post_init__(self):
        if self.kind not in (INVERTER, LOAD):
            raise ValidationError(f"bus {self.id}: unknown kind {self.kind!r}")
        if not (0.0 < self.E_min < self.E_max):
            raise ValidationError(
                f"bus {self.id}: need 0 < E_min < E_max, got [{self.E_min}, {self.E_max}]"
            )
        if self.kind == INVERTER:
            if self.P_star == 0.0 or self.Q_star == 0.0:
                raise ValidationError(
                    f"bus {self.id}: inverter P_star and Q_star must be nonzero"
                )
            if self.load is not None:
                raise ValidationError(f"bus {self.id}: inverter bus cannot carry a load model")
        else:
            if self.load is None:
                raise ValidationError(f"bus {self.id}: load bus needs a load model")


@dataclass(frozen=True)
class Line:
    """Series R + jX branch with total shunt charging B_sh and a current limit."""

    from_bus: int
    to_bus: int
    R: float
    X: float
    B_sh: float = 0.0
    I_max: float = math.inf

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise ValidationError(f"line {self.from_bus}-{self.to_bus}: from == to")
        if self.R == 0.0 and self.X == 0.0:
            raise ValidationError(
                f"line {self.from_bus}-{self.to_bus}: singular impedance (R = X = 0)"
            )

    @property
    def key(self) -> tuple[int, int]:
        """Unordered endpoint pair, canonically sorted."""
        a, b = self.from_bus, self.to_bus
        return (a, b) if a < b else (b, a)

    def series_admittance(self) -> complex:
        return 1.0 / complex(self.R, self.X)


def _as_edge(pair) -> tuple[int, int]:
    a, b = int(pair[0]), int(pair[1])
    if a == b:
        raise ValidationError(f"comm edge ({a}, {b}) is a self loop")
    return (a, b) if a < b else (b, a)


def _connected(node_ids, edges) -> bool:
    """True iff the undirected graph on node_ids with the given edges is connected."""
    nodes = list(node_ids)
    if len(nodes) <= 1:
        return True
    adj = {i: set() for i in nodes}
    for a, b in edges:
        if a in adj and b in adj:
            adj[a].add(b)
            adj[b].add(a)
    seen = {nodes[0]}
    stack = [nodes[0]]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == len(nodes)


@dataclass(frozen=True)
class NetworkCase:
    """Validated microgrid case: buses, lines, comm graph, security limits.

    gamma is the branch-angle limit in radians, omega0 the nominal angular
    frequency in rad/s.  Immutable; derived index tuples are precomputed.
    """

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    comm_edges: tuple[tuple[int, int], ...]
    gamma: float
    omega0: float
    base_mva: float = 100.0
    base_kv: float = 13.8

    inverter_ids: tuple[int, ...] = field(init=False)
    load_ids: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        buses = tuple(sorted(self.buses, key=lambda b: b.id))
        object.__setattr__(self, "buses", buses)
        ids = [b.id for b in buses]
        if ids != list(range(len(buses))):
            raise ValidationError(f"bus ids must be dense 0..n-1, got {ids}")
        if not (0.0 <= self.gamma < math.pi / 2):
            raise ValidationError(f"gamma must lie in [0, pi/2), got {self.gamma}")
        if self.omega0 <= 0.0:
            raise ValidationError("omega0 must be positive")

        n = len(buses)
        seen_lines = set()
        for ln in self.lines:
            for end in (ln.from_bus, ln.to_bus):
                if not 0 <= end < n:
                    raise ValidationError(f"line references unknown bus {end}")
            if ln.key in seen_lines:
                raise ValidationError(f"duplicate line {ln.key}")
            seen_lines.add(ln.key)
        if not _connected(range(n), seen_lines):
            raise ValidationError("electrical graph connected: violated")

        inv = tuple(b.id for b in buses if b.kind == INVERTER)
        load = tuple(b.id for b in buses if b.kind == LOAD)
        if not inv:
            raise ValidationError("case needs at least one inverter bus")
        object.__setattr__(self, "inverter_ids", inv)
        object.__setattr__(self, "load_ids", load)

        edges = [_as_edge(e) for e in self.comm_edges]
        if len(set(edges)) != len(edges):
            raise ValidationError("duplicate comm edge")
        for a, b in edges:
            if a not in inv or b not in inv:
                raise ValidationError(f"comm edge ({a}, {b}) touches a non-inverter bus")
        if not _connected(inv, edges):
            raise ValidationError("comm graph disconnected")
        object.__setattr__(self, "comm_edges", tuple(edges))

    # -- derived views -----------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def n_inverters(self) -> int:
        return len(self.inverter_ids)

    @property
    def n_loads(self) -> int:
        return len(self.load_ids)

    @property
    def state_order(self) -> tuple[int, ...]:
        """Bus ids in state-vector order: inverters first, then loads."""
        return self.inverter_ids + self.load_ids

    def bus(self, bus_id: int) -> Bus:
        return self.buses[bus_id]

    def e_min(self) -> np.ndarray:
        return np.array([b.E_min for b in self.buses])

    def e_max(self) -> np.ndarray:
        return np.array([b.E_max for b in self.buses])

    def p_star(self) -> np.ndarray:
        """Nominal active injections over inverter_ids order."""
        return np.array([self.buses[i].P_star for i in self.inverter_ids])

    def q_star(self) -> np.ndarray:
        return np.array([self.buses[i].Q_star for i in self.inverter_ids])

    def loads(self) -> dict[int, Load]:
        return {i: self.buses[i].load for i in self.load_ids}

    def adjacency(self) -> dict[int, set[int]]:
        adj = {b.id: set() for b in self.buses}
        for ln in self.lines:
            adj[ln.from_bus].add(ln.to_bus)
            adj[ln.to_bus].add(ln.from_bus)
        return adj

    def line_keys(self) -> tuple[tuple[int, int], ...]:
        return tuple(ln.key for ln in self.lines)


# ---------------------------------------------------------------------------
# admittance matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Dense bus admittance matrix with cached polar decomposition."""

    Y: np.ndarray
    magnitude: np.ndarray = field(init=False)
    angle: np.ndarray = field(init=False)

    def __post_init__(self):
        Y = np.array(self.Y, dtype=complex)
        if Y.ndim != 2 or Y.shape[0] != Y.shape[1]:
            raise ValidationError("admittance matrix must be square")
        asym = np.abs(Y - Y.T).max() if Y.size else 0.0
        if asym > 1e-12:
            raise ValidationError(f"admittance matrix not symmetric (max dev {asym:.2e})")
        mag = np.abs(Y)
        ang = np.angle(Y)
        for arr in (Y, mag, ang):
            arr.setflags(write=False)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "magnitude", mag)
        object.__setattr__(self, "angle", ang)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    def conductance(self) -> np.ndarray:
        return self.Y.real

    def susceptance(self) -> np.ndarray:
        return self.Y.imag


def build_admittance(case: NetworkCase, impedance_loads_as_shunts: bool = False) -> AdmittanceMatrix:
    """Assemble the dense n x n bus admittance matrix.

    Each line contributes 1/(R+jX) in series and j*B_sh/2 at either end.
    Constant-impedance loads stay out of the matrix by default (they are
    handled on the load side of the KCL residual); pass
    ``impedance_loads_as_shunts=True`` to fold them into the diagonal as
    G - jB shunts instead.
    """
    n = case.n
    Y = np.zeros((n, n), dtype=complex)
    for ln in case.lines:
        if ln.R == 0.0 and ln.X == 0.0:
            raise ValidationError(f"line {ln.key}: singular impedance (R = X = 0)")
        y = ln.series_admittance()
        i, j = ln.from_bus, ln.to_bus
        Y[i, i] += y + 0.5j * ln.B_sh
        Y[j, j] += y + 0.5j * ln.B_sh
        Y[i, j] -= y
        Y[j, i] -= y
    if impedance_loads_as_shunts:
        for i in case.load_ids:
            ld = case.buses[i].load
            if ld.kind == CONSTANT_IMPEDANCE:
                Y[i, i] += ld.shunt_admittance()
    return AdmittanceMatrix(Y=Y)


# ---------------------------------------------------------------------------
# communication-graph Laplacian
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CommLaplacian:
    """Graph Laplacian of the induced comm subgraph on the active inverters."""

    L: np.ndarray
    order: tuple[int, ...]
    connected: bool

    def __post_init__(self):
        self.L.setflags(write=False)

    def kron2(self) -> np.ndarray:
        """L (x) I_2 acting on interleaved [P-like, Q-like] pair vectors."""
        return np.kron(self.L, np.eye(2))


def laplacian(comm_edges, active_inverters) -> CommLaplacian:
    """Laplacian of the comm subgraph induced by the active inverter set.

    Edges touching inactive inverters are dropped.  Disconnection is
    reported via the ``connected`` flag, never raised.
    """
    order = tuple(sorted(active_inverters))
    pos = {b: k for k, b in enumerate(order)}
    m = len(order)
    L = np.zeros((m, m))
    kept = []
    for e in comm_edges:
        a, b = _as_edge(e)
        if a in pos and b in pos:
            ia, ib = pos[a], pos[b]
            L[ia, ia] += 1.0
            L[ib, ib] += 1.0
            L[ia, ib] -= 1.0
            L[ib, ia] -= 1.0
            kept.append((a, b))
    return CommLaplacian(L=L, order=order, connected=_connected(order, kept))


# ---------------------------------------------------------------------------
# case-file parsing / serialization
# ---------------------------------------------------------------------------


def _load_from_json(obj, bus_id: int) -> Load:
    try:
        kind = obj["kind"]
    except (TypeError, KeyError):
        raise ParseError(f"bus {bus_id}: load model missing 'kind'")
    if kind == CONSTANT_POWER:
        return Load.constant_power(float(obj["P"]), float(obj["Q"]))
    if kind == CONSTANT_IMPEDANCE:
        return Load.constant_impedance(float(obj["G"]), float(obj["B"]))
    raise ParseError(f"bus {bus_id}: unknown load kind {kind!r}")


def parse_case(text: str) -> NetworkCase:
    """Parse a JSON case file into a validated NetworkCase.

    Top-level keys: ``buses``, ``lines``, ``comm_edges``, ``params``
    (gamma_deg, f0_hz, base_mva, base_kv).  Angles in the file are degrees
    and frequencies Hz; everything electrical is per-unit.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from None

    for key in ("buses", "lines", "comm_edges", "params"):
        if key not in raw:
            raise ParseError(f"missing top-level key {key!r}")

    buses = []
    for rec in raw["buses"]:
        try:
            bus_id = int(rec["id"])
            kind = rec["kind"]
            e_min = float(rec["E_min"])
            e_max = float(rec["E_max"])
        except ValidationError:
            raise
        except (TypeError, KeyError, ValueError) as exc:
            raise ParseError(f"bad bus record {rec!r}: {exc}") from None
        if kind == INVERTER:
            try:
                p_star = float(rec["P_star"])
                q_star = float(rec["Q_star"])
            except (KeyError, ValueError) as exc:
                raise ParseError(f"bus {bus_id}: bad inverter record: {exc}") from None
            buses.append(
                Bus(id=bus_id, kind=INVERTER, E_min=e_min, E_max=e_max, P_star=p_star, Q_star=q_star)
            )
        elif kind == LOAD:
            if "load" not in rec:
                raise ParseError(f"bus {bus_id}: load bus missing 'load' record")
            buses.append(
                Bus(id=bus_id, kind=LOAD, E_min=e_min, E_max=e_max, load=_load_from_json(rec["load"], bus_id))
            )
        else:
            raise ParseError(f"bus {bus_id}: unknown kind {kind!r}")

    lines = []
    for rec in raw["lines"]:
        try:
            lines.append(
                Line(
                    from_bus=int(rec["from"]),
                    to_bus=int(rec["to"]),
                    R=float(rec["R"]),
                    X=float(rec["X"]),
                    B_sh=float(rec.get("B_sh", 0.0)),
                    I_max=float(rec.get("I_max", math.inf)),
                )
            )
        except ValidationError:
            raise
        except (TypeError, KeyError, ValueError) as exc:
            raise ParseError(f"bad line record {rec!r}: {exc}") from None

    params = raw["params"]
    try:
        gamma = math.radians(float(params["gamma_deg"]))
        omega0 = 2.0 * math.pi * float(params["f0_hz"])
        base_mva = float(params.get("base_mva", 100.0))
        base_kv = float(params.get("base_kv", 13.8))
    except (TypeError, KeyError, ValueError) as exc:
        raise ParseError(f"bad params record: {exc}") from None

    return NetworkCase(
        buses=tuple(buses),
        lines=tuple(lines),
        comm_edges=tuple(_as_edge(e) for e in raw["comm_edges"]),
        gamma=gamma,
        omega0=omega0,
        base_mva=base_mva,
        base_kv=base_kv,
    )


def _exact_preimage(value: float, forward, guess: float, max_ulps: int = 8) -> float:
    """Nudge ``guess`` so that forward(guess) == value exactly, when possible.

    Unit conversions like degrees -> radians are off by an ulp often enough
    to break the parse/serialize round trip; the preimage of a double under
    a monotone conversion is found by stepping a few ulps.
    """
    if forward(guess) == value:
        return guess
    for direction in (math.inf, -math.inf):
        y = guess
        for _ in range(max_ulps):
            y = math.nextafter(y, direction)
            got = forward(y)
            if got == value:
                return y
            if (got > value) == (direction == math.inf):
                break
    return guess


def case_to_json(case: NetworkCase) -> str:
    """Serialize a NetworkCase back to canonical case-file JSON."""
    buses = []
    for b in case.buses:
        rec = {"id": b.id, "kind": b.kind, "E_min": b.E_min, "E_max": b.E_max}
        if b.kind == INVERTER:
            rec["P_star"] = b.P_star
            rec["Q_star"] = b.Q_star
        else:
            if b.load.kind == CONSTANT_POWER:
                rec["load"] = {"kind": CONSTANT_POWER, "P": b.load.P, "Q": b.load.Q}
            else:
                rec["load"] = {"kind": CONSTANT_IMPEDANCE, "G": b.load.G, "B": b.load.B}
        buses.append(rec)
    lines = []
    for ln in case.lines:
        rec = {"from": ln.from_bus, "to": ln.to_bus, "R": ln.R, "X": ln.X, "B_sh": ln.B_sh}
        if math.isfinite(ln.I_max):
            rec["I_max"] = ln.I_max
        lines.append(rec)
    doc = {
        "buses": buses,
        "lines": lines,
        "comm_edges": [list(e) for e in case.comm_edges],
        "params": {
            "gamma_deg": _exact_preimage(case.gamma, math.radians, math.degrees(case.gamma)),
            "f0_hz": _exact_preimage(
                case.omega0, lambda f: 2.0 * math.pi * f, case.omega0 / (2.0 * math.pi)
            ),
            "base_mva": case.base_mva,
            "base_kv": case.base_kv,
        },
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def load_case(path) -> NetworkCase:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_case(fh.read())
