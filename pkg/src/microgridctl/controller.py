"""Distributed inverter control law.

Each inverter integrates its voltage phasor according to a 2x2 gain times
the comm-graph Laplacian acting on the neighbors' normalized injection
pairs, with elementwise rate saturation and local voltage-bound clamping.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .netmodel import CommLaplacian, NetworkCase, ParseError, ValidationError
from .powerflow import VoltageProfile

# Default rate limits: +-0.3 Hz of frequency headroom and 0.05 p.u./s of
# voltage slew, expressed on the internal rad/s and p.u./s scales.
DEFAULT_THETA_DOT_MAX = 0.3 * 2.0 * math.pi
DEFAULT_E_DOT_MAX = 0.05

# Gain files carry mrad/s and mV/s entries; internal units are rad/s and
# p.u./s on a 1 V voltage base, so both rows convert by 1e-3.
MILLI = 1e-3


def consensus_patterns(n_inverters: int):
    """The alternating unit patterns spanning the perfect-sharing space.

    v_p = [1,0,1,0,...], v_q = [0,1,0,1,...] in R^{2 n_I}; a stacked
    normalized-injection vector lies in their span exactly when every
    inverter shares proportionally.
    """
    v_p = np.zeros(2 * n_inverters)
    v_q = np.zeros(2 * n_inverters)
    v_p[0::2] = 1.0
    v_q[1::2] = 1.0
    return v_p, v_q


def distance_to_consensus(S_I: np.ndarray) -> float:
    """Euclidean distance from a stacked S_I vector to the sharing space."""
    n_inv = len(S_I) // 2
    v_p, v_q = consensus_patterns(n_inv)
    proj = (S_I @ v_p) / n_inv * v_p + (S_I @ v_q) / n_inv * v_q
    return float(np.linalg.norm(S_I - proj))


@dataclass(frozen=True)
class GainSet:
    """Per-inverter 2x2 gain blocks plus the runtime rate limits.

    Row 1 of each block produces rad/s per unit of normalized power
    mismatch, row 2 p.u./s.  The stacked block-diagonal gain must have its
    null space inside the sharing space, which for two or more inverters
    means every block is nonsingular.
    """

    blocks: dict[int, np.ndarray]
    theta_dot_max: float = DEFAULT_THETA_DOT_MAX
    E_dot_max: float = DEFAULT_E_DOT_MAX

    def __post_init__(self):
        if not self.blocks:
            raise ValidationError("gain set is empty")
        if self.theta_dot_max <= 0.0 or self.E_dot_max <= 0.0:
            raise ValidationError("rate limits must be positive")
        clean = {}
        for bus_id, K in sorted(self.blocks.items()):
            K = np.array(K, dtype=float)
            if K.shape != (2, 2):
                raise ValidationError(f"gain block for bus {bus_id} must be 2x2")
            K.setflags(write=False)
            clean[int(bus_id)] = K
        object.__setattr__(self, "blocks", clean)
        self._check_null_space()

    def _check_null_space(self):
        ids = sorted(self.blocks)
        K = self.stacked(ids)
        _, sv, vt = np.linalg.svd(K)
        null = vt[sv < 1e-12 * max(sv[0], 1.0)] if len(sv) else vt[0:0]
        if null.size == 0:
            return
        v_p, v_q = consensus_patterns(len(ids))
        basis = np.column_stack([v_p / np.linalg.norm(v_p), v_q / np.linalg.norm(v_q)])
        for v in null:
            resid = v - basis @ (basis.T @ v)
            if np.linalg.norm(resid) > 1e-9:
                raise ValidationError(
                    "gain null space leaves the sharing space; a singular per-inverter "
                    "block breaks the equilibrium equivalence"
                )

    def stacked(self, active_ids) -> np.ndarray:
        """Block-diagonal gain over the given inverter ids (sorted order)."""
        ids = sorted(active_ids)
        K = np.zeros((2 * len(ids), 2 * len(ids)))
        for k, i in enumerate(ids):
            if i not in self.blocks:
                raise ValidationError(f"no gain block for inverter bus {i}")
            K[2 * k : 2 * k + 2, 2 * k : 2 * k + 2] = self.blocks[i]
        return K


@dataclass(frozen=True)
class ControlState:
    """Current communication topology as seen by the controller.

    ``last_derivative`` is a diagnostics slot (stacked rates from the most
    recent evaluation); the law itself is stateless.
    """

    active: tuple[int, ...]
    lap: CommLaplacian
    last_derivative: np.ndarray | None = None

    def __post_init__(self):
        if tuple(sorted(self.active)) != self.lap.order:
            raise ValidationError("ControlState active set inconsistent with Laplacian order")

    def with_derivative(self, xdot: np.ndarray) -> "ControlState":
        return ControlState(active=self.active, lap=self.lap, last_derivative=xdot.copy())


def control_derivative(gains: GainSet, state: ControlState, S_I: np.ndarray) -> np.ndarray:
    """Stacked [theta_dot, E_dot] per active inverter, rate-saturated.

    xdot_i = K_i sum_j L(i,j) S_j, then elementwise clipping at the
    theta/E rate limits.
    """
    order = state.lap.order
    m = len(order)
    if S_I.shape != (2 * m,):
        raise ValidationError(f"S_I must have length {2 * m}, got {S_I.shape}")
    mix = state.lap.L @ S_I.reshape(m, 2)
    xdot = np.empty(2 * m)
    for k, i in enumerate(order):
        xdot[2 * k : 2 * k + 2] = gains.blocks[i] @ mix[k]
    return saturate(xdot, gains.theta_dot_max, gains.E_dot_max)


def saturate(xdot: np.ndarray, theta_dot_max: float, E_dot_max: float) -> np.ndarray:
    out = xdot.copy()
    np.clip(out[0::2], -theta_dot_max, theta_dot_max, out=out[0::2])
    np.clip(out[1::2], -E_dot_max, E_dot_max, out=out[1::2])
    return out


def project_security(
    case: NetworkCase,
    x: VoltageProfile,
    xdot_I: np.ndarray,
    active_ids=None,
):
    """Zero any voltage derivative pointing out of the magnitude box.

    Only per-bus voltage bounds are locally enforceable; branch angles are
    monitored by the simulator, not projected.  Returns the admissible
    derivative and the tuple of clamped bus ids.
    """
    ids = sorted(active_ids) if active_ids is not None else list(case.inverter_ids)
    out = xdot_I.copy()
    clamped = []
    for k, i in enumerate(ids):
        e = x.E[i]
        ed = out[2 * k + 1]
        if (e >= case.buses[i].E_max and ed > 0.0) or (e <= case.buses[i].E_min and ed < 0.0):
            out[2 * k + 1] = 0.0
            clamped.append(i)
    return out, tuple(clamped)


def frequency_of(theta_dot, omega0: float):
    """Electrical frequency in Hz for a rotating-frame angle rate."""
    return (omega0 + np.asarray(theta_dot)) / (2.0 * math.pi)


# ---------------------------------------------------------------------------
# gains file I/O
# ---------------------------------------------------------------------------


def parse_gains(text: str) -> GainSet:
    """Parse a JSON gains file.

    Schema: ``{"rate_limits": {"freq_dev_max_hz": .., "E_dot_max_pu_per_s": ..},
    "gains_mrad_mV": {"<bus>": [[k11, k12], [k21, k22]], ...}}``.
    Row 1 entries are mrad/s, row 2 mV/s on a 1 V voltage base (so both
    convert to internal units by 1e-3).
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON in gains file: {exc}") from None
    if "gains_mrad_mV" not in raw:
        raise ParseError("gains file missing 'gains_mrad_mV'")
    blocks = {}
    for key, mat in raw["gains_mrad_mV"].items():
        try:
            blocks[int(key)] = np.array(mat, dtype=float) * MILLI
        except (TypeError, ValueError) as exc:
            raise ParseError(f"bad gain block for bus {key!r}: {exc}") from None
    limits = raw.get("rate_limits", {})
    theta_dot_max = 2.0 * math.pi * float(limits.get("freq_dev_max_hz", 0.3))
    e_dot_max = float(limits.get("E_dot_max_pu_per_s", 0.05))
    return GainSet(blocks=blocks, theta_dot_max=theta_dot_max, E_dot_max=e_dot_max)


def gains_to_json(gains: GainSet) -> str:
    doc = {
        "_units": "rows 1: mrad/s per unit of S; rows 2: mV/s on a 1 V base (= 1e-3 p.u./s)",
        "rate_limits": {
            "freq_dev_max_hz": gains.theta_dot_max / (2.0 * math.pi),
            "E_dot_max_pu_per_s": gains.E_dot_max,
        },
        "gains_mrad_mV": {
            str(i): (np.asarray(K) / MILLI).tolist() for i, K in sorted(gains.blocks.items())
        },
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def load_gains(path) -> GainSet:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_gains(fh.read())
