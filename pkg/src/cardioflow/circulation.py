"""Open lumped-parameter circulation: systemic and pulmonary RLC compartments.

The four compartment pressures and the two arterial flows are the ODE states.
Flows entering or leaving the heart (aortic and pulmonary valves, systemic and
pulmonary veins) are supplied from outside, either by the 3D fluid model or
by the prescribed-volume heart surrogate of :func:`run_standalone`.

Units are mmHg, mL and s throughout this module.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

log = logging.getLogger(__name__)

MMHG_TO_PA = 133.322
ML_TO_M3 = 1e-6

PORTS = ("Q_AV", "Q_PV", "Q_VEN_SYS", "Q_VEN_PUL")
VALVES = ("MV", "AV", "TV", "PV")


class CirculationError(ValueError):
    pass


@dataclass(frozen=True)
class CirculationParams:
    # systemic arteries
    R_AR_SYS: float = 0.48
    C_AR_SYS: float = 1.50
    L_AR_SYS: float = 0.005
    R_upstream_SYS: float = 0.048
    # systemic veins
    R_VEN_SYS: float = 0.26
    C_VEN_SYS: float = 60.0
    L_VEN_SYS: float = 5e-4
    # pulmonary arteries
    R_AR_PUL: float = 0.032116
    C_AR_PUL: float = 10.0
    L_AR_PUL: float = 0.0005
    R_upstream_PUL: float = 0.0032116
    # pulmonary veins
    R_VEN_PUL: float = 0.035684
    C_VEN_PUL: float = 16.0
    L_VEN_PUL: float = 0.0005
    # valves (non-ideal diodes)
    R_min_MV: float = 0.0075
    R_min_AV: float = 0.0355
    R_min_TV: float = 0.0075
    R_min_PV: float = 0.0184
    R_max_MV: float = 75006.2
    R_max_AV: float = 75006.2
    R_max_TV: float = 75006.2
    R_max_PV: float = 75006.2
    L_AV: float = 5e-4
    L_PV: float = 5e-4

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) and not (f.name.startswith("C_") and v == math.inf):
                raise CirculationError(f"{f.name} must be finite")
            if f.name.startswith(("R_", "C_")) and v <= 0:
                raise CirculationError(f"{f.name} must be positive")
            if f.name.startswith("L") and v < 0:
                raise CirculationError(f"{f.name} must be non-negative")
        for valve in VALVES:
            if self.r_min(valve) > self.r_max(valve):
                raise CirculationError(f"R_min_{valve} exceeds R_max_{valve}")

    def r_min(self, valve: str) -> float:
        return getattr(self, f"R_min_{valve}")

    def r_max(self, valve: str) -> float:
        return getattr(self, f"R_max_{valve}")

    @classmethod
    def from_mapping(cls, data: Mapping[str, float]) -> "CirculationParams":
        aliases = {"R_up_SYS": "R_upstream_SYS", "R_up_PUL": "R_upstream_PUL"}
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in data.items():
            key = aliases.get(key, key)
            if key not in names:
                raise CirculationError(f"unknown circulation parameter {key!r}")
            kwargs[key] = float(value)
        return cls(**kwargs)

    def to_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class CirculationState:
    """ODE states at time ``t`` plus the last interface flows received.

    ``history`` maps each port name in :data:`PORTS` to up to two samples,
    oldest first, taken at ``history_times``.
    """

    t: float
    p_AR_SYS: float
    p_VEN_SYS: float
    p_AR_PUL: float
    p_VEN_PUL: float
    Q_AR_SYS: float
    Q_AR_PUL: float
    history_times: tuple[float, ...] = ()
    history: Mapping[str, tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self):
        vals = [self.t, self.p_AR_SYS, self.p_VEN_SYS, self.p_AR_PUL, self.p_VEN_PUL,
                self.Q_AR_SYS, self.Q_AR_PUL, *self.history_times]
        for samples in self.history.values():
            vals.extend(samples)
            if len(samples) != len(self.history_times):
                raise CirculationError("history length does not match its timestamps")
        if not all(math.isfinite(v) for v in vals):
            raise CirculationError("circulation state must be finite")
        if any(b <= a for a, b in zip(self.history_times, self.history_times[1:])):
            raise CirculationError("history timestamps must be strictly increasing")

    @property
    def ode_vector(self) -> np.ndarray:
        return np.array([self.p_AR_SYS, self.p_VEN_SYS, self.p_AR_PUL, self.p_VEN_PUL,
                         self.Q_AR_SYS, self.Q_AR_PUL])

    def latest(self, port: str) -> float:
        samples = self.history.get(port, ())
        return samples[-1] if samples else 0.0

    def rate(self, port: str, dt: float) -> float | None:
        samples = self.history.get(port, ())
        if len(samples) < 2:
            return None
        return (samples[-1] - samples[-2]) / dt

    def primed(self, dt: float, flows: Mapping[str, float] | None = None) -> "CirculationState":
        """Copy whose history holds one sample of ``flows`` at ``t - dt``."""
        flows = flows or {}
        return dataclasses.replace(
            self,
            history_times=(self.t - dt,),
            history={p: (float(flows.get(p, 0.0)),) for p in PORTS},
        )

    def as_row(self) -> dict[str, float]:
        row = {k: getattr(self, k) for k in STATE_NAMES}
        for p in PORTS:
            row[p] = self.latest(p)
        return row


STATE_NAMES = ("p_AR_SYS", "p_VEN_SYS", "p_AR_PUL", "p_VEN_PUL", "Q_AR_SYS", "Q_AR_PUL")


@dataclass(frozen=True)
class InterfaceData:
    """0D side of the four 3D interfaces (mmHg, mL/s; flows along outward normals)."""

    p_in_RH: float
    p_out_RH: float
    p_in_LH: float
    p_out_LH: float
    Q_in_RH: float
    Q_out_RH: float
    Q_in_LH: float
    Q_out_LH: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in dataclasses.astuple(self)):
            raise CirculationError("interface data must be finite")

    def pressure(self, port: str) -> float:
        return getattr(self, "p_" + port.replace("-", "_"))

    def flow(self, port: str) -> float:
        return getattr(self, "Q_" + port.replace("-", "_"))


def initial_state(preset: str = "cfd", t: float = 0.0) -> CirculationState:
    """Tabulated initial circulation states.

    ``"cfd"`` holds the states at the start of the simulated heartbeat,
    ``"em"`` the initial conditions of the electromechanics run.
    """
    if preset == "cfd":
        return CirculationState(t, 86.3480, 34.4923, 22.2310, 19.5813, 109.6429, 83.2132)
    if preset == "em":
        return CirculationState(t, 83.9, 35.5, 14.90, 13.58, 0.0, 0.0)
    raise CirculationError(f"unknown initial-state preset {preset!r}")


# venous flows tabulated alongside the "cfd" initial state
CFD_VENOUS_FLOWS = {"Q_VEN_SYS": 112.9209, "Q_VEN_PUL": 262.6397}


def relax_arterial_flow(Q: float, p_ar: float, p_ven: float, R: float, L: float, dt: float) -> float:
    """Backward-Euler update of ``L dQ/dt = -R Q - (p_ven - p_ar)`` with pressures frozen."""
    return (L * Q + dt * (p_ar - p_ven)) / (L + dt * R)


def step_imex(state: CirculationState, params: CirculationParams, q3d: Mapping[str, float],
              dt: float) -> CirculationState:
    """Advance the open circulation by one first-order IMEX step.

    The arterial flows are relaxed implicitly against the pressures at ``t_n``;
    the compartment pressures then integrate the new arterial flows and the
    interface flows ``q3d`` (taken at ``t_n``) explicitly. The interface flows
    are appended to the state's history.
    """
    if not dt > 0 or not math.isfinite(dt):
        raise CirculationError("dt must be positive")
    flows = {p: float(q3d.get(p, 0.0)) for p in PORTS}
    if not all(math.isfinite(v) for v in flows.values()):
        raise CirculationError("interface flows must be finite")
    s, c = state, params
    q_sys = relax_arterial_flow(s.Q_AR_SYS, s.p_AR_SYS, s.p_VEN_SYS, c.R_AR_SYS, c.L_AR_SYS, dt)
    q_pul = relax_arterial_flow(s.Q_AR_PUL, s.p_AR_PUL, s.p_VEN_PUL, c.R_AR_PUL, c.L_AR_PUL, dt)
    p_ar_sys = s.p_AR_SYS + dt / c.C_AR_SYS * (flows["Q_AV"] - q_sys)
    p_ven_sys = s.p_VEN_SYS + dt / c.C_VEN_SYS * (q_sys - flows["Q_VEN_SYS"])
    p_ar_pul = s.p_AR_PUL + dt / c.C_AR_PUL * (flows["Q_PV"] - q_pul)
    p_ven_pul = s.p_VEN_PUL + dt / c.C_VEN_PUL * (q_pul - flows["Q_VEN_PUL"])

    times = (s.history_times + (s.t,))[-2:]
    history = {p: (tuple(s.history.get(p, ())) + (flows[p],))[-2:] for p in PORTS}
    if len(s.history_times) == 0:
        times = (s.t,)
    return CirculationState(s.t + dt, p_ar_sys, p_ven_sys, p_ar_pul, p_ven_pul, q_sys, q_pul,
                            times, history)


def imex_residual(old: CirculationState, new: CirculationState, params: CirculationParams,
                  q3d: Mapping[str, float], dt: float) -> np.ndarray:
    """Residuals of the discrete equations solved by :func:`step_imex`."""
    c = params
    f = {p: float(q3d.get(p, 0.0)) for p in PORTS}
    return np.array([
        c.C_AR_SYS * (new.p_AR_SYS - old.p_AR_SYS) - dt * (f["Q_AV"] - new.Q_AR_SYS),
        c.C_VEN_SYS * (new.p_VEN_SYS - old.p_VEN_SYS) - dt * (new.Q_AR_SYS - f["Q_VEN_SYS"]),
        c.C_AR_PUL * (new.p_AR_PUL - old.p_AR_PUL) - dt * (f["Q_PV"] - new.Q_AR_PUL),
        c.C_VEN_PUL * (new.p_VEN_PUL - old.p_VEN_PUL) - dt * (new.Q_AR_PUL - f["Q_VEN_PUL"]),
        c.L_AR_SYS * (new.Q_AR_SYS - old.Q_AR_SYS)
        + dt * (c.R_AR_SYS * new.Q_AR_SYS + old.p_VEN_SYS - old.p_AR_SYS),
        c.L_AR_PUL * (new.Q_AR_PUL - old.Q_AR_PUL)
        + dt * (c.R_AR_PUL * new.Q_AR_PUL + old.p_VEN_PUL - old.p_AR_PUL),
    ])


def interface_pressures(state: CirculationState, params: CirculationParams, dt: float) -> InterfaceData:
    """Pressures the 0D model imposes on the four 3D interfaces.

    Venous inlet pressures subtract the resistive and inductive drops of the
    venous compartments; outlet pressures add the upstream resistance drop to
    the arterial pressures. Time derivatives of the venous flows use a
    backward difference on the stored history.
    """
    c = params
    q = {p: state.latest(p) for p in PORTS}

    def inductive(port: str, L: float) -> float:
        if L == 0:
            return 0.0
        rate = state.rate(port, dt)
        if rate is None:
            raise CirculationError(f"need two history samples of {port} for its inductance term")
        return L * rate

    p_ra = state.p_VEN_SYS - c.R_VEN_SYS * q["Q_VEN_SYS"] - inductive("Q_VEN_SYS", c.L_VEN_SYS)
    p_la = state.p_VEN_PUL - c.R_VEN_PUL * q["Q_VEN_PUL"] - inductive("Q_VEN_PUL", c.L_VEN_PUL)
    return InterfaceData(
        p_in_RH=p_ra,
        p_out_RH=state.p_AR_PUL + c.R_upstream_PUL * q["Q_PV"],
        p_in_LH=p_la,
        p_out_LH=state.p_AR_SYS + c.R_upstream_SYS * q["Q_AV"],
        Q_in_RH=-q["Q_VEN_SYS"],
        Q_out_RH=q["Q_PV"],
        Q_in_LH=-q["Q_VEN_PUL"],
        Q_out_LH=q["Q_AV"],
    )


def network_volume(state: CirculationState, params: CirculationParams) -> float:
    """Stressed volume stored in the four compliant compartments (mL)."""
    c = params
    return (c.C_AR_SYS * state.p_AR_SYS + c.C_VEN_SYS * state.p_VEN_SYS
            + c.C_AR_PUL * state.p_AR_PUL + c.C_VEN_PUL * state.p_VEN_PUL)


# --------------------------------------------------------------------------
# standalone mode with a prescribed-volume heart


def diode_flow(dp: float, open_: bool, r_min: float, r_max: float) -> float:
    """Ohmic flow through a non-ideal diode valve."""
    return dp / (r_min if open_ else r_max)


def valve_open_by_timing(t: float, open_time: float, close_time: float, period: float) -> bool:
    tau = t % period
    if open_time > close_time:
        return tau >= open_time or tau < close_time
    return open_time <= tau < close_time


# reference valve timing (s): open, close
ZYGOTE_TIMES = {"MV": (0.710, 0.208), "AV": (0.262, 0.666), "TV": (0.700, 0.194), "PV": (0.279, 0.677)}


@dataclass
class _HalfHeart:
    """Prescribed-volume atrium + ventricle between two 0D compartments."""

    inlet_valve: str
    outlet_valve: str
    R_ven: float
    L_ven: float
    R_up: float
    L_out: float
    q_in: float = 0.0
    q_out: float = 0.0
    open_in: bool = True
    open_out: bool = False

    def solve(self, params: CirculationParams, p_ven: float, p_ar: float, dv_atrium: float,
              dv_ventricle: float, dt: float, t: float, timing: Mapping | None, period: float):
        """Flows and chamber pressures for one step; returns a dict."""
        r_in = (params.r_min(self.inlet_valve), params.r_max(self.inlet_valve))
        r_out = (params.r_min(self.outlet_valve), params.r_max(self.outlet_valve))
        open_in, open_out = self.open_in, self.open_out
        if timing is not None:
            # the volume rate spans [t, t + dt]: judge the valves at its midpoint
            tm = t + 0.5 * dt
            open_in = valve_open_by_timing(tm, *timing[self.inlet_valve], period)
            open_out = valve_open_by_timing(tm, *timing[self.outlet_valve], period)
        for _ in range(8):
            sol = self._linear_solve(p_ven, p_ar, dv_atrium, dv_ventricle, dt,
                                     r_in[0] if open_in else r_in[1],
                                     r_out[0] if open_out else r_out[1])
            if timing is not None:
                break
            # open valves close on flow reversal, closed ones open on a forward drop
            new_in = sol["q_valve"] > 0 if open_in else sol["p_atrium"] - sol["p_ventricle"] > 0
            new_out = sol["q_out"] > 0 if open_out else sol["p_ventricle"] - sol["p_outlet"] > 0
            if (new_in, new_out) == (open_in, open_out):
                break
            open_in, open_out = new_in, new_out
        self.open_in, self.open_out = open_in, open_out
        self.q_in, self.q_out = sol["q_ven"], sol["q_out"]
        sol["open_in"], sol["open_out"] = open_in, open_out
        return sol

    def _linear_solve(self, p_ven, p_ar, dv_a, dv_v, dt, r_valve_in, r_valve_out):
        # unknowns: q_ven, q_valve, q_out, p_atrium, p_ventricle
        A = np.zeros((5, 5))
        b = np.zeros(5)
        # p_atrium = p_ven - R_ven q_ven - L_ven (q_ven - q_ven_old)/dt
        A[0] = [self.R_ven + self.L_ven / dt, 0, 0, 1, 0]
        b[0] = p_ven + self.L_ven / dt * self.q_in
        # r_in q_valve = p_atrium - p_ventricle
        A[1] = [0, r_valve_in, 0, -1, 1]
        # (r_out + R_up) q_out + L_out (q_out - old)/dt = p_ventricle - p_ar
        A[2] = [0, 0, r_valve_out + self.R_up + self.L_out / dt, 0, -1]
        b[2] = -p_ar + self.L_out / dt * self.q_out
        A[3] = [1, -1, 0, 0, 0]
        b[3] = dv_a
        A[4] = [0, 1, -1, 0, 0]
        b[4] = dv_v
        x = np.linalg.solve(A, b)
        return {"q_ven": x[0], "q_valve": x[1], "q_out": x[2], "p_atrium": x[3],
                "p_ventricle": x[4], "p_outlet": p_ar + self.R_up * x[2]}


STANDALONE_COLUMNS = (
    "t", *STATE_NAMES, "Q_AV", "Q_PV", "Q_VEN_SYS", "Q_VEN_PUL", "Q_MV", "Q_TV",
    "p_LA", "p_LV", "p_RA", "p_RV", "V_LA", "V_LV", "V_RA", "V_RV",
    "V_network", "V_total", "V_audit",
)


@dataclass
class StandaloneResult:
    columns: tuple[str, ...]
    data: np.ndarray

    def __getitem__(self, name: str) -> np.ndarray:
        return self.data[:, self.columns.index(name)]

    def to_csv(self, path) -> None:
        write_csv(path, self.columns, self.data)


def write_csv(path, columns, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in np.asarray(rows):
            writer.writerow([repr(float(v)) for v in row])


def run_standalone(params: CirculationParams, volumes: Mapping[str, Callable[[float], float]],
                   T: float, dt: float, period: float = 0.8,
                   state: CirculationState | None = None, valve_timing: Mapping | None = None,
                   output_every: int = 1, periodic_tol: float = 1e-6) -> StandaloneResult:
    """Drive the open circulation with a prescribed-volume four-chamber heart.

    ``volumes`` maps ``"LV", "RV", "LA", "RA"`` to volume waveforms (mL).
    Heart flows follow from the chamber volume rates routed through the diode
    valves; valves switch on the sign of the pressure drop unless a
    ``valve_timing`` table ``{valve: (open, close)}`` is given. The heart
    block uses the 0D pressures at ``t_n`` and feeds its flows to the IMEX
    step, so the total tracked volume is conserved by construction.
    """
    if dt <= 0 or T <= 0:
        raise CirculationError("dt and T must be positive")
    if output_every < 1 or int(output_every) != output_every:
        raise CirculationError("output_every must be a positive integer")
    missing = {"LV", "RV", "LA", "RA"} - set(volumes)
    if missing:
        raise CirculationError(f"missing volume waveforms: {sorted(missing)}")
    if T > period * (1 + 1e-12):
        for name, fn in volumes.items():
            if abs(fn(0.0) - fn(period)) > periodic_tol * max(1.0, abs(fn(0.0))):
                raise CirculationError(f"volume waveform {name} is not periodic with period {period}")

    n_steps = int(round(T / dt))
    s = state if state is not None else initial_state("cfd")
    t0 = s.t
    left = _HalfHeart("MV", "AV", params.R_VEN_PUL, params.L_VEN_PUL, params.R_upstream_SYS, params.L_AV)
    right = _HalfHeart("TV", "PV", params.R_VEN_SYS, params.L_VEN_SYS, params.R_upstream_PUL, params.L_PV)
    if s.history:
        left.q_in, left.q_out = s.latest("Q_VEN_PUL"), s.latest("Q_AV")
        right.q_in, right.q_out = s.latest("Q_VEN_SYS"), s.latest("Q_PV")
    else:
        # no flow history: prime the inductors with one solve so the first step
        # does not see a jump from zero flow
        rate0 = {k: (volumes[k](t0 + dt) - volumes[k](t0)) / dt for k in ("LA", "LV", "RA", "RV")}
        left.solve(params, s.p_VEN_PUL, s.p_AR_SYS, rate0["LA"], rate0["LV"], dt, t0, valve_timing, period)
        right.solve(params, s.p_VEN_SYS, s.p_AR_PUL, rate0["RA"], rate0["RV"], dt, t0, valve_timing, period)

    v0 = {k: float(volumes[k](t0)) for k in ("LA", "LV", "RA", "RV")}
    total0 = network_volume(s, params) + sum(v0.values())
    inflow = 0.0  # integral of net inflow into the open network
    audit0 = network_volume(s, params)
    rows = []
    for n in range(n_steps + 1):
        t = t0 + n * dt
        v_now = {k: float(volumes[k](t)) for k in ("LA", "LV", "RA", "RV")}
        v_next = {k: float(volumes[k](t + dt)) for k in ("LA", "LV", "RA", "RV")}
        rate = {k: (v_next[k] - v_now[k]) / dt for k in v_now}
        lh = left.solve(params, s.p_VEN_PUL, s.p_AR_SYS, rate["LA"], rate["LV"], dt, t, valve_timing, period)
        rh = right.solve(params, s.p_VEN_SYS, s.p_AR_PUL, rate["RA"], rate["RV"], dt, t, valve_timing, period)
        q = {"Q_AV": lh["q_out"], "Q_VEN_PUL": lh["q_ven"], "Q_PV": rh["q_out"], "Q_VEN_SYS": rh["q_ven"]}
        if n % output_every == 0:
            vnet = network_volume(s, params)
            rows.append([
                t, *(getattr(s, k) for k in STATE_NAMES), q["Q_AV"], q["Q_PV"], q["Q_VEN_SYS"],
                q["Q_VEN_PUL"], lh["q_valve"], rh["q_valve"], lh["p_atrium"], lh["p_ventricle"],
                rh["p_atrium"], rh["p_ventricle"], v_now["LA"], v_now["LV"], v_now["RA"], v_now["RV"],
                vnet, vnet + sum(v_now.values()) - total0, vnet - inflow - audit0,
            ])
        if n == n_steps:
            break
        inflow += dt * (q["Q_AV"] + q["Q_PV"] - q["Q_VEN_SYS"] - q["Q_VEN_PUL"])
        s = step_imex(s, params, q, dt)
    return StandaloneResult(STANDALONE_COLUMNS, np.array(rows))


def cosine_volume_waveform(v_max: float, v_min: float, t_start: float, t_end: float,
                           t_refill_start: float, t_refill_end: float,
                           period: float = 0.8) -> Callable[[float], float]:
    """Periodic volume: raised-cosine emptying on ``[t_start, t_end]`` and
    raised-cosine refilling on ``[t_refill_start, t_refill_end]``.

    The refill window may extend past ``period``; it then wraps to the start
    of the next beat and must end before ``t_start``.
    """
    if not (t_start < t_end <= t_refill_start < t_refill_end <= t_start + period):
        raise CirculationError("waveform windows must be ordered and fit in one period")
    dv = v_max - v_min

    def ramp(tau: float, a: float, b: float) -> float:
        s = min(max((tau - a) / (b - a), 0.0), 1.0)
        return 0.5 * (1 - math.cos(math.pi * s))

    def fn(t: float) -> float:
        tau = t % period
        if tau < t_start:
            tau += period
        if tau <= t_end:
            return v_max - dv * ramp(tau, t_start, t_end)
        return v_min + dv * ramp(tau, t_refill_start, t_refill_end)

    return fn


def default_heart_waveforms(period: float = 0.8) -> dict[str, Callable[[float], float]]:
    """Prescribed chamber volumes roughly shaped like the calibrated heartbeat.

    Ventricles empty during ejection and refill in diastole; atria fill while
    the ventricles eject and empty during diastole, so the heart volume swings
    less than the stroke volume.
    """
    return {
        "LV": cosine_volume_waveform(151.0, 66.4, 0.262, 0.666, 0.710, 0.800 + 0.208, period),
        "RV": cosine_volume_waveform(159.0, 72.3, 0.279, 0.677, 0.700, 0.800 + 0.194, period),
        "LA": _atrium(95.0, 55.0, period),
        "RA": _atrium(100.0, 60.0, period),
    }


def _atrium(v_max: float, v_min: float, period: float) -> Callable[[float], float]:
    dv = v_max - v_min

    def fn(t: float) -> float:
        tau = t % period
        return v_min + dv * 0.5 * (1 - math.cos(2 * math.pi * (tau - 0.2) / period))

    return fn
