"""Segregated, explicit 3D-0D coupling loop.

Each step runs the phases in a fixed order: valve update, mesh velocity,
circulation step with the previous 3D flows, 0D-to-3D pressure transfer,
fluid solve and 3D-to-0D flow transfer.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .circulation import (
    MMHG_TO_PA, PORTS, CirculationParams, CirculationState, InterfaceData, STATE_NAMES,
    initial_state, interface_pressures, step_imex, write_csv,
)
from .fem import boundary_integral_flux, boundary_mean_pressure
from .fluid import FluidProperties, FluidSolver, FluidStepInputs, StabilizationOptions
from .io import atomic_write, write_vtk
from .mesh import Field, Mesh
from .motion import StaticTimeline, ale_velocity
from .riis import RIISOperator, ValveSpec, valve_state_at

log = logging.getLogger(__name__)

M3_TO_ML = 1e6
INTERFACE_PORTS = ("in-RH", "out-RH", "in-LH", "out-LH")
# 0D flow fed by each interface port and the sign relating it to the outward 3D flux
PORT_FLOW = {
    "out-LH": ("Q_AV", 1.0),
    "out-RH": ("Q_PV", 1.0),
    "in-LH": ("Q_VEN_PUL", -1.0),
    "in-RH": ("Q_VEN_SYS", -1.0),
}
PHASES = (
    "update_valves", "ale_velocity", "solve_circulation",
    "interface_0d_to_3d", "solve_fluid", "interface_3d_to_0d",
)


class CouplingError(RuntimeError):
    def __init__(self, step: int, phase: str, cause: Exception):
        self.step, self.phase, self.cause = step, phase, cause
        super().__init__(f"step {step}, phase {phase}: {type(cause).__name__}: {cause}")


@dataclass(eq=False)
class CoupledConfig:
    """Everything a coupled run needs.

    ``interface`` maps mesh tags to 0D ports; ``constant_pressure`` gives a
    fixed pressure (Pa) on other open tags; every remaining tag is a wall
    following the mesh. 0D flows without a mapped tag come from
    ``surrogate_flows`` (mL/s, constant or a function of time; default 0).
    In 2D, fluxes are per unit depth and ``depth`` (m) turns them into volumes.
    """

    mesh: Mesh
    dt: float
    T: float
    period: float = 0.8
    timeline: object | None = None
    valves: list[ValveSpec] = field(default_factory=list)
    params: CirculationParams = field(default_factory=CirculationParams)
    state0: CirculationState | None = None
    fluid: FluidProperties = field(default_factory=FluidProperties)
    stabilization: StabilizationOptions = field(default_factory=StabilizationOptions)
    interface: Mapping[str, str] = field(default_factory=dict)
    constant_pressure: Mapping[str, float] = field(default_factory=dict)
    surrogate_flows: Mapping[str, float | Callable[[float], float]] = field(default_factory=dict)
    depth: float = 1.0
    t0: float = 0.0
    output_stride: int = 1
    snapshot_dir: Path | None = None
    vtk_stride: int = 0
    solver_method: str = "direct"

    def __post_init__(self):
        if not (self.dt > 0 and self.T > 0 and self.period > 0):
            raise ValueError("dt, T and period must be positive")
        n = self.T / self.dt
        if abs(n - round(n)) > 1e-6 * max(1.0, n):
            raise ValueError("T must be a whole number of time steps")
        if self.output_stride < 1 or round(n) % self.output_stride:
            raise ValueError("the step count must be a multiple of output_stride")
        tags = set(self.mesh.tags)
        for tag, port in self.interface.items():
            if tag not in tags:
                raise ValueError(f"interface tag {tag!r} not in mesh")
            if port not in PORT_FLOW:
                raise ValueError(f"unknown port {port!r}; expected one of {INTERFACE_PORTS}")
        ports = list(self.interface.values())
        if len(set(ports)) != len(ports):
            raise ValueError("each 0D port can be mapped to one tag only")
        clash = set(self.interface) & set(self.constant_pressure)
        if clash:
            raise ValueError(f"tags both coupled and held at constant pressure: {sorted(clash)}")
        unknown = set(self.constant_pressure) - tags
        if unknown:
            raise ValueError(f"constant-pressure tags not in mesh: {sorted(unknown)}")
        bad = set(self.surrogate_flows) - set(PORTS)
        if bad:
            raise ValueError(f"surrogate flows for unknown 0D ports: {sorted(bad)}")
        if self.mesh.dim == 3 and self.depth != 1.0:
            raise ValueError("depth only applies to 2D meshes")
        if self.snapshot_dir is not None:
            self.snapshot_dir = Path(self.snapshot_dir)

    @property
    def num_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def wall_tags(self) -> list[str]:
        return [t for t in self.mesh.tags if t not in self.interface and t not in self.constant_pressure]


@dataclass(frozen=True)
class CoupledRecord:
    step: int
    t: float
    interface: InterfaceData
    tags: Mapping[str, tuple[float, float]]  # tag -> (mean pressure Pa, flux m^3/s)
    state: CirculationState
    flows_0d: Mapping[str, float]             # mL/s fed to the next 0D step
    valves: Mapping[str, bool]

    def row(self, tag_order, valve_order) -> list[float]:
        out = [self.t, *(getattr(self.state, k) for k in STATE_NAMES)]
        out += [self.flows_0d[p] for p in PORTS]
        out += list(dataclasses.astuple(self.interface))
        for tag in tag_order:
            out += list(self.tags[tag])
        out += [float(self.valves[v]) for v in valve_order]
        return out


@dataclass
class CoupledState:
    step: int
    t: float
    u: np.ndarray
    p: np.ndarray
    circulation: CirculationState
    flows_0d: dict[str, float]
    valves: dict[str, bool]


@dataclass
class CoupledResult:
    records: list[CoupledRecord]
    columns: tuple[str, ...]
    mesh: Mesh
    u: np.ndarray
    p: np.ndarray

    def table(self) -> np.ndarray:
        tags = [c[len("p_3D_"):] for c in self.columns if c.startswith("p_3D_")]
        valves = [c[len("valve_"):] for c in self.columns if c.startswith("valve_")]
        return np.array([r.row(tags, valves) for r in self.records])

    def column(self, name: str) -> np.ndarray:
        return self.table()[:, self.columns.index(name)]

    def to_csv(self, path) -> None:
        write_csv(path, self.columns, self.table())


class CoupledSimulation:
    """Holds the submodules and advances the coupled state one step at a time."""

    def __init__(self, config: CoupledConfig):
        self.config = cfg = config
        mesh = cfg.mesh
        self.reference = mesh
        self.timeline = cfg.timeline or StaticTimeline(mesh.num_vertices, mesh.dim)
        self.riis = RIISOperator(mesh, cfg.valves) if cfg.valves else None
        self.solver = FluidSolver(cfg.fluid, cfg.stabilization, method=cfg.solver_method)
        self.phase_log: list[tuple[int, str]] = []
        self.tag_order = list(cfg.interface) + list(cfg.constant_pressure)
        self.valve_order = [v.name for v in cfg.valves]
        circ = cfg.state0 or initial_state("cfd", cfg.t0)
        circ = dataclasses.replace(circ, t=cfg.t0)
        flows = self._surrogates(cfg.t0)
        if not circ.history:
            # primed with zero 3D flows at rest
            circ = circ.primed(cfg.dt, flows)
        self.state = CoupledState(
            step=0, t=cfg.t0,
            u=np.zeros((mesh.num_vertices, mesh.dim)), p=np.zeros(mesh.num_vertices),
            circulation=circ, flows_0d=flows,
            valves={v.name: valve_state_at(v, cfg.t0, cfg.period) for v in cfg.valves},
        )
        self.mesh = mesh.moved(self.timeline.evaluate(cfg.t0))

    @property
    def columns(self) -> tuple[str, ...]:
        cols = ["t", *STATE_NAMES, *PORTS,
                *(f.name for f in dataclasses.fields(InterfaceData))]
        for tag in self.tag_order:
            cols += [f"p_3D_{tag}", f"Q_3D_{tag}"]
        cols += [f"valve_{v}" for v in self.valve_order]
        return tuple(cols)

    def _surrogates(self, t: float) -> dict[str, float]:
        mapped = {PORT_FLOW[p][0] for p in self.config.interface.values()}
        out = {}
        for port in PORTS:
            if port in mapped:
                out[port] = 0.0
                continue
            value = self.config.surrogate_flows.get(port, 0.0)
            out[port] = float(value(t)) if callable(value) else float(value)
        return out

    def _phase(self, name: str, fn):
        self.phase_log.append((self.state.step + 1, name))
        try:
            return fn()
        except Exception as exc:
            raise CouplingError(self.state.step + 1, name, exc) from exc

    def flux_scale(self) -> float:
        """m^3/s per unit of the mesh flux (depth in 2D)."""
        return self.config.depth if self.mesh.dim == 2 else 1.0

    def advance(self) -> CoupledRecord:
        cfg, st = self.config, self.state
        dt = cfg.dt
        t_new = cfg.t0 + (st.step + 1) * dt

        def update_valves():
            states = {v.name: valve_state_at(v, t_new, cfg.period) for v in cfg.valves}
            if self.riis is not None:
                self.riis.refresh(states)  # distances for a new state are computed here
            return states

        valves = self._phase("update_valves", update_valves)

        def move():
            u_ale = ale_velocity(self.timeline, t_new, dt)
            mesh = self.reference.moved(self.timeline.evaluate(t_new))
            return u_ale, mesh

        u_ale, mesh = self._phase("ale_velocity", move)
        circ = self._phase("solve_circulation", lambda: step_imex(st.circulation, cfg.params, st.flows_0d, dt))

        def to_3d():
            data = interface_pressures(circ, cfg.params, dt)
            neumann = {tag: data.pressure(port) * MMHG_TO_PA for tag, port in cfg.interface.items()}
            neumann.update({tag: float(p) for tag, p in cfg.constant_pressure.items()})
            return data, neumann

        data, neumann = self._phase("interface_0d_to_3d", to_3d)

        def fluid():
            riis = self.riis.assemble(mesh, valves) if self.riis is not None else None
            forcing = self.riis.target_forcing(mesh, valves) if self.riis is not None else None
            inp = FluidStepInputs(
                mesh=mesh, u_prev=st.u, u_ale=u_ale, dt=dt, neumann=neumann,
                dirichlet={t: None for t in cfg.wall_tags}, riis=riis, riis_forcing=forcing,
            )
            return self.solver.step(inp)

        res = self._phase("solve_fluid", fluid)

        def to_0d():
            u_f, u_a, p_f = Field.vector(mesh, res.u), Field.vector(mesh, u_ale), Field.scalar(mesh, res.p)
            tags = {}
            for tag in self.tag_order:
                q = boundary_integral_flux(u_f, u_a, tag) * self.flux_scale()
                tags[tag] = (boundary_mean_pressure(p_f, tag), q)
            flows = self._surrogates(t_new)
            for tag, port in cfg.interface.items():
                name, sign = PORT_FLOW[port]
                flows[name] = sign * tags[tag][1] * M3_TO_ML
            return tags, flows

        tags, flows = self._phase("interface_3d_to_0d", to_0d)
        for tag, port in cfg.interface.items():
            name, sign = PORT_FLOW[port]
            assert flows[name] == sign * tags[tag][1] * M3_TO_ML
            assert neumann[tag] == data.pressure(port) * MMHG_TO_PA

        self.mesh = mesh
        self.state = CoupledState(st.step + 1, t_new, res.u, res.p, circ, flows, valves)
        return CoupledRecord(st.step + 1, t_new, data, tags, circ, dict(flows), dict(valves))

    # -- restart snapshots ---------------------------------------------------
    def save_snapshot(self, path) -> None:
        st = self.state
        circ = st.circulation
        payload = dict(
            step=st.step, t=st.t, u=st.u, p=st.p,
            circ=np.array([circ.t, *circ.ode_vector]),
            history_times=np.array(circ.history_times),
            history=np.array([circ.history.get(p, ()) for p in PORTS], dtype=float).reshape(len(PORTS), -1),
            flows=np.array([st.flows_0d[p] for p in PORTS]),
        )

        def write(tmp):
            with open(tmp, "wb") as fh:
                np.savez(fh, **payload)

        atomic_write(path, write)

    def load_snapshot(self, path) -> None:
        with np.load(path) as z:
            c = z["circ"]
            circ = CirculationState(
                float(c[0]), *map(float, c[1:]),
                history_times=tuple(map(float, z["history_times"])),
                history={p: tuple(map(float, row)) for p, row in zip(PORTS, z["history"])},
            )
            step, t = int(z["step"]), float(z["t"])
            self.state = CoupledState(
                step=step, t=t, u=z["u"].copy(), p=z["p"].copy(), circulation=circ,
                flows_0d={p: float(v) for p, v in zip(PORTS, z["flows"])},
                valves={v.name: valve_state_at(v, t, self.config.period) for v in self.config.valves},
            )
        self.mesh = self.reference.moved(self.timeline.evaluate(self.state.t))

    def run(self, steps: int | None = None) -> CoupledResult:
        cfg = self.config
        steps = cfg.num_steps - self.state.step if steps is None else steps
        records = []
        per_beat = cfg.period / cfg.dt
        for _ in range(steps):
            rec = self.advance()
            n = rec.step
            if n % cfg.output_stride == 0:
                records.append(rec)
            if cfg.snapshot_dir is not None:
                beat_end = abs(n / per_beat - round(n / per_beat)) < 1e-9 and n > 0
                if beat_end or n == cfg.num_steps:
                    self.save_snapshot(cfg.snapshot_dir / "restart.npz")
                    if beat_end:
                        self.save_snapshot(cfg.snapshot_dir / f"restart_beat{int(round(n / per_beat)):03d}.npz")
                if cfg.vtk_stride and n % cfg.vtk_stride == 0:
                    write_vtk(cfg.snapshot_dir / f"snapshot_{n:06d}.vtk", self.mesh,
                              {"u": self.state.u, "p": self.state.p}, time=self.state.t)
        return CoupledResult(records, self.columns, self.mesh, self.state.u, self.state.p)


def advance(sim: CoupledSimulation) -> CoupledRecord:
    return sim.advance()


def run(config: CoupledConfig) -> CoupledResult:
    return CoupledSimulation(config).run()


def beat_window(records, beat: int, period: float, t0: float = 0.0):
    """Records whose time falls in ``(t0 + beat*period, t0 + (beat+1)*period]``."""
    lo, hi = t0 + beat * period, t0 + (beat + 1) * period
    eps = 1e-9 * period
    return [r for r in records if lo + eps < r.t <= hi + eps]


def volume_from_mesh(mesh: Mesh, depth: float = 1.0) -> float:
    """Chamber volume (m^3) of the current configuration."""
    return mesh.volume() * (depth if mesh.dim == 2 else 1.0)

