"""Reference flows with known answers, shared by the test suite and the docs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import boundary_integral_flux
from .fluid import FluidProperties, FluidSolver, FluidStepInputs, StabilizationOptions, energy_report
from .mesh import Field, Mesh, generate_box_mesh
from .riis import RIISOperator, Surface, ValveSpec


def march_to_steady(solver: FluidSolver, make_inputs, u0: np.ndarray, tol: float, max_steps: int):
    """Repeat a step until the largest nodal change drops below ``tol``."""
    u = u0
    for n in range(1, max_steps + 1):
        res = solver.step(make_inputs(u))
        change = float(np.abs(res.u - u).max())
        u = res.u
        if change < tol:
            return res, n
    raise RuntimeError(f"no steady state after {max_steps} steps (last change {change:.3g})")


@dataclass(frozen=True)
class PoiseuilleResult:
    peak: float
    oracle: float
    steps: int
    mesh: Mesh
    u: np.ndarray
    p: np.ndarray

    @property
    def rel_error(self) -> float:
        return self.peak / self.oracle - 1.0


def poiseuille(nx: int = 64, ny: int = 16, length: float = 0.08, height: float = 0.01,
               u_max: float = 1e-3, props: FluidProperties | None = None,
               options: StabilizationOptions | None = None, dt: float = 0.5) -> PoiseuilleResult:
    """Pressure-driven channel: traction inlet and outlet, no-slip walls.

    The pressure drop is set so the analytic peak ``dp H^2 / (8 mu L)`` equals
    ``u_max``; the measured peak is the largest axial velocity at mid-length.
    """
    props = props or FluidProperties()
    mesh = generate_box_mesh(2, [length, height], [nx, ny])
    dp = 8.0 * props.mu * length * u_max / height**2
    solver = FluidSolver(props, options)

    def inputs(u):
        return FluidStepInputs(mesh, u, None, dt, neumann={"x0": dp, "x1": 0.0},
                               dirichlet={"y0": 0.0, "y1": 0.0})

    res, n = march_to_steady(solver, inputs, np.zeros((mesh.num_vertices, 2)), 1e-10 * u_max, 2000)
    mid = np.isclose(mesh.vertices[:, 0], 0.5 * length)
    oracle = dp * height**2 / (8.0 * props.mu * length)
    return PoiseuilleResult(float(res.u[mid, 0].max()), oracle, n, mesh, res.u, res.p)


def backflow_vortex(beta: float, steps: int = 500, dt: float = 1e-3, nx: int = 32, ny: int = 16,
                    length: float = 0.02, height: float = 0.01, speed: float = 1.0,
                    radius: float = 0.003) -> np.ndarray:
    """Kinetic energy history of a vortex sitting on a traction outlet.

    Walls ``x0``, ``y0``, ``y1`` are no-slip; ``x1`` is a zero-pressure
    Neumann boundary. The vortex, centred on the outlet, pushes fluid back in
    through half of it, the configuration where the convective boundary flux
    feeds energy into the domain unless the backflow term removes it.
    """
    mesh = generate_box_mesh(2, [length, height], [nx, ny])
    dx = mesh.vertices[:, 0] - length
    dy = mesh.vertices[:, 1] - 0.5 * height
    w = speed / radius * np.exp(0.5 * (1.0 - (dx**2 + dy**2) / radius**2))
    u = np.stack([-w * dy, w * dx], axis=1)
    walls = ("x0", "y0", "y1")
    u[np.unique(np.concatenate([mesh.tag_vertices(t) for t in walls]))] = 0.0
    props = FluidProperties()
    solver = FluidSolver(props, StabilizationOptions(backflow_beta=beta))
    ke = [energy_report(mesh, u, None, props.rho, tags=[]).kinetic]
    for _ in range(steps):
        res = solver.step(FluidStepInputs(mesh, u, None, dt, neumann={"x1": 0.0},
                                          dirichlet={t: None for t in walls}))
        u = res.u
        ke.append(energy_report(mesh, u, None, props.rho, tags=[]).kinetic)
        if not np.isfinite(ke[-1]):
            break
    return np.array(ke)


@dataclass(frozen=True)
class LeakageResult:
    q_open: float
    q_closed: float

    @property
    def ratio(self) -> float:
        return abs(self.q_closed) / abs(self.q_open)


def riis_leakage(nx: int = 64, ny: int = 16, length: float = 0.02, height: float = 0.005,
                 dp: float = 2.0, R: float = 1e4, eps: float = 0.68e-3, dt: float = 0.05) -> LeakageResult:
    """Steady outlet flux through a channel with an immersed valve, open and closed.

    Closed: a cut across the full height at mid-length. Open: two short
    wall-parallel leaflets near the walls, the way an open valve leaves the
    lumen clear.
    """
    mesh = generate_box_mesh(2, [length, height], [nx, ny])
    x0 = 0.5 * length
    closed = Surface.segment([x0, -0.1 * height], [x0, 1.1 * height], 8)
    g = 0.1 * height
    opened = Surface(np.concatenate([
        Surface.segment([x0, g], [x0 + 0.4 * height, g], 4).simplices,
        Surface.segment([x0, height - g], [x0 + 0.4 * height, height - g], 4).simplices,
    ]))
    valve = ValveSpec("AV", R, eps, 0.262, 0.666, closed_surface=closed, open_surface=opened)
    op = RIISOperator(mesh, [valve])
    solver = FluidSolver()
    fluxes = {}
    for is_open in (True, False):
        M = op.assemble(mesh, {"AV": is_open})

        def inputs(u):
            return FluidStepInputs(mesh, u, None, dt, neumann={"x0": dp, "x1": 0.0},
                                   dirichlet={"y0": 0.0, "y1": 0.0}, riis=M)

        res, _ = march_to_steady(solver, inputs, np.zeros((mesh.num_vertices, 2)), 1e-12, 2000)
        fluxes[is_open] = boundary_integral_flux(Field.vector(mesh, res.u), None, "x1")
    return LeakageResult(fluxes[True], fluxes[False])
