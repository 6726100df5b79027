"""Stabilized P1-P1 Navier-Stokes in ALE form with immersed resistive valves,
Neumann coupling pressures and inertial backflow stabilization (BDF1,
semi-implicit convection)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .fem import NonConvergence, SparseOperator, chunked, solve_linear
from .mesh import Field, Mesh

log = logging.getLogger(__name__)


class FluidSolveError(RuntimeError):
    """Linear-solve failure or non-finite result, with the offending term named."""


@dataclass(frozen=True)
class FluidProperties:
    rho: float = 1.06e3
    mu: float = 3.5e-3

    def __post_init__(self):
        if not (self.rho > 0 and self.mu > 0):
            raise ValueError("density and viscosity must be positive")


@dataclass(frozen=True)
class StabilizationOptions:
    sigma_t: float = 4.0
    c_inv: float = 36.0
    c_div: float | None = None  # defaults to 4 * dim
    backflow_beta: float = 1.0
    viscous_form: str = "symmetric"  # or "laplacian"
    supg: bool = True
    pspg: bool = True
    grad_div: bool = True

    def __post_init__(self):
        if self.viscous_form not in ("symmetric", "laplacian"):
            raise ValueError("viscous_form must be 'symmetric' or 'laplacian'")
        if self.sigma_t <= 0 or self.c_inv <= 0 or self.backflow_beta < 0:
            raise ValueError("stabilization constants must be positive")


DirichletValue = "np.ndarray | Callable[[np.ndarray], np.ndarray] | None"


@dataclass(eq=False)
class FluidStepInputs:
    """Everything one step needs.

    ``mesh`` is the configuration at the new time level. ``u_prev`` and
    ``u_ale`` are nodal ``(num_vertices, dim)`` arrays (or vector fields).
    ``neumann`` maps tags to a mean pressure in Pa; ``dirichlet`` maps tags to a
    velocity (``None`` means the wall follows the mesh, ``u = u_ale``).
    """

    mesh: Mesh
    u_prev: np.ndarray
    u_ale: np.ndarray | None
    dt: float
    neumann: Mapping[str, float] = field(default_factory=dict)
    dirichlet: Mapping[str, DirichletValue] = field(default_factory=dict)
    riis: SparseOperator | None = None
    riis_forcing: np.ndarray | None = None

    def __post_init__(self):
        m = self.mesh
        shape = (m.num_vertices, m.dim)

        def arr(x, what):
            a = np.asarray(x.values if isinstance(x, Field) else x, dtype=float)
            if a.shape != shape:
                raise ValueError(f"{what} must have shape {shape}, got {a.shape}")
            return a

        self.u_prev = arr(self.u_prev, "u_prev")
        self.u_ale = np.zeros(shape) if self.u_ale is None else arr(self.u_ale, "u_ale")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        both = set(self.neumann) & set(self.dirichlet)
        if both:
            raise ValueError(f"tags with two conditions: {sorted(both)}")
        tags = set(m.tags)
        given = set(self.neumann) | set(self.dirichlet)
        if given - tags:
            raise ValueError(f"unknown boundary tags: {sorted(given - tags)}")
        if tags - given:
            raise ValueError(f"boundary tags without a condition: {sorted(tags - given)}")
        if self.riis is not None and self.riis.shape != (m.dim * m.num_vertices,) * 2:
            raise ValueError("RIIS operator does not match the velocity space")


@dataclass
class FluidStepResult:
    u: np.ndarray
    p: np.ndarray
    cfl: float
    residual: float

    def velocity(self, mesh: Mesh) -> Field:
        return Field.vector(mesh, self.u)

    def pressure(self, mesh: Mesh) -> Field:
        return Field.scalar(mesh, self.p)


def stabilization_parameters(mesh: Mesh, u_conv: np.ndarray, dt: float, props: FluidProperties,
                             options: StabilizationOptions | None = None,
                             sigma: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell ``tau_M`` and ``tau_C``.

    ``tau_M = (sigma_t (rho/dt)^2 + (2 rho |a|/h)^2 + (C_inv mu / h^2)^2 + sigma^2)^(-1/2)``
    with ``a`` the cell-mean convective velocity, ``h`` the longest edge and
    ``sigma`` an optional per-cell reaction coefficient. ``tau_C = h^2 / (c_div tau_M)``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    opt = options or StabilizationOptions()
    h = mesh.cell_sizes
    a = np.asarray(u_conv, dtype=float).reshape(mesh.num_vertices, mesh.dim)[mesh.cells].mean(axis=1)
    speed = np.linalg.norm(a, axis=1)
    rho, mu = props.rho, props.mu
    inv2 = opt.sigma_t * (rho / dt) ** 2 + (2 * rho * speed / h) ** 2 + (opt.c_inv * mu / h**2) ** 2
    if sigma is not None:
        inv2 = inv2 + np.asarray(sigma, dtype=float) ** 2
    tau_m = 1.0 / np.sqrt(inv2)
    c_div = opt.c_div if opt.c_div is not None else 4.0 * mesh.dim
    tau_c = h**2 / (c_div * tau_m)
    return tau_m, tau_c


def _cell_mean(values: np.ndarray, cells: np.ndarray) -> np.ndarray:
    return values[cells].mean(axis=1)


class FluidSolver:
    """Assembles and solves one linear system per time step.

    Unknowns are ordered component-major: ``[u_x, u_y, (u_z), p]``, each a
    block of nodal values. ``solve_count`` counts linear solves.
    """

    def __init__(self, props: FluidProperties | None = None, options: StabilizationOptions | None = None,
                 method: str = "direct", rel_tol: float = 1e-10):
        self.props = props or FluidProperties()
        self.options = options or StabilizationOptions()
        self.method = method
        self.rel_tol = rel_tol
        self.solve_count = 0
        self._cfl_warned = False

    # -- assembly ----------------------------------------------------------
    def assemble(self, inp: FluidStepInputs) -> tuple[sp.csr_matrix, np.ndarray, float]:
        mesh, dt = inp.mesh, inp.dt
        rho, mu = self.props.rho, self.props.mu
        opt = self.options
        nv, d = mesh.num_vertices, mesh.dim
        k = d + 1
        N = (d + 1) * nv
        conv = inp.u_prev - inp.u_ale

        riis_diag = None
        sigma_cell = None
        if inp.riis is not None:
            riis_diag = inp.riis.matrix.diagonal()[:nv]
            density = riis_diag / mesh.lumped_volumes
            sigma_cell = _cell_mean(density, mesh.cells)
        tau_m, tau_c = stabilization_parameters(mesh, conv, dt, self.props, opt, sigma_cell)
        if not opt.supg and not opt.pspg:
            tau_m = np.zeros_like(tau_m)
        if not opt.grad_div:
            tau_c = np.zeros_like(tau_c)
        cfl = float(np.max(np.linalg.norm(_cell_mean(conv, mesh.cells), axis=1) * dt / mesh.cell_sizes))
        if cfl > 1.0:
            # advisory: warn once per solver, keep the rest at debug level
            (log.debug if self._cfl_warned else log.warning)("CFL number %.2f exceeds 1 (advisory only)", cfl)
            self._cfl_warned = True

        mref = (np.ones((k, k)) + np.eye(k)) / (k * (k + 1))
        target = inp.u_ale
        sig = np.zeros(mesh.num_cells) if sigma_cell is None else sigma_cell

        def local(sl: slice):
            cells = mesh.cells[sl]
            vol = mesh.cell_volumes[sl]
            G = mesh.cell_gradients[sl]                     # (c, k, d)
            a_nodes = conv[cells]                             # (c, k, d)
            a_k = a_nodes.mean(axis=1)                        # (c, d)
            tm, tc, sg = tau_m[sl], tau_c[sl], sig[sl]
            # Galerkin convection, exact for linear a: sum_j M_bj a_j . grad(phi_c)
            abar = np.einsum("bj,cjd->cbd", mref, a_nodes)
            convm = rho * vol[:, None, None] * np.einsum("cbd,ced->cbe", abar, G)
            mass = vol[:, None, None] * mref[None]
            lap = mu * vol[:, None, None] * np.einsum("cbd,ced->cbe", G, G)
            adv = np.einsum("cd,cbd->cb", a_k, G)            # a_K . grad(phi_b)
            react = (rho / dt + sg)[:, None]
            supg_test = tm[:, None] * rho * adv if opt.supg else np.zeros_like(adv)
            pspg = opt.pspg
            diag_block = rho / dt * mass + convm + lap
            # SUPG on the velocity trial part of the residual
            trial = vol[:, None] * (react / k + rho * adv)  # (c, k) integral of the residual operator per trial node
            diag_block = diag_block + supg_test[:, :, None] * trial[:, None, :]

            blocks = {}
            for al in range(d):
                for be in range(d):
                    m = np.zeros((len(vol), k, k))
                    if al == be:
                        m += diag_block
                    if opt.viscous_form == "symmetric":
                        m += mu * vol[:, None, None] * G[:, None, :, al] * G[:, :, None, be]
                    m += (tc * vol)[:, None, None] * G[:, :, None, al] * G[:, None, :, be]
                    blocks[(al, be)] = m
                # pressure in momentum: -int p div v, plus SUPG grad p
                m = -(vol / k)[:, None, None] * G[:, :, None, al] * np.ones((1, 1, k))
                m = m + supg_test[:, :, None] * (vol[:, None] * G[:, :, al])[:, None, :]
                blocks[(al, d)] = m
                # continuity: int q div u, plus PSPG on the velocity part
                m = (vol / k)[:, None, None] * np.ones((1, k, 1)) * G[:, None, :, al]
                if pspg:
                    m = m + (tm * 1.0)[:, None, None] * G[:, :, None, al] * trial[:, None, :]
                blocks[(d, al)] = m
            if pspg:
                blocks[(d, d)] = (tm * vol)[:, None, None] * np.einsum("cbd,ced->cbe", G, G)

            # right-hand side contributions
            un_mean = inp.u_prev[cells].mean(axis=1)
            tg_mean = target[cells].mean(axis=1)
            rhs_res = vol[:, None] * (rho / dt * un_mean + sg[:, None] * tg_mean)   # (c, d)
            rhs = np.zeros((len(vol), d + 1, k))
            for al in range(d):
                rhs[:, al] = rho / dt * np.einsum("cbe,ce->cb", mass, inp.u_prev[cells][:, :, al])
                rhs[:, al] += supg_test * rhs_res[:, al:al + 1]
            if pspg:
                rhs[:, d] = tm[:, None] * np.einsum("cbd,cd->cb", G, rhs_res)
            return blocks, rhs

        parts = chunked(local, mesh.num_cells)
        rows, cols, vals = [], [], []
        b = np.zeros(N)
        start = 0
        for blocks, rhs in parts:
            cells = mesh.cells[start:start + len(rhs)]
            start += len(rhs)
            for (al, be), m in blocks.items():
                rows.append((al * nv + np.repeat(cells, k, axis=1)).reshape(-1))
                cols.append((be * nv + np.tile(cells, (1, k))).reshape(-1))
                vals.append(m.reshape(-1))
            for al in range(d + 1):
                np.add.at(b, al * nv + cells.reshape(-1), rhs[:, al].reshape(-1))
        A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(N, N)).tocsr()

        # immersed resistive surfaces (lumped, acts on velocity components)
        if inp.riis is not None:
            R = sp.block_diag([inp.riis.matrix, sp.csr_matrix((nv, nv))]).tocsr()
            A = A + R
            b[: d * nv] += inp.riis.matrix @ target.T.reshape(-1)
            if inp.riis_forcing is not None:
                b[: d * nv] += inp.riis_forcing

        # Neumann pressures and inertial backflow penalty
        bf_rows, bf_cols, bf_vals = [], [], []
        for tag, pressure in inp.neumann.items():
            facets = mesh.facets(tag)
            normals, areas = mesh.facet_geometry(tag)
            if not np.isfinite(pressure):
                raise FluidSolveError(f"non-finite Neumann pressure on tag {tag!r}")
            for al in range(d):
                np.add.at(b, al * nv + facets.reshape(-1),
                          np.repeat(-pressure * areas * normals[:, al] / d, d))
            if opt.backflow_beta > 0:
                an = np.einsum("fd,fd->f", conv[facets].mean(axis=1), normals)
                coef = 0.5 * rho * opt.backflow_beta * np.abs(np.minimum(an, 0.0)) * areas
                if np.any(coef > 0):
                    fm = (np.ones((d, d)) + np.eye(d)) / (d * (d + 1))
                    loc = coef[:, None, None] * fm[None]
                    for al in range(d):
                        bf_rows.append((al * nv + np.repeat(facets, d, axis=1)).reshape(-1))
                        bf_cols.append((al * nv + np.tile(facets, (1, d))).reshape(-1))
                        bf_vals.append(loc.reshape(-1))
        if bf_rows:
            A = A + sp.coo_matrix((np.concatenate(bf_vals), (np.concatenate(bf_rows), np.concatenate(bf_cols))),
                                  shape=(N, N)).tocsr()

        # Dirichlet velocity by row replacement
        dofs, values = self._dirichlet(inp)
        scale = float(np.mean(np.abs(A.diagonal()[: d * nv]))) or 1.0
        if not inp.neumann:
            dofs = np.concatenate([dofs, [d * nv]])
            values = np.concatenate([values, [0.0]])
        keep = np.ones(N)
        keep[dofs] = 0.0
        A = (sp.diags(keep) @ A).tocsr() + sp.csr_matrix((np.full(len(dofs), scale), (dofs, dofs)), shape=(N, N))
        b[dofs] = scale * values
        return A.tocsr(), b, cfl

    def _dirichlet(self, inp: FluidStepInputs) -> tuple[np.ndarray, np.ndarray]:
        mesh = inp.mesh
        nv, d = mesh.num_vertices, mesh.dim
        vel = np.full((nv, d), np.nan)
        for tag, value in inp.dirichlet.items():
            idx = mesh.tag_vertices(tag)
            if value is None:
                vel[idx] = inp.u_ale[idx]
            elif callable(value):
                vel[idx] = np.asarray(value(mesh.vertices[idx]), dtype=float).reshape(len(idx), d)
            else:
                arr = np.asarray(value, dtype=float)
                vel[idx] = arr[idx] if arr.shape == (nv, d) else np.broadcast_to(arr, (len(idx), d))
        nodes = np.flatnonzero(~np.isnan(vel[:, 0]))
        dofs = np.concatenate([al * nv + nodes for al in range(d)])
        values = np.concatenate([vel[nodes, al] for al in range(d)])
        return dofs.astype(np.int64), values

    # -- solve ---------------------------------------------------------------
    def step(self, inp: FluidStepInputs) -> FluidStepResult:
        A, b, cfl = self.assemble(inp)
        if not np.all(np.isfinite(b)):
            raise FluidSolveError(self._blame(inp))
        self.solve_count += 1
        try:
            x = solve_linear(A, b, self.method, self.rel_tol)
        except NonConvergence as exc:
            raise FluidSolveError(f"fluid linear solve failed: {exc}; {self._blame(inp)}") from exc
        if not np.all(np.isfinite(x)):
            raise FluidSolveError(f"non-finite fluid solution; {self._blame(inp)}")
        res = float(np.linalg.norm(b - A @ x) / max(np.linalg.norm(b), 1e-300))
        nv, d = inp.mesh.num_vertices, inp.mesh.dim
        u = x[: d * nv].reshape(d, nv).T.copy()
        p = x[d * nv:].copy()
        return FluidStepResult(u=u, p=p, cfl=cfl, residual=res)

    @staticmethod
    def _blame(inp: FluidStepInputs) -> str:
        if not np.all(np.isfinite(inp.u_prev)):
            return "previous velocity contains NaN/inf"
        if not np.all(np.isfinite(inp.u_ale)):
            return "ALE velocity contains NaN/inf"
        for tag, p in inp.neumann.items():
            if not np.isfinite(p):
                return f"Neumann pressure on {tag!r} is not finite"
        if inp.riis is not None and not np.all(np.isfinite(inp.riis.matrix.data)):
            return "RIIS operator contains NaN/inf"
        return "all inputs finite; system is singular or ill-conditioned"


def fluid_step(inputs: FluidStepInputs, props: FluidProperties | None = None,
               options: StabilizationOptions | None = None, solver: FluidSolver | None = None
               ) -> tuple[Field, Field]:
    """One BDF1 step; returns ``(u, p)`` fields on ``inputs.mesh``."""
    solver = solver or FluidSolver(props, options)
    res = solver.step(inputs)
    return res.velocity(inputs.mesh), res.pressure(inputs.mesh)


@dataclass(frozen=True)
class EnergyReport:
    kinetic: float
    convective_flux: dict[str, float]
    pressure_power: dict[str, float]


def energy_report(mesh: Mesh, u: np.ndarray, p: np.ndarray | None, rho: float,
                  tags=None, u_ale: np.ndarray | None = None) -> EnergyReport:
    """Kinetic energy ``rho/2 int |u|^2`` and per-tag boundary power terms.

    ``convective_flux`` is ``int rho/2 |u|^2 (u - u_ale).n`` and ``pressure_power``
    is ``int p u.n`` over each tag (facet-mean quadrature).
    """
    u = np.asarray(u.values if isinstance(u, Field) else u, dtype=float).reshape(mesh.num_vertices, mesh.dim)
    k = mesh.dim + 1
    mref = (np.ones((k, k)) + np.eye(k)) / (k * (k + 1))
    uc = u[mesh.cells]
    ke = 0.5 * rho * float(np.sum(mesh.cell_volumes * np.einsum("ab,cad,cbd->c", mref, uc, uc)))
    flux, power = {}, {}
    rel = u if u_ale is None else u - np.asarray(u_ale).reshape(u.shape)
    for tag in (mesh.tags if tags is None else tags):
        facets = mesh.facets(tag)
        normals, areas = mesh.facet_geometry(tag)
        un = np.einsum("fd,fd->f", rel[facets].mean(axis=1), normals)
        e = 0.5 * rho * np.sum(u[facets] ** 2, axis=2).mean(axis=1)
        flux[tag] = float(np.sum(areas * e * un))
        if p is not None:
            pv = np.asarray(p.values[:, 0] if isinstance(p, Field) else p)[facets].mean(axis=1)
            power[tag] = float(np.sum(areas * pv * np.einsum("fd,fd->f", u[facets].mean(axis=1), normals)))
    return EnergyReport(ke, flux, power)
