"""Resistive immersed implicit surfaces: distance queries, the smoothed delta,
the lumped penalty operator and the timed open/close valve logic."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .fem import SparseOperator, quadrature
from .geometry import closest_facet_query, facet_normals_of
from .mesh import Mesh

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Surface:
    """Segment soup (2D) or triangle soup (3D), shape ``(m, dim, dim)``."""

    simplices: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.simplices, dtype=float)
        if s.ndim != 3 or s.shape[1] != s.shape[2] or s.shape[1] not in (2, 3):
            raise ValueError("surface must be an (m, dim, dim) array of segments or triangles")
        if s.shape[0] == 0:
            raise ValueError("empty surface")
        if not np.all(np.isfinite(s)):
            raise ValueError("non-finite surface coordinates")
        facet_normals_of(s)  # rejects degenerate facets
        object.__setattr__(self, "simplices", s)

    @property
    def dim(self) -> int:
        return self.simplices.shape[1]

    @property
    def normals(self) -> np.ndarray:
        return facet_normals_of(self.simplices)

    def area(self) -> float:
        s = self.simplices
        if self.dim == 2:
            return float(np.linalg.norm(s[:, 1] - s[:, 0], axis=1).sum())
        return float(0.5 * np.linalg.norm(np.cross(s[:, 1] - s[:, 0], s[:, 2] - s[:, 0]), axis=1).sum())

    @classmethod
    def polyline(cls, points, closed: bool = False) -> "Surface":
        """Chain of 2D segments through ``points``."""
        p = np.asarray(points, dtype=float)
        if closed:
            p = np.vstack([p, p[:1]])
        return cls(np.stack([p[:-1], p[1:]], axis=1))

    @classmethod
    def segment(cls, a, b, pieces: int = 1) -> "Surface":
        a, b = np.asarray(a, float), np.asarray(b, float)
        s = np.linspace(0.0, 1.0, pieces + 1)[:, None]
        return cls.polyline(a + s * (b - a))


def signed_distance(surface: Surface, x: np.ndarray) -> np.ndarray:
    """Distance to the surface, positive on the side its normals point to."""
    dist, _, _, offset = closest_facet_query(x, surface.simplices)
    sign = np.where(offset < 0, -1.0, 1.0)
    return sign * dist


def smoothed_delta(phi, eps: float):
    """Cosine kernel ``(1 + cos(pi phi / eps)) / (2 eps)`` supported on ``|phi| <= eps``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    phi = np.asarray(phi, dtype=float)
    inside = np.abs(phi) <= eps
    return np.where(inside, (1.0 + np.cos(np.pi * np.clip(phi, -eps, eps) / eps)) / (2.0 * eps), 0.0)


# --------------------------------------------------------------------------
# valves

ZYGOTE_VALVES = {
    # name: (open s, close s, R kg/(m s), eps m)
    "MV": (0.710, 0.208, 1e4, 0.68e-3),
    "AV": (0.262, 0.666, 1e4, 0.67e-3),
    "TV": (0.700, 0.194, 1e4, 0.77e-3),
    "PV": (0.279, 0.677, 1e4, 0.52e-3),
}
PRESETS = {"zygote-times": ZYGOTE_VALVES}


@dataclass(frozen=True, eq=False)
class ValveSpec:
    name: str
    R: float
    eps: float
    open_time: float
    close_time: float
    closed_surface: Surface
    open_surface: Surface | None = None
    leaflet_velocity: np.ndarray | None = None  # constant u_Sigma; zero when None

    def __post_init__(self):
        if not self.R > 0:
            raise ValueError(f"{self.name}: R must be positive")
        if not self.eps > 0:
            raise ValueError(f"{self.name}: eps must be positive")
        if self.open_time == self.close_time:
            raise ValueError(f"{self.name}: open and close times coincide")

    def surface(self, is_open: bool) -> Surface | None:
        return self.open_surface if is_open else self.closed_surface

    @classmethod
    def from_preset(cls, name: str, closed_surface: Surface, open_surface: Surface | None = None,
                    preset: str = "zygote-times", **overrides) -> "ValveSpec":
        open_t, close_t, R, eps = PRESETS[preset][name]
        kw = dict(R=R, eps=eps, open_time=open_t, close_time=close_t)
        kw.update(overrides)
        return cls(name=name, closed_surface=closed_surface, open_surface=open_surface, **kw)


def valve_state_at(spec: ValveSpec, t: float, period: float) -> bool:
    """Open flag from the timing table, on half-open intervals."""
    if not period > 0:
        raise ValueError("period must be positive")
    if not (0 <= spec.open_time < period and 0 <= spec.close_time < period):
        raise ValueError(f"{spec.name}: valve times must lie in [0, period)")
    tau = float(np.mod(t, period))
    if spec.open_time < spec.close_time:
        return spec.open_time <= tau < spec.close_time
    return tau >= spec.open_time or tau < spec.close_time


@dataclass(frozen=True)
class ValveState:
    name: str
    is_open: bool
    surface: Surface | None = field(repr=False, default=None)


def valve_states(valves, t: float, period: float) -> dict[str, ValveState]:
    return {
        v.name: ValveState(v.name, valve_state_at(v, t, period), v.surface(valve_state_at(v, t, period)))
        for v in valves
    }


class RIISOperator:
    """Lumped penalty mass ``sum_k R_k/eps_k * delta(phi_k)`` for a fixed-topology mesh.

    Distances are measured in the reference configuration, so immersed
    surfaces ride along with the mesh motion. They are cached per valve state
    and only recomputed on the first use of a state. The operator acts on
    component-major vector DOFs ``[u_x..., u_y..., (u_z...)]``.
    """

    degree = 5

    def __init__(self, reference: Mesh, valves, check_resolution: bool = True):
        self.reference = reference
        self.valves = list(valves)
        names = [v.name for v in self.valves]
        if len(set(names)) != len(names):
            raise ValueError("valve names must be unique")
        self.bary, self.weights = quadrature(reference.dim, self.degree)
        self._cache: dict[tuple[str, bool], tuple[np.ndarray, np.ndarray]] = {}
        self.distance_evaluations = 0
        self.check_resolution = check_resolution

    def _band(self, valve: ValveSpec, is_open: bool):
        """Cells touching the band and their per-quadrature-point deltas."""
        key = (valve.name, is_open)
        if key in self._cache:
            return self._cache[key]
        surf = valve.surface(is_open)
        mesh = self.reference
        if surf is None:
            band = (np.zeros(0, dtype=np.int64), np.zeros((0, len(self.weights))))
            self._cache[key] = band
            return band
        if surf.dim != mesh.dim:
            raise ValueError(f"{valve.name}: surface dimension differs from mesh")
        # cheap pre-filter on vertex distances: a cell can reach the band only if
        # one of its vertices lies within eps + h of the surface
        vdist = closest_facet_query(mesh.vertices, surf.simplices)[0]
        reach = vdist[mesh.cells].min(axis=1) <= valve.eps + mesh.cell_sizes
        cells = np.flatnonzero(reach)
        x = np.einsum("qa,cad->cqd", self.bary, mesh.vertices[mesh.cells[cells]])
        phi = closest_facet_query(x.reshape(-1, mesh.dim), surf.simplices)[0].reshape(len(cells), -1)
        self.distance_evaluations += 1
        delta = smoothed_delta(phi, valve.eps)
        hit = np.any(delta > 0, axis=1)
        cells, delta = cells[hit], delta[hit]
        if self.check_resolution and len(cells):
            h_min = mesh.cell_sizes[cells].min()
            if valve.eps < 1.5 * h_min:
                warnings.warn(
                    f"{valve.name}: eps = {valve.eps:.3g} m is below 1.5 x local mesh size "
                    f"{h_min:.3g} m; the band is under-resolved",
                    RuntimeWarning, stacklevel=3,
                )
        self._cache[key] = (cells, delta)
        return cells, delta

    def refresh(self, states: Mapping[str, bool]) -> None:
        """Make sure distances for the given states are cached."""
        for v in self.valves:
            self._band(v, bool(states[v.name]))

    def _check_topology(self, mesh: Mesh) -> None:
        if mesh.num_vertices != self.reference.num_vertices or mesh.cells.shape != self.reference.cells.shape:
            raise ValueError("mesh topology differs from the reference configuration")

    def _valve_weights(self, mesh: Mesh, valve: ValveSpec, is_open: bool) -> np.ndarray:
        """Row sums of one valve's consistent weighted mass matrix on ``mesh``."""
        diag = np.zeros(mesh.num_vertices)
        cells, delta = self._band(valve, is_open)
        if len(cells):
            # integral of the coefficient times lambda_a over each cell
            local = (valve.R / valve.eps) * mesh.cell_volumes[cells, None] * np.einsum(
                "q,cq,qa->ca", self.weights, delta, self.bary)
            for a in range(mesh.dim + 1):
                np.add.at(diag, mesh.cells[cells, a], local[:, a])
        return diag

    def nodal_weights(self, mesh: Mesh, states: Mapping[str, bool]) -> np.ndarray:
        self._check_topology(mesh)
        diag = np.zeros(mesh.num_vertices)
        for v in self.valves:
            diag += self._valve_weights(mesh, v, bool(states[v.name]))
        return diag

    def assemble(self, mesh: Mesh, states: Mapping[str, bool]) -> SparseOperator:
        diag = np.tile(self.nodal_weights(mesh, states), mesh.dim)
        return SparseOperator(sp.diags(diag).tocsr(), symmetric=True)

    def target_forcing(self, mesh: Mesh, states: Mapping[str, bool]) -> np.ndarray | None:
        """``M_R u_Sigma`` for valves with a prescribed leaflet velocity (component-major)."""
        moving = [v for v in self.valves if v.leaflet_velocity is not None]
        if not moving:
            return None
        self._check_topology(mesh)
        out = np.zeros((mesh.dim, mesh.num_vertices))
        for v in moving:
            w = self._valve_weights(mesh, v, bool(states[v.name]))
            out += np.outer(np.asarray(v.leaflet_velocity, float), w)
        return out.reshape(-1)


def assemble_riis_operator(mesh: Mesh, valves, states: Mapping[str, bool] | None = None,
                           t: float | None = None, period: float | None = None) -> SparseOperator:
    """One-shot RIIS operator; states come from ``states`` or from the timing rule at ``t``."""
    valves = list(valves)
    if states is None:
        if not valves:
            states = {}
        elif t is None or period is None:
            raise ValueError("either states or (t, period) are required")
        else:
            states = {v.name: valve_state_at(v, t, period) for v in valves}
    return RIISOperator(mesh, valves).assemble(mesh, states)
