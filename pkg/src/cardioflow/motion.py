"""Fluid-domain motion: stiffened harmonic extension, smoothing-spline bridging
of coarse displacement frames, and the BDF1 mesh velocity."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import assemble_weighted_stiffness, solve_linear
from .geometry import unsigned_distance
from .mesh import Field, Mesh, MeshError


def stiffening_field(mesh: Mesh, alpha: float = 1.0, floor: float = 1.0) -> Field:
    """Inverse-distance stiffening ``max(floor, (1/d)^alpha)``.

    ``d`` is the distance to the boundary, clamped below by the size of the
    smallest cell touching the vertex so boundary vertices stay finite.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if not floor > 0:
        raise ValueError("floor must be positive")
    h = mesh.vertex_sizes
    if np.any(~np.isfinite(h)) or np.any(h <= 0):
        raise MeshError("degenerate mesh: zero-size cells")
    bverts = mesh.vertices[mesh.topological_boundary_facets()]
    dist = unsigned_distance(mesh.vertices, bverts)
    s = np.maximum(floor, (1.0 / np.maximum(dist, h)) ** alpha)
    return Field.scalar(mesh, s)


BoundaryData = Mapping[str, "np.ndarray | Callable[[np.ndarray], np.ndarray] | float"]


class HarmonicExtender:
    """Reusable factorization-free solver for ``-div(s grad d) = 0`` with
    Dirichlet data on the whole boundary.

    The interior block is reduced once; each call only builds a right-hand side.
    """

    def __init__(self, mesh: Mesh, s: Field | np.ndarray | None = None,
                 rel_tol: float = 1e-12, method: str = "cg"):
        self.mesh = mesh
        weight = np.ones(mesh.num_vertices) if s is None else s
        K = assemble_weighted_stiffness(mesh, weight).matrix.tocsr()
        self.boundary = mesh.boundary_vertices()
        mask = np.ones(mesh.num_vertices, dtype=bool)
        mask[self.boundary] = False
        self.interior = np.flatnonzero(mask)
        self.K_II = K[self.interior][:, self.interior].tocsr()
        self.K_IB = K[self.interior][:, self.boundary].tocsr()
        self.rel_tol = rel_tol
        self.method = method

    def boundary_values(self, data: BoundaryData) -> np.ndarray:
        """Nodal Dirichlet array; tags missing from ``data`` are held fixed.

        Data for later tags overrides earlier ones at shared vertices.
        """
        mesh = self.mesh
        out = np.zeros((mesh.num_vertices, mesh.dim))
        unknown = set(data) - set(mesh.tags)
        if unknown:
            raise KeyError(f"unknown boundary tag(s): {sorted(unknown)}")
        for tag, value in data.items():
            idx = mesh.tag_vertices(tag)
            x = mesh.vertices[idx]
            if callable(value):
                vals = np.asarray(value(x), dtype=float).reshape(len(idx), mesh.dim)
            else:
                arr = np.asarray(value, dtype=float)
                if arr.ndim <= 1:
                    vals = np.broadcast_to(arr, (len(idx), mesh.dim))
                elif arr.shape == (mesh.num_vertices, mesh.dim):
                    vals = arr[idx]
                else:
                    raise ValueError(f"boundary data for {tag!r} has shape {arr.shape}")
            out[idx] = vals
        return out

    def __call__(self, data: BoundaryData | np.ndarray) -> Field:
        mesh = self.mesh
        if isinstance(data, np.ndarray):
            nodal = np.asarray(data, dtype=float).reshape(mesh.num_vertices, mesh.dim)
        else:
            nodal = self.boundary_values(data)
        d = np.zeros((mesh.num_vertices, mesh.dim))
        d[self.boundary] = nodal[self.boundary]
        if len(self.interior):
            for c in range(mesh.dim):
                # constants are in the kernel: solving for the deviation from one
                # boundary value keeps constant data exact to the last bit
                shift = d[self.boundary[0], c]
                rhs = -(self.K_IB @ (d[self.boundary, c] - shift))
                d[self.interior, c] = shift + solve_linear(self.K_II, rhs, self.method, self.rel_tol)
        return Field.vector(mesh, d)


def harmonic_extension(mesh: Mesh, s: Field | np.ndarray | None, boundary: BoundaryData,
                       rel_tol: float = 1e-12, method: str = "cg") -> Field:
    """Extend boundary displacement into the domain (one weighted Laplace solve per component)."""
    return HarmonicExtender(mesh, s, rel_tol, method)(boundary)


# --------------------------------------------------------------------------
# temporal smoothing splines


@dataclass(frozen=True)
class DisplacementFrameSet:
    """Displacement snapshots at coarse times.

    ``frames`` has shape ``(N, num_vertices, dim)``; only boundary rows matter
    before extension. With ``period`` set the frames describe one loop and
    must lie inside a single period.
    """

    times: np.ndarray
    frames: np.ndarray
    period: float | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        frames = np.asarray(self.frames, dtype=float)
        if frames.ndim == 2:
            frames = frames[:, :, None]
        if frames.ndim != 3 or frames.shape[0] != times.size:
            raise ValueError("frames must be (N, num_vertices, components) with one time per frame")
        if np.any(np.diff(times) <= 0):
            raise ValueError("frame times must be strictly increasing (no duplicates)")
        if not np.all(np.isfinite(frames)):
            raise ValueError("non-finite displacement frame")
        if self.period is not None:
            span = times[-1] - times[0]
            if np.isclose(span, self.period, rtol=1e-12, atol=1e-12):
                # closing frame repeats the first one
                times, frames = times[:-1], frames[:-1]
            elif span > self.period:
                raise ValueError("periodic frames must fit within one period")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return self.times.size


def _reinsch_matrices(t: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Band matrices ``Q`` (n x n-2) and ``R`` (n-2 x n-2) of a natural cubic spline."""
    n = t.size
    h = np.diff(t)
    j = np.arange(n - 2)
    rows = np.concatenate([j, j + 1, j + 2])
    cols = np.concatenate([j, j, j])
    vals = np.concatenate([1 / h[:-1], -1 / h[:-1] - 1 / h[1:], 1 / h[1:]])
    Q = sp.csr_matrix((vals, (rows, cols)), shape=(n, n - 2))
    R = sp.diags(
        [h[1:-1] / 6, (h[:-1] + h[1:]) / 3, h[1:-1] / 6], [-1, 0, 1], shape=(n - 2, n - 2)
    )
    return Q, sp.csr_matrix(R)


def smoothing_spline(t: np.ndarray, y: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Natural cubic smoothing spline minimizing ``sum (y - g)^2 + lam * int g''^2``.

    Reinsch's algorithm for many right-hand sides at once. Returns the fitted
    knot values ``g`` and second derivatives ``gamma`` (zero at both ends).
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if t.size < 3:
        raise ValueError("at least three knots required")
    if np.any(np.diff(t) <= 0):
        raise ValueError("knot times must be strictly increasing (no duplicates)")
    flat = y.reshape(t.size, -1)
    Q, R = _reinsch_matrices(t)
    A = (R + lam * (Q.T @ Q)).tocsc()
    inner = spla.splu(A).solve(np.ascontiguousarray(Q.T @ flat))
    g = flat - lam * (Q @ inner)
    gamma = np.zeros_like(flat)
    gamma[1:-1] = inner
    return g.reshape(y.shape), gamma.reshape(y.shape)


@dataclass(frozen=True, eq=False)
class DisplacementTimeline:
    """Piecewise-cubic displacement ``d(t)`` stored as knot values and second derivatives."""

    knots: np.ndarray
    values: np.ndarray
    second: np.ndarray
    lam: float
    t_start: float
    t_end: float
    period: float | None = None
    _shape: tuple = field(default=(), repr=False)

    @property
    def shape(self) -> tuple:
        return self._shape

    def _wrap(self, t: np.ndarray) -> np.ndarray:
        if self.period is not None:
            return self.t_start + np.mod(t - self.t_start, self.period)
        slack = 1e-12 * max(1.0, abs(self.t_end))
        if np.any(t < self.t_start - slack) or np.any(t > self.t_end + slack):
            raise ValueError(
                f"time outside timeline range [{self.t_start}, {self.t_end}]; no extrapolation"
            )
        return np.clip(t, self.t_start, self.t_end)

    def evaluate(self, t: float) -> np.ndarray:
        tau = float(self._wrap(np.asarray(t, dtype=float)))
        k = self.knots
        i = int(np.clip(np.searchsorted(k, tau, side="right") - 1, 0, k.size - 2))
        h = k[i + 1] - k[i]
        a = (k[i + 1] - tau) / h
        b = 1.0 - a
        g, m = self.values, self.second
        out = a * g[i] + b * g[i + 1] + ((a**3 - a) * m[i] + (b**3 - b) * m[i + 1]) * h * h / 6
        return out.reshape(self._shape)

    def knot_values(self) -> np.ndarray:
        """Fitted values at the original (unpadded) frame times."""
        lo = 1 if self.period is not None else 0
        hi = self.knots.size - 1 if self.period is not None else self.knots.size
        return self.values[lo:hi].reshape((-1,) + self._shape)


def fit_timeline(frames: DisplacementFrameSet, lam: float = 0.0) -> DisplacementTimeline:
    """Per-node, per-component smoothing-spline fit through the frames."""
    if len(frames) < 3:
        raise ValueError("at least three frames required")
    t, y = frames.times, frames.frames
    if frames.period is not None:
        T = frames.period
        t = np.concatenate([[t[-1] - T], t, [t[0] + T]])
        y = np.concatenate([y[-1:], y, y[:1]])
    g, gamma = smoothing_spline(t, y.reshape(t.size, -1), lam)
    t_end = frames.times[0] + frames.period if frames.period is not None else frames.times[-1]
    return DisplacementTimeline(
        knots=t, values=g, second=gamma, lam=float(lam), t_start=float(frames.times[0]),
        t_end=float(t_end), period=frames.period, _shape=tuple(y.shape[1:]),
    )


def knot_residual(frames: DisplacementFrameSet, timeline: DisplacementTimeline) -> float:
    """Sum of squared misfits at the frame times."""
    return float(np.sum((timeline.knot_values() - frames.frames) ** 2))


class StaticTimeline:
    """Timeline of a mesh that never moves."""

    def __init__(self, num_vertices: int, dim: int):
        self._zero = np.zeros((num_vertices, dim))

    def evaluate(self, t: float) -> np.ndarray:
        return self._zero.copy()


class FunctionTimeline:
    """Timeline given by an analytic ``d(t) -> (num_vertices, dim)``."""

    def __init__(self, fn: Callable[[float], np.ndarray], t_start: float = -np.inf,
                 t_end: float = np.inf):
        self.fn, self.t_start, self.t_end = fn, t_start, t_end

    def evaluate(self, t: float) -> np.ndarray:
        if not self.t_start <= t <= self.t_end:
            raise ValueError("time outside timeline range; no extrapolation")
        return np.asarray(self.fn(t), dtype=float)


def ale_velocity(timeline, t_next: float, dt: float) -> np.ndarray:
    """Backward difference ``(d(t_next) - d(t_next - dt)) / dt``, shape ``(nv, dim)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    return (timeline.evaluate(t_next) - timeline.evaluate(t_next - dt)) / dt


def extend_frames(mesh: Mesh, frames: DisplacementFrameSet, s: Field | np.ndarray | None = None,
                  rel_tol: float = 1e-12) -> DisplacementFrameSet:
    """Harmonic extension of every boundary frame into the bulk."""
    ext = HarmonicExtender(mesh, s, rel_tol)
    bulk = np.stack([ext(f).values for f in frames.frames])
    return DisplacementFrameSet(frames.times, bulk, frames.period)


def build_timeline(mesh: Mesh, frames: DisplacementFrameSet, lam: float = 0.0,
                   alpha: float = 1.0, floor: float = 1.0) -> DisplacementTimeline:
    """Stiffened extension of the boundary frames followed by the temporal fit."""
    s = stiffening_field(mesh, alpha, floor)
    return fit_timeline(extend_frames(mesh, frames, s), lam)
