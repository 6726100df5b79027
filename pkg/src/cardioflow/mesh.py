"""Simplicial meshes, nodal fields and per-cell geometry.

Meshes are triangles in 2D and tetrahedra in 3D. Boundary facets carry string
tags; every facet of the topological boundary must carry exactly one tag.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class MeshError(ValueError):
    """Invalid mesh construction or query."""


def _facet_key(facets: np.ndarray) -> np.ndarray:
    return np.sort(facets, axis=1)


@dataclass(eq=False)
class Mesh:
    """Simplicial mesh with tagged boundary facets.

    Parameters
    ----------
    vertices
        ``(nv, dim)`` coordinates in meters.
    cells
        ``(nc, dim + 1)`` vertex indices.
    boundary_facets
        Mapping tag -> ``(nf, dim)`` vertex indices of boundary facets.
    """

    vertices: np.ndarray
    cells: np.ndarray
    boundary_facets: dict[str, np.ndarray] = field(default_factory=dict)
    validate: bool = True

    def __post_init__(self) -> None:
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.cells = np.ascontiguousarray(self.cells, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] not in (2, 3):
            raise MeshError("vertices must have shape (nv, 2) or (nv, 3)")
        if self.cells.ndim != 2 or self.cells.shape[1] != self.dim + 1:
            raise MeshError(f"cells must have {self.dim + 1} vertices each")
        self.boundary_facets = {
            str(k): np.asarray(v, dtype=np.int64).reshape(-1, self.dim)
            for k, v in self.boundary_facets.items()
        }
        vol = signed_volumes(self.vertices, self.cells)
        if np.any(vol < 0):
            # consistent orientation: swap the last two vertices of negative cells
            neg = vol < 0
            self.cells[neg, -2:] = self.cells[neg, -1:-3:-1]
        if self.validate:
            self.check()

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def tags(self) -> list[str]:
        return list(self.boundary_facets)

    def check(self) -> None:
        vol = signed_volumes(self.vertices, self.cells)
        if np.any(vol <= 0) or not np.all(np.isfinite(vol)):
            raise MeshError("mesh has degenerate cells")
        topo = _facet_key(self.topological_boundary_facets())
        tagged = [_facet_key(f) for f in self.boundary_facets.values() if len(f)]
        tagged_all = np.concatenate(tagged) if tagged else np.zeros((0, self.dim), np.int64)
        uniq, counts = np.unique(tagged_all, axis=0, return_counts=True)
        if np.any(counts > 1):
            raise MeshError("a boundary facet carries more than one tag")
        if len(uniq) != len(topo) or not np.array_equal(
            uniq, np.unique(topo, axis=0)
        ):
            raise MeshError("tagged facets do not match the topological boundary")

    def topological_boundary_facets(self) -> np.ndarray:
        return self._boundary_topology[0]

    @cached_property
    def _boundary_topology(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        # facets of each cell: drop one local vertex at a time
        d1 = self.dim + 1
        local = np.array([[j for j in range(d1) if j != i] for i in range(d1)])
        facets = self.cells[:, local].reshape(-1, self.dim)
        owner = np.repeat(np.arange(self.num_cells), d1)
        opposite = self.cells[:, np.arange(d1)].reshape(-1)
        keys = _facet_key(facets)
        _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        inv = inv.reshape(-1)
        once = counts[inv] == 1
        return facets[once], owner[once], opposite[once]

    @cached_property
    def _facet_lookup(self) -> dict[tuple[int, ...], tuple[int, int]]:
        facets, owner, opposite = self._boundary_topology
        return {
            tuple(k): (int(c), int(o))
            for k, c, o in zip(_facet_key(facets).tolist(), owner, opposite)
        }

    @cached_property
    def facet_owners(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Per tag: owning cell and the cell vertex opposite each facet."""
        out = {}
        lookup = self._facet_lookup
        for tag, facets in self.boundary_facets.items():
            cells = np.empty(len(facets), dtype=np.int64)
            opp = np.empty(len(facets), dtype=np.int64)
            for i, key in enumerate(_facet_key(facets).tolist()):
                try:
                    cells[i], opp[i] = lookup[tuple(key)]
                except KeyError:
                    raise MeshError(f"facet {key} of tag {tag!r} is not on the boundary")
            out[tag] = (cells, opp)
        return out

    def facets(self, tag: str) -> np.ndarray:
        try:
            return self.boundary_facets[tag]
        except KeyError:
            raise MeshError(f"unknown boundary tag {tag!r}; known: {self.tags}") from None

    def facet_geometry(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        """Outward unit normals ``(nf, dim)`` and measures ``(nf,)`` of a tag."""
        facets = self.facets(tag)
        _, opp = self.facet_owners[tag]
        return facet_normals(self.vertices, facets, self.vertices[opp])

    def tag_vertices(self, tag: str) -> np.ndarray:
        return np.unique(self.facets(tag))

    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.topological_boundary_facets())

    @cached_property
    def cell_volumes(self) -> np.ndarray:
        return signed_volumes(self.vertices, self.cells)

    @cached_property
    def cell_gradients(self) -> np.ndarray:
        """Gradients of the barycentric basis functions, ``(nc, dim + 1, dim)``."""
        return barycentric_gradients(self.vertices, self.cells)

    @cached_property
    def cell_sizes(self) -> np.ndarray:
        """Cell diameter (longest edge)."""
        x = self.vertices[self.cells]
        h = np.zeros(self.num_cells)
        for i, j in itertools.combinations(range(self.dim + 1), 2):
            h = np.maximum(h, np.linalg.norm(x[:, i] - x[:, j], axis=1))
        return h

    @cached_property
    def vertex_sizes(self) -> np.ndarray:
        """Smallest diameter among the cells touching each vertex."""
        h = np.full(self.num_vertices, np.inf)
        for k in range(self.dim + 1):
            np.minimum.at(h, self.cells[:, k], self.cell_sizes)
        return h

    @cached_property
    def lumped_volumes(self) -> np.ndarray:
        """Vertex control volumes (row sums of the P1 mass matrix)."""
        w = np.zeros(self.num_vertices)
        share = self.cell_volumes / (self.dim + 1)
        for k in range(self.dim + 1):
            np.add.at(w, self.cells[:, k], share)
        return w

    def volume(self) -> float:
        return float(self.cell_volumes.sum())

    def moved(self, displacement: np.ndarray) -> "Mesh":
        """Same topology with vertices shifted by ``displacement``."""
        disp = np.asarray(displacement, dtype=float).reshape(self.vertices.shape)
        new = Mesh.__new__(Mesh)
        new.vertices = self.vertices + disp
        new.cells = self.cells
        new.boundary_facets = self.boundary_facets
        new.validate = False
        # topology caches carry over
        for name in ("_boundary_topology", "_facet_lookup", "facet_owners"):
            if name in self.__dict__:
                new.__dict__[name] = self.__dict__[name]
        if np.any(new.cell_volumes <= 0):
            raise MeshError("displacement inverts cells")
        return new


@dataclass(eq=False)
class Field:
    """Nodal P1 values bound to a mesh, stored as ``(num_vertices, components)``."""

    mesh: Mesh
    values: np.ndarray
    components: int = 1

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float)
        if vals.size != self.components * self.mesh.num_vertices:
            raise ValueError(
                f"field needs {self.components} x {self.mesh.num_vertices} values, got {vals.size}"
            )
        self.values = vals.reshape(self.mesh.num_vertices, self.components)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    @classmethod
    def scalar(cls, mesh: Mesh, values) -> "Field":
        vals = np.broadcast_to(np.asarray(values, dtype=float), (mesh.num_vertices,))
        return cls(mesh, vals.copy(), 1)

    @classmethod
    def vector(cls, mesh: Mesh, values) -> "Field":
        vals = np.broadcast_to(
            np.asarray(values, dtype=float), (mesh.num_vertices, mesh.dim)
        )
        return cls(mesh, vals.copy(), mesh.dim)

    @classmethod
    def from_function(cls, mesh: Mesh, fn, components: int | None = None) -> "Field":
        vals = np.asarray(fn(mesh.vertices), dtype=float)
        comps = components if components is not None else (1 if vals.ndim == 1 else vals.shape[1])
        return cls(mesh, vals, comps)

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


def signed_volumes(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    x = vertices[cells]
    jac = (x[:, 1:] - x[:, :1]).transpose(0, 2, 1)
    return np.linalg.det(jac) / math.factorial(vertices.shape[1])


def barycentric_gradients(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    x = vertices[cells]
    jac = (x[:, 1:] - x[:, :1]).transpose(0, 2, 1)  # columns are edge vectors
    jinv = np.linalg.inv(jac)  # rows: gradients of lambda_1..lambda_d
    grads = np.empty((len(cells), cells.shape[1], vertices.shape[1]))
    grads[:, 1:] = jinv
    grads[:, 0] = -jinv.sum(axis=1)
    return grads


def facet_normals(
    vertices: np.ndarray, facets: np.ndarray, interior_points: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Unit normals pointing away from ``interior_points`` and facet measures."""
    x = vertices[facets]
    if vertices.shape[1] == 2:
        t = x[:, 1] - x[:, 0]
        n = np.stack([t[:, 1], -t[:, 0]], axis=1)
        area = np.linalg.norm(t, axis=1)
    else:
        n = np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0])
        area = 0.5 * np.linalg.norm(n, axis=1)
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    flip = np.einsum("ij,ij->i", n, x[:, 0] - interior_points) < 0
    n[flip] *= -1
    return n, area


def generate_box_mesh(dim: int, extents, resolution) -> Mesh:
    """Structured Kuhn-split mesh of ``[0, extents]`` with faces tagged x0, x1, y0, ...

    Every grid cube is split into ``dim!`` simplices along its main diagonal.
    """
    if dim not in (2, 3):
        raise MeshError("dim must be 2 or 3")
    ext = np.asarray(extents, dtype=float).reshape(-1)
    res = np.asarray(resolution).reshape(-1)
    if ext.size != dim or res.size != dim:
        raise MeshError("extents and resolution need one entry per axis")
    if np.any(~np.isfinite(ext)) or np.any(ext <= 0):
        raise MeshError("extents must be positive")
    if np.any(res < 1) or np.any(res != np.round(res)):
        raise MeshError("resolution must be a positive integer per axis")
    res = res.astype(int)

    axes = [np.linspace(0.0, ext[k], res[k] + 1) for k in range(dim)]
    grid = np.meshgrid(*axes, indexing="ij")
    vertices = np.stack([g.reshape(-1) for g in grid], axis=1)
    shape = tuple(res + 1)

    corners = np.stack(
        np.meshgrid(*[np.arange(r) for r in res], indexing="ij"), axis=-1
    ).reshape(-1, dim)
    cells = []
    for perm in itertools.permutations(range(dim)):
        path = [np.zeros(dim, dtype=int)]
        for axis in perm:
            step = path[-1].copy()
            step[axis] += 1
            path.append(step)
        idx = [np.ravel_multi_index(tuple((corners + p).T), shape) for p in path]
        cells.append(np.stack(idx, axis=1))
    cells = np.concatenate(cells)

    names = "xyz"
    tagged = {}
    mesh = Mesh(vertices, cells, {}, validate=False)
    bfacets = mesh.topological_boundary_facets()
    fx = vertices[bfacets]
    tol = 1e-12 * ext.max()
    for k in range(dim):
        for side, value in (("0", 0.0), ("1", ext[k])):
            on = np.all(np.abs(fx[:, :, k] - value) <= tol, axis=1)
            tagged[f"{names[k]}{side}"] = bfacets[on]
    return Mesh(vertices, cells, tagged)


def map_mesh(mesh: Mesh, fn) -> Mesh:
    """Apply a coordinate map to every vertex, keeping topology and tags."""
    return Mesh(np.asarray(fn(mesh.vertices), dtype=float), mesh.cells.copy(), dict(mesh.boundary_facets))


def retag(mesh: Mesh, mapping: dict[str, str]) -> Mesh:
    """Rename (and merge) boundary tags; unmapped tags keep their names."""
    merged: dict[str, list[np.ndarray]] = {}
    for tag, facets in mesh.boundary_facets.items():
        merged.setdefault(mapping.get(tag, tag), []).append(facets)
    return Mesh(mesh.vertices, mesh.cells, {k: np.concatenate(v) for k, v in merged.items()})


def split_tag(mesh: Mesh, tag: str, predicate, new_tag: str) -> Mesh:
    """Move facets of ``tag`` whose centroid satisfies ``predicate`` into ``new_tag``."""
    facets = mesh.facets(tag)
    centroids = mesh.vertices[facets].mean(axis=1)
    sel = np.asarray(predicate(centroids), dtype=bool)
    tags = dict(mesh.boundary_facets)
    tags[tag] = facets[~sel]
    tags[new_tag] = np.concatenate([tags.get(new_tag, np.zeros((0, mesh.dim), np.int64)), facets[sel]])
    tags = {k: v for k, v in tags.items() if len(v)}
    return Mesh(mesh.vertices, mesh.cells, tags)
