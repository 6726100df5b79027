"""P1 finite-element operators, quadrature and Krylov solves."""

from __future__ import annotations

import itertools
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Field, Mesh

log = logging.getLogger(__name__)

THREADS_ENV = "CARDIOFLOW_NUM_THREADS"


class NonConvergence(RuntimeError):
    """Raised when an iterative solve misses its tolerance."""

    def __init__(self, method: str, iterations: int, residual: float, target: float):
        self.method = method
        self.iterations = iterations
        self.residual = residual
        self.target = target
        super().__init__(
            f"{method} did not converge: {iterations} iterations, "
            f"residual {residual:.3e} > target {target:.3e}"
        )


# --------------------------------------------------------------------------
# quadrature on the reference simplex, barycentric points and weights
# summing to one (multiply by the cell volume)

def _perms(*coords):
    out = {tuple(p) for p in itertools.permutations(coords)}
    return sorted(out)


def _rule(points_weights):
    pts, wts = [], []
    for coords, w in points_weights:
        for p in _perms(*coords):
            pts.append(p)
            wts.append(w)
    return np.array(pts), np.array(wts)


_A3 = 0.5854101966249685
_B3 = 0.1381966011250105

QUADRATURE = {
    (2, 1): (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])),
    (2, 2): _rule([((2 / 3, 1 / 6, 1 / 6), 1 / 3)]),
    (2, 5): _rule([
        ((1 / 3, 1 / 3, 1 / 3), 0.225),
        ((0.059715871789770, 0.470142064105115, 0.470142064105115), 0.132394152788506),
        ((0.797426985353087, 0.101286507323456, 0.101286507323456), 0.125939180544827),
    ]),
    (3, 1): (np.array([[0.25, 0.25, 0.25, 0.25]]), np.array([1.0])),
    (3, 2): _rule([((_A3, _B3, _B3, _B3), 0.25)]),
    (3, 5): _rule([
        ((1 - 3 * 0.0927352503108912, 0.0927352503108912, 0.0927352503108912, 0.0927352503108912),
         6 * 0.01224884051939366),
        ((1 - 3 * 0.3108859192633006, 0.3108859192633006, 0.3108859192633006, 0.3108859192633006),
         6 * 0.01878132095300264),
        ((0.5 - 0.0455037041256496, 0.5 - 0.0455037041256496, 0.0455037041256496, 0.0455037041256496),
         6 * 0.007091003462846911),
    ]),
}

# facet rules: facets are (dim-1)-simplices
FACET_QUADRATURE = {
    2: (np.array([[0.5 + 0.5 / np.sqrt(3), 0.5 - 0.5 / np.sqrt(3)],
                  [0.5 - 0.5 / np.sqrt(3), 0.5 + 0.5 / np.sqrt(3)]]), np.array([0.5, 0.5])),
    3: QUADRATURE[(2, 2)],
}


def quadrature(dim: int, degree: int = 2) -> tuple[np.ndarray, np.ndarray]:
    for deg in sorted(d for (dd, d) in QUADRATURE if dd == dim):
        if deg >= degree:
            return QUADRATURE[(dim, deg)]
    raise ValueError(f"no rule of degree {degree} in {dim}D")


def quadrature_points(mesh: Mesh, bary: np.ndarray) -> np.ndarray:
    """Physical coordinates ``(nc, nq, dim)`` of barycentric points in every cell."""
    return np.einsum("qk,ckd->cqd", bary, mesh.vertices[mesh.cells])


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SparseOperator:
    """Sparse matrix in CSR layout with an optional symmetry flag."""

    matrix: sp.csr_matrix
    symmetric: bool = False

    def __post_init__(self):
        object.__setattr__(self, "matrix", sp.csr_matrix(self.matrix))

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def __matmul__(self, x):
        return self.matrix @ x

    def scaled(self, factor: float) -> "SparseOperator":
        return SparseOperator(self.matrix * factor, self.symmetric)

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def num_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def chunked(fn, n: int, threads: int | None = None, min_chunk: int = 4096):
    """Evaluate ``fn(slice)`` over ``range(n)`` in chunks; results keep chunk order.

    Results are returned in the chunk order regardless of the thread count, so
    a reduction over them is deterministic.
    """
    threads = threads or num_threads()
    if threads <= 1 or n <= min_chunk:
        return [fn(slice(0, n))]
    bounds = np.linspace(0, n, threads + 1).astype(int)
    slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, slices))


def scatter_cell_matrices(cells: np.ndarray, local: np.ndarray, n: int) -> sp.csr_matrix:
    """Assemble ``(nc, k, k)`` element matrices into an ``n x n`` CSR matrix."""
    k = cells.shape[1]
    rows = np.repeat(cells, k, axis=1).reshape(-1)
    cols = np.tile(cells, (1, k)).reshape(-1)
    return sp.coo_matrix((local.reshape(-1), (rows, cols)), shape=(n, n)).tocsr()


def assemble_weighted_stiffness(mesh: Mesh, s: Field | np.ndarray) -> SparseOperator:
    """P1 matrix of ``(s grad u, grad v)`` with ``s`` interpolated linearly.

    P1 gradients are constant per cell, so the cell mean of ``s`` integrates
    the form exactly.
    """
    vals = s.values[:, 0] if isinstance(s, Field) else np.asarray(s, dtype=float)
    if vals.shape != (mesh.num_vertices,):
        raise ValueError("stiffness weight must be a scalar nodal field")
    if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
        raise ValueError("stiffness weight must be strictly positive")
    grads = mesh.cell_gradients
    coeff = vals[mesh.cells].mean(axis=1) * mesh.cell_volumes
    local = np.einsum("c,cad,cbd->cab", coeff, grads, grads)
    mat = scatter_cell_matrices(mesh.cells, local, mesh.num_vertices)
    mat = 0.5 * (mat + mat.T)  # remove round-off asymmetry
    return SparseOperator(mat.tocsr(), symmetric=True)


def assemble_mass(mesh: Mesh, weight: np.ndarray | None = None, lumped: bool = False) -> SparseOperator:
    """Scalar P1 mass matrix, optionally weighted by a per-cell constant."""
    w = mesh.cell_volumes if weight is None else mesh.cell_volumes * weight
    k = mesh.dim + 1
    if lumped:
        diag = np.zeros(mesh.num_vertices)
        for a in range(k):
            np.add.at(diag, mesh.cells[:, a], w / k)
        return SparseOperator(sp.diags(diag).tocsr(), symmetric=True)
    ref = (np.ones((k, k)) + np.eye(k)) / ((k) * (k + 1))
    local = w[:, None, None] * ref[None]
    return SparseOperator(scatter_cell_matrices(mesh.cells, local, mesh.num_vertices), symmetric=True)


def apply_dirichlet(
    matrix: sp.spmatrix, rhs: np.ndarray, dofs: np.ndarray, values: np.ndarray, symmetric: bool = False
) -> tuple[sp.csr_matrix, np.ndarray]:
    """Replace rows of ``dofs`` by identity rows carrying ``values``.

    With ``symmetric`` the matching columns are eliminated as well so that an
    SPD matrix stays SPD.
    """
    A = sp.csr_matrix(matrix, copy=True)
    b = np.array(rhs, dtype=float, copy=True)
    dofs = np.asarray(dofs, dtype=np.int64)
    values = np.broadcast_to(np.asarray(values, dtype=float), dofs.shape)
    if symmetric:
        lift = np.zeros(A.shape[1])
        lift[dofs] = values
        b -= A @ lift
        mask = np.ones(A.shape[0])
        mask[dofs] = 0.0
        D = sp.diags(mask)
        A = (D @ A @ D).tocsr()
    else:
        keep = np.ones(A.shape[0])
        keep[dofs] = 0.0
        A = (sp.diags(keep) @ A).tocsr()
    A = A + sp.csr_matrix((np.ones(len(dofs)), (dofs, dofs)), shape=A.shape)
    b[dofs] = values
    return A.tocsr(), b


def solve_linear(op, rhs, method: str = "cg", rel_tol: float = 1e-10, max_iter: int | None = None,
                 x0: np.ndarray | None = None) -> np.ndarray:
    """Solve ``op x = rhs`` with Jacobi-preconditioned CG or GMRES.

    ``method="direct"`` falls back to a sparse LU factorization. Raises
    :class:`NonConvergence` when the relative residual target is missed.
    """
    A = op.matrix if isinstance(op, SparseOperator) else sp.csr_matrix(op)
    b = np.asarray(rhs, dtype=float)
    if A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
        raise ValueError(f"dimension mismatch: operator {A.shape}, rhs {b.shape}")
    if not 0 < rel_tol < 1:
        raise ValueError("rel_tol must lie in (0, 1)")
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros_like(b)
    target = rel_tol * bnorm

    if method == "direct":
        x = spla.spsolve(A.tocsc(), b)
        res = np.linalg.norm(b - A @ x)
        if not np.isfinite(res) or res > max(target, 1e3 * np.finfo(float).eps * bnorm):
            raise NonConvergence(method, 1, float(res), target)
        return x

    diag = A.diagonal()
    inv = np.where(diag != 0, 1.0 / np.where(diag != 0, diag, 1.0), 1.0)
    M = spla.LinearOperator(A.shape, matvec=lambda v: inv * v, dtype=float)
    max_iter = max_iter or max(10 * A.shape[0], 100)
    count = [0]

    def cb(*_):
        count[0] += 1

    if method == "cg":
        x, info = spla.cg(A, b, x0=x0, rtol=rel_tol, atol=0.0, maxiter=max_iter, M=M, callback=cb)
    elif method == "gmres":
        x, info = spla.gmres(A, b, x0=x0, rtol=rel_tol, atol=0.0, maxiter=max_iter, M=M,
                             restart=min(200, A.shape[0]), callback=cb, callback_type="pr_norm")
    else:
        raise ValueError(f"unknown method {method!r}")
    res = float(np.linalg.norm(b - A @ x))
    # Krylov solvers monitor the preconditioned residual; verify the true one
    if info != 0 or not np.isfinite(res) or res > target * (1 + 1e-6):
        if np.isfinite(res) and res <= target * 10 and info == 0:
            # polish with a short restart from the current iterate
            return solve_linear(A, b, method, rel_tol, max_iter, x0=x)
        raise NonConvergence(method, count[0], res, target)
    return x


# --------------------------------------------------------------------------
# boundary integrals


def _facet_values(mesh: Mesh, tag: str, values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    facets = mesh.facets(tag)
    normals, areas = mesh.facet_geometry(tag)
    return values[facets], normals, areas


def boundary_integral_flux(u: Field, u_ale: Field | None, tag: str) -> float:
    """Flux of ``u - u_ale`` through ``tag`` along the outward normal.

    Exact for P1 fields: the integrand is linear on each flat facet, so the
    facet mean of the nodal values integrates it.
    """
    mesh = u.mesh
    rel = u.values if u_ale is None else u.values - _same_mesh(u, u_ale).values
    vals, normals, areas = _facet_values(mesh, tag, rel)
    mean = vals.mean(axis=1)
    return float(np.sum(areas * np.einsum("fd,fd->f", mean, normals)))


def boundary_mean_pressure(p: Field, tag: str) -> float:
    """Area-weighted mean of a scalar field over ``tag``."""
    vals, _, areas = _facet_values(p.mesh, tag, p.values[:, 0])
    total = areas.sum()
    return float(np.sum(areas * vals.mean(axis=1)) / total)


def boundary_area(mesh: Mesh, tag: str) -> float:
    return float(mesh.facet_geometry(tag)[1].sum())


def _same_mesh(a: Field, b: Field) -> Field:
    if a.mesh is not b.mesh and (
        a.mesh.num_vertices != b.mesh.num_vertices or a.mesh.cells is not b.mesh.cells
    ):
        raise ValueError("fields live on different meshes")
    return b
