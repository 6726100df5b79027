"""Point-to-simplex distance queries for segment sets (2D) and triangle sets (3D)."""

from __future__ import annotations

import numpy as np

_CHUNK_PAIRS = 2_000_000


def _closest_on_segments(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Closest points ``(n, m, d)`` on segments ``a-b`` to each point of ``p``."""
    ab = b - a
    denom = np.einsum("md,md->m", ab, ab)
    ap = p[:, None, :] - a[None]
    t = np.einsum("nmd,md->nm", ap, ab) / np.where(denom > 0, denom, 1.0)
    t = np.clip(t, 0.0, 1.0)
    return a[None] + t[..., None] * ab[None]


def _closest_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest points ``(n, m, 3)`` on triangles, by Voronoi-region classification."""
    n, m = len(p), len(a)
    P = p[:, None, :]
    ab, ac = (b - a)[None], (c - a)[None]
    ap = P - a[None]
    d1 = np.einsum("nmd,nmd->nm", np.broadcast_to(ab, ap.shape), ap)
    d2 = np.einsum("nmd,nmd->nm", np.broadcast_to(ac, ap.shape), ap)
    bp = P - b[None]
    d3 = np.einsum("nmd,nmd->nm", np.broadcast_to(ab, bp.shape), bp)
    d4 = np.einsum("nmd,nmd->nm", np.broadcast_to(ac, bp.shape), bp)
    cp = P - c[None]
    d5 = np.einsum("nmd,nmd->nm", np.broadcast_to(ab, cp.shape), cp)
    d6 = np.einsum("nmd,nmd->nm", np.broadcast_to(ac, cp.shape), cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty((n, m, 3))
    done = np.zeros((n, m), dtype=bool)
    A, B, C = (np.broadcast_to(x[None], (n, m, 3)) for x in (a, b, c))

    def put(mask, value):
        nonlocal done
        mask = mask & ~done
        out[mask] = value[mask]
        done |= mask

    put((d1 <= 0) & (d2 <= 0), A)
    put((d3 >= 0) & (d4 <= d3), B)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), A + v[..., None] * (B - A))
        put((d6 >= 0) & (d5 <= d6), C)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), A + w[..., None] * (C - A))
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), B + w[..., None] * (C - B))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones_like(done), A + v[..., None] * (B - A) + w[..., None] * (C - A))
    return out


def facet_normals_of(simplices: np.ndarray) -> np.ndarray:
    """Unit normals of ``(m, d, d)`` facet vertex arrays (right-hand orientation)."""
    if simplices.shape[-1] == 2:
        t = simplices[:, 1] - simplices[:, 0]
        n = np.stack([t[:, 1], -t[:, 0]], axis=1)
    else:
        n = np.cross(simplices[:, 1] - simplices[:, 0], simplices[:, 2] - simplices[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("degenerate surface facet")
    return n / norm


def closest_facet_query(points: np.ndarray, simplices: np.ndarray):
    """Nearest facet for every point.

    Parameters
    ----------
    points
        ``(n, d)`` query coordinates.
    simplices
        ``(m, d, d)`` facet vertices: segments in 2D, triangles in 3D.

    Returns
    -------
    distance, facet index, closest point, signed normal offset ``(p - c) . n``
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    simplices = np.asarray(simplices, dtype=float)
    if simplices.size == 0:
        raise ValueError("empty surface")
    d = points.shape[1]
    if simplices.shape[1:] != (d, d):
        raise ValueError(f"surface facets must have shape (m, {d}, {d})")
    normals = facet_normals_of(simplices)
    m = len(simplices)
    chunk = max(1, _CHUNK_PAIRS // m)
    dist = np.empty(len(points))
    index = np.empty(len(points), dtype=np.int64)
    closest = np.empty_like(points)
    offset = np.empty(len(points))
    for start in range(0, len(points), chunk):
        p = points[start:start + chunk]
        if d == 2:
            c = _closest_on_segments(p, simplices[:, 0], simplices[:, 1])
        else:
            c = _closest_on_triangles(p, simplices[:, 0], simplices[:, 1], simplices[:, 2])
        diff = p[:, None, :] - c
        dd = np.linalg.norm(diff, axis=2)
        dmin = dd.min(axis=1, keepdims=True)
        # among (near-)equidistant facets prefer the one seen most head-on
        dots = np.einsum("nmd,md->nm", diff, normals)
        tie = dd <= dmin * (1 + 1e-9) + 1e-14
        score = np.where(tie, np.abs(dots), -np.inf)
        k = np.argmax(score, axis=1)
        rows = np.arange(len(p))
        dist[start:start + chunk] = dd[rows, k]
        index[start:start + chunk] = k
        closest[start:start + chunk] = c[rows, k]
        offset[start:start + chunk] = dots[rows, k]
    return dist, index, closest, offset


def unsigned_distance(points: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    return closest_facet_query(points, simplices)[0]
