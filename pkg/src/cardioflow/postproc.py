"""Biomarkers, range normalization, wall shear stress and velocity probes."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .io import atomic_write, load_toml
from .mesh import Mesh

NORMALIZATION_RULE = (
    "interval [a,b]: n = 2(x-a)/(b-a) - 1; mean+-sd: n = (x-mean)/sd, shown clipped to [-3,3]; "
    "in range iff -1 <= n <= 1"
)
REPORT_COLUMNS = ("name", "value", "units", "normalized", "in_range", "citation")
DISPLAY_CLIP = 3.0


class PostprocError(ValueError):
    pass


# --------------------------------------------------------------------------
# biomarkers

@dataclass(frozen=True)
class BiomarkerRange:
    name: str
    kind: str  # "interval" or "mean_sd"
    units: str
    citation: str
    low: float | None = None
    high: float | None = None
    mean: float | None = None
    sd: float | None = None

    def __post_init__(self):
        if self.kind == "interval":
            if self.low is None or self.high is None or not self.low < self.high:
                raise PostprocError(f"{self.name}: interval needs low < high")
        elif self.kind == "mean_sd":
            if self.mean is None or self.sd is None or not self.sd > 0:
                raise PostprocError(f"{self.name}: mean_sd needs a positive sd")
        else:
            raise PostprocError(f"{self.name}: unknown range kind {self.kind!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "BiomarkerRange":
        keys = ("name", "kind", "units", "citation", "low", "high", "mean", "sd")
        missing = [k for k in keys[:4] if k not in d]
        if missing:
            raise PostprocError(f"range entry {d.get('name', '?')!r} lacks {', '.join(missing)}")
        return cls(**{k: d[k] for k in keys if k in d})


def load_ranges(path=None) -> dict[str, BiomarkerRange]:
    """Range registry from a TOML file (``[[biomarker]]`` entries); the bundled one by default."""
    if path is None:
        data = load_toml(resources.files("cardioflow") / "data" / "ranges.toml")
    else:
        data = load_toml(path)
    out = {}
    for entry in data.get("biomarker", []):
        r = BiomarkerRange.from_dict(entry)
        out[r.name] = r
    return out


def normalize_biomarker(x: float, rng: BiomarkerRange) -> float:
    if rng.kind == "interval":
        return 2.0 * (x - rng.low) / (rng.high - rng.low) - 1.0
    return (x - rng.mean) / rng.sd


def in_range(n: float) -> bool:
    return -1.0 <= n <= 1.0


def chamber_biomarkers(t, V=None, Q=None, p=None, window: tuple[float, float] | None = None) -> dict:
    """ESV/EDV/SV/EF from volumes, peak flow, peak and time-averaged pressure.

    Series absent as ``None`` are skipped. ``window`` is a closed time
    interval; EF is a fraction.
    """
    t = np.asarray(t, dtype=float)
    sel = np.ones(t.size, bool) if window is None else (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
    if not sel.any():
        raise PostprocError("empty time window")
    ts = t[sel]
    out = {}
    if V is not None:
        v = np.asarray(V, float)[sel]
        edv, esv = float(v.max()), float(v.min())
        out.update(EDV=edv, ESV=esv, SV=edv - esv, EF=(edv - esv) / edv if edv > 0 else 0.0)
    if Q is not None:
        out["Q_max"] = float(np.asarray(Q, float)[sel].max())
    if p is not None:
        ps = np.asarray(p, float)[sel]
        out["p_max"] = float(ps.max())
        out["p_mean"] = float(trapezoid(ps, ts) / (ts[-1] - ts[0])) if ts.size > 1 else float(ps[0])
    return out


def beat_bounds(t, period: float, beat: int | None = None) -> tuple[float, float]:
    """Closed window of beat ``beat`` (default: the last complete one)."""
    t = np.asarray(t, float)
    t0, t1 = float(t[0]), float(t[-1])
    n_full = int(math.floor((t1 - t0) / period + 1e-9))
    if n_full < 1:
        raise PostprocError("series shorter than one beat")
    beat = n_full - 1 if beat is None else beat
    if not 0 <= beat < n_full:
        raise PostprocError(f"beat {beat} outside the {n_full} complete beats")
    return t0 + beat * period, t0 + (beat + 1) * period


def series_biomarkers(series: Mapping[str, np.ndarray], window=None) -> dict[str, tuple[float, str]]:
    """Registry-named biomarkers computable from the available columns.

    Uses ``V_LV``/``V_RV`` (mL), ``Q_AV``/``Q_PV`` (mL/s), ``p_LV``, ``p_RV``,
    ``p_LA``, ``p_RA`` (mmHg) and ``v_MV``... (m/s) when present.
    """
    t = series["t"]
    out: dict[str, tuple[float, str]] = {}
    for ch in ("LV", "RV"):
        b = chamber_biomarkers(t, V=series.get(f"V_{ch}"), p=series.get(f"p_{ch}"), window=window)
        if "EDV" in b:
            out[f"ESV_{ch}"] = (b["ESV"], "mL")
            out[f"EDV_{ch}"] = (b["EDV"], "mL")
            out[f"SV_{ch}"] = (b["SV"], "mL")
            out[f"EF_{ch}"] = (100.0 * b["EF"], "%")
        if "p_max" in b:
            out[f"p_{ch}_max"] = (b["p_max"], "mmHg")
            out[f"p_{ch}_peak"] = (b["p_max"], "mmHg")
    for valve in ("AV", "PV"):
        if f"Q_{valve}" in series:
            out[f"Q_{valve}_max"] = (chamber_biomarkers(t, Q=series[f"Q_{valve}"], window=window)["Q_max"], "mL/s")
    for ch in ("LA", "RA"):
        if f"p_{ch}" in series:
            out[f"p_{ch}_mean"] = (chamber_biomarkers(t, p=series[f"p_{ch}"], window=window)["p_mean"], "mmHg")
    for valve in ("MV", "AV", "TV", "PV"):
        if f"v_{valve}" in series:
            out[f"v_{valve}_peak"] = (chamber_biomarkers(t, Q=series[f"v_{valve}"], window=window)["Q_max"], "m/s")
    return out


@dataclass(frozen=True)
class BiomarkerRow:
    name: str
    value: float
    units: str
    normalized: float
    in_range: bool
    citation: str


def biomarker_report(values: Mapping[str, tuple[float, str]], ranges: Mapping[str, BiomarkerRange]) -> list[BiomarkerRow]:
    """One row per biomarker present in both ``values`` and ``ranges``, in registry order."""
    rows = []
    for name, rng in ranges.items():
        if name not in values:
            continue
        x, units = values[name]
        if units != rng.units:
            raise PostprocError(f"{name}: computed in {units}, range given in {rng.units}")
        n = normalize_biomarker(x, rng)
        rows.append(BiomarkerRow(name, x, units, n, in_range(n), rng.citation))
    return rows


def write_report(path, rows: Sequence[BiomarkerRow]) -> None:
    """CSV report; two ``#`` lines state the normalization rule first."""
    def write(tmp):
        with open(tmp, "w", newline="") as fh:
            fh.write(f"# normalization: {NORMALIZATION_RULE}\n")
            fh.write(f"# normalized values shown clipped to +-{DISPLAY_CLIP:g}\n")
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in rows:
                shown = min(max(r.normalized, -DISPLAY_CLIP), DISPLAY_CLIP)
                w.writerow([r.name, repr(float(r.value)), r.units, f"{shown:.6g}", str(r.in_range).lower(), r.citation])

    atomic_write(path, write)


def read_series_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    if len(rows) < 2:
        raise PostprocError(f"{path}: no data rows")
    header = rows[0]
    if "t" not in header:
        raise PostprocError(f"{path}: missing a 't' column")
    data = np.array(rows[1:], dtype=float)
    return {name: data[:, i] for i, name in enumerate(header)}


# --------------------------------------------------------------------------
# wall shear stress

def vertex_normals(mesh: Mesh, tags: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Vertices on ``tags`` and their area-weighted unit outward normals."""
    acc = np.zeros((mesh.num_vertices, mesh.dim))
    for tag in tags:
        facets = mesh.facets(tag)  # raises on unknown tags
        n, area = mesh.facet_geometry(tag)
        for k in range(mesh.dim):
            np.add.at(acc, facets[:, k], area[:, None] * n)
    verts = np.unique(np.concatenate([mesh.facets(t).reshape(-1) for t in tags]))
    nrm = acc[verts]
    return verts, nrm / np.linalg.norm(nrm, axis=1, keepdims=True)


def recovered_gradient(mesh: Mesh, u: np.ndarray) -> np.ndarray:
    """Volume-weighted average of the P1 cell gradients at each vertex, ``(nv, dim, dim)``."""
    u = np.asarray(u, float).reshape(mesh.num_vertices, mesh.dim)
    g = np.einsum("cai,cak->cik", u[mesh.cells], mesh.cell_gradients)  # d u_i / d x_k
    acc = np.zeros((mesh.num_vertices, mesh.dim, mesh.dim))
    w = np.zeros(mesh.num_vertices)
    for a in range(mesh.dim + 1):
        np.add.at(acc, mesh.cells[:, a], mesh.cell_volumes[:, None, None] * g)
        np.add.at(w, mesh.cells[:, a], mesh.cell_volumes)
    return acc / w[:, None, None]


def wss_field(mesh: Mesh, u, mu: float, tags: Sequence[str]) -> np.ndarray:
    """Tangential part of the viscous traction ``2 mu eps(u) n`` on the tagged walls.

    Returns ``(nv, dim)``, zero away from the walls.
    """
    if isinstance(tags, str):
        tags = [tags]
    verts, n = vertex_normals(mesh, tags)
    grad = recovered_gradient(mesh, u)[verts]
    tau = mu * (grad + np.swapaxes(grad, 1, 2))
    tn = np.einsum("vij,vj->vi", tau, n)
    wss = tn - np.einsum("vi,vi->v", tn, n)[:, None] * n
    out = np.zeros((mesh.num_vertices, mesh.dim))
    out[verts] = wss
    return out


def tawss(times, wss_series) -> np.ndarray:
    """Trapezoidal time average of ``|WSS|`` per vertex over ``[times[0], times[-1]]``."""
    times = np.asarray(times, float)
    series = [np.asarray(w, float) for w in wss_series]
    if not series:
        raise PostprocError("empty WSS series")
    if len(series) != times.size:
        raise PostprocError("one time per WSS sample required")
    mags = np.stack([np.linalg.norm(w.reshape(w.shape[0], -1), axis=1) for w in series])
    if times.size == 1:
        return mags[0]
    steps = np.diff(times)
    if np.any(steps <= 0):
        raise PostprocError("times must increase")
    if not np.allclose(steps, steps[0], rtol=1e-6, atol=0.0):
        raise PostprocError("uniform sampling required")
    return trapezoid(mags, times, axis=0) / (times[-1] - times[0])


def region_stats(mesh: Mesh, values, tag: str) -> dict[str, float]:
    """Min, max, and boundary-measure-weighted mean of a vertex field over a tagged patch."""
    values = np.asarray(values, float).reshape(mesh.num_vertices)
    facets = mesh.facets(tag)
    _, area = mesh.facet_geometry(tag)
    verts = np.unique(facets)
    w = np.zeros(mesh.num_vertices)
    for k in range(mesh.dim):
        np.add.at(w, facets[:, k], area / mesh.dim)
    return {
        "min": float(values[verts].min()),
        "mean": float(np.sum(w * values) / w.sum()),
        "max": float(values[verts].max()),
    }


# --------------------------------------------------------------------------
# probes

def probe_velocity(mesh: Mesh, u_series, center, radius: float) -> np.ndarray:
    """Control-volume-weighted mean speed of the vertices inside a sphere, per sample."""
    if not radius > 0:
        raise PostprocError("radius must be positive")
    inside = np.linalg.norm(mesh.vertices - np.asarray(center, float), axis=1) <= radius
    if not inside.any():
        raise PostprocError("control sphere contains no mesh vertices")
    w = mesh.lumped_volumes[inside]
    out = []
    for u in u_series:
        u = np.asarray(u, float).reshape(mesh.num_vertices, mesh.dim)
        out.append(float(np.sum(w * np.linalg.norm(u[inside], axis=1)) / w.sum()))
    return np.array(out)


def snapshot_paths(directory) -> list[Path]:
    """Time snapshots in a directory: ``snapshot_*.vtk`` if any, else every ``.vtk``."""
    paths = sorted(Path(directory).glob("snapshot_*.vtk")) or sorted(Path(directory).glob("*.vtk"))
    if not paths:
        raise PostprocError(f"no .vtk snapshots in {directory}")
    return paths
