"""File formats: legacy ASCII VTK, ASCII STL, polyline CSV, TOML configs and frame manifests."""

from __future__ import annotations

import csv
import os
import re
import sys
from pathlib import Path
from typing import Mapping

import numpy as np

from .mesh import Mesh

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

VTK_LINE, VTK_TRIANGLE, VTK_TETRA = 3, 5, 10
_VOLUME_TYPE = {2: VTK_TRIANGLE, 3: VTK_TETRA}
_FACET_TYPE = {2: VTK_LINE, 3: VTK_TRIANGLE}


class FormatError(ValueError):
    pass


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def atomic_write(path, write) -> None:
    """Write via a temporary sibling and rename, so readers never see half a file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    write(tmp)
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# legacy VTK


def write_vtk(path, mesh: Mesh, point_data: Mapping[str, np.ndarray] | None = None,
              title: str | None = None, time: float | None = None) -> None:
    """Unstructured grid with the volume cells followed by tagged boundary facets.

    Facets carry their tag id in the ``cell_tag`` cell array (0 for volume
    cells); the tag names and the optional snapshot time live in the title
    line so the mesh round-trips.
    """
    point_data = dict(point_data or {})
    tags = mesh.tags
    names = ",".join(f"{t}:{i + 1}" for i, t in enumerate(tags))
    header = title or f"cardioflow dim={mesh.dim} tags={names}"
    if time is not None:
        header += f" t={float(time)!r}"
    if len(header) > 255 or "\n" in header:
        raise FormatError("VTK title must be a single line under 256 characters")
    pts = np.zeros((mesh.num_vertices, 3))
    pts[:, : mesh.dim] = mesh.vertices
    facet_blocks = [mesh.facets(t) for t in tags]
    facets = np.concatenate(facet_blocks) if facet_blocks else np.zeros((0, mesh.dim), np.int64)
    facet_ids = np.concatenate([np.full(len(f), i + 1) for i, f in enumerate(facet_blocks)]) if tags else np.zeros(0)
    nc, nf = mesh.num_cells, len(facets)
    lines = ["# vtk DataFile Version 3.0", header, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.num_vertices} double"]
    lines += [" ".join(repr(float(v)) for v in row) for row in pts]
    total = nc * (mesh.dim + 2) + nf * (mesh.dim + 1)
    lines.append(f"CELLS {nc + nf} {total}")
    lines += [f"{mesh.dim + 1} " + " ".join(map(str, c)) for c in mesh.cells]
    lines += [f"{mesh.dim} " + " ".join(map(str, f)) for f in facets]
    lines.append(f"CELL_TYPES {nc + nf}")
    lines += [str(_VOLUME_TYPE[mesh.dim])] * nc + [str(_FACET_TYPE[mesh.dim])] * nf
    lines += [f"CELL_DATA {nc + nf}", "SCALARS cell_tag int 1", "LOOKUP_TABLE default"]
    lines += ["0"] * nc + [str(int(i)) for i in facet_ids]
    if point_data:
        lines.append(f"POINT_DATA {mesh.num_vertices}")
        for name, values in point_data.items():
            if re.search(r"\s", name):
                raise FormatError("array names must not contain whitespace")
            arr = np.asarray(values, dtype=float).reshape(mesh.num_vertices, -1)
            if arr.shape[1] == 1:
                lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                lines += [repr(float(v)) for v in arr[:, 0]]
            elif arr.shape[1] in (2, 3):
                vec = np.zeros((mesh.num_vertices, 3))
                vec[:, : arr.shape[1]] = arr
                lines.append(f"VECTORS {name} double")
                lines += [" ".join(repr(float(v)) for v in row) for row in vec]
            else:
                raise FormatError(f"array {name!r} has {arr.shape[1]} components")

    def write(tmp):
        tmp.write_text("\n".join(lines) + "\n")

    atomic_write(path, write)


def vtk_time(path) -> float | None:
    """Snapshot time stored in the title line, if any."""
    with open(path) as fh:
        fh.readline()
        m = re.search(r"\bt=(\S+)", fh.readline())
    return float(m.group(1)) if m else None


def _tokens(text: str):
    for line in text.splitlines():
        yield from line.split()


def read_vtk(path) -> tuple[Mesh, dict[str, np.ndarray]]:
    """Read a legacy ASCII unstructured grid written by :func:`write_vtk` (or a compatible one).

    Returns the mesh and the point arrays (vectors trimmed to the mesh dimension).
    """
    text = Path(path).read_text()
    lines = text.splitlines()
    if len(lines) < 4 or not lines[0].startswith("# vtk DataFile"):
        raise FormatError(f"{path}: not a legacy VTK file")
    title = lines[1]
    if lines[2].strip().upper() != "ASCII":
        raise FormatError(f"{path}: only ASCII VTK is supported")
    tok = list(_tokens("\n".join(lines[3:])))
    pos = 0

    def take(n=1):
        nonlocal pos
        out = tok[pos:pos + n]
        if len(out) < n:
            raise FormatError(f"{path}: unexpected end of file")
        pos += n
        return out

    points = cells = types = None
    cell_arrays: dict[str, np.ndarray] = {}
    point_arrays: dict[str, np.ndarray] = {}
    vector_names: set[str] = set()
    section = None
    n_section = 0
    while pos < len(tok):
        key = take()[0].upper()
        if key == "DATASET":
            kind = take()[0].upper()
            if kind != "UNSTRUCTURED_GRID":
                raise FormatError(f"{path}: dataset {kind} not supported")
        elif key == "POINTS":
            n, _ = take(2)
            points = np.array(take(3 * int(n)), dtype=float).reshape(-1, 3)
        elif key == "CELLS":
            n, total = map(int, take(2))
            flat = np.array(take(total), dtype=np.int64)
            cells, i = [], 0
            for _ in range(n):
                k = flat[i]
                cells.append(flat[i + 1:i + 1 + k])
                i += k + 1
        elif key == "CELL_TYPES":
            n = int(take()[0])
            types = np.array(take(n), dtype=int)
        elif key in ("CELL_DATA", "POINT_DATA"):
            section = key
            n_section = int(take()[0])
        elif key == "SCALARS":
            name, _dtype = take(2)
            ncomp = 1
            if pos < len(tok) and tok[pos].isdigit():
                ncomp = int(take()[0])
            if pos < len(tok) and tok[pos].upper() == "LOOKUP_TABLE":
                take(2)
            arr = np.array(take(n_section * ncomp), dtype=float).reshape(n_section, ncomp)
            (cell_arrays if section == "CELL_DATA" else point_arrays)[name] = arr
        elif key in ("VECTORS", "NORMALS"):
            name, _dtype = take(2)
            arr = np.array(take(3 * n_section), dtype=float).reshape(n_section, 3)
            if section == "POINT_DATA":
                vector_names.add(name)
            (cell_arrays if section == "CELL_DATA" else point_arrays)[name] = arr
        elif key == "FIELD":
            _, narr = take(2)
            for _ in range(int(narr)):
                name, ncomp, ntup, _dtype = take(4)
                arr = np.array(take(int(ncomp) * int(ntup)), dtype=float).reshape(int(ntup), int(ncomp))
                (cell_arrays if section == "CELL_DATA" else point_arrays)[name] = arr
        else:
            raise FormatError(f"{path}: unsupported VTK keyword {key!r}")
    if points is None or cells is None or types is None:
        raise FormatError(f"{path}: missing POINTS, CELLS or CELL_TYPES")

    m = re.search(r"dim=(\d)", title)
    if m:
        dim = int(m.group(1))
    else:
        dim = 3 if np.any(types == VTK_TETRA) else 2
    vol_type, facet_type = _VOLUME_TYPE[dim], _FACET_TYPE[dim]
    vol = np.array([c for c, t in zip(cells, types) if t == vol_type], dtype=np.int64)
    fac_idx = [i for i, t in enumerate(types) if t == facet_type]
    tag_names = {}
    m = re.search(r"tags=(\S*)", title)
    if m and m.group(1):
        for item in m.group(1).split(","):
            name, _, num = item.rpartition(":")
            tag_names[int(num)] = name
    boundary = {}
    if fac_idx and "cell_tag" in cell_arrays:
        ids = cell_arrays["cell_tag"][:, 0].astype(int)
        for i in fac_idx:
            name = tag_names.get(ids[i], f"tag{ids[i]}")
            boundary.setdefault(name, []).append(cells[i])
        boundary = {k: np.array(v, dtype=np.int64) for k, v in boundary.items()}
    verts = points[:, :dim]
    if not boundary:
        boundary = {"wall": Mesh(verts, vol, {}, validate=False).topological_boundary_facets()}
    mesh = Mesh(verts, vol, boundary)
    data = {}
    for name, arr in point_arrays.items():
        if name in vector_names:
            data[name] = arr[:, :dim]
        else:
            data[name] = arr[:, 0] if arr.shape[1] == 1 else arr
    return mesh, data


# --------------------------------------------------------------------------
# surfaces


def read_stl(path) -> np.ndarray:
    """Triangles ``(m, 3, 3)`` from an ASCII STL file."""
    verts = []
    with open(path) as fh:
        first = fh.readline()
        if not first.lstrip().lower().startswith("solid"):
            raise FormatError(f"{path}: only ASCII STL is supported")
        for line in fh:
            parts = line.split()
            if parts and parts[0].lower() == "vertex":
                verts.append([float(v) for v in parts[1:4]])
    if not verts or len(verts) % 3:
        raise FormatError(f"{path}: no complete facets")
    return np.array(verts).reshape(-1, 3, 3)


def write_stl(path, triangles: np.ndarray, name: str = "surface") -> None:
    tri = np.asarray(triangles, dtype=float)
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    out = [f"solid {name}"]
    for t, nn in zip(tri, n):
        out.append("  facet normal " + " ".join(repr(float(c)) for c in nn))
        out.append("    outer loop")
        out += ["      vertex " + " ".join(repr(float(c)) for c in v) for v in t]
        out += ["    endloop", "  endfacet"]
    out.append(f"endsolid {name}")
    Path(path).write_text("\n".join(out) + "\n")


def read_polyline_csv(path) -> np.ndarray:
    """Segments ``(m, 2, 2)`` from a CSV of ``x,y[,chain]`` rows.

    Consecutive rows of the same chain are joined; a header row is optional.
    """
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or not "".join(rec).strip() or rec[0].lstrip().startswith("#"):
                continue
            try:
                vals = [float(v) for v in rec]
            except ValueError:
                if rows:
                    raise FormatError(f"{path}: non-numeric row {rec}")
                continue  # header
            rows.append(vals if len(vals) >= 3 else vals[:2] + [0.0])
    if len(rows) < 2:
        raise FormatError(f"{path}: need at least two points")
    arr = np.array(rows)
    segs = [np.stack([arr[i, :2], arr[i + 1, :2]]) for i in range(len(arr) - 1) if arr[i, 2] == arr[i + 1, 2]]
    if not segs:
        raise FormatError(f"{path}: no segments")
    return np.array(segs)


def load_surface(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".stl":
        return read_stl(path)
    if path.suffix.lower() in (".csv", ".txt"):
        return read_polyline_csv(path)
    raise FormatError(f"{path}: unknown surface format (use .stl or .csv)")


# --------------------------------------------------------------------------
# displacement frames


def read_frame_manifest(path):
    """Load a frame manifest and its VTK files.

    The manifest is TOML with an optional ``period`` and a ``[[frames]]``
    array of ``{time, file}``; each file carries a ``displacement`` point
    array. Returns ``(mesh, DisplacementFrameSet)`` with the mesh of the first frame.
    """
    from .motion import DisplacementFrameSet

    path = Path(path)
    spec = load_toml(path)
    entries = spec.get("frames")
    if not entries:
        raise FormatError(f"{path}: manifest lists no frames")
    array = spec.get("array", "displacement")
    mesh = None
    times, frames = [], []
    for entry in entries:
        m, data = read_vtk(path.parent / entry["file"])
        if mesh is None:
            mesh = m
        elif m.num_vertices != mesh.num_vertices:
            raise FormatError(f"{entry['file']}: vertex count differs from the first frame")
        if array not in data:
            raise FormatError(f"{entry['file']}: no point array {array!r}")
        times.append(float(entry["time"]))
        frames.append(np.asarray(data[array]).reshape(mesh.num_vertices, -1)[:, : mesh.dim])
    return mesh, DisplacementFrameSet(np.array(times), np.array(frames), spec.get("period"))


def write_frame_manifest(directory, mesh: Mesh, frames, prefix: str = "frame") -> Path:
    """Write one VTK per frame plus ``manifest.toml``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    if frames.period is not None:
        lines.append(f"period = {float(frames.period)!r}")
    for i, (t, d) in enumerate(zip(frames.times, frames.frames)):
        name = f"{prefix}_{i:04d}.vtk"
        write_vtk(directory / name, mesh, {"displacement": d})
        lines += ["", "[[frames]]", f"time = {float(t)!r}", f'file = "{name}"']
    manifest = directory / "manifest.toml"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
