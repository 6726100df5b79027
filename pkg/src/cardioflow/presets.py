"""Self-contained desk-scale geometries and wall-motion drivers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .circulation import cosine_volume_waveform
from .mesh import Mesh, generate_box_mesh, retag
from .motion import DisplacementFrameSet, build_timeline, fit_timeline
from .riis import Surface, ValveSpec, ZYGOTE_VALVES


def chamber_mesh(half_width: float, length: float, nx: int, ny: int) -> Mesh:
    """Rectangle ``[-w, w] x [-L, 0]`` with the base at ``y = 0``.

    Tags: ``in`` (base, x < 0), ``out`` (base, x > 0), ``wall`` (the rest).
    ``nx`` must be even so the base splits on a vertex.
    """
    if nx % 2 or nx < 2 or ny < 2:
        raise ValueError("nx must be even and both resolutions at least 2")
    box = generate_box_mesh(2, [2 * half_width, length], [nx, ny])
    verts = box.vertices - [half_width, length]
    base = box.facets("y1")
    cx = verts[base, 0].mean(axis=1)
    wall = np.vstack([box.facets(t) for t in ("x0", "x1", "y0")])
    return Mesh(verts, box.cells, {"wall": wall, "in": base[cx < 0], "out": base[cx > 0]})


@dataclass
class VentriclePreset:
    mesh: Mesh
    volume: Callable[[float], float]  # driver waveform, mL
    depth: float
    timeline: object
    valves: list
    ejection: tuple[float, float]
    period: float
    neck: float  # depth of the rigid region below the base, m

    def mesh_volume(self, t: float) -> float:
        """Chamber volume (mL) of the moving mesh at ``t``."""
        return self.mesh.moved(self.timeline.evaluate(t)).volume() * self.depth * 1e6

    def ejected_volume(self) -> float:
        """Volume drop of the moving mesh over the ejection window (mL)."""
        a, b = self.ejection
        return self.mesh_volume(a) - self.mesh_volume(b)


def ventricle_valves(half_width: float, seal_depth: float, eps: float,
                     R: float = 1e4, mitral_R: float = 1e5) -> list[ValveSpec]:
    """AV on the ``out`` half of the base and MV on the ``in`` half.

    A closed valve is an L-shaped cut: down the base midline, then across to
    the wall at ``-seal_depth``, sealing its opening from the chamber. Open
    valves keep only the midline leaflet. Times follow the zygote table. The
    mitral band holds the full systolic gradient against a fixed atrial
    pressure and leaks like ``eps / R``, hence the separate ``mitral_R``.
    """
    d = seal_depth
    reach = 1.2 * half_width
    valves = []
    for name, side, r in (("AV", 1.0, R), ("MV", -1.0, mitral_R)):
        open_t, close_t, _, _ = ZYGOTE_VALVES[name]
        mid = Surface.segment([0.0, 0.5 * d], [0.0, -d], 4)
        cut = Surface.polyline([[0.0, 0.5 * d], [0.0, -d], [side * reach, -d]])
        valves.append(ValveSpec(name, r, eps, open_t, close_t, closed_surface=cut, open_surface=mid))
    return valves


def idealized_ventricle(half_width: float = 0.025, length: float = 0.1, nx: int = 16,
                        ny: int = 32, v_max: float = 151.0, v_min: float = 66.4,
                        period: float = 0.8, frames: int = 40, lam: float = 0.0,
                        eps: float | None = None, mitral_R: float = 1e5) -> VentriclePreset:
    """Rectangular chamber with a rigid neck and a contracting body.

    Both valve cuts sit in the neck, so the pockets between them and the base
    never change size and all volume change happens below, where the body
    shortens towards the neck: ``y -> -neck + sigma (y + neck)``. ``sigma`` is
    set per frame so the area tracks a raised-cosine volume waveform
    (ejection while the AV is open, refilling while the MV is open). The 2D
    depth makes the initial area equal to ``v_max``. ``eps`` defaults to 1.5
    times the cell diameter.
    """
    mesh = chamber_mesh(half_width, length, nx, ny)
    h = float(mesh.cell_sizes.max())
    eps = 1.5 * h if eps is None else eps
    seal = eps + h
    dy = length / ny
    neck = math.ceil((seal + eps + h) / dy - 1e-9) * dy  # on a grid line
    if neck >= length:
        raise ValueError("chamber too short for the valve band at this resolution")
    av_open, av_close, _, _ = ZYGOTE_VALVES["AV"]
    mv_open, mv_close, _, _ = ZYGOTE_VALVES["MV"]
    volume = cosine_volume_waveform(v_max, v_min, av_open, av_close, mv_open, period + mv_close, period)
    depth = v_max * 1e-6 / mesh.volume()
    body = (length - neck) / length  # area fraction that contracts
    shape = np.zeros_like(mesh.vertices)
    shape[:, 1] = np.minimum(mesh.vertices[:, 1] + neck, 0.0)

    times = np.arange(frames) * period / frames
    sigmas = [1.0 - (1.0 - volume(t) / v_max) / body for t in times]
    if min(sigmas) <= 0:
        raise ValueError("volume waveform needs more contraction than the body allows")
    disp = np.stack([(sg - 1.0) * shape for sg in sigmas])
    timeline = fit_timeline(DisplacementFrameSet(times, disp, period), lam)
    valves = ventricle_valves(half_width, seal, eps, mitral_R=mitral_R)
    return VentriclePreset(mesh, volume, depth, timeline, valves, (av_open, av_close), period, neck)


def oscillating_channel(length: float = 0.04, height: float = 0.01, resolution=(32, 8),
                        amplitude: float = 1e-3, period: float = 0.8, frames: int = 20,
                        lam: float = 0.0):
    """Channel whose top wall bulges as ``A sin(pi x/L) sin(2 pi t/T)``.

    Tags: ``in`` (x = 0), ``out`` (x = L), ``bottom``, ``top``. Returns the
    mesh, the frames of boundary displacement and the fitted timeline.
    """
    mesh = generate_box_mesh(2, [length, height], resolution)
    mesh = retag(mesh, {"x0": "in", "x1": "out", "y0": "bottom", "y1": "top"})
    top = mesh.tag_vertices("top")
    times = np.arange(frames) * period / frames
    disp = np.zeros((frames, mesh.num_vertices, 2))
    for i, t in enumerate(times):
        x = mesh.vertices[top, 0]
        disp[i, top, 1] = amplitude * np.sin(np.pi * x / length) * np.sin(2 * np.pi * t / period)
    fs = DisplacementFrameSet(times, disp, period)
    return mesh, fs, build_timeline(mesh, fs, lam)
