"""Command line: coupled and standalone runs, biomarker reports and TAWSS maps."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import circulation as circ
from .coupling import CoupledConfig, CoupledSimulation
from .fluid import FluidProperties, StabilizationOptions
from .io import atomic_write, load_surface, load_toml, read_frame_manifest, read_vtk, vtk_time, write_vtk
from .mesh import generate_box_mesh
from .motion import StaticTimeline, build_timeline
from .postproc import (
    PostprocError, beat_bounds, biomarker_report, load_ranges, probe_velocity, read_series_csv,
    region_stats, series_biomarkers, snapshot_paths, tawss, wss_field, write_report,
)
from .presets import idealized_ventricle
from .riis import PRESETS, Surface, ValveSpec

log = logging.getLogger("cardioflow")


class ConfigError(ValueError):
    pass


def _path(base: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def circulation_setup(section: dict, base: Path) -> tuple[circ.CirculationParams, circ.CirculationState]:
    """Params from ``params_file`` and inline keys (inline wins); state from ``initial``."""
    section = dict(section)
    initial = section.pop("initial", "cfd")
    t0 = float(section.pop("t0", 0.0))
    values = {}
    if "params_file" in section:
        values.update(load_toml(_path(base, section.pop("params_file"))))
    values.update(section)
    return circ.CirculationParams.from_mapping(values), circ.initial_state(initial, t0)


def _fluid(section: dict) -> tuple[FluidProperties, StabilizationOptions]:
    props = FluidProperties(**{k: float(section[k]) for k in ("rho", "mu") if k in section})
    stab_keys = ("sigma_t", "c_inv", "c_div", "backflow_beta", "viscous_form", "supg", "pspg", "grad_div")
    return props, StabilizationOptions(**{k: section[k] for k in stab_keys if k in section})


def _valves(section: dict, base: Path) -> list[ValveSpec]:
    out = []
    preset = section.get("preset", "zygote-times")
    for v in section.get("valve", []):
        closed = Surface(load_surface(_path(base, v["closed"])))
        opened = Surface(load_surface(_path(base, v["open"]))) if "open" in v else None
        overrides = {k: float(v[k]) for k in ("R", "eps", "open_time", "close_time") if k in v}
        if v["name"] in PRESETS[preset]:
            out.append(ValveSpec.from_preset(v["name"], closed, opened, preset, **overrides))
        else:
            out.append(ValveSpec(v["name"], closed_surface=closed, open_surface=opened, **overrides))
    return out


def coupled_config(cfg: dict, base: Path, out_dir: Path | None = None) -> CoupledConfig:
    """Translate a TOML run description into a :class:`CoupledConfig`."""
    mesh_sec = dict(cfg.get("mesh", {}))
    coupling = dict(cfg.get("coupling", {}))
    output = dict(cfg.get("output", {}))
    kw: dict = {}
    preset = mesh_sec.pop("preset", None)
    if preset == "ventricle":
        v = idealized_ventricle(**mesh_sec)
        mesh = v.mesh
        kw.update(timeline=v.timeline, valves=v.valves, depth=v.depth, period=v.period,
                  interface={"out": "out-LH"},
                  constant_pressure={"in": 10.0 * circ.MMHG_TO_PA})
    elif preset == "channel":
        mesh = generate_box_mesh(2, [mesh_sec.get("length", 0.04), mesh_sec.get("height", 0.01)],
                                 [mesh_sec.get("nx", 32), mesh_sec.get("ny", 8)])
    elif "file" in mesh_sec:
        mesh, _ = read_vtk(_path(base, mesh_sec["file"]))
    else:
        raise ConfigError("[mesh] needs preset = 'ventricle' | 'channel' or file = '...'")

    tl = cfg.get("timeline", {})
    if "manifest" in tl:
        ref, frames = read_frame_manifest(_path(base, tl["manifest"]))
        if ref.num_vertices != mesh.num_vertices:
            raise ConfigError("frame manifest mesh does not match [mesh]")
        kw["timeline"] = build_timeline(mesh, frames, float(tl.get("lambda", 0.0)),
                                        float(tl.get("alpha", 1.0)), float(tl.get("floor", 1.0)))
    elif tl.get("kind") == "static":
        kw["timeline"] = StaticTimeline(mesh.num_vertices, mesh.dim)
    if "valves" in cfg and cfg["valves"].get("valve"):
        kw["valves"] = _valves(cfg["valves"], base)
    params, state0 = circulation_setup(cfg.get("circulation", {}), base)
    props, stab = _fluid(cfg.get("fluid", {}))
    for key in ("interface", "constant_pressure", "surrogate_flows"):
        if key in coupling:
            kw[key] = {k: (float(v) if key != "interface" else v) for k, v in coupling.pop(key).items()}
    for key in ("period", "depth", "t0"):
        if key in coupling:
            kw[key] = float(coupling.pop(key))
    try:
        dt, T = float(coupling.pop("dt")), float(coupling.pop("T"))
    except KeyError as exc:
        raise ConfigError(f"[coupling] is missing {exc}") from None
    if "output_stride" in coupling:
        kw["output_stride"] = int(coupling.pop("output_stride"))
    if coupling:
        raise ConfigError(f"unknown [coupling] keys: {sorted(coupling)}")
    out_dir = out_dir or _path(base, output.get("dir", "output"))
    return CoupledConfig(
        mesh=mesh, dt=dt, T=T, params=params, state0=state0, fluid=props, stabilization=stab,
        snapshot_dir=out_dir, vtk_stride=int(output.get("vtk_stride", 0)), **kw,
    )


def cmd_run(args) -> int:
    path = Path(args.config)
    cfg = load_toml(path)
    config = coupled_config(cfg, path.parent, Path(args.out) if args.out else None)
    sim = CoupledSimulation(config)
    res = sim.run()
    csv_path = config.snapshot_dir / cfg.get("output", {}).get("csv", "run.csv")
    res.to_csv(csv_path)
    write_vtk(config.snapshot_dir / "final.vtk", res.mesh, {"u": res.u, "p": res.p},
              time=sim.state.t)
    print(f"wrote {csv_path} ({len(res.records)} records)")
    return 0


def cmd_run_0d(args) -> int:
    path = Path(args.config)
    cfg = load_toml(path)
    base = path.parent
    params, state = circulation_setup(cfg.get("circulation", {}), base)
    run = cfg.get("run", {})
    period = float(run.get("period", 0.8))
    waves = circ.default_heart_waveforms(period)
    for ch, spec in cfg.get("heart", {}).items():
        if ch not in waves:
            raise ConfigError(f"[heart.{ch}]: unknown chamber")
        if ch in ("LV", "RV"):
            waves[ch] = circ.cosine_volume_waveform(
                float(spec["v_max"]), float(spec["v_min"]), *map(float, spec["eject"]),
                *map(float, spec["refill"]), period)
        else:
            raise ConfigError("only ventricular waveforms can be configured")
    timing = None
    if run.get("valve_timing", "pressure") != "pressure":
        timing = {k: v[:2] for k, v in PRESETS[run["valve_timing"]].items()}
    res = circ.run_standalone(params, waves, float(run.get("T", 5 * period)), float(run.get("dt", 1e-3)),
                              period, state, timing, int(run.get("output_every", 1)))
    out = Path(args.out) if args.out else _path(base, cfg.get("output", {}).get("csv", "run0d.csv"))
    res.to_csv(out)
    print(f"wrote {out} ({len(res.data)} rows)")
    return 0


def cmd_biomarkers(args) -> int:
    series = read_series_csv(args.series)
    ranges = load_ranges(args.ranges)
    window = None if args.whole else beat_bounds(series["t"], args.period, args.beat)
    rows = biomarker_report(series_biomarkers(series, window), ranges)
    if not rows:
        raise PostprocError("no biomarker in the range registry can be computed from this series")
    write_report(args.out, rows)
    for r in rows:
        print(f"{r.name:12s} {r.value:10.4g} {r.units:5s} n={r.normalized:+.3f} {'in' if r.in_range else 'OUT'}")
    return 0


def cmd_wss(args) -> int:
    times, mesh, fields = _load_snapshots(args.snapshots, args.dt)
    avg = tawss(times, [wss_field(mesh, u, args.mu, [args.wall_tag]) for u in fields])
    write_vtk(args.out, mesh, {"tawss": avg})
    stats = region_stats(mesh, avg, args.wall_tag)
    print(f"TAWSS on {args.wall_tag}: min {stats['min']:.4g} mean {stats['mean']:.4g} max {stats['max']:.4g} Pa")
    return 0


def _load_snapshots(directory, dt: float):
    """Time-sorted ``(times, mesh, velocities)`` from a snapshot directory."""
    times, fields, mesh = [], [], None
    for i, p in enumerate(snapshot_paths(directory)):
        m, data = read_vtk(p)
        if "u" not in data:
            raise PostprocError(f"{p}: no 'u' point array")
        mesh = m if mesh is None else mesh
        if m.num_vertices != mesh.num_vertices:
            raise PostprocError("snapshots do not share one mesh topology")
        t = vtk_time(p)
        times.append(float(i) * dt if t is None else t)
        fields.append(data["u"])
    order = np.argsort(times, kind="stable")
    return np.asarray(times)[order], mesh, [fields[i] for i in order]


def cmd_probe(args) -> int:
    times, mesh, fields = _load_snapshots(args.snapshots, args.dt)
    center = [float(c) for c in args.center.split(",")]
    if len(center) != mesh.dim:
        raise PostprocError(f"--center needs {mesh.dim} coordinates")
    speed = probe_velocity(mesh, fields, center, args.radius)

    def write(tmp):
        with open(tmp, "w") as fh:
            fh.write("t,speed\n")
            for t, v in zip(times, speed):
                fh.write(f"{float(t)!r},{float(v)!r}\n")

    atomic_write(args.out, write)
    print(f"peak speed {speed.max():.4g} m/s at t = {times[np.argmax(speed)]:.4g} s")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cardioflow", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="coupled 3D-0D run from a TOML config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides [output] dir)")
    r.set_defaults(fn=cmd_run)

    r0 = sub.add_parser("run-0d", help="standalone circulation driven by prescribed chamber volumes")
    r0.add_argument("config")
    r0.add_argument("--out", help="CSV path (overrides [output] csv)")
    r0.set_defaults(fn=cmd_run_0d)

    pp = sub.add_parser("postproc", help="postprocessing")
    psub = pp.add_subparsers(dest="what", required=True)
    b = psub.add_parser("biomarkers", help="biomarker report against reference ranges")
    b.add_argument("--series", required=True)
    b.add_argument("--ranges", help="range registry TOML (bundled one by default)")
    b.add_argument("--out", required=True)
    b.add_argument("--period", type=float, default=0.8)
    b.add_argument("--beat", type=int, help="beat index (default: last complete beat)")
    b.add_argument("--whole", action="store_true", help="use the whole series instead of one beat")
    b.set_defaults(fn=cmd_biomarkers)
    w = psub.add_parser("wss", help="time-averaged wall shear stress from VTK snapshots")
    w.add_argument("--snapshots", required=True)
    w.add_argument("--wall-tag", required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--mu", type=float, default=FluidProperties().mu)
    w.add_argument("--dt", type=float, default=1.0, help="sample spacing for snapshots without a time stamp")
    w.set_defaults(fn=cmd_wss)
    pr = psub.add_parser("probe", help="mean speed in a spherical control volume over the snapshots")
    pr.add_argument("--snapshots", required=True)
    pr.add_argument("--center", required=True, help="comma-separated coordinates, m")
    pr.add_argument("--radius", required=True, type=float, help="sphere radius, m")
    pr.add_argument("--out", required=True)
    pr.add_argument("--dt", type=float, default=1.0, help="sample spacing for snapshots without a time stamp")
    pr.set_defaults(fn=cmd_probe)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"cardioflow: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
