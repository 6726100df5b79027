import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cardioflow.circulation import cosine_volume_waveform
from cardioflow.io import write_vtk
from cardioflow.mesh import generate_box_mesh
from cardioflow.postproc import (
    DISPLAY_CLIP, REPORT_COLUMNS, BiomarkerRange, PostprocError, beat_bounds, biomarker_report,
    chamber_biomarkers, in_range, load_ranges, normalize_biomarker, probe_velocity,
    read_series_csv, recovered_gradient, region_stats, series_biomarkers, snapshot_paths, tawss,
    vertex_normals, wss_field, write_report,
)

EF_RANGE = BiomarkerRange("EF_LV", "interval", "%", "c", low=49, high=73)
SD_RANGE = BiomarkerRange("p_RV_max", "mean_sd", "mmHg", "c", mean=35, sd=11)


def test_normalization_anchors():
    assert normalize_biomarker(49, EF_RANGE) == -1.0
    assert normalize_biomarker(73, EF_RANGE) == 1.0
    assert normalize_biomarker(61, EF_RANGE) == 0.0
    assert normalize_biomarker(56.1, EF_RANGE) == pytest.approx(-0.40833333, abs=1e-8)
    assert normalize_biomarker(46, SD_RANGE) == 1.0
    assert normalize_biomarker(24, SD_RANGE) == -1.0


@given(st.floats(-1e3, 1e3))
def test_in_range_iff_inside(x):
    n = normalize_biomarker(x, EF_RANGE)
    assert in_range(n) == (49 <= x <= 73)
    assert normalize_biomarker(x + 1, EF_RANGE) > n


def test_range_validation():
    with pytest.raises(PostprocError):
        BiomarkerRange("a", "interval", "mL", "c", low=5, high=1)
    with pytest.raises(PostprocError):
        BiomarkerRange("a", "mean_sd", "mL", "c", mean=5, sd=0)
    with pytest.raises(PostprocError):
        BiomarkerRange("a", "median", "mL", "c")


def test_bundled_registry():
    r = load_ranges()
    assert len(r) == 20
    assert (r["EF_LV"].low, r["EF_LV"].high, r["EF_LV"].units) == (49, 73, "%")
    assert (r["p_LV_max"].mean, r["p_LV_max"].sd) == (119, 13)
    assert (r["v_AV_peak"].mean, r["v_AV_peak"].sd) == (1.07, 0.18)
    assert all(x.citation for x in r.values())


def test_custom_registry(tmp_path):
    path = tmp_path / "r.toml"
    path.write_text('[[biomarker]]\nname = "SV_LV"\nunits = "mL"\nkind = "interval"\nlow = 60\nhigh = 100\ncitation = "x"\n')
    r = load_ranges(path)
    assert list(r) == ["SV_LV"] and r["SV_LV"].high == 100


def test_chamber_biomarkers_from_waveform():
    v = cosine_volume_waveform(151.0, 66.4, 0.262, 0.666, 0.710, 1.008, 0.8)
    t = np.linspace(0, 0.8, 801)
    b = chamber_biomarkers(t, V=[v(x) for x in t], Q=np.sin(t), p=np.full(t.size, 7.0))
    assert b["EDV"] == pytest.approx(151.0) and b["ESV"] == pytest.approx(66.4)
    assert b["SV"] == pytest.approx(84.6)
    assert b["EF"] == pytest.approx(84.6 / 151.0)
    assert b["p_mean"] == pytest.approx(7.0) and b["Q_max"] == pytest.approx(np.sin(0.8))
    w = chamber_biomarkers(t, p=2 + np.sin(2 * np.pi * t / 0.8), window=(0.0, 0.8))
    assert w["p_mean"] == pytest.approx(2.0, abs=1e-9)
    with pytest.raises(PostprocError):
        chamber_biomarkers(t, V=t, window=(5, 6))


def test_beat_bounds():
    t = np.linspace(0, 2.0, 2001)
    assert beat_bounds(t, 0.8) == pytest.approx((0.8, 1.6))
    assert beat_bounds(t, 0.8, 0) == pytest.approx((0.0, 0.8))
    with pytest.raises(PostprocError):
        beat_bounds(t, 0.8, 2)
    with pytest.raises(PostprocError):
        beat_bounds(t[:10], 0.8)


def test_series_report_and_csv(tmp_path):
    t = np.linspace(0, 0.8, 81)
    series = {"t": t, "V_LV": 100 + 30 * np.cos(2 * np.pi * t / 0.8), "p_LA": np.full(81, 40.0),
              "Q_AV": 400 * np.sin(np.pi * t / 0.8), "v_AV": np.full(81, 1.07)}
    vals = series_biomarkers(series)
    assert vals["SV_LV"] == (pytest.approx(60.0), "mL")
    assert vals["EF_LV"][0] == pytest.approx(100 * 60 / 130) and vals["EF_LV"][1] == "%"
    rows = biomarker_report(vals, load_ranges())
    names = [r.name for r in rows]
    assert names.index("ESV_LV") < names.index("v_AV_peak")
    byname = {r.name: r for r in rows}
    assert not byname["p_LA_mean"].in_range and byname["v_AV_peak"].normalized == pytest.approx(0.0)
    out = tmp_path / "report.csv"
    write_report(out, rows)
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# normalization:") and lines[1].startswith("#")
    body = list(csv.reader(lines[2:]))
    assert tuple(body[0]) == REPORT_COLUMNS
    shown = {r[0]: float(r[3]) for r in body[1:]}
    assert shown["p_LA_mean"] == DISPLAY_CLIP  # 6.6 normalized units, clipped for display
    with pytest.raises(PostprocError):
        biomarker_report({"SV_LV": (1.0, "L")}, load_ranges())


def test_read_series_csv(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("# comment\nt,p_AR_SYS\n0,1\n1,2\n")
    s = read_series_csv(p)
    assert np.array_equal(s["p_AR_SYS"], [1, 2])
    (tmp_path / "n.csv").write_text("x,y\n1,2\n")
    with pytest.raises(PostprocError):
        read_series_csv(tmp_path / "n.csv")


def _poiseuille_field(mesh, H, U):
    y = mesh.vertices[:, 1]
    return np.stack([4 * U * y * (H - y) / H**2, 0 * y], axis=1)


@pytest.mark.parametrize("ny,err", [(16, 0.0625), (32, 0.03125)])
def test_wss_poiseuille_first_order(ny, err):
    L, H, U, mu = 0.08, 0.01, 1e-3, 3.5e-3
    m = generate_box_mesh(2, [L, H], [4 * ny, ny])
    w = wss_field(m, _poiseuille_field(m, H, U), mu, ["y0", "y1"])
    verts, n = vertex_normals(m, ["y0", "y1"])
    mag = np.linalg.norm(w[verts], axis=1)
    assert np.allclose(mag, 4 * mu * U / H * (1 - err), rtol=1e-9)
    assert np.abs(np.einsum("vi,vi->v", w[verts], n)).max() <= 1e-10 * mag.max()
    off = np.setdiff1d(np.arange(m.num_vertices), verts)
    assert np.all(w[off] == 0)


def test_recovered_gradient_exact_for_linear(unit_cube):
    A = np.array([[1.0, 2, 3], [4, 5, 6], [7, 8, 9]])
    g = recovered_gradient(unit_cube, unit_cube.vertices @ A.T)
    assert np.allclose(g, A)


def test_wss_3d_normal_free():
    m = generate_box_mesh(3, [1, 1, 1], [3, 3, 3])
    u = np.sin(m.vertices @ [[1, 2, 0], [0, 1, 3], [2, 0, 1]])
    w = wss_field(m, u, 1e-3, "z1")
    verts, n = vertex_normals(m, ["z1"])
    assert np.abs(np.einsum("vi,vi->v", w[verts], n)).max() <= 1e-10 * np.abs(w).max()
    with pytest.raises(Exception):
        wss_field(m, u, 1e-3, ["nope"])


@given(st.floats(0.1, 10), st.integers(1, 30))
def test_tawss_of_constant(c, n):
    field = np.tile([0.6 * c, 0.8 * c], (5, 1))
    times = np.linspace(0, 0.8, n)
    out = tawss(times, [field] * n)
    assert np.abs(out - c).max() <= 1e-12 * c


def test_tawss_checks():
    t = np.array([0.0, 0.1, 0.3])
    with pytest.raises(PostprocError):
        tawss(t, [np.zeros((2, 2))] * 3)
    with pytest.raises(PostprocError):
        tawss([0.0, 0.1], [np.zeros((2, 2))])
    with pytest.raises(PostprocError):
        tawss([], [])
    # linear ramp of magnitude: trapezoid average is the midpoint value
    s = [np.full((1, 2), [3.0 * k, 4.0 * k]) for k in range(3)]
    assert tawss([0, 1, 2], s)[0] == pytest.approx(5.0)


def test_region_stats_and_probe(unit_square):
    vals = unit_square.vertices[:, 0]
    s = region_stats(unit_square, vals, "y0")
    assert (s["min"], s["max"]) == (0.0, 1.0) and s["mean"] == pytest.approx(0.5)
    u = np.tile([3.0, 4.0], (unit_square.num_vertices, 1))
    assert np.allclose(probe_velocity(unit_square, [u, 2 * u], [0.5, 0.5], 0.3), [5.0, 10.0])
    with pytest.raises(PostprocError):
        probe_velocity(unit_square, [u], [5.0, 5.0], 0.1)
    with pytest.raises(PostprocError):
        probe_velocity(unit_square, [u], [0.5, 0.5], 0.0)


def test_snapshot_paths(tmp_path, unit_square):
    with pytest.raises(PostprocError):
        snapshot_paths(tmp_path)
    write_vtk(tmp_path / "final.vtk", unit_square)
    assert [p.name for p in snapshot_paths(tmp_path)] == ["final.vtk"]
    for i in (2, 1):
        write_vtk(tmp_path / f"snapshot_{i:06d}.vtk", unit_square)
    assert [p.name for p in snapshot_paths(tmp_path)] == ["snapshot_000001.vtk", "snapshot_000002.vtk"]
