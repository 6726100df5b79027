import numpy as np
import pytest
from hypothesis import given, strategies as st

from cardioflow.io import (
    FormatError, load_surface, load_toml, read_frame_manifest, read_polyline_csv, read_stl,
    read_vtk, vtk_time, write_frame_manifest, write_stl, write_vtk,
)
from cardioflow.mesh import generate_box_mesh, retag
from cardioflow.motion import DisplacementFrameSet


def _same_mesh(a, b):
    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(a.cells, b.cells)
    assert set(a.tags) == set(b.tags)
    for t in a.tags:
        assert np.array_equal(a.facets(t), b.facets(t))


@pytest.mark.parametrize("dim", [2, 3])
def test_vtk_round_trip(tmp_path, dim):
    mesh = generate_box_mesh(dim, [0.3] * dim, [3] * dim)
    mesh = retag(mesh, {"x0": "in", "x1": "out"})
    rng = np.random.default_rng(0)
    u = rng.standard_normal((mesh.num_vertices, dim))
    p = rng.standard_normal(mesh.num_vertices)
    path = tmp_path / "m.vtk"
    write_vtk(path, mesh, {"u": u, "p": p}, time=0.125)
    m2, data = read_vtk(path)
    _same_mesh(mesh, m2)
    assert np.array_equal(data["u"], u) and np.array_equal(data["p"], p)
    assert vtk_time(path) == 0.125
    assert path.read_text().splitlines()[0] == "# vtk DataFile Version 3.0"


@given(st.floats(-1e6, 1e6, allow_subnormal=False))
def test_vtk_time_exact(t):
    import tempfile, pathlib
    mesh = generate_box_mesh(2, [1, 1], [1, 1])
    with tempfile.TemporaryDirectory() as d:
        path = pathlib.Path(d) / "s.vtk"
        write_vtk(path, mesh, time=t)
        assert vtk_time(path) == t


def test_vtk_without_time_or_tags(tmp_path):
    mesh = generate_box_mesh(2, [1, 1], [2, 2])
    path = tmp_path / "a.vtk"
    write_vtk(path, mesh)
    assert vtk_time(path) is None
    # a foreign file with volume cells only gets a single "wall" tag
    text = ["# vtk DataFile Version 3.0", "foreign", "ASCII", "DATASET UNSTRUCTURED_GRID",
            "POINTS 4 float", "0 0 0", "1 0 0", "1 1 0", "0 1 0",
            "CELLS 2 8", "3 0 1 2", "3 0 2 3", "CELL_TYPES 2", "5", "5",
            "POINT_DATA 4", "SCALARS p float", "LOOKUP_TABLE default", "1 2 3 4"]
    path.write_text("\n".join(text))
    m, data = read_vtk(path)
    assert m.dim == 2 and m.tags == ["wall"] and m.volume() == pytest.approx(1.0)
    assert np.array_equal(data["p"], [1, 2, 3, 4])


def test_vtk_errors(tmp_path):
    mesh = generate_box_mesh(2, [1, 1], [1, 1])
    with pytest.raises(FormatError):
        write_vtk(tmp_path / "x.vtk", mesh, {"bad name": np.zeros(4)})
    with pytest.raises(FormatError):
        write_vtk(tmp_path / "x.vtk", mesh, {"t": np.zeros((4, 5))})
    (tmp_path / "b.vtk").write_text("# vtk DataFile Version 3.0\nx\nBINARY\nDATASET UNSTRUCTURED_GRID\n")
    with pytest.raises(FormatError):
        read_vtk(tmp_path / "b.vtk")
    (tmp_path / "c.vtk").write_text("not vtk\n")
    with pytest.raises(FormatError):
        read_vtk(tmp_path / "c.vtk")
    (tmp_path / "d.vtk").write_text("# vtk DataFile Version 3.0\nx\nASCII\nDATASET STRUCTURED_POINTS\n")
    with pytest.raises(FormatError):
        read_vtk(tmp_path / "d.vtk")


def test_stl_round_trip(tmp_path):
    tri = np.array([[[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 0, 1], [1, 0, 1], [0, 1, 1.5]]], float)
    write_stl(tmp_path / "s.stl", tri)
    assert np.array_equal(read_stl(tmp_path / "s.stl"), tri)
    assert np.array_equal(load_surface(tmp_path / "s.stl"), tri)
    (tmp_path / "b.stl").write_bytes(b"\x00" * 84)
    with pytest.raises(FormatError):
        read_stl(tmp_path / "b.stl")


def test_polyline_csv(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("x,y,chain\n0,0,0\n1,0,0\n1,1,0\n# comment\n5,5,1\n6,5,1\n")
    segs = read_polyline_csv(path)
    assert segs.shape == (3, 2, 2)
    assert np.array_equal(segs[2], [[5, 5], [6, 5]])
    (tmp_path / "q.csv").write_text("0,0\n2,0\n")
    assert np.array_equal(load_surface(tmp_path / "q.csv"), [[[0, 0], [2, 0]]])
    (tmp_path / "r.csv").write_text("0,0\n")
    with pytest.raises(FormatError):
        read_polyline_csv(tmp_path / "r.csv")
    with pytest.raises(FormatError):
        load_surface(tmp_path / "x.obj")


def test_frame_manifest_round_trip(tmp_path):
    mesh = generate_box_mesh(2, [1, 1], [3, 3])
    frames = np.random.default_rng(1).standard_normal((4, mesh.num_vertices, 2))
    fs = DisplacementFrameSet(np.array([0.0, 0.2, 0.4, 0.6]), frames, 0.8)
    manifest = write_frame_manifest(tmp_path / "frames", mesh, fs)
    m2, fs2 = read_frame_manifest(manifest)
    _same_mesh(mesh, m2)
    assert np.array_equal(fs2.times, fs.times) and np.array_equal(fs2.frames, fs.frames)
    assert fs2.period == 0.8
    assert load_toml(manifest)["frames"][1]["file"] == "frame_0001.vtk"


def test_manifest_errors(tmp_path):
    (tmp_path / "m.toml").write_text("period = 0.8\n")
    with pytest.raises(FormatError):
        read_frame_manifest(tmp_path / "m.toml")
    mesh = generate_box_mesh(2, [1, 1], [1, 1])
    write_vtk(tmp_path / "f.vtk", mesh)
    (tmp_path / "n.toml").write_text('[[frames]]\ntime = 0.0\nfile = "f.vtk"\n')
    with pytest.raises(FormatError, match="displacement"):
        read_frame_manifest(tmp_path / "n.toml")
