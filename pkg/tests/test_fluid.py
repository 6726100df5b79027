import logging

import numpy as np
import pytest

from cardioflow.benchmarks import poiseuille
from cardioflow.fem import boundary_integral_flux
from cardioflow.fluid import (
    FluidProperties, FluidSolveError, FluidSolver, FluidStepInputs, StabilizationOptions,
    energy_report, fluid_step, stabilization_parameters,
)
from cardioflow.mesh import Field, generate_box_mesh


@pytest.fixture
def channel():
    return generate_box_mesh(2, [0.02, 0.005], [12, 4])


def walls(u=0.0):
    return {"y0": u, "y1": u}


def test_input_validation(channel):
    z = np.zeros((channel.num_vertices, 2))
    ok = dict(neumann={"x0": 0.0, "x1": 0.0}, dirichlet=walls())
    FluidStepInputs(channel, z, None, 1e-3, **ok)
    with pytest.raises(ValueError, match="without a condition"):
        FluidStepInputs(channel, z, None, 1e-3, neumann={"x0": 0.0}, dirichlet=walls())
    with pytest.raises(ValueError, match="two conditions"):
        FluidStepInputs(channel, z, None, 1e-3, neumann={"x0": 0.0, "x1": 0.0, "y0": 0.0}, dirichlet=walls())
    with pytest.raises(ValueError, match="unknown"):
        FluidStepInputs(channel, z, None, 1e-3, neumann={"x0": 0.0, "x1": 0.0, "zz": 0.0}, dirichlet=walls())
    with pytest.raises(ValueError, match="shape"):
        FluidStepInputs(channel, z[:-1], None, 1e-3, **ok)
    with pytest.raises(ValueError):
        FluidStepInputs(channel, z, None, 0.0, **ok)
    with pytest.raises(ValueError):
        FluidProperties(rho=0.0)
    with pytest.raises(ValueError):
        StabilizationOptions(viscous_form="weird")


def test_tau_formula_single_cell():
    mesh = generate_box_mesh(2, [1.0, 1.0], [1, 1])
    u = np.tile([3.0, 4.0], (mesh.num_vertices, 1))
    props = FluidProperties(rho=2.0, mu=0.5)
    tm, tc = stabilization_parameters(mesh, u, 0.1, props)
    h = np.sqrt(2.0)
    expected = (4.0 * (2.0 / 0.1) ** 2 + (2 * 2.0 * 5.0 / h) ** 2 + (36 * 0.5 / h**2) ** 2) ** -0.5
    assert np.allclose(tm, expected)
    assert np.allclose(tc, h**2 / (8.0 * expected))
    tm2, _ = stabilization_parameters(mesh, u, 0.1, props, sigma=np.full(2, 7.0))
    assert np.all(tm2 < tm)


def test_rest_state_stays_at_rest(channel):
    z = np.zeros((channel.num_vertices, 2))
    res = FluidSolver().step(FluidStepInputs(channel, z, None, 1e-3, neumann={"x0": 5.0, "x1": 5.0},
                                             dirichlet=walls()))
    assert np.abs(res.u).max() < 1e-12
    assert np.allclose(res.p, 5.0, atol=1e-9)


def test_uniform_translation_is_preserved(channel):
    """Fluid carried with a rigidly translating mesh stays in rigid motion."""
    v = np.array([0.3, -0.1])
    u = np.tile(v, (channel.num_vertices, 1))
    inp = FluidStepInputs(channel, u, u, 1e-3, dirichlet={t: None for t in channel.tags})
    res = FluidSolver().step(inp)
    assert np.allclose(res.u, v, atol=1e-12)
    assert np.abs(res.p).max() < 1e-9


def test_coarse_poiseuille_and_mass_balance():
    r = poiseuille(16, 8)
    assert abs(r.rel_error) < 0.03
    u = Field.vector(r.mesh, r.u)
    q_in = boundary_integral_flux(u, None, "x0")
    q_out = boundary_integral_flux(u, None, "x1")
    assert q_in < 0 < q_out
    assert abs(q_in + q_out) < 1e-3 * q_out
    # profile is symmetric about the centerline
    mid = np.isclose(r.mesh.vertices[:, 0], 0.04)
    y = r.mesh.vertices[mid, 1]
    prof = r.u[mid, 0][np.argsort(y)]
    assert np.allclose(prof, prof[::-1], atol=1e-3 * prof.max())


def test_viscous_forms_agree_for_parallel_flow():
    a = poiseuille(16, 8, options=StabilizationOptions(viscous_form="symmetric"))
    b = poiseuille(16, 8, options=StabilizationOptions(viscous_form="laplacian"))
    assert a.peak == pytest.approx(b.peak, rel=0.01)


def test_errors_and_counters(channel):
    z = np.zeros((channel.num_vertices, 2))
    s = FluidSolver()
    with pytest.raises(FluidSolveError, match="Neumann"):
        s.step(FluidStepInputs(channel, z, None, 1e-3, neumann={"x0": np.nan, "x1": 0.0}, dirichlet=walls()))
    s.step(FluidStepInputs(channel, z, None, 1e-3, neumann={"x0": 1.0, "x1": 0.0}, dirichlet=walls()))
    assert s.solve_count == 1
    from cardioflow.fem import SparseOperator
    import scipy.sparse as sp
    with pytest.raises(ValueError, match="RIIS"):
        FluidStepInputs(channel, z, None, 1e-3, neumann={"x0": 0.0, "x1": 0.0}, dirichlet=walls(),
                        riis=SparseOperator(sp.eye(3)))


def test_cfl_warning_once(channel, caplog):
    caplog.set_level(logging.DEBUG, logger="cardioflow.fluid")
    u = np.tile([10.0, 0.0], (channel.num_vertices, 1))
    s = FluidSolver()
    for _ in range(3):
        s.step(FluidStepInputs(channel, u, None, 1e-2, neumann={"x0": 0.0, "x1": 0.0},
                               dirichlet=walls(np.array([10.0, 0.0]))))
    warns = [r for r in caplog.records if r.levelno == logging.WARNING and "CFL" in r.message]
    assert len(warns) == 1


def test_deterministic_and_thread_invariant(monkeypatch):
    mesh = generate_box_mesh(2, [0.02, 0.01], [64, 40])  # more cells than one chunk
    rng = np.random.default_rng(0)
    u0 = 0.01 * rng.standard_normal((mesh.num_vertices, 2))
    inp = lambda: FluidStepInputs(mesh, u0, None, 1e-3, neumann={"x0": 1.0, "x1": 0.0}, dirichlet=walls())
    a = FluidSolver().step(inp())
    b = FluidSolver().step(inp())
    assert np.array_equal(a.u, b.u) and np.array_equal(a.p, b.p)
    monkeypatch.setenv("CARDIOFLOW_NUM_THREADS", "4")
    c = FluidSolver().step(inp())
    assert np.allclose(c.u, a.u, rtol=0, atol=1e-12 * np.abs(a.u).max())


def test_energy_report():
    mesh = generate_box_mesh(2, [1.0, 1.0], [3, 3])
    u = np.tile([2.0, 0.0], (mesh.num_vertices, 1))
    p = np.full(mesh.num_vertices, 3.0)
    e = energy_report(mesh, u, p, rho=1.0)
    assert e.kinetic == pytest.approx(2.0)
    assert e.convective_flux["x1"] == pytest.approx(4.0)
    assert e.convective_flux["x0"] == pytest.approx(-4.0)
    assert e.pressure_power["x1"] == pytest.approx(6.0)
    assert energy_report(mesh, u, None, 1.0, tags=["x1"], u_ale=u).convective_flux["x1"] == pytest.approx(0.0)


def test_fluid_step_wrapper(channel):
    z = np.zeros((channel.num_vertices, 2))
    u, p = fluid_step(FluidStepInputs(channel, z, None, 1e-3, neumann={"x0": 1.0, "x1": 0.0}, dirichlet=walls()))
    assert u.components == 2 and p.components == 1
    assert boundary_integral_flux(u, None, "x1") > 0
