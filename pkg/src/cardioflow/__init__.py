"""Desk-scale cardiac hemodynamics: stabilized ALE Navier-Stokes on P1 meshes,
resistive immersed valves, harmonic mesh motion and a lumped circulation,
coupled in a segregated explicit loop."""

from .circulation import (
    CirculationParams, CirculationState, InterfaceData, MMHG_TO_PA, initial_state,
    interface_pressures, run_standalone, step_imex,
)
from .coupling import CoupledConfig, CoupledRecord, CoupledResult, CoupledSimulation, CouplingError, advance, run
from .fluid import (
    FluidProperties, FluidSolver, FluidStepInputs, StabilizationOptions, energy_report, fluid_step,
)
from .mesh import Field, Mesh, generate_box_mesh
from .motion import (
    DisplacementFrameSet, DisplacementTimeline, HarmonicExtender, ale_velocity, build_timeline,
    fit_timeline, harmonic_extension,
)
from .postproc import (
    BiomarkerRange, chamber_biomarkers, normalize_biomarker, probe_velocity, tawss, wss_field,
)
from .riis import RIISOperator, Surface, ValveSpec, assemble_riis_operator, signed_distance, smoothed_delta

__version__ = "0.1.0"
