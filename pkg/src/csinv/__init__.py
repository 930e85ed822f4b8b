"""Linearized 3-D electromagnetic contrast source inversion.

Forward modeling on a staggered frequency-domain grid, joint group-sparse
estimation of contrast sources with held-out stopping, and conjugate-gradient
reconstruction of the complex contrast, aimed at half-space radar scenes
(ground-penetrating and through-wall analogues).
"""

from .config import Scenario, load_scenario
from .errors import (
    ArtifactError,
    ConfigError,
    CsinvError,
    GridError,
    SolveFailure,
)
from .grid import PmlStretch, Region, Shape, YeeGrid, build_grid, build_pml, rasterize_shape
from .fdfd import SourceSet, StiffnessMatrix, assemble, incident_fields, solve, solve_adjoint
from .harness import RunOptions, RunReport, add_noise, run_scenario, synthesize_data
from .mmv import MmvProblem, MmvTrace, group_norm, project_group_l1, solve_mmv_cv
from .scattering import (
    MeasurementOperator,
    Receiver,
    ScatteringMatrix,
    build_measurement,
    build_scattering_matrix,
    split_cv,
)

__version__ = "0.1.0"

__all__ = [
    "ArtifactError",
    "ConfigError",
    "CsinvError",
    "GridError",
    "MeasurementOperator",
    "MmvProblem",
    "MmvTrace",
    "PmlStretch",
    "Receiver",
    "Region",
    "RunOptions",
    "RunReport",
    "Scenario",
    "ScatteringMatrix",
    "Shape",
    "SolveFailure",
    "SourceSet",
    "StiffnessMatrix",
    "YeeGrid",
    "add_noise",
    "assemble",
    "build_grid",
    "build_measurement",
    "build_pml",
    "build_scattering_matrix",
    "group_norm",
    "incident_fields",
    "load_scenario",
    "project_group_l1",
    "rasterize_shape",
    "run_scenario",
    "solve",
    "solve_adjoint",
    "solve_mmv_cv",
    "split_cv",
    "synthesize_data",
]
