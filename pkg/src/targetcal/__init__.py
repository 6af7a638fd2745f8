"""Camera self-calibration from circular targets.

Pairwise ellipse matching with a projective invariant of two viewing cones,
eccentricity correction of target centers from two-view cone intersection,
and free-network self-calibrating bundle adjustment with data-driven choice
of the radial distortion model.
"""

from .bundle import CalibrationSolution, NetworkState, Observation, ObservationSet, bundle_adjust_free
from .errors import (
    AdjustmentError,
    DegenerateGeometryError,
    InputError,
    NumericalError,
    ReconstructionError,
    TargetCalError,
)
from .geometry import Circle3D, Conic, Ellipse, ExteriorParams, InteriorParams, Plane, ProjectiveCamera, Quadric
from .pipeline import PipelineOptions, PipelineResult, calibrate_pipeline

__version__ = "0.1.0"

__all__ = [
    "AdjustmentError",
    "CalibrationSolution",
    "Circle3D",
    "Conic",
    "DegenerateGeometryError",
    "Ellipse",
    "ExteriorParams",
    "InputError",
    "InteriorParams",
    "NetworkState",
    "NumericalError",
    "Observation",
    "ObservationSet",
    "PipelineOptions",
    "PipelineResult",
    "Plane",
    "ProjectiveCamera",
    "Quadric",
    "ReconstructionError",
    "TargetCalError",
    "bundle_adjust_free",
    "calibrate_pipeline",
]
