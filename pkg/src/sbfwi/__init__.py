"""Density full-waveform inversion with scaled-boundary polygon elements."""

from .coefficients import DensityField, RadialStations
from .condensation import TimeScheme
from .mesh import MeshError, PolygonMesh, build_mesh, load_mesh, read_mesh_file
from .transient import ReceiverArray, SourceSignal, TraceSet, assemble_global, run_forward, sine_burst

__version__ = "0.1.0"

__all__ = [
    "DensityField",
    "MeshError",
    "PolygonMesh",
    "RadialStations",
    "ReceiverArray",
    "SourceSignal",
    "TimeScheme",
    "TraceSet",
    "assemble_global",
    "build_mesh",
    "load_mesh",
    "read_mesh_file",
    "run_forward",
    "sine_burst",
]
