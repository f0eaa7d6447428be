"""Geodesic integral-moment transforms of symmetric tensor fields on 2-D
Riemannian disks: tensor algebra, geodesic tracing, the transforms and
their identities, solenoidal decompositions, tube-coordinate cascades and
regularized moment-cascade reconstruction."""
from .decomposition import SolverError, multi_decompose, solenoidal_decompose
from .fields import FunctionField, Grid, SymTensorField
from .geometry import ConvexSet, DomainSpec, MetricSpec, make_fan, simplicity_check, trace_geodesic
from .reconstruct import assemble_forward, cascade_reconstruct, solenoidal_invert, support_experiment
from .symtensor import SymTensor, contract_full, pack_index, symmetrize
from .transforms import MomentSinogram, divergence, inner_derivative, moment_transform
from .tube_cascade import ChartFoldError, build_chart, cascade_solve, dv_normal_expansion

__version__ = "0.1.0"

__all__ = [
    "SolverError",
    "multi_decompose",
    "solenoidal_decompose",
    "FunctionField",
    "Grid",
    "SymTensorField",
    "ConvexSet",
    "DomainSpec",
    "MetricSpec",
    "make_fan",
    "simplicity_check",
    "trace_geodesic",
    "assemble_forward",
    "cascade_reconstruct",
    "solenoidal_invert",
    "support_experiment",
    "SymTensor",
    "contract_full",
    "pack_index",
    "symmetrize",
    "MomentSinogram",
    "divergence",
    "inner_derivative",
    "moment_transform",
    "ChartFoldError",
    "build_chart",
    "cascade_solve",
    "dv_normal_expansion",
]
