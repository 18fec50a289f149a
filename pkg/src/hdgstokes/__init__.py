"""Pressure-robust HDG / EDG / EDG-HDG Stokes solver with two- and three-field
static condensation, block-preconditioned MINRES and spectral diagnostics."""

__version__ = "0.1.0"

from .mesh import Mesh, generate_unstructured, refine_uniform  # noqa: E402
from .fespace import SpaceConfig, Variant, build_layout  # noqa: E402
from .assembly import AssemblyConfig, assemble_blocks  # noqa: E402
from .condensation import back_substitute, build_local_projector, build_three_field, build_two_field  # noqa: E402
from .krylov import PreconConfig, minres  # noqa: E402

__all__ = [
    "Mesh", "generate_unstructured", "refine_uniform", "SpaceConfig", "Variant", "build_layout",
    "AssemblyConfig", "assemble_blocks", "build_local_projector", "build_two_field",
    "build_three_field", "back_substitute", "PreconConfig", "minres",
]
