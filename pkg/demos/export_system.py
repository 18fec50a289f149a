"""Assemble the condensed cavity systems and write them in Matrix Market format.

Run: python demos/export_system.py [outdir]
"""
import sys

from hdgstokes.assembly import assemble_blocks, export_matrix_market
from hdgstokes.condensation import build_local_projector, build_three_field, build_two_field
from hdgstokes.fespace import SpaceConfig, build_layout
from hdgstokes.mesh import generate_unstructured
from hdgstokes.studies import CAVITY_DOMAIN, lid_velocity

out = sys.argv[1] if len(sys.argv) > 1 else "cavity_mtx"
mesh = generate_unstructured(CAVITY_DOMAIN, 0.24, seed=0)
layout = build_layout(mesh, SpaceConfig(2, "EDG-HDG"))
local = build_local_projector(assemble_blocks(layout, g=lid_velocity))
two, three = build_two_field(local), build_three_field(local)
paths = export_matrix_market(out, K2=two.matrix, b2=two.rhs, z2=two.null_vector,
                             K3=three.matrix, b3=three.rhs, z3=three.null_vector)
print(f"{mesh.n_elements} elements; two-field n={two.n}, three-field n={three.n}")
for p in paths:
    print(p)
