"""Lid-driven cavity: MINRES iteration counts under mesh refinement.

With exact inverses of the trace velocity block both two-field
preconditioners converge in a number of iterations that does not grow with
refinement. Replacing the exact inverse of Abar^d by a few AMG cycles breaks
this, while the same cycles on Abar_gamma keep it.

Run: python demos/cavity_iterations.py [levels]
"""
import sys

from hdgstokes.cli import format_table
from hdgstokes.krylov import PreconConfig
from hdgstokes.studies import StudySpec, run_cavity

levels = int(sys.argv[1]) if len(sys.argv) > 1 else 3
precons = (
    PreconConfig("PM", "ExactAd"),
    PreconConfig("PBAB", "ExactAd"),
    PreconConfig("PM", "ExactAgamma", 0.1),
    PreconConfig("PM", "InnerIterAd"),
    PreconConfig("PM", "InnerIterAgamma", 0.0),
    PreconConfig("P3x3", "ExactAgamma", 0.0),
)
rows = run_cavity(StudySpec("cavity", levels=levels, precons=precons))
print(format_table(rows, ["precon", "elements", "dofs", "iterations", "t_total"]))

by_precon = {}
for r in rows:
    by_precon.setdefault(r["precon"], []).append(r["iterations"])
print()
for name, its in by_precon.items():
    print(f"{name:32s} {its}")
