"""Manufactured solution: accuracy and pointwise divergence.

Both condensed systems solve the same discrete problem, so their errors
coincide. The two-field path recovers the element velocity through the local
oblique projector and is divergence-free to rounding for any trace solution;
the three-field path inherits the MINRES tolerance in its divergence.

Run: python demos/divergence_two_vs_three_field.py
"""
from hdgstokes.cli import format_table
from hdgstokes.krylov import PreconConfig
from hdgstokes.studies import StudySpec, run_mms

spec = StudySpec("mms", levels=3, variants=("HDG", "EDG", "EDG-HDG"),
                 precons=(PreconConfig("PM", "ExactAd"), PreconConfig("P3x3", "ExactAgamma", 0.0)))
rows = run_mms(spec)
print(format_table(rows, ["variant", "precon", "elements", "dofs", "u_error", "u_rate",
                          "p_error", "p_rate", "divergence", "iterations"]))
