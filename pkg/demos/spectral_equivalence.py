"""Spectral diagnostics on coarse cavity meshes.

The trace pressure Schur complement Sbar is spectrally equivalent to the
h-weighted trace mass Mbar and to B_pbu A_uu^-1 B_pbu^T, and the PM
preconditioned two-field operator has eigenvalues in two intervals bounded
away from zero. The extremes below should change little between meshes.

Run: python demos/spectral_equivalence.py
"""
from hdgstokes.cli import format_table
from hdgstokes.studies import StudySpec, run_spectrum, spectrum_drift

rows = run_spectrum(StudySpec("spectrum", levels=2))
print(format_table(rows, ["pair", "elements", "n", "lambda_min", "lambda_max",
                          "neg_lo", "neg_hi", "pos_lo", "pos_hi"]))
print()
for pair in ("HDG:Sbar/Mbar", "HDG:Sbar/BAB", "HDG:two-field/PM"):
    drift = spectrum_drift(rows, pair)
    print(pair, {k: f"{v:.1%}" for k, v in drift.items()})
