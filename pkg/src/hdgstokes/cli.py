"""Command line entry point: ``hdgstokes {cavity,mms,spectrum,compare}``."""
from __future__ import annotations

import argparse
import sys

from .krylov import Family, InnerSettings, PreconConfig, RdChoice
from .spectral import SizeCapError
from .studies import StudySpec, compare_precons, run_cavity, run_compare, run_mms, run_spectrum

DEFAULT_PRECONS = {
    "cavity": ["PM:ExactAd", "PBAB:ExactAd"],
    "mms": ["PM:ExactAd", "P3x3:ExactAgamma:0"],
}

SHOW = {
    "cavity": ["variant", "precon", "level", "elements", "dofs", "dofs_with_dirichlet",
               "iterations", "converged", "t_total"],
    "mms": ["variant", "precon", "level", "elements", "h", "dofs", "u_error", "p_error",
            "divergence", "u_rate", "iterations", "t_total"],
    "compare": ["variant", "precon", "level", "dofs", "u_error_rel", "p_error_rel", "divergence",
                "cpu_rel", "iterations", "iterations_rel", "dofs_rel"],
    "spectrum": ["pair", "level", "elements", "n", "lambda_min", "lambda_max", "neg_lo", "neg_hi",
                 "pos_lo", "pos_hi"],
}


def parse_precon(text: str, default_gamma: float, inner: InnerSettings) -> PreconConfig:
    """``FAMILY:RD[:GAMMA]``, e.g. ``PM:ExactAd`` or ``PBAB:InnerIterAgamma:0.1``."""
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise argparse.ArgumentTypeError(f"bad preconditioner spec {text!r}")
    gamma = float(parts[2]) if len(parts) == 3 else default_gamma
    try:
        return PreconConfig(Family(parts[0]), RdChoice(parts[1]), gamma, inner)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdgstokes", description=__doc__)
    sub = p.add_subparsers(dest="kind", required=True)
    for kind, help_ in (("cavity", "lid-driven cavity iteration study"),
                        ("mms", "manufactured-solution accuracy and divergence study"),
                        ("spectrum", "dense spectral diagnostics on coarse meshes"),
                        ("compare", "discretization x preconditioner performance table")):
        s = sub.add_parser(kind, help=help_)
        s.add_argument("--levels", type=int, default=3 if kind != "spectrum" else 2)
        s.add_argument("--variant", action="append", choices=["HDG", "EDG", "EDG-HDG"],
                       help="repeatable; default HDG (compare: all three)")
        s.add_argument("--precon", action="append", metavar="FAMILY:RD[:GAMMA]",
                       help="FAMILY in PM, PBAB, P3x3; RD in ExactAd, ExactAgamma, "
                            "InnerIterAgamma, InnerIterAd; repeatable")
        s.add_argument("--gamma", type=float, default=0.0)
        s.add_argument("--alpha", type=float, default=None)
        s.add_argument("--k", type=int, default=2)
        s.add_argument("--tol", type=float, default=1e-8)
        s.add_argument("--max-iter", type=int, default=500)
        s.add_argument("--stop-on", choices=["true", "preconditioned"], default="true")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--base-h", type=float, default=None)
        s.add_argument("--pre-refine", type=int, default=None)
        s.add_argument("--cycles", type=int, default=4, help="V-cycles for InnerIter choices")
        s.add_argument("--smoother", choices=["amg", "none"], default="amg",
                       help="'none' uses plain symmetric Gauss-Seidel sweeps")
        s.add_argument("--out", default=None, help="output directory for CSV/JSON")
        s.add_argument("--export-fields", action="store_true")
        if kind == "cavity":
            s.add_argument("--no-lid", action="store_true", help="zero boundary data")
        if kind == "compare":
            s.add_argument("--inner", choices=["exact", "cycles"], default="exact")
    return p


def spec_from_args(args) -> StudySpec:
    inner = InnerSettings(cycles=args.cycles, hierarchy=args.smoother)
    if args.kind == "compare":
        precons = compare_precons(inner=args.inner)
        precons = tuple(PreconConfig(c.family, c.rd_choice, c.gamma, inner) for c in precons)
        variants = tuple(args.variant or ("HDG", "EDG", "EDG-HDG"))
    else:
        texts = args.precon or DEFAULT_PRECONS.get(args.kind, [])
        precons = tuple(parse_precon(t, args.gamma, inner) for t in texts)
        variants = tuple(args.variant or ("HDG",))
    return StudySpec(kind=args.kind, levels=args.levels, variants=variants, k=args.k,
                     alpha=args.alpha, precons=precons, tol=args.tol, max_iter=args.max_iter,
                     seed=args.seed, base_h=args.base_h, pre_refine=args.pre_refine,
                     stop_on=args.stop_on, lid=not getattr(args, "no_lid", False),
                     output_dir=args.out, export_fields=args.export_fields)


def format_table(rows, columns) -> str:
    cols = [c for c in columns if any(c in r for r in rows)]

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.3e}" if (v != 0 and (abs(v) < 1e-2 or abs(v) >= 1e4)) else f"{v:.4g}"
        return str(v)

    cells = [[fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(x.rjust(w) for x, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        spec = spec_from_args(args)
    except argparse.ArgumentTypeError as exc:
        parser.error(str(exc))
    runner = {"cavity": run_cavity, "mms": run_mms, "spectrum": run_spectrum,
              "compare": run_compare}[args.kind]
    try:
        rows = runner(spec)
    except SizeCapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(format_table(rows, SHOW[args.kind]))
    if spec.output_dir:
        print(f"wrote results to {spec.output_dir}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
