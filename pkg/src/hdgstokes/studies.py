"""Experiment drivers: lid-driven cavity iteration studies, manufactured
solution accuracy/divergence, spectrum studies and the discretization x
preconditioner comparison. Each driver returns a list of row dicts and, when
an output directory is given, writes a CSV plus a JSON run manifest.
"""
from __future__ import annotations

import csv
import json
import platform
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .assembly import AssemblyConfig, assemble_blocks, constant_pressure, element_data
from .condensation import (Solution, back_substitute, build_local_projector, build_three_field,
                           build_two_field)
from .fespace import SpaceConfig, Variant, build_layout, eval_basis_element
from .krylov import (BlockPreconditioner, Family, PreconConfig, RdChoice, SolveReport,
                     build_mbar, direct_solve, minres)
from .mesh import Mesh, generate_unstructured, refine_uniform
from .spectral import (generalized_extremes, preconditioned_spectrum, relative_drift,
                       schur_pairs, write_spectrum_csv)

CAVITY_DOMAIN = ((-1.0, 1.0), (-1.0, 1.0))
MMS_DOMAIN = ((0.0, 1.0), (0.0, 1.0))
KINDS = ("cavity", "mms", "spectrum", "compare")
TIMING_COLUMNS = ("t_assembly", "t_condensation", "t_precon_setup", "t_iterations",
                  "t_back_substitution", "t_total")


# ---------------------------------------------------------------------------
# problem data


def lid_velocity(x, y):
    """``(1 - x^4, 0)`` on the lid ``y = 1``, zero on the other walls."""
    top = np.isclose(y, 1.0, atol=1e-12)
    return np.where(top, 1.0 - x ** 4, 0.0), np.zeros_like(x)


@dataclass(frozen=True)
class MmsSolution:
    """Divergence-free velocity and zero-mean pressure on the unit square.

    ``u = pi (sin(pi x) cos(pi y), -cos(pi x) sin(pi y))`` is the curl of
    ``sin(pi x) sin(pi y)``; ``p = sin(pi x) sin(pi y) - 4/pi^2``;
    ``f = -lap u + grad p = 2 pi^2 u + grad p``.
    """

    domain: tuple = MMS_DOMAIN

    @staticmethod
    def velocity(x, y):
        return (np.pi * np.sin(np.pi * x) * np.cos(np.pi * y),
                -np.pi * np.cos(np.pi * x) * np.sin(np.pi * y))

    @staticmethod
    def pressure(x, y):
        return np.sin(np.pi * x) * np.sin(np.pi * y) - 4.0 / np.pi ** 2

    @staticmethod
    def force(x, y):
        u, v = MmsSolution.velocity(x, y)
        px = np.pi * np.cos(np.pi * x) * np.sin(np.pi * y)
        py = np.pi * np.sin(np.pi * x) * np.cos(np.pi * y)
        c = 2.0 * np.pi ** 2
        return c * u + px, c * v + py


# ---------------------------------------------------------------------------
# study specification


@dataclass(frozen=True)
class StudySpec:
    """Configuration of one study run.

    ``levels`` mesh levels are produced by generating a base mesh with
    ``base_h`` and refining it ``pre_refine`` times for level 0, then once more
    per level. ``None`` picks per-kind defaults (cavity and compare: a
    190-element mesh generated with ``target_h = 0.24``, then 760, 3040,
    12160 elements; spectrum: the 44-element ``target_h = 0.5`` mesh; mms:
    ``target_h = 0.25`` on the unit square).
    """

    kind: str = "cavity"
    levels: int = 4
    variants: tuple = ("HDG",)
    k: int = 2
    alpha: Optional[float] = None
    precons: tuple = (PreconConfig(),)
    tol: float = 1e-8
    max_iter: int = 500
    seed: int = 0
    base_h: Optional[float] = None
    pre_refine: Optional[int] = None
    stop_on: str = "true"
    lid: bool = True
    output_dir: Optional[str] = None
    export_fields: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.levels < 1:
            raise ValueError("at least one mesh level is required")
        if not 0.0 < self.tol < 1.0:
            raise ValueError("tolerance must lie in (0, 1)")
        object.__setattr__(self, "variants", tuple(Variant(v) for v in self.variants))
        object.__setattr__(self, "precons", tuple(self.precons))

    @property
    def domain(self):
        return MMS_DOMAIN if self.kind == "mms" else CAVITY_DOMAIN

    def mesh_params(self):
        if self.kind == "mms":
            h, r = 0.25, 0
        elif self.kind == "spectrum":
            h, r = 0.5, 0
        else:
            h, r = 0.24, 0
        return (self.base_h if self.base_h is not None else h,
                self.pre_refine if self.pre_refine is not None else r)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variants"] = [v.value for v in self.variants]
        d["precons"] = [dict(family=p.family.value, rd_choice=p.rd_choice.value, gamma=p.gamma,
                             inner=asdict(p.inner), mass=p.mass, label=p.label)
                        for p in self.precons]
        return d


def mesh_sequence(spec: StudySpec) -> list[Mesh]:
    base_h, pre = spec.mesh_params()
    m = generate_unstructured(spec.domain, base_h, seed=spec.seed)
    for _ in range(pre):
        m = refine_uniform(m)
    out = [m]
    for _ in range(spec.levels - 1):
        out.append(refine_uniform(out[-1]))
    return out


# ---------------------------------------------------------------------------
# single solve


@dataclass
class Discretization:
    """Blocks, local factorizations and lazily built condensed systems."""

    layout: object
    blocks: object
    local: object
    t_assembly: float
    t_condensation: float = 0.0
    _systems: dict = field(default_factory=dict)

    def system(self, three_field: bool):
        key = "three" if three_field else "two"
        if key not in self._systems:
            t0 = time.perf_counter()
            self._systems[key] = (build_three_field if three_field else build_two_field)(self.local)
            self._systems[key + "_t"] = time.perf_counter() - t0
        return self._systems[key], self._systems[key + "_t"]


def discretize(mesh: Mesh, variant, k: int = 2, alpha=None, f=None, g=None) -> Discretization:
    t0 = time.perf_counter()
    layout = build_layout(mesh, SpaceConfig(k, Variant(variant)))
    blocks = assemble_blocks(layout, AssemblyConfig(alpha=alpha), f, g)
    t1 = time.perf_counter()
    local = build_local_projector(blocks)
    return Discretization(layout, blocks, local, t1 - t0, time.perf_counter() - t1)


def solve(disc: Discretization, precon: Optional[PreconConfig], tol: float = 1e-8,
          max_iter: int = 500, stop_on: str = "true", three_field: Optional[bool] = None):
    """Solve a condensed system and recover element fields.

    ``precon=None`` uses a sparse direct solve of the two-field system (or the
    three-field one when ``three_field`` is true).
    """
    if three_field is None:
        three_field = precon is not None and precon.family is Family.P3x3
    system, t_cond = disc.system(three_field)
    if precon is None:
        t0 = time.perf_counter()
        x = direct_solve(system.matrix, system.rhs, system.null_vector)
        report = SolveReport(iterations=0, converged=True)
        r = system.rhs - system.matrix @ x
        bn = np.linalg.norm(system.rhs)
        report.true_residuals.append(float(np.linalg.norm(r) / bn) if bn else 0.0)
        report.timings.update(precon_setup=0.0, iterations=time.perf_counter() - t0)
    else:
        P = BlockPreconditioner(system, precon)
        x, report = minres(system.matrix, system.rhs, P, system.null_vector, tol=tol,
                           max_iter=max_iter, stop_on=stop_on)
        report.timings["precon_setup"] = P.setup_time
    t0 = time.perf_counter()
    sol = back_substitute(system, x)
    report.timings["back_substitution"] = time.perf_counter() - t0
    report.timings["assembly"] = disc.t_assembly
    report.timings["condensation"] = disc.t_condensation + t_cond
    report.extras["dofs"] = system.n
    report.extras["trace_solution"] = x
    return sol, report


# ---------------------------------------------------------------------------
# post-processing


def zero_mean_pressure(sol: Solution, layout) -> Solution:
    """Shift both pressures so that the element pressure has zero mean."""
    p1, _ = constant_pressure(layout)
    c = -(sol.p.ravel() @ p1) / (p1 @ p1)
    return sol.shifted(c, layout)


def _element_values(layout, sol: Solution):
    d = element_data(layout)
    E = layout.mesh.n_elements
    u = sol.u.reshape(E, 2, -1)
    uq = np.einsum("ecb,eqb->eqc", u, d.phi)
    pq = np.einsum("eb,eqb->eq", sol.p, d.q)
    div = np.einsum("ecb,eqbc->eq", u, d.dphi)
    return d, uq, pq, div


def divergence_norm(layout, sol: Solution, per_element: bool = False):
    """L2 norm of the element divergence of ``u_h`` (by quadrature)."""
    d, _, _, div = _element_values(layout, sol)
    loc = np.sqrt(np.einsum("eq,eq->e", d.wq, div ** 2))
    return loc if per_element else float(np.sqrt(np.sum(loc ** 2)))


def velocity_norm(layout, sol: Solution) -> float:
    d, uq, _, _ = _element_values(layout, sol)
    return float(np.sqrt(np.einsum("eq,eqc->", d.wq, uq ** 2)))


def l2_errors(layout, sol: Solution, u_exact: Callable, p_exact: Callable):
    """``(||u - u_h||, ||p - p_h||)`` with quadrature of degree ``2k + 2``.

    The discrete pressure is shifted to zero mean first.
    """
    sol = zero_mean_pressure(sol, layout)
    d, uq, pq, _ = _element_values(layout, sol)
    x, y = d.xq[..., 0], d.xq[..., 1]
    ue = np.stack(u_exact(x, y), axis=-1)
    pe = p_exact(x, y)
    eu = np.sqrt(np.einsum("eq,eqc->", d.wq, (uq - ue) ** 2))
    ep = np.sqrt(np.einsum("eq,eq->", d.wq, (pq - pe) ** 2))
    return float(eu), float(ep)


def evaluate_fields(layout, sol: Solution, ref_points) -> np.ndarray:
    """Rows ``(element, x, y, u_x, u_y, p)`` at reference points of every element."""
    mesh = layout.mesh
    ref = np.atleast_2d(np.asarray(ref_points, dtype=float))
    k = layout.k
    vals, _ = eval_basis_element(k, ref)
    pvals, _ = eval_basis_element(k - 1, ref)
    verts = mesh.vertices[mesh.elements]
    J = np.stack([verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0]], axis=-1)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    scale = 1.0 / np.sqrt(det)
    xy = verts[:, 0, None, :] + np.einsum("eij,qj->eqi", J, ref)
    E = mesh.n_elements
    u = sol.u.reshape(E, 2, -1)
    uq = scale[:, None, None] * np.einsum("ecb,qb->eqc", u, vals)
    pq = scale[:, None] * np.einsum("eb,qb->eq", sol.p, pvals)
    eid = np.broadcast_to(np.arange(E)[:, None], pq.shape)
    return np.column_stack([eid.ravel(), xy[..., 0].ravel(), xy[..., 1].ravel(),
                            uq[..., 0].ravel(), uq[..., 1].ravel(), pq.ravel()])


FIELD_REF_POINTS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1 / 3, 1 / 3]])


def export_fields(layout, sol: Solution, path) -> Path:
    """Point-value CSV: element id, coordinates, velocity and pressure at the
    three vertices and the centroid of every element."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = evaluate_fields(layout, sol, FIELD_REF_POINTS)
    np.savetxt(path, rows, delimiter=",", header="element,x,y,u_x,u_y,p", comments="",
               fmt=["%d"] + ["%.16e"] * 5)
    return path


# ---------------------------------------------------------------------------
# output


def write_rows(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0])
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def write_manifest(spec: StudySpec, path, extra: Optional[dict] = None) -> Path:
    import numpy, scipy

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = dict(spec=spec.to_dict(), version=__version__,
                    software=dict(python=platform.python_version(), numpy=numpy.__version__,
                                  scipy=scipy.__version__))
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return path


def _emit(spec: StudySpec, rows, name: str):
    if spec.output_dir and rows:
        out = Path(spec.output_dir)
        write_rows(rows, out / f"{name}.csv")
        write_manifest(spec, out / f"{name}_manifest.json")


def _timing_columns(report: SolveReport) -> dict:
    t = report.timings
    cols = dict(t_assembly=t.get("assembly", 0.0), t_condensation=t.get("condensation", 0.0),
                t_precon_setup=t.get("precon_setup", 0.0), t_iterations=t.get("iterations", 0.0),
                t_back_substitution=t.get("back_substitution", 0.0))
    cols["t_total"] = sum(cols.values())
    return cols


def _dof_columns(disc: Discretization, three_field: bool) -> dict:
    L = disc.layout
    if three_field:
        return dict(dofs=L.n_three_field, dofs_with_dirichlet=L.n_three_field_with_dirichlet)
    return dict(dofs=L.n_two_field, dofs_with_dirichlet=L.n_two_field_with_dirichlet)


# ---------------------------------------------------------------------------
# studies


def run_cavity(spec: StudySpec) -> list[dict]:
    """Iteration counts per mesh level, variant and preconditioner."""
    rows = []
    g = lid_velocity if spec.lid else None
    for level, mesh in enumerate(mesh_sequence(spec)):
        for variant in spec.variants:
            disc = discretize(mesh, variant, spec.k, spec.alpha, None, g)
            for pc in spec.precons:
                sol, rep = solve(disc, pc, spec.tol, spec.max_iter, spec.stop_on)
                three = pc.family is Family.P3x3
                rows.append(dict(variant=variant.value, precon=pc.label, level=level,
                                 elements=mesh.n_elements, **_dof_columns(disc, three),
                                 iterations=rep.iterations, converged=rep.converged,
                                 final_residual=rep.final_residual, **_timing_columns(rep)))
                if spec.output_dir:
                    tag = f"{variant.value}_{pc.label}_L{level}".replace("/", "-")
                    rep.write_history_csv(Path(spec.output_dir) / "history" / f"{tag}.csv")
                    if spec.export_fields:
                        export_fields(disc.layout, sol, Path(spec.output_dir) / "fields" / f"{tag}.csv")
    _emit(spec, rows, "cavity")
    return rows


def run_mms(spec: StudySpec) -> list[dict]:
    """Errors, divergence and iterations for the manufactured solution.

    A ``None`` entry in ``spec.precons`` requests a direct two-field solve.
    """
    rows = []
    mms = MmsSolution()
    for level, mesh in enumerate(mesh_sequence(spec)):
        for variant in spec.variants:
            disc = discretize(mesh, variant, spec.k, spec.alpha, mms.force, mms.velocity)
            for pc in spec.precons:
                sol, rep = solve(disc, pc, spec.tol, spec.max_iter, spec.stop_on)
                three = pc is not None and pc.family is Family.P3x3
                eu, ep = l2_errors(disc.layout, sol, mms.velocity, mms.pressure)
                rows.append(dict(variant=variant.value, precon=pc.label if pc else "direct",
                                 level=level, elements=mesh.n_elements, h=float(mesh.h.max()),
                                 **_dof_columns(disc, three), u_error=eu, p_error=ep,
                                 divergence=divergence_norm(disc.layout, sol),
                                 velocity_norm=velocity_norm(disc.layout, sol),
                                 iterations=rep.iterations, converged=rep.converged,
                                 **_timing_columns(rep)))
                if spec.output_dir and spec.export_fields:
                    tag = f"{variant.value}_{rows[-1]['precon']}_L{level}".replace("/", "-")
                    export_fields(disc.layout, sol, Path(spec.output_dir) / "fields" / f"{tag}.csv")
    _add_rates(rows)
    _emit(spec, rows, "mms")
    return rows


def _add_rates(rows):
    """Observed convergence rates against the previous level of the same series."""
    last = {}
    for r in rows:
        key = (r["variant"], r["precon"])
        prev = last.get(key)
        for name in ("u_error", "p_error"):
            rate = np.nan
            if prev is not None and r[name] > 0 and prev[name] > 0:
                rate = np.log(prev[name] / r[name]) / np.log(prev["h"] / r["h"])
            r[name.replace("error", "rate")] = float(rate)
        last[key] = r


def run_spectrum(spec: StudySpec, max_size: int = 4000) -> list[dict]:
    """Dense spectral diagnostics per level (coarse meshes only)."""
    reports = []
    for level, mesh in enumerate(mesh_sequence(spec)):
        for variant in spec.variants:
            disc = discretize(mesh, variant, spec.k, spec.alpha)
            system, _ = disc.system(False)
            mbar = build_mbar(disc.local)
            here = [generalized_extremes(mbar, mbar, None, "Mbar/Mbar", level,
                                         mesh.n_elements, max_size=max_size)]
            here += schur_pairs(system, level, max_size=max_size)
            for fam in ("PM", "PBAB"):
                here.append(preconditioned_spectrum(system, fam, level=level,
                                                    elements=mesh.n_elements,
                                                    max_size=max_size))
            for r in here:
                r.pair = f"{variant.value}:{r.pair}"
            reports += here
    rows = [r.row() for r in reports]
    if spec.output_dir and rows:
        out = Path(spec.output_dir)
        write_spectrum_csv(reports, out / "spectrum.csv")
        (out / "spectrum.json").write_text(json.dumps([json.loads(r.to_json()) for r in reports],
                                                      indent=2))
        write_manifest(spec, out / "spectrum_manifest.json")
    return rows


def spectrum_drift(rows: Sequence[dict], pair: str) -> dict:
    """Relative drift of each interval endpoint across levels for one pair."""
    sel = [r for r in rows if r["pair"] == pair]
    out = {}
    for key in ("lambda_min", "lambda_max", "neg_lo", "neg_hi", "pos_lo", "pos_hi"):
        vals = [r[key] for r in sel]
        if all(np.isfinite(vals)):
            out[key] = relative_drift(vals)
    return out


def compare_precons(gammas=(0.0, 0.1), inner: str = "exact") -> tuple:
    """``P3x3`` (gamma = 0) plus ``PM`` and ``PBAB`` for each ``gamma``."""
    rd = RdChoice.EXACT_AGAMMA if inner == "exact" else RdChoice.INNER_ITER_AGAMMA
    out = [PreconConfig(Family.P3x3, rd, 0.0)]
    for fam in (Family.PM, Family.PBAB):
        for g in gammas:
            out.append(PreconConfig(fam, rd, g))
    return tuple(out)


def run_compare(spec: StudySpec) -> list[dict]:
    """MMS performance table over variants and preconditioners at every level.

    Errors, CPU, iterations and DOFs are normalized by the HDG ``P3x3`` row of
    the same level (raw values are kept alongside).
    """
    spec = replace(spec, kind="mms") if spec.kind == "compare" else spec
    rows = run_mms(replace(spec, output_dir=None))
    base = {}
    for r in rows:
        r["system"] = "three-field" if r["precon"].startswith("P3x3") else "two-field"
        if r["variant"] == Variant.HDG.value and r["precon"].startswith("P3x3"):
            base[r["level"]] = r
    for r in rows:
        b = base.get(r["level"])
        for key, col in (("u_error", "u_error_rel"), ("p_error", "p_error_rel"),
                         ("t_total", "cpu_rel"), ("iterations", "iterations_rel"),
                         ("dofs", "dofs_rel")):
            r[col] = float(r[key] / b[key]) if b and b[key] else np.nan
    _emit(replace(spec, kind="compare"), rows, "compare")
    return rows
