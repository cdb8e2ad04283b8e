"""Adaptive solve loop, contraction monitoring, and energy post-processing.

The driver iterates solve / estimate / mark / refine, warm-starting each
solve with the interpolated previous solution and rebuilding the split
fields on every mesh (the interface faces change under refinement).  The
trace records per-iteration indicator totals, errors against an oracle
when one is available, and the increments needed by the contraction
monitor, which checks that the combined error-plus-indicator quantity
decays geometrically.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import estimate as est
from . import fem, molio, splitting
from .mesh import MOLECULAR, barycentric_coordinates, locate_point, refine, \
    transfer_nodal, write_vtk

log = logging.getLogger(__name__)


class OracleError(RuntimeError):
    pass


class ChargeLocationError(RuntimeError):
    def __init__(self, message, charge_index=None):
        super().__init__(message)
        self.charge_index = charge_index


@dataclass
class AfemRecord:
    iteration: int
    n_tets: int
    n_vertices: int
    eta: float
    osc: float
    etaD_max: float
    newton_iterations: int
    wall_time: float
    error: float | None = None     # energy error against the oracle
    increment: float | None = None  # |||u_k - u_{k+1}||| on the finer mesh


@dataclass
class AfemTrace:
    theta: float
    ell: int
    records: list = field(default_factory=list)
    meshes: list = field(default_factory=list)
    solutions: list = field(default_factory=list)
    splits: list = field(default_factory=list)
    reduction_flags: list = field(default_factory=list)
    quasi_orthogonality_flags: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def etas(self):
        return np.array([r.eta for r in self.records])

    @property
    def errors(self):
        return np.array([
            np.nan if r.error is None else r.error for r in self.records
        ])

    def bisection_reduction_factor(self, dim=3):
        """lambda = 1 - 2^(-ell/dim), the marked-set indicator damping."""
        return 1.0 - 2.0 ** (-self.ell / dim)


def _common_tets(mesh_a, mesh_b):
    """Index pairs of tets present in both meshes (by vertex set)."""
    def keys(mesh):
        s = np.sort(mesh.tets, axis=1)
        return {tuple(row): i for i, row in enumerate(s)}

    ka, kb = keys(mesh_a), keys(mesh_b)
    pairs = [(ia, kb[k]) for k, ia in ka.items() if k in kb]
    if not pairs:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    ia, ib = zip(*pairs)
    return np.asarray(ia), np.asarray(ib)


def run_afem(mesh0, cs, scheme=molio.THREE_TERM, theta=0.5, ell=1,
             max_iters=8, eta_target=0.0, tol=1e-8, oracle=None,
             estimator=est.ESTIMATOR_PAPER, clamp=False, source=None,
             snapshot_dir=None, audit_reduction=False):
    """Adaptive solve on a sequence of bisection-refined meshes.

    ``oracle``, when given, maps vertex coordinates to exact solution
    values and enables the per-iteration energy-error column.  Stops after
    ``max_iters`` refinements, when the total indicator drops below
    ``eta_target``, or when the indicator vanishes.  Returns the final
    solution and the trace.
    """
    trace = AfemTrace(theta=theta, ell=ell)
    mesh = mesh0
    prev_solution = None
    prev_mesh = None
    for k in range(max_iters + 1):
        t0 = time.time()
        split = splitting.compute_split_fields(mesh, cs, scheme=scheme)
        initial = None
        if prev_solution is not None:
            initial = transfer_nodal(prev_mesh, mesh, prev_solution.values)
        try:
            solution = fem.newton_solve(
                mesh, cs, split, initial=initial, tol=tol, clamp=clamp,
                source=source,
            )
        except fem.NonConvergenceError as exc:
            raise fem.NonConvergenceError(
                "iteration %d: %s" % (k, exc), history=exc.history
            ) from exc
        indicators = est.estimate(mesh, cs, split, solution, variant=estimator)
        wall = time.time() - t0

        if prev_solution is not None:
            diff = solution.values - initial
            trace.records[-1].increment = fem.energy_norm(mesh, cs, diff)
            if audit_reduction:
                _audit_reduction(trace, mesh, cs, initial, indicators, split)

        error = None
        if oracle is not None:
            exact_nodal = np.asarray(oracle(mesh.vertices), dtype=float)
            error = fem.energy_norm(mesh, cs, exact_nodal - solution.values)

        trace.records.append(AfemRecord(
            iteration=k, n_tets=mesh.n_tets, n_vertices=mesh.n_vertices,
            eta=indicators.eta_total, osc=np.sqrt(indicators.osc2_total),
            etaD_max=np.sqrt(indicators.etaD2_max),
            newton_iterations=solution.newton_iterations,
            wall_time=wall, error=error,
        ))
        trace.meshes.append(mesh)
        trace.solutions.append(solution)
        trace.splits.append(split)
        if snapshot_dir is not None:
            _write_snapshot(mesh, solution, split, indicators, snapshot_dir, k)

        if k == max_iters:
            break
        marked = est.mark(indicators, theta)
        if marked.converged or indicators.eta_total <= eta_target:
            break
        prev_mesh, prev_solution = mesh, solution
        mesh = refine(mesh, marked, ell=ell)
        log.info(
            "iteration %d: eta=%.4g, marked %d of %d, next mesh %d tets",
            k, indicators.eta_total, len(marked), prev_mesh.n_tets, mesh.n_tets,
        )
    return trace.solutions[-1], trace


def _audit_reduction(trace, mesh, cs, transferred_prev, indicators, split):
    """Flag increases of the transferred-solution indicator on common tets."""
    prev_mesh = trace.meshes[-1]
    prev_sol = trace.solutions[-1]
    prev_split = trace.splits[-1]
    ind_prev = est.estimate(prev_mesh, cs, prev_split, prev_sol,
                            variant=indicators.variant)
    ind_tran = est.estimate_fields(
        mesh, fem.eps_per_tet(mesh, cs), fem.kappa2_per_tet(mesh, cs),
        transferred_prev, split.g_gamma, barriers=split.barriers,
        variant=indicators.variant,
    )
    ia, ib = _common_tets(prev_mesh, mesh)
    before = float(ind_prev.eta2[ia].sum())
    after = float(ind_tran.eta2[ib].sum())
    ok = after <= before * (1.0 + 1e-6) + 1e-12
    trace.reduction_flags.append(ok)
    if not ok:
        log.warning(
            "indicator on unrefined elements grew: %.6g -> %.6g", before, after
        )


def _write_snapshot(mesh, solution, split, indicators, out_dir, k):
    import os

    os.makedirs(out_dir, exist_ok=True)
    point_data = {"u": solution.values}
    if split.u_h is not None:
        point_data["u_h"] = np.where(split.u_h_mask, split.u_h, 0.0)
    write_vtk(
        mesh, os.path.join(out_dir, "iter_%03d.vtk" % k),
        point_data=point_data,
        cell_data={"eta2": indicators.eta2},
    )


def trace_energy_errors(trace, cs, oracle=None, reference=None, rep_ell=1):
    """Energy errors of all trace iterates against a fine representation.

    Every iterate is prolonged (exact nested P1 transfer) along the trace's
    mesh chain onto a representation mesh: either the mesh of the given
    ``reference`` pair ``(mesh, values)``, which must be a refinement of
    the final trace mesh, or an ``rep_ell``-fold bisection of the final
    mesh on which the ``oracle`` callable is interpolated.  Errors are
    energy norms of the differences on that one mesh, so sub-element
    detail of later iterates is not lost.
    """
    if len(trace) < 1:
        raise OracleError("empty trace")
    final = trace.meshes[-1]
    if reference is not None:
        rep_mesh, target = reference
        target = np.asarray(
            getattr(target, "values", target), dtype=float
        )
    elif oracle is not None:
        rep_mesh = refine(final, np.arange(final.n_tets), ell=rep_ell)
        target = np.asarray(oracle(rep_mesh.vertices), dtype=float)
    else:
        raise OracleError("need an oracle or a reference solution")
    if rep_mesh.n_parent_vertices != final.n_vertices:
        raise OracleError(
            "reference mesh must be a direct refinement of the final mesh"
        )
    A_rep = fem.assemble_bilinear(rep_mesh, cs)

    errors = np.empty(len(trace))
    for k in range(len(trace)):
        values = trace.solutions[k].values
        for j in range(k, len(trace) - 1):
            values = transfer_nodal(trace.meshes[j], trace.meshes[j + 1], values)
        values = transfer_nodal(final, rep_mesh, values)
        errors[k] = fem.energy_norm(rep_mesh, cs, target - values, A=A_rep)
    return errors


def contraction_check(trace, cs, oracle=None, reference=None, gamma=None,
                      quasi_lambda=1.05, rep_ell=1):
    """Per-step decay ratios of the combined quantity e_k^2 + gamma eta_k^2.

    The error e_k comes from :func:`trace_energy_errors`; ``gamma``
    defaults to the inverse squared initial data indicator.  Also audits
    the quasi-orthogonality inequality with the given margin, flagging
    violations without failing.
    """
    errors = trace_energy_errors(
        trace, cs, oracle=oracle, reference=reference, rep_ell=rep_ell
    )
    if gamma is None:
        ind0 = est.estimate(
            trace.meshes[0], cs, trace.splits[0], trace.solutions[0]
        )
        gamma = 1.0 / ind0.etaD2_max if ind0.etaD2_max > 0.0 else 1.0

    etas = trace.etas
    quantity = errors ** 2 + gamma * etas ** 2
    ratios = [
        float(quantity[k + 1] / quantity[k]) for k in range(len(quantity) - 1)
    ]

    trace.quasi_orthogonality_flags = []
    for k in range(len(trace) - 1):
        inc = trace.records[k].increment
        if inc is None:
            continue
        lhs = errors[k + 1] ** 2
        rhs = quasi_lambda * errors[k] ** 2 - inc ** 2
        ok = lhs <= rhs + 1e-12
        trace.quasi_orthogonality_flags.append(bool(ok))
        if not ok:
            log.info(
                "quasi-orthogonality margin exceeded at step %d: "
                "e2=%.4g > %.4g", k, lhs, rhs,
            )
    return gamma, ratios, (max(ratios) if ratios else None), errors


@dataclass
class SolvationResult:
    total: float
    per_charge: np.ndarray
    n_tets: int
    n_vertices: int
    unit_scale: float

    def __post_init__(self):
        if not np.isfinite(self.total):
            raise ValueError("solvation energy is not finite")


def solvation_energy(mesh, cs, split, solution, unit_scale=1.0):
    """Polar solvation energy from the split potential at the charge sites.

    Evaluates half the sum over charges of z_i (u^h + u)(x_i) by
    barycentric interpolation; requires the three-term split (the singular
    self-energy is already removed there).  Raises
    :class:`ChargeLocationError` when a charge cannot be located inside
    the molecular region.
    """
    if split.scheme != molio.THREE_TERM:
        raise ValueError("solvation energy requires the three-term split")
    per = np.zeros(cs.n_charges)
    for i in range(cs.n_charges):
        hit = locate_point(mesh, cs.positions[i])
        if hit is None:
            raise ChargeLocationError(
                "charge %d lies outside the mesh" % i, charge_index=i
            )
        t, lam = hit
        if mesh.region[t] != MOLECULAR:
            raise ChargeLocationError(
                "charge %d is not inside the molecular region" % i,
                charge_index=i,
            )
        vids = mesh.tets[t]
        u_val = float(lam @ solution.values[vids])
        uh_val = float(lam @ split.u_h[vids])
        per[i] = 0.5 * cs.charges[i] * (uh_val + u_val) * unit_scale
    return SolvationResult(
        total=float(per.sum()), per_charge=per,
        n_tets=mesh.n_tets, n_vertices=mesh.n_vertices,
        unit_scale=unit_scale,
    )


@dataclass
class SchemeComparison:
    regular_rel_error: dict
    full_rel_error: dict
    amplification: dict

    def summary(self):
        lines = []
        for scheme in (molio.TWO_TERM, molio.THREE_TERM):
            lines.append(
                "%-10s regular %.4f%%  full %.4f%%  amplification %.2f"
                % (scheme, 100 * self.regular_rel_error[scheme],
                   100 * self.full_rel_error[scheme],
                   self.amplification[scheme])
            )
        return "\n".join(lines)


def scheme_comparison(mesh, cs, born, tol=1e-10):
    """Two-term versus three-term accuracy on the same mesh (Born oracle).

    Solves both schemes, reconstructs the full potential, and reports
    solvent-region relative errors of the smooth component and of the full
    potential, plus the pointwise median amplification factor between them.
    """
    r = np.linalg.norm(mesh.vertices, axis=1)
    rr = np.maximum(r, 1e-12)
    solvent_vertices = np.unique(mesh.tets[mesh.solvent_tets()])
    exact_full = molio.born_exact_full(born, rr)

    regular_err = {}
    full_err = {}
    amplification = {}
    for scheme in (molio.TWO_TERM, molio.THREE_TERM):
        split = splitting.compute_split_fields(mesh, cs, scheme=scheme)
        sol = fem.newton_solve(mesh, cs, split, tol=tol)
        exact_reg = molio.born_exact_regular(born, rr, scheme=scheme)
        err = np.abs(sol.values - exact_reg)
        if scheme == molio.TWO_TERM:
            full = sol.values + molio.born_singular(born, rr)
        else:
            full = sol.values.copy()
            inside = split.u_h_mask & (r <= born.radius)
            full[inside] += molio.born_singular(born, rr)[inside] \
                + split.u_h[inside]
        err_full = np.abs(full - exact_full)

        sv = solvent_vertices
        rel_reg = err[sv] / np.abs(exact_reg[sv])
        rel_full = err_full[sv] / np.abs(exact_full[sv])
        regular_err[scheme] = float(rel_reg.max())
        full_err[scheme] = float(rel_full.max())
        nz = err[sv] > 1e-14
        with np.errstate(invalid="ignore", divide="ignore"):
            ratios = rel_full[nz] / rel_reg[nz]
        amplification[scheme] = float(np.median(ratios)) if nz.any() else 1.0
    return SchemeComparison(
        regular_rel_error=regular_err,
        full_rel_error=full_err,
        amplification=amplification,
    )


def write_trace_csv(trace, path):
    cols = ["iteration", "n_tets", "n_vertices", "eta", "osc", "etaD_max",
            "newton_iterations", "error", "increment", "wall_time"]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for r in trace.records:
            row = []
            for c in cols:
                v = getattr(r, c)
                if v is None:
                    row.append("")
                elif isinstance(v, float):
                    row.append("%.17g" % v)
                else:
                    row.append(str(v))
            f.write(",".join(row) + "\n")


def trace_report(trace, extra=None):
    """JSON-serializable run summary."""
    out = {
        "theta": trace.theta,
        "ell": trace.ell,
        "lambda": trace.bisection_reduction_factor(),
        "iterations": len(trace),
        "final_eta": trace.records[-1].eta if trace.records else None,
        "n_tets": [r.n_tets for r in trace.records],
        "eta": [r.eta for r in trace.records],
        "error": [r.error for r in trace.records],
        "reduction_flags": trace.reduction_flags,
        "quasi_orthogonality_flags": trace.quasi_orthogonality_flags,
    }
    if extra:
        out.update(extra)
    return out


def write_report_json(report, path):
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
