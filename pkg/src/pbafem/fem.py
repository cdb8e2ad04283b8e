"""P1 Galerkin discretization and the damped inexact Newton solver.

Assembles the piecewise-dielectric stiffness form, the solvent-region
sinh nonlinearity (4-point degree-2 tetrahedral quadrature), the interface
flux functional, and the gradient volume load used by the two-term
potential split.  The nonlinear systems are solved by a damped Newton
iteration whose linear sub-problems go through a Jacobi-preconditioned
conjugate gradient method; the linear-solver contract is a plain function
so a stronger preconditioner can be swapped in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import molio
from .mesh import MOLECULAR, SOLVENT, tet_gradients, tet_volumes

# 4-point degree-2 quadrature on the reference tet, barycentric rows
_QA = 0.5854101966249685
_QB = 0.1381966011250105
QUAD_BARY = np.full((4, 4), _QB)
np.fill_diagonal(QUAD_BARY, _QA)
QUAD_WEIGHTS = np.full(4, 0.25)

OVERFLOW_GUARD = 700.0


class AssemblyError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    """Nonlinear argument left the representable range; damp the step."""


class LinearSolveError(RuntimeError):
    pass


class NonConvergenceError(RuntimeError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class LineSearchStallError(NonConvergenceError):
    pass


def eps_per_tet(mesh, cs):
    return np.where(mesh.region == MOLECULAR, cs.eps_m, cs.eps_s)


def kappa2_per_tet(mesh, cs):
    return np.where(mesh.region == MOLECULAR, 0.0, cs.kappa2)


def quadrature_points(mesh):
    """Physical quadrature points, shape (ntets, 4, 3)."""
    return np.einsum("qk,tkd->tqd", QUAD_BARY, mesh.vertices[mesh.tets])


def assemble_stiffness(mesh, eps):
    """Sparse symmetric stiffness matrix of the form (eps grad u, grad v).

    ``eps`` is a scalar or per-tet array; per-element integration is exact
    because P1 gradients are constant.
    """
    eps = np.broadcast_to(np.asarray(eps, dtype=float), (mesh.n_tets,))
    vol = tet_volumes(mesh.vertices, mesh.tets)
    if np.any(vol <= 0.0):
        raise AssemblyError("zero-volume element in stiffness assembly")
    g = tet_gradients(mesh.vertices, mesh.tets)
    local = np.einsum("t,tid,tjd->tij", eps * vol, g, g)
    tets = mesh.tets
    rows = np.repeat(tets, 4, axis=1).ravel()
    cols = np.tile(tets, (1, 4)).ravel()
    A = sp.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(mesh.n_vertices, mesh.n_vertices)
    )
    return A.tocsr()


def assemble_bilinear(mesh, cs):
    """Stiffness operator with the piecewise dielectric of the charge system."""
    return assemble_stiffness(mesh, eps_per_tet(mesh, cs))


def assemble_nonlinear(mesh, kappa2, u, shift=None):
    """Quadrature assembly of the sinh load and its cosh Jacobian block.

    Returns ``(b, C)`` with ``b_i = (kappa^2 sinh(w), phi_i)`` and
    ``C_ij = (kappa^2 cosh(w), phi_i phi_j)`` where ``w`` is the P1
    interpolant of ``u`` at the quadrature points plus the optional
    per-quadrature-point ``shift`` array (ntets, 4).  Elements with zero
    kappa^2 contribute nothing.  Raises :class:`DivergenceError` when the
    argument exceeds the overflow guard.
    """
    kappa2 = np.broadcast_to(np.asarray(kappa2, dtype=float), (mesh.n_tets,))
    n = mesh.n_vertices
    active = np.flatnonzero(kappa2 != 0.0)
    b = np.zeros(n)
    C = sp.csr_matrix((n, n))
    if active.size == 0:
        return b, C
    tets = mesh.tets[active]
    vol = tet_volumes(mesh.vertices, mesh.tets)[active]
    uq = np.asarray(u, dtype=float)[tets] @ QUAD_BARY.T  # (nact, 4 qpoints)
    if shift is not None:
        uq = uq + shift[active]
    if np.any(np.abs(uq) > OVERFLOW_GUARD):
        raise DivergenceError(
            "sinh argument beyond %g at a quadrature point; damp the Newton step"
            % OVERFLOW_GUARD
        )
    k2 = kappa2[active]
    sinh_w = np.sinh(uq) * QUAD_WEIGHTS[None, :]
    local_b = np.einsum("t,tq,qi->ti", k2 * vol, sinh_w, QUAD_BARY)
    np.add.at(b, tets.ravel(), local_b.ravel())
    cosh_w = np.cosh(uq) * QUAD_WEIGHTS[None, :]
    local_c = np.einsum("t,tq,qi,qj->tij", k2 * vol, cosh_w, QUAD_BARY, QUAD_BARY)
    rows = np.repeat(tets, 4, axis=1).ravel()
    cols = np.tile(tets, (1, 4)).ravel()
    C = sp.coo_matrix((local_c.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    return b, C


def assemble_interface_load(mesh, g_per_face):
    """Load vector of the interface functional with per-face constant data.

    Each of the three vertices of interface face F receives
    ``g(F) * area(F) / 3`` (exact for a constant times the P1 trace).
    """
    fd = mesh.faces()
    g = np.broadcast_to(
        np.asarray(g_per_face, dtype=float), (fd.interface_faces.shape[0],)
    )
    out = np.zeros(mesh.n_vertices)
    tri = fd.faces[fd.interface_faces]
    contrib = (g * fd.interface_areas / 3.0)[:, None].repeat(3, axis=1)
    np.add.at(out, tri.ravel(), contrib.ravel())
    return out


def assemble_volume_load_twoterm(mesh, cs, grad_us):
    """Gradient volume load of the two-term split.

    ``grad_us`` maps an (n, 3) array of points to (n, 3) gradients of the
    singular potential.  Contribution per solvent element, by quadrature:
    ``-(eps_s - eps_m) grad u^s . grad phi_i``; molecular elements vanish
    because the dielectric deviation is zero there.
    """
    out = np.zeros(mesh.n_vertices)
    solvent = mesh.solvent_tets()
    if solvent.size == 0 or cs.eps_s == cs.eps_m:
        return out
    tets = mesh.tets[solvent]
    vol = tet_volumes(mesh.vertices, mesh.tets)[solvent]
    g = tet_gradients(mesh.vertices, mesh.tets)[solvent]
    pts = np.einsum("qk,tkd->tqd", QUAD_BARY, mesh.vertices[tets])
    gs = grad_us(pts.reshape(-1, 3)).reshape(pts.shape)
    mean_gs = np.einsum("q,tqd->td", QUAD_WEIGHTS, gs)
    coef = -(cs.eps_s - cs.eps_m) * vol
    local = coef[:, None] * np.einsum("tid,td->ti", g, mean_gs)
    np.add.at(out, tets.ravel(), local.ravel())
    return out


def assemble_source_load(mesh, f):
    """Quadrature load vector (f, phi_i) for a callable source f(points)."""
    pts = quadrature_points(mesh)
    fv = np.asarray(f(pts.reshape(-1, 3)), dtype=float).reshape(mesh.n_tets, 4)
    vol = tet_volumes(mesh.vertices, mesh.tets)
    local = np.einsum("t,tq,qi->ti", vol, fv * QUAD_WEIGHTS[None, :], QUAD_BARY)
    out = np.zeros(mesh.n_vertices)
    np.add.at(out, mesh.tets.ravel(), local.ravel())
    return out


def lumped_volumes(mesh, mask=None):
    """Per-vertex lumped volume: each tet spreads |tau|/4 to its vertices."""
    vol = tet_volumes(mesh.vertices, mesh.tets)
    out = np.zeros(mesh.n_vertices)
    tets = mesh.tets
    if mask is not None:
        tets = tets[mask]
        vol = vol[mask]
    np.add.at(out, tets.ravel(), np.repeat(vol / 4.0, 4))
    return out


def energy_norm(mesh, cs, v, A=None):
    """Energy norm sqrt(v^T A v) with the piecewise-dielectric stiffness."""
    if A is None:
        A = assemble_bilinear(mesh, cs)
    v = np.asarray(v, dtype=float)
    q = float(v @ (A @ v))
    return np.sqrt(max(q, 0.0))


def pcg(A, b, x0=None, rtol=1e-10, atol=0.0, maxiter=20000, diag=None):
    """Jacobi-preconditioned conjugate gradients for SPD systems.

    Returns ``(x, iterations)``.  Raises :class:`LinearSolveError` on a
    breakdown (non-SPD curvature) or when the iteration budget runs out.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    if diag is None:
        diag = A.diagonal()
    if np.any(diag <= 0.0):
        raise LinearSolveError("non-positive diagonal; system is not SPD")
    minv = 1.0 / diag
    r = b - A @ x
    target = max(rtol * np.linalg.norm(b), atol)
    if np.linalg.norm(r) <= target:
        return x, 0
    z = minv * r
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, maxiter + 1):
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise LinearSolveError("conjugate gradient breakdown: p^T A p <= 0")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= target:
            return x, it
        z = minv * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise LinearSolveError(
        "conjugate gradients did not reach %.3g in %d iterations" % (target, maxiter)
    )


@dataclass
class FemSolution:
    """Nodal solution with solver metadata."""

    mesh_id: int
    values: np.ndarray
    dirichlet_mask: np.ndarray
    residual_norm: float
    newton_iterations: int
    residual_history: list = field(default_factory=list)
    converged: bool = True

    def copy_with_values(self, values):
        return FemSolution(
            mesh_id=self.mesh_id,
            values=np.asarray(values, dtype=float),
            dirichlet_mask=self.dirichlet_mask,
            residual_norm=self.residual_norm,
            newton_iterations=self.newton_iterations,
            residual_history=list(self.residual_history),
            converged=self.converged,
        )


def dirichlet_values(mesh, split):
    """Dirichlet data on outer-boundary vertices for the active scheme.

    The solved variable matches the full potential on the outer boundary
    for the three-term split; the two-term split subtracts the singular
    part everywhere, including the boundary.
    """
    bnd = mesh.boundary_vertices()
    pts = mesh.vertices[bnd]
    g = np.asarray(split.g_outer(pts), dtype=float)
    if split.scheme == molio.TWO_TERM:
        g = g - split.u_s(pts)[0]
    mask = np.zeros(mesh.n_vertices, dtype=bool)
    mask[bnd] = True
    full = np.zeros(mesh.n_vertices)
    full[bnd] = g
    return mask, full


def _interface_shift(mesh, split):
    """u^s at the quadrature points for the two-term sinh argument."""
    if split.scheme != molio.TWO_TERM:
        return None
    pts = quadrature_points(mesh)
    vals = split.u_s(pts.reshape(-1, 3))[0]
    return vals.reshape(mesh.n_tets, 4)


def build_load(mesh, cs, split, source=None):
    """Right-hand side of the discrete system for the active scheme."""
    if split.scheme == molio.THREE_TERM:
        # the stored flux datum is oriented with the molecular-outward
        # normal; the weak form needs the solvent-outward jump, hence the
        # sign flip here
        L = -assemble_interface_load(mesh, split.g_gamma)
    else:
        L = assemble_volume_load_twoterm(mesh, cs, lambda p: split.u_s(p)[1])
    if source is not None:
        L = L + assemble_source_load(mesh, source)
    return L


def newton_solve(mesh, cs, split, initial=None, tol=1e-8, max_iter=50,
                 source=None, clamp=False, linear_maxiter=20000,
                 min_step=2.0 ** -20):
    """Damped Newton iteration for the discrete semilinear problem.

    Solves ``A u + B(u) = L`` with Dirichlet data eliminated by
    row/column restriction (the free-node operator stays SPD).  Each step
    solves ``J delta = -F`` by Jacobi-PCG, then backtracks the step length
    until the residual norm decreases; iterates can optionally be clamped
    into the split's full-component barrier interval.  Terminates when
    ``||F|| <= tol * ||F_0||`` or ``||F|| <= 1e-14``.
    """
    A = assemble_bilinear(mesh, cs)
    L = build_load(mesh, cs, split, source=source)
    kappa2 = kappa2_per_tet(mesh, cs)
    shift = _interface_shift(mesh, split)
    mask, u = dirichlet_values(mesh, split)
    free = ~mask
    if initial is not None:
        initial = np.asarray(initial, dtype=float)
        u[free] = initial[free]

    nonlinear = bool(np.any(kappa2 != 0.0))
    A_ff = A[free][:, free].tocsr()
    lin_rtol = max(1e-2 * tol, 1e-10)
    clamp_lo = clamp_hi = None
    if clamp and split.barriers is not None:
        alpha, beta = split.barriers.alpha, split.barriers.beta
        if np.isfinite(alpha) and np.isfinite(beta):
            clamp_lo, clamp_hi = alpha, beta

    def residual(vec):
        b, _ = assemble_nonlinear(mesh, kappa2, vec, shift=shift)
        F = (A @ vec + b - L)[free]
        return F

    F = residual(u)
    norm0 = np.linalg.norm(F)
    history = [norm0]
    if norm0 == 0.0:
        return FemSolution(mesh.mesh_id, u, mask, 0.0, 0, history)

    for it in range(1, max_iter + 1):
        normF = history[-1]
        if normF <= max(tol * norm0, 1e-14):
            return FemSolution(mesh.mesh_id, u, mask, normF, it - 1, history)
        if nonlinear:
            _, C = assemble_nonlinear(mesh, kappa2, u, shift=shift)
            J_ff = A_ff + C[free][:, free].tocsr()
        else:
            J_ff = A_ff
        delta, _ = pcg(J_ff, -F, rtol=lin_rtol, maxiter=linear_maxiter)
        step = 1.0
        while True:
            trial = u.copy()
            trial[free] += step * delta
            if clamp_lo is not None:
                trial[free] = np.clip(trial[free], clamp_lo, clamp_hi)
            try:
                F_trial = residual(trial)
            except DivergenceError:
                F_trial = None
            if F_trial is not None:
                norm_trial = np.linalg.norm(F_trial)
                if norm_trial <= (1.0 - 1e-4 * step) * normF:
                    break
            step *= 0.5
            if step < min_step:
                raise LineSearchStallError(
                    "line search stalled below %g at Newton step %d"
                    % (min_step, it),
                    history=history,
                )
        u, F = trial, F_trial
        history.append(norm_trial)

    normF = history[-1]
    if normF <= max(tol * norm0, 1e-14):
        return FemSolution(mesh.mesh_id, u, mask, normF, max_iter, history)
    raise NonConvergenceError(
        "Newton did not converge in %d iterations (residual %.3g)"
        % (max_iter, normF),
        history=history,
    )


def l2_error(mesh, u_nodal, exact):
    """Quadrature L2 distance between a nodal field and a callable."""
    pts = quadrature_points(mesh)
    ue = np.asarray(exact(pts.reshape(-1, 3)), dtype=float).reshape(mesh.n_tets, 4)
    uh = np.asarray(u_nodal, dtype=float)[mesh.tets] @ QUAD_BARY.T
    vol = tet_volumes(mesh.vertices, mesh.tets)
    err2 = np.einsum("t,tq,q->", vol, (uh - ue) ** 2, QUAD_WEIGHTS)
    return np.sqrt(max(err2, 0.0))


def h1_seminorm_error(mesh, u_nodal, exact_grad):
    """Quadrature H1-seminorm distance to a callable exact gradient."""
    g = tet_gradients(mesh.vertices, mesh.tets)
    grad_uh = np.einsum("tid,ti->td", g, np.asarray(u_nodal)[mesh.tets])
    pts = quadrature_points(mesh)
    ge = np.asarray(exact_grad(pts.reshape(-1, 3)), dtype=float).reshape(
        mesh.n_tets, 4, 3
    )
    diff = ge - grad_uh[:, None, :]
    vol = tet_volumes(mesh.vertices, mesh.tets)
    err2 = np.einsum("t,tq,q->", vol, np.einsum("tqd,tqd->tq", diff, diff),
                     QUAD_WEIGHTS)
    return np.sqrt(max(err2, 0.0))
