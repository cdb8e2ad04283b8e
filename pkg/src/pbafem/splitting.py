"""Potential splitting: singular part, harmonic extension, flux data, barriers.

The solved unknown is the smooth remainder of the potential after the
Coulombic singular part (and, in the stabilized three-term variant, its
harmonic extension into the molecular region) has been removed.  This
module provides those removed pieces: the closed-form singular potential
and gradient, the discrete harmonic extension on the molecular submesh,
the per-face interface flux data, screened-Coulomb outer boundary values,
and the computable sup/inf barriers for the nonlinear component.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import fem, molio
from .mesh import MOLECULAR, SOLVENT, tet_gradients

log = logging.getLogger(__name__)

SINGULARITY_RADIUS = 1e-12


class SingularityError(ValueError):
    """Evaluation point coincides with a point charge."""


class SubmeshError(RuntimeError):
    pass


@dataclass
class Barriers:
    """Computable pointwise bounds for the solution components.

    ``u_minus``/``u_plus`` bound the nonlinear component, ``alpha``/``beta``
    the full smooth component.  With zero ionic strength the bounds
    degenerate and clamping must be disabled; that case is represented by
    infinite sentinels.
    """

    u_minus: float
    u_plus: float
    alpha: float
    beta: float

    @property
    def finite(self):
        return np.isfinite(self.u_minus) and np.isfinite(self.u_plus)


@dataclass
class SplitFields:
    """Everything the discrete solve needs from the potential splitting."""

    scheme: str
    u_s: callable               # points -> (values, gradients)
    g_outer: callable           # points -> boundary values
    u_h: np.ndarray | None      # nodal harmonic extension (molecular region)
    u_h_mask: np.ndarray | None  # vertices where u_h is defined
    g_gamma: np.ndarray         # per-interface-face flux data
    barriers: Barriers | None
    u_l: np.ndarray | None = None  # nodal linear part (for the barriers)
    mesh_id: int | None = None


def singular_potential(cs, points):
    """Coulombic singular potential and gradient of the charge system.

    value(x)    = sum_i z_i / (eps_m |x - x_i|)
    gradient(x) = -sum_i z_i (x - x_i) / (eps_m |x - x_i|^3)

    Raises :class:`SingularityError` if any point sits on a charge.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    diff = pts[:, None, :] - cs.positions[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    if np.any(dist < SINGULARITY_RADIUS):
        raise SingularityError("evaluation point coincides with a charge")
    w = cs.charges / cs.eps_m
    vals = (w[None, :] / dist).sum(axis=1)
    grads = -np.einsum("pc,pcd->pd", w[None, :] / dist ** 3, diff)
    if np.asarray(points).ndim == 1:
        return vals[0], grads[0]
    return vals, grads


def singular_potential_fn(cs):
    return lambda pts: singular_potential(cs, pts)


def outer_boundary_data(cs, points):
    """Screened-Coulomb superposition used as outer Dirichlet data.

    g(x) = sum_i (z_i / eps_s) exp(-kappa |x - x_i|) / |x - x_i|

    Reduces to the plain Coulomb tail for zero ionic strength, which
    reproduces the Born exterior exactly.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    diff = pts[:, None, :] - cs.positions[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    kappa = np.sqrt(cs.kappa2)
    vals = ((cs.charges / cs.eps_s) * np.exp(-kappa * dist) / dist).sum(axis=1)
    if np.asarray(points).ndim == 1:
        return vals[0]
    return vals


def outer_boundary_fn(cs):
    return lambda pts: outer_boundary_data(cs, pts)


def _molecular_submesh(mesh):
    """Vertex set and connectivity of the molecular region."""
    mol = mesh.molecular_tets()
    if mol.size == 0:
        raise SubmeshError("mesh has no molecular region")
    tets = mesh.tets[mol]
    vused = np.unique(tets)
    return mol, tets, vused


def harmonic_extension(mesh, cs, rtol=1e-10):
    """Discrete harmonic extension of -u^s from the interface into the molecule.

    Solves the P1 Laplace problem on the molecular submesh with Dirichlet
    trace -u^s at interface vertices, by Jacobi-PCG to the given relative
    residual.  Returns ``(values, mask)`` where ``values`` is defined on
    the full vertex set and ``mask`` flags molecular-region vertices.
    """
    mol, tets, vused = _molecular_submesh(mesh)
    on_int, _ = mesh.vertex_flags()
    dirichlet = vused[on_int[vused]]
    if dirichlet.size == 0:
        raise SubmeshError(
            "molecular region has no interface vertices; harmonic system singular"
        )
    # submesh Laplacian: assemble with unit coefficient on molecular tets
    # and zero elsewhere, then restrict to the molecular vertex set
    sub_eps = np.zeros(mesh.n_tets)
    sub_eps[mol] = 1.0
    A = fem.assemble_stiffness(mesh, sub_eps)

    values = np.zeros(mesh.n_vertices)
    us_vals, _ = singular_potential(cs, mesh.vertices[dirichlet])
    values[dirichlet] = -us_vals

    free = np.zeros(mesh.n_vertices, dtype=bool)
    free[vused] = True
    free[dirichlet] = False
    free_idx = np.flatnonzero(free)
    if free_idx.size:
        A_ff = A[free_idx][:, free_idx].tocsr()
        rhs = -(A @ values)[free_idx]
        if np.any(A_ff.diagonal() <= 0.0):
            raise SubmeshError(
                "molecular component disconnected from the interface"
            )
        sol, _ = fem.pcg(A_ff, rhs, rtol=rtol)
        values[free_idx] = sol
    mask = np.zeros(mesh.n_vertices, dtype=bool)
    mask[vused] = True
    return values, mask


def interface_flux(mesh, cs, u_h=None):
    """Per-interface-face flux datum, normals pointing molecular -> solvent.

    Each face gets ``eps_m (grad u^s(x_F) + grad u^h|_mol) . n_F`` with the
    singular gradient at the face centroid and the (constant) P1 gradient
    of the harmonic extension taken one-sidedly from the adjacent
    molecular tet.  Without ``u_h`` (two-term diagnostics) only the
    singular gradient enters.
    """
    fd = mesh.faces()
    ids = fd.interface_faces
    if ids.size == 0:
        return np.zeros(0)
    tri = fd.faces[ids]
    centroids = mesh.vertices[tri].mean(axis=1)
    _, grad_s = singular_potential(cs, centroids)
    total = grad_s
    if u_h is not None:
        mol_tets = fd.interface_mol_tet
        if np.any(mesh.region[mol_tets] != MOLECULAR):
            raise SubmeshError("interface face without a molecular neighbor")
        g = tet_gradients(mesh.vertices, mesh.tets[mol_tets])
        grad_h = np.einsum(
            "tid,ti->td", g, np.asarray(u_h)[mesh.tets[mol_tets]]
        )
        total = total + grad_h
    return cs.eps_m * np.einsum("td,td->t", total, fd.interface_normals)


def solve_linear_part(mesh, cs, g_gamma, g_outer, rtol=1e-10):
    """Nodal solution of the dielectric interface problem without the sinh term.

    Same stiffness form and boundary data as the full problem; used to
    anchor the barrier computation.
    """
    A = fem.assemble_bilinear(mesh, cs)
    # flux datum uses the molecular-outward normal; the weak form needs
    # the solvent-outward jump
    L = -fem.assemble_interface_load(mesh, g_gamma)
    bnd = mesh.boundary_vertices()
    values = np.zeros(mesh.n_vertices)
    values[bnd] = np.asarray(g_outer(mesh.vertices[bnd]), dtype=float)
    free = np.ones(mesh.n_vertices, dtype=bool)
    free[bnd] = False
    fidx = np.flatnonzero(free)
    A_ff = A[fidx][:, fidx].tocsr()
    rhs = (L - A @ values)[fidx]
    sol, _ = fem.pcg(A_ff, rhs, rtol=rtol)
    values[fidx] = sol
    return values


def compute_barriers(mesh, cs, u_l):
    """Sup/inf barriers from the solvent-region extrema of the linear part.

    With positive ionic strength the sign condition on the sinh term gives
    the primed bounds ``alpha' = -sup u_l`` and ``beta' = -inf u_l`` over
    the solvent region (P1 extrema are attained at vertices), clipped at
    zero; the full-component interval shifts them by the same extrema.
    With zero ionic strength the construction degenerates and infinite
    sentinels are returned so clamping gets disabled.
    """
    solvent_tets = mesh.solvent_tets()
    if solvent_tets.size == 0:
        raise SubmeshError("mesh has no solvent region")
    sverts = np.unique(mesh.tets[solvent_tets])
    vals = np.asarray(u_l, dtype=float)[sverts]
    sup_l, inf_l = float(vals.max()), float(vals.min())
    if cs.kappa2 == 0.0:
        log.info("zero ionic strength: barriers degenerate, clamping disabled")
        return Barriers(-np.inf, np.inf, -np.inf, np.inf)
    alpha_p = -sup_l
    beta_p = -inf_l
    u_minus = min(alpha_p, 0.0)
    u_plus = max(beta_p, 0.0)
    return Barriers(
        u_minus=u_minus,
        u_plus=u_plus,
        alpha=u_minus + inf_l,
        beta=u_plus + sup_l,
    )


def compute_split_fields(mesh, cs, scheme=molio.THREE_TERM, rtol=1e-10,
                         with_barriers=None):
    """Assemble all splitting data for a mesh/charge-system pair.

    For the three-term scheme this solves the harmonic extension and the
    interface flux; the two-term scheme carries the singular-only flux for
    diagnostics and moves the dielectric mismatch into a volume load at
    solve time.  Barriers are computed whenever the ionic strength is
    positive (or on request), which costs one extra linear solve.
    """
    u_s = singular_potential_fn(cs)
    g_outer = outer_boundary_fn(cs)
    u_h = u_h_mask = None
    has_interface = mesh.faces().interface_faces.size > 0
    if scheme == molio.THREE_TERM:
        if has_interface:
            u_h, u_h_mask = harmonic_extension(mesh, cs, rtol=rtol)
            g_gamma = interface_flux(mesh, cs, u_h)
        else:
            g_gamma = np.zeros(0)
    elif scheme == molio.TWO_TERM:
        g_gamma = interface_flux(mesh, cs, None) if has_interface else np.zeros(0)
    else:
        raise ValueError("unknown scheme %r" % (scheme,))

    barriers = None
    u_l = None
    if with_barriers is None:
        with_barriers = cs.kappa2 > 0.0
    if with_barriers:
        if scheme == molio.THREE_TERM:
            u_l = solve_linear_part(mesh, cs, g_gamma, g_outer, rtol=rtol)
        else:
            # linear part of the two-term problem: same operator, volume load
            A = fem.assemble_bilinear(mesh, cs)
            L = fem.assemble_volume_load_twoterm(
                mesh, cs, lambda p: u_s(p)[1]
            )
            bnd = mesh.boundary_vertices()
            values = np.zeros(mesh.n_vertices)
            values[bnd] = g_outer(mesh.vertices[bnd]) - u_s(mesh.vertices[bnd])[0]
            free = np.ones(mesh.n_vertices, dtype=bool)
            free[bnd] = False
            fidx = np.flatnonzero(free)
            sol, _ = fem.pcg(
                A[fidx][:, fidx].tocsr(), (L - A @ values)[fidx], rtol=rtol
            )
            values[fidx] = sol
            u_l = values
        barriers = compute_barriers(mesh, cs, u_l)
    else:
        barriers = Barriers(-np.inf, np.inf, -np.inf, np.inf) if cs.kappa2 == 0.0 else None

    return SplitFields(
        scheme=scheme,
        u_s=u_s,
        g_outer=g_outer,
        u_h=u_h,
        u_h_mask=u_h_mask,
        g_gamma=g_gamma,
        barriers=barriers,
        u_l=u_l,
        mesh_id=mesh.mesh_id,
    )


def dump_interface_flux_csv(mesh, g_gamma, path):
    """Diagnostic CSV of per-face flux data: centroid, area, value."""
    fd = mesh.faces()
    tri = fd.faces[fd.interface_faces]
    centroids = mesh.vertices[tri].mean(axis=1)
    with open(path, "w") as f:
        f.write("face,cx,cy,cz,area,g_gamma\n")
        for i, fid in enumerate(fd.interface_faces):
            f.write(
                "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n"
                % (fid, centroids[i, 0], centroids[i, 1], centroids[i, 2],
                   fd.interface_areas[i], g_gamma[i])
            )
