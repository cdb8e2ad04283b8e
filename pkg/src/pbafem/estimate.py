"""Residual a-posteriori error indicators, oscillation, and bulk marking.

Per element the indicator combines the volume residual of the sinh term,
the inter-element flux jumps of the piecewise-dielectric gradient, and
the prescribed interface flux data; the oscillation term tracks what the
residual cannot see.  A separate data indicator bounds the local problem
coefficients and feeds the contraction monitor.  Marking is bulk
("greedy") selection of a minimal set carrying a theta-fraction of the
total squared indicator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fem
from .mesh import (FACE_INTERFACE, FACE_INTERIOR, MarkedSet, tet_diameters,
                   tet_gradients, tet_volumes)

ESTIMATOR_PAPER = "paper"
ESTIMATOR_COMBINED = "combined"

# 3-point edge-midpoint rule on the reference triangle (degree 2)
_TRI_QUAD = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
_TRI_W = np.full(3, 1.0 / 3.0)


class StalenessError(RuntimeError):
    """Solution or split data do not belong to the given mesh."""


class ReliabilityViolation(RuntimeError):
    """Zero total indicator reported together with a nonzero error."""


@dataclass
class IndicatorSet:
    """Per-element squared indicators and their aggregates."""

    eta2: np.ndarray
    osc2: np.ndarray
    etaD2: np.ndarray
    mesh_id: int
    variant: str = ESTIMATOR_PAPER

    @property
    def eta2_total(self):
        return float(self.eta2.sum())

    @property
    def osc2_total(self):
        return float(self.osc2.sum())

    @property
    def etaD2_sum(self):
        return float(self.etaD2.sum())

    @property
    def etaD2_max(self):
        # the data indicator aggregates by maximum over elements
        return float(self.etaD2.max()) if self.etaD2.size else 0.0

    @property
    def eta_total(self):
        return float(np.sqrt(self.eta2_total))


def _face_diameters(vertices, tris):
    p = vertices[tris]
    e = np.stack([
        p[:, 0] - p[:, 1], p[:, 1] - p[:, 2], p[:, 0] - p[:, 2]
    ], axis=1)
    return np.linalg.norm(e, axis=2).max(axis=1)


def estimate_fields(mesh, eps, kappa2, u, g_gamma, barriers=None,
                    variant=ESTIMATOR_PAPER, g_gamma_fn=None):
    """Indicator assembly from raw per-tet coefficient fields.

    ``g_gamma`` holds per-interface-face constants; ``g_gamma_fn``
    optionally evaluates non-constant interface data at face quadrature
    points, which activates the data-oscillation term.
    """
    nt = mesh.n_tets
    eps = np.broadcast_to(np.asarray(eps, dtype=float), (nt,))
    kappa2 = np.broadcast_to(np.asarray(kappa2, dtype=float), (nt,))
    u = np.asarray(u, dtype=float)
    vol = tet_volumes(mesh.vertices, mesh.tets)
    h_tau = tet_diameters(mesh.vertices, mesh.tets)

    eta2 = np.zeros(nt)
    osc2 = np.zeros(nt)

    # volume residual of the nonlinearity, 4-point quadrature
    active = kappa2 != 0.0
    if np.any(active):
        uq = u[mesh.tets[active]] @ fem.QUAD_BARY.T
        integrand = (kappa2[active, None] * np.sinh(uq)) ** 2
        elem = vol[active] * np.einsum("tq,q->t", integrand, fem.QUAD_WEIGHTS)
        eta2[active] += h_tau[active] ** 2 * elem

    # gradient jumps across faces
    fd = mesh.faces()
    grads = tet_gradients(mesh.vertices, mesh.tets)
    grad_u = np.einsum("tid,ti->td", grads, u[mesh.tets])
    flux = eps[:, None] * grad_u
    areas = np.zeros(fd.faces.shape[0])
    p = mesh.vertices[fd.faces]
    nvec = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    areas = 0.5 * np.linalg.norm(nvec, axis=1)
    with np.errstate(invalid="ignore"):
        nunit = nvec / (2.0 * areas)[:, None]
    h_F = _face_diameters(mesh.vertices, fd.faces)

    shared = fd.f2t[:, 1] >= 0
    jump = np.zeros(fd.faces.shape[0])
    jump[shared] = np.einsum(
        "fd,fd->f",
        flux[fd.f2t[shared, 0]] - flux[fd.f2t[shared, 1]],
        nunit[shared],
    )

    iface_mask = fd.tags == FACE_INTERFACE
    g_face = np.zeros(fd.faces.shape[0])
    if g_gamma is not None and fd.interface_faces.size:
        g_face[fd.interface_faces] = np.broadcast_to(
            np.asarray(g_gamma, dtype=float), (fd.interface_faces.size,)
        )

    jump2 = np.zeros(fd.faces.shape[0])
    inner = fd.tags == FACE_INTERIOR
    jump2[inner] = jump[inner] ** 2
    if variant == ESTIMATOR_PAPER:
        jump2[iface_mask] = jump[iface_mask] ** 2
    elif variant == ESTIMATOR_COMBINED:
        # residual form on interface faces: the discrete solvent-minus-
        # molecular flux jump along the molecular->solvent normal should
        # balance the prescribed datum, so square their difference instead
        # of keeping two separate terms
        iface_ids = fd.interface_faces
        first_is_mol = fd.f2t[iface_ids, 0] == fd.interface_mol_tet
        sgn = np.sign(
            np.einsum("fd,fd->f", nunit[iface_ids], fd.interface_normals)
        )
        jump_sm = np.where(first_is_mol, -jump[iface_ids], jump[iface_ids]) * sgn
        jump2[iface_ids] = (jump_sm - g_face[iface_ids]) ** 2
    else:
        raise ValueError("unknown estimator variant %r" % (variant,))

    face_term = h_F * jump2 * areas
    for side in (0, 1):
        tets_side = fd.f2t[:, side]
        ok = tets_side >= 0
        np.add.at(eta2, tets_side[ok], 0.5 * face_term[ok])

    if variant == ESTIMATOR_PAPER and fd.interface_faces.size:
        if g_gamma_fn is None:
            g_int2 = g_face[fd.interface_faces] ** 2 * areas[fd.interface_faces]
        else:
            tri = fd.faces[fd.interface_faces]
            qp = np.einsum("qk,fkd->fqd", _TRI_QUAD, mesh.vertices[tri])
            gq = np.asarray(
                g_gamma_fn(qp.reshape(-1, 3)), dtype=float
            ).reshape(-1, 3)
            g_int2 = areas[fd.interface_faces] * np.einsum(
                "fq,q->f", gq ** 2, _TRI_W
            )
        term = h_F[fd.interface_faces] * g_int2
        for side in (0, 1):
            tets_side = fd.f2t[fd.interface_faces, side]
            ok = tets_side >= 0
            np.add.at(eta2, tets_side[ok], term[ok])

    # oscillation: gradient part plus interface-data deviation from its mean
    osc2 += h_tau ** 4 * np.einsum("td,td->t", grad_u, grad_u) * vol
    if fd.interface_faces.size and g_gamma_fn is not None:
        tri = fd.faces[fd.interface_faces]
        qp = np.einsum("qk,fkd->fqd", _TRI_QUAD, mesh.vertices[tri])
        gq = np.asarray(g_gamma_fn(qp.reshape(-1, 3)), dtype=float).reshape(-1, 3)
        gbar = np.einsum("fq,q->f", gq, _TRI_W)
        dev = areas[fd.interface_faces] * np.einsum(
            "fq,q->f", (gq - gbar[:, None]) ** 2, _TRI_W
        )
        term = h_F[fd.interface_faces] * dev
        for side in (0, 1):
            tets_side = fd.f2t[fd.interface_faces, side]
            ok = tets_side >= 0
            np.add.at(osc2, tets_side[ok], term[ok])
    # with per-face-constant interface data the deviation term is
    # identically zero and nothing is added

    # data indicator: patch-max dielectric plus the Lipschitz bound of the
    # nonlinearity over the barrier interval
    vmax = np.zeros(mesh.n_vertices)
    np.maximum.at(vmax, mesh.tets.ravel(), np.repeat(eps, 4))
    eps_patch = vmax[mesh.tets].max(axis=1)
    etaD2 = eps_patch ** 2
    if np.any(kappa2 != 0.0):
        if barriers is not None and np.isfinite(barriers.alpha) \
                and np.isfinite(barriers.beta):
            chi = max(abs(barriers.alpha), abs(barriers.beta))
        else:
            chi = float(np.abs(u).max())
        etaD2 = etaD2 + h_tau ** 2 * (kappa2 * np.cosh(chi)) ** 2
    return IndicatorSet(eta2=eta2, osc2=osc2, etaD2=etaD2,
                        mesh_id=mesh.mesh_id, variant=variant)


def estimate(mesh, cs, split, solution, variant=ESTIMATOR_PAPER,
             g_gamma_fn=None):
    """Residual indicators for a converged solution on its mesh."""
    if solution.mesh_id != mesh.mesh_id:
        raise StalenessError("solution was computed on a different mesh")
    if split.mesh_id is not None and split.mesh_id != mesh.mesh_id:
        raise StalenessError("split fields were computed on a different mesh")
    return estimate_fields(
        mesh,
        fem.eps_per_tet(mesh, cs),
        fem.kappa2_per_tet(mesh, cs),
        solution.values,
        split.g_gamma,
        barriers=split.barriers,
        variant=variant,
        g_gamma_fn=g_gamma_fn,
    )


def mark(indicators, theta):
    """Greedy minimal bulk marking.

    Sorts elements by decreasing squared indicator (ties by index) and
    takes the shortest prefix whose mass reaches ``theta^2`` of the total.
    A zero total yields an empty set flagged as converged.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    eta2 = np.asarray(indicators.eta2 if isinstance(indicators, IndicatorSet)
                      else indicators, dtype=float)
    total = eta2.sum()
    if total <= 0.0:
        return MarkedSet(np.zeros(0, dtype=np.int64), theta=theta,
                         converged=True)
    order = np.argsort(-eta2, kind="stable")
    positive = order[eta2[order] > 0.0]
    csum = np.cumsum(eta2[positive])
    target = theta ** 2 * total
    cut = int(np.searchsorted(csum, target))
    cut = min(cut, positive.size - 1)
    chosen = np.sort(positive[: cut + 1])
    return MarkedSet(chosen, theta=theta)


def dorfler_satisfied(eta2, selected, theta):
    eta2 = np.asarray(eta2, dtype=float)
    return eta2[selected].sum() >= theta ** 2 * eta2.sum()


def upper_bound_ratio(indicators, true_error_energy):
    """Empirical reliability ratio |||u - u_h|||^2 / eta^2 (oracle runs)."""
    err2 = float(true_error_energy) ** 2
    total = indicators.eta2_total
    if total == 0.0:
        if err2 > 0.0:
            raise ReliabilityViolation(
                "zero indicator with nonzero true error %.3g"
                % true_error_energy
            )
        return 0.0
    return err2 / total


def transfer_face_constant_g(mesh_from, mesh_to, g_from):
    """Restrict per-face interface data to a refinement's interface faces.

    Child interface faces inherit the value of the coarse face containing
    their centroid; used by the indicator-monotonicity audits where the
    data must be held fixed across refinement.
    """
    fd_from = mesh_from.faces()
    fd_to = mesh_to.faces()
    tri_from = fd_from.faces[fd_from.interface_faces]
    tri_to = fd_to.faces[fd_to.interface_faces]
    cent_to = mesh_to.vertices[tri_to].mean(axis=1)
    p0 = mesh_from.vertices[tri_from[:, 0]]
    n_from = fd_from.interface_normals
    g_to = np.empty(tri_to.shape[0])
    for i, c in enumerate(cent_to):
        # closest coarse face by plane distance then centroid distance
        d = np.abs(np.einsum("fd,fd->f", n_from, c[None, :] - p0))
        cand = np.argsort(d)[:8]
        cc = mesh_from.vertices[tri_from[cand]].mean(axis=1)
        j = cand[np.argmin(np.linalg.norm(cc - c, axis=1))]
        g_to[i] = g_from[j]
    return g_to
