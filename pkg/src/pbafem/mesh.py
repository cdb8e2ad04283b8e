"""Conforming tetrahedral meshes with region/interface tagging and refinement.

The mesh is persistent: refinement returns a new mesh and leaves the input
untouched, with the old vertex numbering preserved as a prefix of the new
one (nested refinement).  Two refinement operations are provided:

* :func:`refine` -- newest-vertex bisection of a marked subset with
  recursive conformity closure.  Each tetrahedron carries an ordered
  vertex tuple and a type tag; the refinement edge is the (first, last)
  vertex pair, chosen as the longest edge on freshly built meshes.
* :func:`uniform_refine` -- regular 1:8 refinement of every element
  (each edge gains its midpoint), used for global refinement sweeps.

New vertices created on an edge whose endpoints both lie on the dielectric
interface (resp. the outer boundary) are snapped onto it via the mesh's
projector callbacks, which keeps the discrete interface a second-order
approximation of the true one under refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MOLECULAR = 1
SOLVENT = 2

FACE_INTERIOR = 0
FACE_INTERFACE = 1
FACE_BOUNDARY = 2

_REGION_NAMES = {MOLECULAR: "molecular", SOLVENT: "solvent"}

_mesh_counter = [0]


class MeshError(RuntimeError):
    pass


class RefinementError(MeshError):
    """Conformity closure failed to terminate within the configured depth."""


def _next_mesh_id():
    _mesh_counter[0] += 1
    return _mesh_counter[0]


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def tet_volumes(vertices, tets, signed=False):
    """Volumes of the given tetrahedra; signed volumes follow vertex order."""
    p = vertices[tets]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    c = p[:, 3] - p[:, 0]
    det = np.einsum("ij,ij->i", a, np.cross(b, c))
    vol = det / 6.0
    return vol if signed else np.abs(vol)


def tet_gradients(vertices, tets):
    """P1 basis gradients per tet, shape (ntets, 4, 3).

    Row k holds the gradient of the barycentric coordinate attached to
    local vertex k; the rows sum to zero.
    """
    p = vertices[tets]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    c = p[:, 3] - p[:, 0]
    det = np.einsum("ij,ij->i", a, np.cross(b, c))
    g1 = np.cross(b, c) / det[:, None]
    g2 = np.cross(c, a) / det[:, None]
    g3 = np.cross(a, b) / det[:, None]
    g0 = -(g1 + g2 + g3)
    return np.stack([g0, g1, g2, g3], axis=1)


_TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])
# local faces, face k is opposite local vertex k
_TET_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])
# vertex pairs opposite each edge in _TET_EDGES order
_TET_EDGE_OPP = np.array([[2, 3], [1, 3], [1, 2], [0, 3], [0, 2], [0, 1]])


def tet_edge_lengths(vertices, tets):
    p = vertices[tets]
    d = p[:, _TET_EDGES[:, 0]] - p[:, _TET_EDGES[:, 1]]
    return np.linalg.norm(d, axis=2)


def tet_diameters(vertices, tets):
    return tet_edge_lengths(vertices, tets).max(axis=1)


def dihedral_angles(vertices, tets):
    """All six dihedral angles per tet, in degrees, shape (ntets, 6)."""
    p = vertices[tets]
    angles = np.empty((tets.shape[0], 6))
    for k, (i, j) in enumerate(_TET_EDGES):
        a, b = _TET_EDGE_OPP[k]
        e = p[:, j] - p[:, i]
        e = e / np.linalg.norm(e, axis=1, keepdims=True)
        va = p[:, a] - p[:, i]
        vb = p[:, b] - p[:, i]
        va = va - np.einsum("ij,ij->i", va, e)[:, None] * e
        vb = vb - np.einsum("ij,ij->i", vb, e)[:, None] * e
        cosang = np.einsum("ij,ij->i", va, vb) / (
            np.linalg.norm(va, axis=1) * np.linalg.norm(vb, axis=1)
        )
        angles[:, k] = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return angles


def triangle_angles(vertices, tris):
    """Interior angles of triangles, in degrees, shape (ntris, 3)."""
    p = vertices[tris]
    out = np.empty((tris.shape[0], 3))
    for k in range(3):
        u = p[:, (k + 1) % 3] - p[:, k]
        v = p[:, (k + 2) % 3] - p[:, k]
        c = np.einsum("ij,ij->i", u, v) / (
            np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)
        )
        out[:, k] = np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))
    return out


def triangle_areas(vertices, tris):
    p = vertices[tris]
    return 0.5 * np.linalg.norm(
        np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1
    )


class RadialProjector:
    """Projection onto the sphere of given radius about the origin."""

    def __init__(self, radius):
        self.radius = float(radius)

    def __call__(self, p):
        p = np.asarray(p, dtype=float)
        n = np.linalg.norm(p)
        if n == 0.0:
            return p
        return p * (self.radius / n)

    def batch(self, pts):
        pts = np.asarray(pts, dtype=float)
        n = np.linalg.norm(pts, axis=1, keepdims=True)
        n[n == 0.0] = 1.0
        return pts * (self.radius / n)


def radial_projector(radius):
    return RadialProjector(radius)


def _project_points(projector, pts):
    if hasattr(projector, "batch"):
        return projector.batch(pts)
    return np.array([projector(p) for p in pts], dtype=float)


# ---------------------------------------------------------------------------
# the mesh object
# ---------------------------------------------------------------------------

@dataclass
class FaceData:
    """Derived face connectivity: unique sorted triangles plus tags."""

    faces: np.ndarray          # (nf, 3) sorted vertex ids
    tags: np.ndarray           # (nf,) FACE_* codes
    f2t: np.ndarray            # (nf, 2) adjacent tets, -1 where absent
    t2f: np.ndarray            # (nt, 4) face id opposite each local vertex
    interface_faces: np.ndarray    # face ids tagged FACE_INTERFACE
    interface_mol_tet: np.ndarray  # molecular-side tet per interface face
    interface_normals: np.ndarray  # unit normals, molecular -> solvent
    interface_areas: np.ndarray


class TetMesh:
    """Immutable conforming tetrahedral mesh with bisection bookkeeping."""

    def __init__(self, vertices, btets, region, gamma=None, generation=None,
                 interface_projector=None, boundary_projector=None,
                 parent_vertex_pairs=None, n_parent_vertices=None,
                 _skip_checks=False):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        btets = np.ascontiguousarray(btets, dtype=np.int64)
        self.region = np.ascontiguousarray(region, dtype=np.int8)
        nt = btets.shape[0]
        self.gamma = (np.zeros(nt, dtype=np.int8) if gamma is None
                      else np.ascontiguousarray(gamma, dtype=np.int8))
        self.generation = (np.zeros(nt, dtype=np.int32) if generation is None
                           else np.ascontiguousarray(generation, dtype=np.int32))
        self.interface_projector = interface_projector
        self.boundary_projector = boundary_projector
        self.mesh_id = _next_mesh_id()
        # vertex transfer data for nested-refinement interpolation
        self.parent_vertex_pairs = parent_vertex_pairs
        self.n_parent_vertices = n_parent_vertices

        self._btets = btets
        signed = tet_volumes(self.vertices, btets, signed=True)
        if not _skip_checks and np.any(signed == 0.0):
            raise MeshError("mesh contains zero-volume tetrahedra")
        # public connectivity is orientation-normalized (positive volumes)
        tets = btets.copy()
        flip = signed < 0.0
        tets[flip, 1], tets[flip, 2] = btets[flip, 2], btets[flip, 1]
        self.tets = tets
        self._faces = None
        self._vertex_flags = None

    # -- basic queries ------------------------------------------------------

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_tets(self):
        return self.tets.shape[0]

    def volumes(self):
        return tet_volumes(self.vertices, self.tets)

    def diameters(self):
        return tet_diameters(self.vertices, self.tets)

    def centroids(self):
        return self.vertices[self.tets].mean(axis=1)

    def refinement_edges(self):
        """Vertex pair bisected next for each tet (sorted pairs)."""
        e = self._btets[:, [0, 3]]
        return np.sort(e, axis=1)

    def faces(self):
        if self._faces is None:
            self._faces = self._build_faces()
        return self._faces

    def _build_faces(self):
        nt = self.n_tets
        all_faces = self.tets[:, _TET_FACES].reshape(-1, 3)
        all_faces = np.sort(all_faces, axis=1)
        faces, inv = np.unique(all_faces, axis=0, return_inverse=True)
        t2f = inv.reshape(nt, 4)
        nf = faces.shape[0]
        f2t = np.full((nf, 2), -1, dtype=np.int64)
        order = np.argsort(inv, kind="stable")
        owner = order // 4
        fid = inv[order]
        # first and second incident tet per face, in tet-index order
        starts = np.searchsorted(fid, np.arange(nf))
        counts = np.bincount(fid, minlength=nf)
        if np.any(counts > 2):
            raise MeshError("non-manifold face: more than two incident tets")
        f2t[:, 0] = owner[starts]
        has2 = counts == 2
        f2t[has2, 1] = owner[starts[has2] + 1]

        tags = np.full(nf, FACE_INTERIOR, dtype=np.int8)
        tags[~has2] = FACE_BOUNDARY
        both = f2t[has2]
        r0 = self.region[both[:, 0]]
        r1 = self.region[both[:, 1]]
        iface = np.zeros(nf, dtype=bool)
        iface[np.flatnonzero(has2)[r0 != r1]] = True
        tags[iface] = FACE_INTERFACE

        iface_ids = np.flatnonzero(tags == FACE_INTERFACE)
        mol_side = np.where(
            self.region[f2t[iface_ids, 0]] == MOLECULAR,
            f2t[iface_ids, 0], f2t[iface_ids, 1],
        )
        tri = faces[iface_ids]
        p = self.vertices[tri]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        areas = 0.5 * np.linalg.norm(n, axis=1)
        with np.errstate(invalid="ignore"):
            n = n / (2.0 * areas)[:, None]
        # orient molecular -> solvent: flip normals pointing at the
        # molecular tet's far vertex
        cent_mol = self.vertices[self.tets[mol_side]].mean(axis=1)
        toward = np.einsum("ij,ij->i", n, cent_mol - p[:, 0])
        n[toward > 0.0] *= -1.0
        return FaceData(
            faces=faces, tags=tags, f2t=f2t, t2f=t2f,
            interface_faces=iface_ids, interface_mol_tet=mol_side,
            interface_normals=n, interface_areas=areas,
        )

    def vertex_flags(self):
        """(on_interface, on_boundary) boolean arrays derived from face tags."""
        if self._vertex_flags is None:
            fd = self.faces()
            on_int = np.zeros(self.n_vertices, dtype=bool)
            on_bnd = np.zeros(self.n_vertices, dtype=bool)
            on_int[fd.faces[fd.tags == FACE_INTERFACE]] = True
            on_bnd[fd.faces[fd.tags == FACE_BOUNDARY]] = True
            self._vertex_flags = (on_int, on_bnd)
        return self._vertex_flags

    def boundary_vertices(self):
        return np.flatnonzero(self.vertex_flags()[1])

    def interface_vertices(self):
        return np.flatnonzero(self.vertex_flags()[0])

    def molecular_tets(self):
        return np.flatnonzero(self.region == MOLECULAR)

    def solvent_tets(self):
        return np.flatnonzero(self.region == SOLVENT)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

_CUBE_CORNERS = np.array([
    [0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0],
    [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1],
])
# six tetrahedra around the main diagonal (corner 0 to corner 7)
_KUHN_TETS = np.array([
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
])


def build_box_mesh(extent, cells, molecular_box=None):
    """Structured box mesh: each hexahedral cell is split into 6 tetrahedra.

    ``extent`` are the box side lengths, ``cells`` the subdivision counts.
    If ``molecular_box`` is given as ((xmin, ymin, zmin), (xmax, ymax, zmax)),
    cells whose centroid falls inside it are tagged molecular, which makes
    the box a two-region mesh with an axis-aligned interface.
    """
    extent = np.asarray(extent, dtype=float).reshape(3)
    cells = np.asarray(cells, dtype=int).reshape(3)
    if np.any(extent <= 0.0):
        raise MeshError("box extents must be positive")
    if np.any(cells < 1):
        raise MeshError("cell counts must be at least 1")
    nx, ny, nz = cells
    xs = [np.linspace(0.0, extent[k], cells[k] + 1) for k in range(3)]
    X, Y, Z = np.meshgrid(xs[0], xs[1], xs[2], indexing="ij")
    vertices = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    ii, jj, kk = np.meshgrid(
        np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
    )
    ii, jj, kk = ii.ravel(), jj.ravel(), kk.ravel()
    corner_ids = np.stack(
        [vid(ii + c[0], jj + c[1], kk + c[2]) for c in _CUBE_CORNERS], axis=1
    )
    tets = corner_ids[:, _KUHN_TETS].reshape(-1, 4)

    region = np.full(tets.shape[0], SOLVENT, dtype=np.int8)
    if molecular_box is not None:
        lo = np.asarray(molecular_box[0], dtype=float)
        hi = np.asarray(molecular_box[1], dtype=float)
        cent = vertices[tets].mean(axis=1)
        inside = np.all((cent > lo) & (cent < hi), axis=1)
        region[inside] = MOLECULAR

    btets = _assign_initial_bisection_order(vertices, tets)
    return TetMesh(vertices, btets, region)


def _assign_initial_bisection_order(vertices, tets):
    """Order tet vertices so (first, last) is the longest edge (ties by index).

    This fixes the generation-0 refinement edge for newest-vertex bisection.
    """
    tets = np.asarray(tets, dtype=np.int64)
    lengths = tet_edge_lengths(vertices, tets)
    # deterministic tie-break: among edges within rounding of the maximal
    # length, prefer the lexicographically smallest sorted vertex pair
    pairs = np.sort(tets[:, _TET_EDGES], axis=2)
    lmax = lengths.max(axis=1, keepdims=True)
    candidate = lengths >= lmax * (1.0 - 1e-12)
    nv = vertices.shape[0]
    code = pairs[:, :, 0] * np.int64(nv) + pairs[:, :, 1]
    code = np.where(candidate, code, np.iinfo(np.int64).max)
    best = np.argmin(code, axis=1)
    out = np.empty_like(tets)
    idx = np.arange(tets.shape[0])
    e = _TET_EDGES[best]
    opp = _TET_EDGE_OPP[best]
    out[:, 0] = tets[idx, e[:, 0]]
    out[:, 3] = tets[idx, e[:, 1]]
    out[:, 1] = tets[idx, opp[:, 0]]
    out[:, 2] = tets[idx, opp[:, 1]]
    return out


def icosphere(level):
    """Triangulated unit sphere from repeated icosahedron subdivision."""
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(level):
        verts_list = list(verts)
        midpoint = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            m = midpoint.get(key)
            if m is None:
                p = verts_list[a] + verts_list[b]
                p = p / np.linalg.norm(p)
                m = len(verts_list)
                verts_list.append(p)
                midpoint[key] = m
            return m

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)
    return verts, faces


def build_ball_mesh(outer_radius, interface_radius, initial_subdivision=2,
                    half_cells=None, interface_index=None):
    """Tet mesh of a ball with a concentric spherical interface.

    The mesh is a radially deformed Kuhn cube grid: a structured grid on
    [-1, 1]^3 is split into 6 tets per cell, then each max-norm shell of
    the grid is mapped onto a sphere.  One grid shell is mapped exactly
    onto ``interface_radius``, so the discrete interface is a union of
    faces with vertices on the true sphere to machine precision; shells
    outside it are geometrically graded out to ``outer_radius``.  Because
    the deformation does not change the connectivity, the bisection
    structure inherits the compatible tagging of the cube grid and
    conformity closure always terminates.

    ``half_cells`` (grid cells from center to boundary, default
    ``2**(initial_subdivision + 1)``) and ``interface_index`` (shell mapped
    onto the interface, default ``max(1, half_cells // 4)``) override the
    resolution defaults.
    """
    R, a = float(outer_radius), float(interface_radius)
    k = int(initial_subdivision)
    if not (0.0 < a < R):
        raise MeshError("need 0 < interface_radius < outer_radius")
    if k < 1:
        raise MeshError("initial_subdivision must be at least 1")
    m = int(half_cells) if half_cells is not None else 2 ** (k + 1)
    ja = int(interface_index) if interface_index is not None else max(1, m // 4)
    if not 1 <= ja < m:
        raise MeshError("interface_index must lie strictly inside the grid")

    # reflected Kuhn grid on [-m, m]^3 lattice: the corner ordering is
    # mirrored about the center planes so every cell diagonal points
    # radially outward.  Mirrored orderings meet compatibly across the
    # center planes, and the grid is suitably ordered for bisection.
    n = 2 * m
    lin = np.arange(n + 1)
    X, Y, Z = np.meshgrid(lin, lin, lin, indexing="ij")
    lattice = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def vid(i, j, kk):
        return (i * (n + 1) + j) * (n + 1) + kk

    ci, cj, ck = np.meshgrid(
        np.arange(n), np.arange(n), np.arange(n), indexing="ij"
    )
    ci, cj, ck = ci.ravel(), cj.ravel(), ck.ravel()
    base = np.stack([ci, cj, ck], axis=1)
    flip = base < m   # cells on the negative side mirror that axis
    corner_ids = np.empty((base.shape[0], 8), dtype=np.int64)
    for c, off in enumerate(_CUBE_CORNERS):
        o = np.where(flip, 1 - off[None, :], off[None, :])
        corner_ids[:, c] = vid(ci + o[:, 0], cj + o[:, 1], ck + o[:, 2])
    tets = corner_ids[:, _KUHN_TETS].reshape(-1, 4)

    # target radius per max-norm shell: linear inside the interface,
    # geometric grading outside
    shell_radius = np.empty(m + 1)
    shell_radius[: ja + 1] = a * np.arange(ja + 1) / ja
    for j in range(ja + 1, m + 1):
        shell_radius[j] = a * (R / a) ** ((j - ja) / (m - ja))
    shell_radius[-1] = R

    cube = (lattice - m).astype(float)
    shell = np.abs(lattice - m).max(axis=1)
    r2 = np.linalg.norm(cube, axis=1)
    scale = np.zeros(cube.shape[0])
    nonzero = r2 > 0.0
    scale[nonzero] = shell_radius[shell[nonzero]] / r2[nonzero]
    mapped = cube * scale[:, None]

    signed_before = tet_volumes(cube, tets, signed=True)
    signed_after = tet_volumes(mapped, tets, signed=True)
    if np.any(np.sign(signed_before) != np.sign(signed_after)):
        raise MeshError("ball deformation inverted elements; refine the grid")

    cent = mapped[tets].mean(axis=1)
    region = np.where(
        np.linalg.norm(cent, axis=1) < a, MOLECULAR, SOLVENT
    ).astype(np.int8)
    return TetMesh(
        mapped, tets, region,
        interface_projector=radial_projector(a),
        boundary_projector=radial_projector(R),
    )


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------

@dataclass
class MarkedSet:
    """Tet indices selected for refinement by the marking step."""

    indices: np.ndarray
    theta: float | None = None
    converged: bool = False

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)

    def __len__(self):
        return int(self.indices.shape[0])


class _Bisector:
    """Mutable working state for newest-vertex bisection with closure."""

    def __init__(self, mesh, snap, max_closure_depth):
        self.snap = snap
        self.max_depth = max_closure_depth
        self.proj_int = mesh.interface_projector
        self.proj_bnd = mesh.boundary_projector
        self.verts = [tuple(v) for v in mesh.vertices]
        self.tets = [tuple(t) for t in mesh._btets]
        self.gamma = list(mesh.gamma)
        self.gen = list(mesh.generation)
        self.region = list(mesh.region)
        self.alive = [True] * len(self.tets)
        self.pending = [0] * len(self.tets)
        self.edge2tets = {}
        for t, tet in enumerate(self.tets):
            self._index_edges(t, tet)
        self.midpoint = {}
        self.vertex_pairs = []   # parents of appended vertices
        self.queue = []

    def _index_edges(self, t, tet):
        e2t = self.edge2tets
        for i, j in _TET_EDGES:
            a, b = tet[i], tet[j]
            key = (a, b) if a < b else (b, a)
            bucket = e2t.get(key)
            if bucket is None:
                e2t[key] = [t]
            else:
                bucket.append(t)

    def _refinement_edge(self, t):
        tet = self.tets[t]
        a, b = tet[0], tet[3]
        return (a, b) if a < b else (b, a)

    def _edge_kind(self, key, sharers):
        """Classify an edge: on the interface, on the surface, or interior.

        An edge lies on the discrete interface exactly when the tets around
        it cover both regions (the region can only change across a face
        containing the edge).  It lies on the mesh surface exactly when one
        of the incident edge-faces is not shared by two of the sharers.
        """
        regions = {self.region[s] for s in sharers}
        if len(regions) > 1:
            return "interface"
        a, b = key
        face_count = {}
        for s in sharers:
            others = [v for v in self.tets[s] if v != a and v != b]
            for x in others:
                fkey = (a, b, x)
                face_count[fkey] = face_count.get(fkey, 0) + 1
        if any(c == 1 for c in face_count.values()):
            return "surface"
        return "interior"

    def _make_midpoint(self, key, sharers):
        m = self.midpoint.get(key)
        if m is not None:
            return m
        a, b = key
        pa = np.asarray(self.verts[a])
        pb = np.asarray(self.verts[b])
        p = 0.5 * (pa + pb)
        if self.snap and (self.proj_int is not None or self.proj_bnd is not None):
            kind = self._edge_kind(key, sharers)
            if kind == "interface" and self.proj_int is not None:
                p = np.asarray(self.proj_int(p), dtype=float)
            elif kind == "surface" and self.proj_bnd is not None:
                p = np.asarray(self.proj_bnd(p), dtype=float)
        m = len(self.verts)
        self.verts.append(tuple(p))
        self.vertex_pairs.append(key)
        self.midpoint[key] = m
        return m

    def _split(self, t, m):
        """Bisect tet t at its refinement edge with existing midpoint m."""
        x0, x1, x2, x3 = self.tets[t]
        g = self.gamma[t]
        child_gamma = (g + 1) % 3
        c1 = (x0, m, x1, x2)
        c2 = (x3, m, x2, x1) if g == 0 else (x3, m, x1, x2)
        self.alive[t] = False
        child_pending = max(self.pending[t] - 1, 0)
        for child in (c1, c2):
            cid = len(self.tets)
            self.tets.append(child)
            self.gamma.append(child_gamma)
            self.gen.append(self.gen[t] + 1)
            self.region.append(self.region[t])
            self.alive.append(True)
            self.pending.append(child_pending)
            self._index_edges(cid, child)
            if child_pending > 0:
                self.queue.append(cid)

    def bisect(self, t0):
        """Bisect tet t0 once, recursively closing incompatibilities."""
        stack = [t0]
        while stack:
            if len(stack) > self.max_depth:
                raise RefinementError(
                    "conformity closure exceeded depth %d" % self.max_depth
                )
            t = stack[-1]
            if not self.alive[t]:
                stack.pop()
                continue
            e = self._refinement_edge(t)
            sharers = [s for s in self.edge2tets.get(e, ()) if self.alive[s]]
            bad = [s for s in sharers if self._refinement_edge(s) != e]
            if bad:
                stack.extend(bad)
                continue
            m = self._make_midpoint(e, sharers)
            for s in sharers:
                if self.alive[s]:
                    self._split(s, m)
            stack.pop()

    def freeze(self, mesh):
        keep = [i for i, a in enumerate(self.alive) if a]
        verts = np.asarray(self.verts, dtype=float)
        btets = np.asarray([self.tets[i] for i in keep], dtype=np.int64)
        return TetMesh(
            verts, btets,
            region=np.asarray([self.region[i] for i in keep], dtype=np.int8),
            gamma=np.asarray([self.gamma[i] for i in keep], dtype=np.int8),
            generation=np.asarray([self.gen[i] for i in keep], dtype=np.int32),
            interface_projector=mesh.interface_projector,
            boundary_projector=mesh.boundary_projector,
            parent_vertex_pairs=np.asarray(self.vertex_pairs, dtype=np.int64).reshape(-1, 2),
            n_parent_vertices=mesh.n_vertices,
        )


def refine(mesh, marked, ell=1, snap=True, max_closure_depth=4096):
    """Bisect every marked tet at least ``ell`` times; close to conformity.

    Returns a new conforming mesh; the input is unchanged.  New vertices on
    interface/boundary edges are snapped via the mesh projectors unless
    ``snap`` is False.  Raises :class:`RefinementError` if the conformity
    closure recursion exceeds ``max_closure_depth``.
    """
    if ell < 1:
        raise ValueError("ell must be at least 1")
    if isinstance(marked, MarkedSet):
        marked = marked.indices
    marked = np.asarray(marked, dtype=np.int64)
    if marked.size == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.n_tets:
        raise ValueError("marked indices out of range")

    work = _Bisector(mesh, snap=snap, max_closure_depth=max_closure_depth)
    marked = np.unique(marked)
    for t in marked:
        work.pending[t] = ell
    work.queue = list(marked)
    qi = 0
    while qi < len(work.queue):
        t = work.queue[qi]
        qi += 1
        if work.alive[t] and work.pending[t] > 0:
            work.bisect(t)
    return work.freeze(mesh)


def uniform_refine(mesh, snap=True):
    """Regular 1:8 refinement: every edge gains its (possibly snapped) midpoint.

    The result is conforming by construction; the interior octahedron of
    each parent is split along its shortest diagonal.  Bisection tags are
    re-derived (longest edge, type 0), so the output behaves like a freshly
    built mesh for subsequent adaptive refinement.
    """
    verts = mesh.vertices
    tets = mesh.tets
    nv = verts.shape[0]
    edges = np.sort(tets[:, _TET_EDGES].reshape(-1, 2), axis=1)
    uedges, inv = np.unique(edges, axis=0, return_inverse=True)
    t2e = inv.reshape(-1, 6) + nv

    mids = 0.5 * (verts[uedges[:, 0]] + verts[uedges[:, 1]])

    def _edge_codes(tris):
        e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [0, 2]]])
        e = np.sort(e, axis=1)
        return e[:, 0] * np.int64(nv) + e[:, 1]

    fd = mesh.faces()
    ucodes = uedges[:, 0] * np.int64(nv) + uedges[:, 1]
    mid_int = np.isin(ucodes, _edge_codes(fd.faces[fd.tags == FACE_INTERFACE]))
    mid_bnd = np.isin(ucodes, _edge_codes(fd.faces[fd.tags == FACE_BOUNDARY]))
    if snap and mesh.interface_projector is not None and np.any(mid_int):
        mids[mid_int] = _project_points(mesh.interface_projector, mids[mid_int])
    bnd_only = mid_bnd & ~mid_int
    if snap and mesh.boundary_projector is not None and np.any(bnd_only):
        mids[bnd_only] = _project_points(mesh.boundary_projector, mids[bnd_only])
    new_verts = np.vstack([verts, mids])

    # edge order in _TET_EDGES: 01 02 03 12 13 23
    m01, m02, m03 = t2e[:, 0], t2e[:, 1], t2e[:, 2]
    m12, m13, m23 = t2e[:, 3], t2e[:, 4], t2e[:, 5]
    v0, v1, v2, v3 = tets[:, 0], tets[:, 1], tets[:, 2], tets[:, 3]

    corners = [
        np.stack([v0, m01, m02, m03], axis=1),
        np.stack([v1, m01, m12, m13], axis=1),
        np.stack([v2, m12, m02, m23], axis=1),
        np.stack([v3, m13, m23, m03], axis=1),
    ]

    def dist2(i, j):
        d = new_verts[i] - new_verts[j]
        return np.einsum("ij,ij->i", d, d)

    d1 = dist2(m01, m23)
    d2 = dist2(m02, m13)
    d3 = dist2(m03, m12)
    choice = np.argmin(np.stack([d1, d2, d3], axis=1), axis=1)

    octa = np.empty((tets.shape[0], 4, 4), dtype=np.int64)
    c0 = choice == 0
    octa[c0] = np.stack([
        np.stack([m01, m23, m02, m12], axis=1)[c0],
        np.stack([m01, m23, m12, m13], axis=1)[c0],
        np.stack([m01, m23, m13, m03], axis=1)[c0],
        np.stack([m01, m23, m03, m02], axis=1)[c0],
    ], axis=1)
    c1 = choice == 1
    octa[c1] = np.stack([
        np.stack([m02, m13, m01, m12], axis=1)[c1],
        np.stack([m02, m13, m12, m23], axis=1)[c1],
        np.stack([m02, m13, m23, m03], axis=1)[c1],
        np.stack([m02, m13, m03, m01], axis=1)[c1],
    ], axis=1)
    c2 = choice == 2
    octa[c2] = np.stack([
        np.stack([m03, m12, m01, m02], axis=1)[c2],
        np.stack([m03, m12, m02, m23], axis=1)[c2],
        np.stack([m03, m12, m23, m13], axis=1)[c2],
        np.stack([m03, m12, m13, m01], axis=1)[c2],
    ], axis=1)

    children = np.concatenate(
        [np.stack(corners, axis=1), octa], axis=1
    ).reshape(-1, 4)
    region = np.repeat(mesh.region, 8)

    btets = _assign_initial_bisection_order(new_verts, children)
    return TetMesh(
        new_verts, btets, region,
        interface_projector=mesh.interface_projector,
        boundary_projector=mesh.boundary_projector,
        parent_vertex_pairs=uedges.copy(),
        n_parent_vertices=nv,
    )


def transfer_nodal(mesh_from, mesh_to, values):
    """Transfer nodal values to a direct nested refinement of the mesh.

    Old vertices keep their values; each new vertex gets the average of its
    parent edge endpoints, which is the exact P1 interpolant for unsnapped
    refinements.
    """
    values = np.asarray(values, dtype=float)
    if mesh_to.n_parent_vertices != mesh_from.n_vertices:
        raise MeshError("meshes are not a direct refinement pair")
    if values.shape[0] != mesh_from.n_vertices:
        raise ValueError("value vector does not match source mesh")
    out = np.empty(mesh_to.n_vertices, dtype=float)
    out[: mesh_from.n_vertices] = values
    pairs = mesh_to.parent_vertex_pairs
    for k in range(pairs.shape[0]):
        a, b = pairs[k]
        out[mesh_from.n_vertices + k] = 0.5 * (out[a] + out[b])
    return out


# ---------------------------------------------------------------------------
# audits, quality, and point location
# ---------------------------------------------------------------------------

def conformity_audit(mesh, raise_on_failure=True):
    """Check conformity, tagging, and orientation invariants.

    Verifies: positive volumes; every face is shared by at most two tets;
    interior faces by exactly two tets of equal region or tagged interface;
    every interface face separates a molecular from a solvent tet; every
    boundary face has exactly one tet.  Returns a list of violation
    strings (empty when clean).
    """
    problems = []
    vol = tet_volumes(mesh.vertices, mesh.tets, signed=True)
    if np.any(vol <= 0.0):
        problems.append("non-positive tet volume")
    try:
        fd = mesh.faces()
    except MeshError as exc:
        problems.append(str(exc))
        fd = None
    if fd is not None:
        interior = fd.tags == FACE_INTERIOR
        if np.any(fd.f2t[interior, 1] < 0):
            problems.append("interior face with a single incident tet")
        iface = fd.tags == FACE_INTERFACE
        if np.any(iface):
            r0 = mesh.region[fd.f2t[iface, 0]]
            r1 = mesh.region[fd.f2t[iface, 1]]
            if np.any(r0 == r1):
                problems.append("interface face between equal regions")
        same = interior & (fd.f2t[:, 1] >= 0)
        if np.any(mesh.region[fd.f2t[same, 0]] != mesh.region[fd.f2t[same, 1]]):
            problems.append("interior face between different regions")
        # hanging vertex check: a vertex of some tet lying strictly inside
        # another tet's face would break the two-tets-per-face property,
        # which is already covered by the unique-face construction.
    if problems and raise_on_failure:
        raise MeshError("; ".join(problems))
    return problems


@dataclass
class QualityReport:
    min_dihedral: float
    max_dihedral: float
    min_face_angle: float
    max_face_angle: float
    h_max: float
    h_min: float
    counts: dict
    a2_violations: int | None = None
    a2_worst: float | None = None

    def __str__(self):
        lines = [
            "dihedral angles: %.3f .. %.3f deg" % (self.min_dihedral, self.max_dihedral),
            "face angles:     %.3f .. %.3f deg" % (self.min_face_angle, self.max_face_angle),
            "h:              %.4g .. %.4g" % (self.h_min, self.h_max),
            "tets:            %s" % (self.counts,),
        ]
        if self.a2_violations is not None:
            lines.append(
                "off-diagonal sign violations: %d (worst %.3g)"
                % (self.a2_violations, self.a2_worst)
            )
        return "\n".join(lines)


def quality_report(mesh, audit_offdiagonal_eps=None):
    """Angle/size extrema and per-region counts.

    When ``audit_offdiagonal_eps`` is given as (eps_m, eps_s), the P1
    stiffness matrix with that piecewise dielectric is assembled and its
    positive off-diagonal entries (which break the discrete maximum
    principle) are counted and reported, not enforced.
    """
    dih = dihedral_angles(mesh.vertices, mesh.tets)
    all_faces = mesh.tets[:, _TET_FACES].reshape(-1, 3)
    fang = triangle_angles(mesh.vertices, all_faces)
    lengths = tet_edge_lengths(mesh.vertices, mesh.tets)
    counts = {
        name: int(np.sum(mesh.region == code))
        for code, name in _REGION_NAMES.items()
    }
    report = QualityReport(
        min_dihedral=float(dih.min()) if dih.size else float("nan"),
        max_dihedral=float(dih.max()) if dih.size else float("nan"),
        min_face_angle=float(fang.min()) if fang.size else float("nan"),
        max_face_angle=float(fang.max()) if fang.size else float("nan"),
        h_max=float(lengths.max()) if lengths.size else float("nan"),
        h_min=float(lengths.min()) if lengths.size else float("nan"),
        counts=counts,
    )
    if audit_offdiagonal_eps is not None:
        from .fem import assemble_stiffness

        eps_m, eps_s = audit_offdiagonal_eps
        eps = np.where(mesh.region == MOLECULAR, eps_m, eps_s)
        A = assemble_stiffness(mesh, eps).tocoo()
        off = A.row != A.col
        pos = A.data[off] > 1e-12
        report.a2_violations = int(np.sum(pos))
        report.a2_worst = float(A.data[off][pos].max()) if report.a2_violations else 0.0
    return report


def barycentric_coordinates(mesh, tet_ids, p):
    """Barycentric coordinates of point p in the given tets, shape (n, 4)."""
    pts = mesh.vertices[mesh.tets[tet_ids]]
    a = pts[:, 1] - pts[:, 0]
    b = pts[:, 2] - pts[:, 0]
    c = pts[:, 3] - pts[:, 0]
    det = np.einsum("ij,ij->i", a, np.cross(b, c))
    rhs = p[None, :] - pts[:, 0]
    l1 = np.einsum("ij,ij->i", rhs, np.cross(b, c)) / det
    l2 = np.einsum("ij,ij->i", a, np.cross(rhs, c)) / det
    l3 = np.einsum("ij,ij->i", a, np.cross(b, rhs)) / det
    l0 = 1.0 - l1 - l2 - l3
    return np.stack([l0, l1, l2, l3], axis=1)


def locate_point(mesh, p, tol=1e-10, start=0, max_steps=2000):
    """Find the tet containing p: (tet index, barycentric coords) or None.

    Walks from ``start`` through face neighbors toward the most negative
    barycentric coordinate; falls back to a vectorized scan over all tets
    (ties there resolved by lowest tet index).  Returns None when p is
    outside the mesh.
    """
    p = np.asarray(p, dtype=float)
    fd = mesh.faces()
    t = start
    visited = 0
    while visited < max_steps:
        lam = barycentric_coordinates(mesh, np.array([t]), p)[0]
        k = int(np.argmin(lam))
        if lam[k] >= -tol:
            return t, lam
        # face opposite local vertex k
        f = fd.t2f[t, k]
        n0, n1 = fd.f2t[f]
        nxt = n1 if n0 == t else n0
        if nxt < 0:
            break
        t = int(nxt)
        visited += 1
    lam_all = barycentric_coordinates(mesh, np.arange(mesh.n_tets), p)
    ok = np.flatnonzero(lam_all.min(axis=1) >= -tol)
    if ok.size == 0:
        return None
    t = int(ok[0])
    return t, lam_all[t]


def interface_midpoint_defect(mesh):
    """Largest distance from interface-edge midpoints to the true interface.

    Measures, before any snapping, how far the midpoints of interface-face
    edges sit from the exact interface; decays quadratically in h for a
    smooth interface sampled by snapped vertices.
    """
    if mesh.interface_projector is None:
        raise MeshError("mesh has no interface projector")
    fd = mesh.faces()
    tris = fd.faces[fd.interface_faces]
    if tris.size == 0:
        return 0.0
    edges = np.sort(
        np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [0, 2]]]), axis=1
    )
    edges = np.unique(edges, axis=0)
    mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    proj = _project_points(mesh.interface_projector, mids)
    return float(np.linalg.norm(proj - mids, axis=1).max())


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def write_vtk(mesh, path, point_data=None, cell_data=None):
    """Write a legacy ASCII VTK unstructured grid with region cell data."""
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 2.0\n")
        f.write("pbafem mesh\n")
        f.write("ASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write("POINTS %d double\n" % mesh.n_vertices)
        for v in mesh.vertices:
            f.write("%.17g %.17g %.17g\n" % (v[0], v[1], v[2]))
        f.write("CELLS %d %d\n" % (mesh.n_tets, 5 * mesh.n_tets))
        for t in mesh.tets:
            f.write("4 %d %d %d %d\n" % (t[0], t[1], t[2], t[3]))
        f.write("CELL_TYPES %d\n" % mesh.n_tets)
        f.write("10\n" * mesh.n_tets)
        f.write("CELL_DATA %d\n" % mesh.n_tets)
        f.write("SCALARS region int 1\nLOOKUP_TABLE default\n")
        for r in mesh.region:
            f.write("%d\n" % r)
        for name, arr in (cell_data or {}).items():
            f.write("SCALARS %s double 1\nLOOKUP_TABLE default\n" % name)
            for x in np.asarray(arr, dtype=float):
                f.write("%.17g\n" % x)
        if point_data:
            f.write("POINT_DATA %d\n" % mesh.n_vertices)
            for name, arr in point_data.items():
                f.write("SCALARS %s double 1\nLOOKUP_TABLE default\n" % name)
                for x in np.asarray(arr, dtype=float):
                    f.write("%.17g\n" % x)


def write_mesh_text(mesh, path):
    """Write the simple count-prefixed node/element text format."""
    with open(path, "w") as f:
        f.write("%d\n" % mesh.n_vertices)
        for v in mesh.vertices:
            f.write("%.17g %.17g %.17g\n" % (v[0], v[1], v[2]))
        f.write("%d\n" % mesh.n_tets)
        for t, r in zip(mesh.tets, mesh.region):
            f.write("%d %d %d %d %d\n" % (t[0], t[1], t[2], t[3], r))


def read_mesh_text(path, interface_projector=None, boundary_projector=None):
    """Read the count-prefixed node/element text format into a mesh.

    Layout: a vertex count line, that many ``x y z`` lines, a tet count
    line, then that many ``v0 v1 v2 v3 region`` lines.
    """
    with open(path) as f:
        tokens = f.read().split()
    it = iter(tokens)
    try:
        nv = int(next(it))
        verts = np.array(
            [[float(next(it)) for _ in range(3)] for _ in range(nv)]
        )
        nt = int(next(it))
        rows = np.array(
            [[int(next(it)) for _ in range(5)] for _ in range(nt)],
            dtype=np.int64,
        )
    except (StopIteration, ValueError) as exc:
        raise MeshError("malformed mesh text file %s: %s" % (path, exc)) from None
    tets = rows[:, :4]
    region = rows[:, 4].astype(np.int8)
    btets = _assign_initial_bisection_order(verts, tets)
    return TetMesh(
        verts, btets, region,
        interface_projector=interface_projector,
        boundary_projector=boundary_projector,
    )
