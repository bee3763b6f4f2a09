"""Triangle mesh core: connectivity, markup sets, local frames, mass matrices.

Everything downstream (operators, field optimization, integration, level-set
meshing) consumes the immutable structures built here. A mesh carries, besides
vertices and faces, the boundary vertex set, an explicit crease edge set and
the derived crease-vertex / crease-face / boundary-face sets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)


class MeshError(ValueError):
    """Raised for invalid mesh input (non-manifold, degenerate, bad indices)."""


# ---------------------------------------------------------------------------
# core mesh


class TriMesh:
    """Immutable triangle mesh with halfedge-style connectivity.

    Parameters
    ----------
    vertices : (V, 3) float array
    faces : (F, 3) int array
        Consistently oriented triangles.
    crease_edges : iterable of (i, j) vertex pairs, optional
        Marked crease edges. Each pair must be an existing mesh edge.

    Notes
    -----
    Halfedge ``h = 3*f + k`` runs from ``faces[f, k]`` to ``faces[f, (k+1)%3]``.
    All derived arrays are computed once in the constructor and marked
    read-only; instances are safe to share across threads.
    """

    def __init__(self, vertices, faces, crease_edges=()):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError("vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise MeshError("faces must be (F, 3) triangles")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")
        if len(np.unique(self.faces, axis=0)) != len(self.faces):
            raise MeshError("duplicate faces")
        degen = (self.faces[:, 0] == self.faces[:, 1]) | \
                (self.faces[:, 1] == self.faces[:, 2]) | \
                (self.faces[:, 2] == self.faces[:, 0])
        if degen.any():
            raise MeshError(f"degenerate face(s) with repeated vertex: {np.nonzero(degen)[0][:5]}")

        self._build_connectivity()
        self._check_manifold()
        self._set_creases(crease_edges)
        for a in (self.vertices, self.faces, self.edges, self.edge_faces,
                  self.halfedge_twin, self.halfedge_edge, self.edge_halfedges):
            a.flags.writeable = False

    # -- connectivity ------------------------------------------------------

    def _build_connectivity(self):
        F = len(self.faces)
        # halfedges: h = 3f+k goes faces[f,k] -> faces[f,(k+1)%3]
        src = self.faces.ravel()
        dst = self.faces[:, [1, 2, 0]].ravel()
        lo = np.minimum(src, dst)
        hi = np.maximum(src, dst)
        key = lo.astype(np.int64) * len(self.vertices) + hi
        uniq, inv, counts = np.unique(key, return_inverse=True, return_counts=True)
        if counts.max(initial=0) > 2:
            bad = uniq[counts > 2][0]
            e = (bad // len(self.vertices), bad % len(self.vertices))
            raise MeshError(f"non-manifold edge {e}: more than 2 incident faces")

        E = len(uniq)
        self.halfedge_edge = inv.astype(np.int64)          # (3F,)
        self.edges = np.stack([uniq // len(self.vertices),
                               uniq % len(self.vertices)], axis=1)  # (E,2) canonical lo<hi

        # twin pairing; same-direction duplicates mean inconsistent orientation
        edge_he = np.full((E, 2), -1, dtype=np.int64)
        order = np.argsort(inv, kind="stable")
        ptr = np.searchsorted(inv[order], np.arange(E))
        for e in range(E):
            hs = order[ptr[e]:ptr[e] + counts[e]]
            edge_he[e, :len(hs)] = hs
            if len(hs) == 2 and src[hs[0]] == src[hs[1]]:
                raise MeshError(f"inconsistent face orientation at edge {tuple(self.edges[e])}")
        self.edge_halfedges = edge_he
        twin = np.full(3 * F, -1, dtype=np.int64)
        both = edge_he[edge_he[:, 1] >= 0]
        twin[both[:, 0]] = both[:, 1]
        twin[both[:, 1]] = both[:, 0]
        self.halfedge_twin = twin

        self.edge_faces = np.where(edge_he >= 0, edge_he // 3, -1)  # (E,2)
        self.interior_edges = np.nonzero(self.edge_faces[:, 1] >= 0)[0]
        self.boundary_edges = np.nonzero(self.edge_faces[:, 1] < 0)[0]
        bmask = np.zeros(len(self.vertices), dtype=bool)
        bmask[self.edges[self.boundary_edges].ravel()] = True
        self.boundary_vertex_mask = bmask
        self.boundary_vertices = np.nonzero(bmask)[0]
        # corner slots per vertex (CSR): slot 3f+k has faces[f,k] == v
        order = np.argsort(src, kind="stable")
        self._slot_by_vertex = order
        self._slot_ptr = np.searchsorted(src[order], np.arange(len(self.vertices) + 1))

    def _check_manifold(self):
        # vertex-manifold: incident faces of every vertex form one fan and the
        # number of incident boundary edges is 0 (interior) or 2 (boundary)
        ecount = np.zeros(len(self.vertices), dtype=np.int64)
        np.add.at(ecount, self.edges[self.boundary_edges].ravel(), 1)
        bad = np.nonzero((ecount != 0) & (ecount != 2))[0]
        if len(bad):
            raise MeshError(f"non-manifold vertex {bad[0]}: {ecount[bad[0]]} boundary edges")
        for v in range(len(self.vertices)):
            n_inc = self._slot_ptr[v + 1] - self._slot_ptr[v]
            if n_inc and len(self.vertex_fan(v)[0]) != n_inc:
                raise MeshError(f"non-manifold vertex {v}: disconnected face fan")

    def _set_creases(self, crease_edges):
        ids = []
        lut = {tuple(e): i for i, e in enumerate(map(tuple, self.edges))}
        for i, j in crease_edges:
            e = lut.get((min(i, j), max(i, j)))
            if e is None:
                raise MeshError(f"crease edge ({i}, {j}) is not a mesh edge")
            ids.append(e)
        self.crease_edge_ids = np.unique(np.asarray(ids, dtype=np.int64))
        cmask = np.zeros(len(self.vertices), dtype=bool)
        cmask[self.edges[self.crease_edge_ids].ravel()] = True
        self.crease_vertex_mask = cmask
        self.crease_vertices = np.nonzero(cmask)[0]
        self.crease_faces = np.nonzero(cmask[self.faces].any(axis=1))[0]
        self.boundary_faces = np.nonzero(self.boundary_vertex_mask[self.faces].any(axis=1))[0]
        cemask = np.zeros(len(self.edges), dtype=bool)
        cemask[self.crease_edge_ids] = True
        self.crease_edge_mask = cemask

    # -- queries -----------------------------------------------------------

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    @property
    def n_edges(self):
        return len(self.edges)

    def halfedge_next(self, h):
        return 3 * (h // 3) + (h % 3 + 1) % 3

    def halfedge_prev(self, h):
        return 3 * (h // 3) + (h % 3 + 2) % 3

    def vertex_fan(self, v):
        """Ordered incident faces around v with the edges crossed in between.

        Returns (faces, edges): ``edges[i]`` is the vertex-incident edge
        crossed from ``faces[i]`` to ``faces[i+1]``, rotating consistently
        with face orientation. Closed (interior) fans wrap around, so
        ``len(edges) == len(faces)``; open (boundary) fans have
        ``len(edges) == len(faces) - 1``.
        """
        outgoing = self._slot_by_vertex[self._slot_ptr[v]:self._slot_ptr[v + 1]]
        if len(outgoing) == 0:
            return np.array([], dtype=np.int64), np.array([], dtype=np.int64)
        # open fans start at the halfedge whose own edge is boundary
        start = -1
        for h in outgoing:
            if self.halfedge_twin[h] < 0:
                start = h
                break
        if start < 0:
            start = outgoing[0]
        fan, crossed = [], []
        h = start
        while True:
            fan.append(h // 3)
            p = self.halfedge_prev(h)
            t = self.halfedge_twin[p]
            if t < 0:
                break
            crossed.append(self.halfedge_edge[p])
            h = t
            if h == start:
                break
        return np.asarray(fan, dtype=np.int64), np.asarray(crossed, dtype=np.int64)

    def face_areas(self):
        p = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def face_normals(self):
        p = self.vertices[self.faces]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        nn = np.linalg.norm(n, axis=1, keepdims=True)
        if (nn < 1e-300).any():
            raise MeshError("degenerate (zero-area) face")
        return n / nn

    def vertex_normals(self):
        """Area-weighted average of incident face normals, normalized."""
        p = self.vertices[self.faces]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])  # 2*area weighted
        vn = np.zeros_like(self.vertices)
        np.add.at(vn, self.faces.ravel(), np.repeat(n, 3, axis=0))
        ln = np.linalg.norm(vn, axis=1, keepdims=True)
        ln[ln < 1e-300] = 1.0
        return vn / ln

    def corner_angles(self):
        """(F, 3) interior angle at each face corner."""
        p = self.vertices[self.faces]
        ang = np.empty((len(self.faces), 3))
        for k in range(3):
            a = p[:, (k + 1) % 3] - p[:, k]
            b = p[:, (k + 2) % 3] - p[:, k]
            na = np.linalg.norm(a, axis=1)
            nb = np.linalg.norm(b, axis=1)
            c = np.einsum("ij,ij->i", a, b) / np.maximum(na * nb, 1e-300)
            ang[:, k] = np.arccos(np.clip(c, -1.0, 1.0))
        return ang

    def angle_defects(self):
        """2*pi minus total incident angle, per vertex (boundary vertices get
        pi-based defect which callers should ignore)."""
        ang = self.corner_angles()
        tot = np.zeros(len(self.vertices))
        np.add.at(tot, self.faces.ravel(), ang.ravel())
        return 2.0 * np.pi - tot

    def mean_edge_length(self):
        ev = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return float(np.mean(np.linalg.norm(ev, axis=1)))

    def bbox_diagonal(self):
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def crease_edge_pairs(self):
        return [tuple(e) for e in self.edges[self.crease_edge_ids]]

    def with_creases(self, crease_edges):
        return TriMesh(self.vertices.copy(), self.faces.copy(), crease_edges)


# ---------------------------------------------------------------------------
# frames and masses


@dataclass(frozen=True)
class LocalFrames:
    """Per-face orthonormal tangent bases and per-edge complex edge vectors.

    ``e1 x e2`` equals the face normal. ``edge_complex[e, s]`` is the unit
    complex coordinate of edge ``e`` (canonical lo->hi direction) in the frame
    of ``edge_faces[e, s]``; ``edge_vec_frame[e, s]`` is the full-length
    in-frame 2-vector of the same edge.
    """

    e1: np.ndarray
    e2: np.ndarray
    normal: np.ndarray
    edge_complex: np.ndarray      # (E, 2) complex, unit, nan column for boundary slot
    edge_vec_frame: np.ndarray    # (E, 2) complex, full length

    @staticmethod
    def build(mesh: TriMesh) -> "LocalFrames":
        p = mesh.vertices[mesh.faces]
        e1 = p[:, 1] - p[:, 0]
        e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
        n = mesh.face_normals()
        e2 = np.cross(n, e1)
        ev = mesh.vertices[mesh.edges[:, 1]] - mesh.vertices[mesh.edges[:, 0]]
        ec = np.full((mesh.n_edges, 2), np.nan + 0j, dtype=np.complex128)
        evf = np.full((mesh.n_edges, 2), np.nan + 0j, dtype=np.complex128)
        for s in range(2):
            f = mesh.edge_faces[:, s]
            ok = f >= 0
            x = np.einsum("ij,ij->i", ev[ok], e1[f[ok]])
            y = np.einsum("ij,ij->i", ev[ok], e2[f[ok]])
            z = x + 1j * y
            evf[ok, s] = z
            ec[ok, s] = z / np.abs(z)
        return LocalFrames(e1=e1, e2=e2, normal=n, edge_complex=ec, edge_vec_frame=evf)

    def to_frame(self, vec3):
        """World (F,3) vectors -> complex in-frame coordinates (projects out
        the normal component)."""
        return (np.einsum("ij,ij->i", vec3, self.e1)
                + 1j * np.einsum("ij,ij->i", vec3, self.e2))

    def to_world(self, z):
        return np.real(z)[:, None] * self.e1 + np.imag(z)[:, None] * self.e2

    def transport(self, mesh: TriMesh):
        """Unit complex parallel-transport factor per interior edge, carrying
        in-frame coordinates from edge_faces[e,0] to edge_faces[e,1]."""
        ie = mesh.interior_edges
        return np.conj(self.edge_complex[ie, 0]) * self.edge_complex[ie, 1]


@dataclass(frozen=True)
class MassMatrices:
    """Face, vertex and edge masses plus their diagonal matrices.

    Edge mass follows ``m(e) = (|e| / |e_dual|) * (m(f) + m(g)) / 2`` where
    ``|e_dual|`` sums the distances from the edge midpoint to the incident
    face barycenters; boundary edges use their single incident face.
    """

    face: np.ndarray
    vertex: np.ndarray
    edge: np.ndarray

    @staticmethod
    def build(mesh: TriMesh) -> "MassMatrices":
        mf = mesh.face_areas()
        if (mf <= 0).any() or (mf < 1e-16).any():
            raise MeshError("degenerate (zero-area) face")
        mv = np.zeros(mesh.n_vertices)
        np.add.at(mv, mesh.faces.ravel(), np.repeat(mf / 3.0, 3))
        mid = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
        bary = mesh.vertices[mesh.faces].mean(axis=1)
        elen = np.linalg.norm(mesh.vertices[mesh.edges[:, 1]] - mesh.vertices[mesh.edges[:, 0]], axis=1)
        dual = np.zeros(mesh.n_edges)
        msum = np.zeros(mesh.n_edges)
        for s in range(2):
            f = mesh.edge_faces[:, s]
            ok = f >= 0
            dual[ok] += np.linalg.norm(mid[ok] - bary[f[ok]], axis=1)
            msum[ok] += mf[f[ok]]
        me = elen / dual * msum / 2.0
        return MassMatrices(face=mf, vertex=mv, edge=me)

    @property
    def M_F(self):
        return sparse.diags(self.face)

    @property
    def M_X(self):
        return sparse.diags(np.repeat(self.face, 2))

    @property
    def M_E(self):
        return sparse.diags(self.edge)


# ---------------------------------------------------------------------------
# I/O


def read_obj(path):
    """Read vertices and (triangle) faces from an OBJ file."""
    verts, faces = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) for t in tok[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                if len(idx) != 3:
                    raise MeshError(f"{path}:{ln}: non-triangle face with {len(idx)} vertices")
                faces.append(idx)
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def write_obj(path, vertices, faces, comments=()):
    with open(path, "w") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        for v in vertices:
            fh.write("v %.17g %.17g %.17g\n" % tuple(v))
        for f in faces:
            fh.write("f " + " ".join(str(i + 1) for i in f) + "\n")


def read_crease_file(path):
    """Crease sidecar: one "i j" 0-based vertex pair per line."""
    pairs = []
    with open(path) as fh:
        for line in fh:
            tok = line.split("#")[0].split()
            if not tok:
                continue
            if len(tok) != 2:
                raise MeshError(f"bad crease line: {line.rstrip()}")
            pairs.append((int(tok[0]), int(tok[1])))
    return pairs


def write_crease_file(path, pairs):
    with open(path, "w") as fh:
        for i, j in pairs:
            fh.write(f"{i} {j}\n")


def load_mesh(path, crease_path=None):
    """Load an OBJ (and optional crease sidecar) into a TriMesh.

    Open crease polylines (crease components that dead-end at an interior
    vertex) are cut open so the crease becomes mesh boundary.
    """
    verts, faces = read_obj(path)
    if len(faces) == 0:
        raise MeshError(f"{path}: no faces")
    creases = read_crease_file(crease_path) if crease_path else []
    for i, j in creases:
        if not (0 <= i < len(verts) and 0 <= j < len(verts)):
            raise MeshError(f"crease edge ({i}, {j}) references nonexistent vertex")
    mesh = TriMesh(verts, faces, creases)
    return cut_open_creases(mesh)


# ---------------------------------------------------------------------------
# normalization / preprocessing


def normalize_bbox(mesh: TriMesh):
    """Uniformly scale so the axis-aligned bounding-box diagonal is 1.

    Returns (mesh, scale) where ``scale`` multiplies the new coordinates to
    recover the input ones.
    """
    if mesh.n_vertices == 0:
        raise MeshError("empty mesh")
    diag = mesh.bbox_diagonal()
    if diag <= 0:
        raise MeshError("all vertices coincident: zero bounding-box diagonal")
    return TriMesh(mesh.vertices / diag, mesh.faces, mesh.crease_edge_pairs()), diag


def detect_creases(mesh: TriMesh, dihedral_threshold: float):
    """Interior edges whose unsigned dihedral deviation from pi exceeds the
    threshold, as (i, j) vertex pairs."""
    if not (0.0 < dihedral_threshold < np.pi):
        raise ValueError("dihedral threshold must be in (0, pi)")
    n = mesh.face_normals()
    ie = mesh.interior_edges
    f, g = mesh.edge_faces[ie, 0], mesh.edge_faces[ie, 1]
    c = np.clip(np.einsum("ij,ij->i", n[f], n[g]), -1.0, 1.0)
    dev = np.arccos(c)  # angle between normals == pi - dihedral
    hit = ie[dev > dihedral_threshold]
    return [tuple(e) for e in mesh.edges[hit]]


def remove_vertices(mesh: TriMesh, drop):
    """Remove vertices and their incident faces; holes become boundary."""
    drop = np.asarray(sorted(set(int(v) for v in drop)), dtype=np.int64)
    if len(drop) == 0:
        return mesh
    keepf = ~np.isin(mesh.faces, drop).any(axis=1)
    keepv = np.ones(mesh.n_vertices, dtype=bool)
    keepv[drop] = False
    remap = np.cumsum(keepv) - 1
    faces = remap[mesh.faces[keepf]]
    creases = [(remap[i], remap[j]) for i, j in mesh.crease_edge_pairs()
               if keepv[i] and keepv[j]]
    return TriMesh(mesh.vertices[keepv], faces, creases)


def preprocess_apexes(mesh: TriMesh, apexes=None, defect_threshold: float = 0.2):
    """Remove cone-apex vertices together with their incident faces.

    Apexes are either given explicitly or auto-detected as interior vertices
    whose angle defect exceeds ``defect_threshold`` (radians). Vertices on a
    crease are left in place.
    """
    if apexes is None:
        defect = np.abs(mesh.angle_defects())
        cand = np.nonzero((defect > defect_threshold) & ~mesh.boundary_vertex_mask)[0]
    else:
        cand = np.asarray(list(apexes), dtype=np.int64)
        cand = cand[~mesh.boundary_vertex_mask[cand]]
    cand = [v for v in cand if not mesh.crease_vertex_mask[v]]
    if not cand:
        return mesh
    logger.info("removing %d apex vertex/vertices: %s", len(cand), cand[:8])
    return remove_vertices(mesh, cand)


# ---------------------------------------------------------------------------
# cutting along edges (open creases)


def _vertex_wedges(mesh: TriMesh, cut_mask):
    """Group each vertex's incident faces into wedges separated by cut or
    boundary edges. Returns list-of-list-of-face-arrays indexed by vertex."""
    parent = np.arange(3 * mesh.n_faces)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb

    # corner slot (f,k) holds vertex faces[f,k]; join corners of the same
    # vertex across every glued (non-cut) interior edge
    for e in mesh.interior_edges:
        if cut_mask[e]:
            continue
        h0, h1 = mesh.edge_halfedges[e]
        # h0: a->b in f, h1: b->a in g; join corner of a and corner of b
        a0 = h0                       # corner slot of origin(h0) in f
        b0 = mesh.halfedge_next(h0)    # corner slot of dest(h0) in f
        a1 = mesh.halfedge_next(h1)    # corner slot of origin(h0)=dest(h1) in g
        b1 = h1
        union(a0, a1)
        union(b0, b1)
    groups = {}
    for slot in range(3 * mesh.n_faces):
        groups.setdefault(find(slot), []).append(slot)
    by_vertex = [[] for _ in range(mesh.n_vertices)]
    for slots in groups.values():
        v = mesh.faces[slots[0] // 3, slots[0] % 3]
        by_vertex[v].append(slots)
    return by_vertex


def cut_along_edges(mesh: TriMesh, edge_ids):
    """Duplicate vertices so the given interior edges become boundary.

    Vertices whose face fan stays connected (crack tips) are not duplicated.
    Crease markup is carried over for crease edges that were not cut.
    """
    cut_mask = np.zeros(mesh.n_edges, dtype=bool)
    cut_mask[np.asarray(list(edge_ids), dtype=np.int64)] = True
    by_vertex = _vertex_wedges(mesh, cut_mask)
    verts = list(mesh.vertices)
    faces = mesh.faces.copy()
    slot_vertex = {}
    for v, wedges in enumerate(by_vertex):
        for w, slots in enumerate(wedges):
            nv = v if w == 0 else len(verts)
            if w > 0:
                verts.append(mesh.vertices[v])
            for slot in slots:
                faces[slot // 3, slot % 3] = nv
                slot_vertex[slot] = nv
    creases = []
    for e in mesh.crease_edge_ids:
        if cut_mask[e]:
            continue
        h = mesh.edge_halfedges[e, 0]
        creases.append((faces[h // 3, h % 3], faces[h // 3, (h % 3 + 1) % 3]))
    return TriMesh(np.asarray(verts), faces, creases)


def cut_open_creases(mesh: TriMesh):
    """Cut open every crease component that dead-ends at an interior vertex.

    The cut crease edges become mesh boundary and leave the crease set; the
    result is still edge-manifold.
    """
    if len(mesh.crease_edge_ids) == 0:
        return mesh
    # connected components of the crease edge graph
    n = mesh.n_vertices
    parent = np.arange(n)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in mesh.edges[mesh.crease_edge_ids]:
        parent[find(i)] = find(j)
    deg = np.zeros(n, dtype=np.int64)
    np.add.at(deg, mesh.edges[mesh.crease_edge_ids].ravel(), 1)
    open_roots = {find(v) for v in range(n)
                  if deg[v] == 1 and not mesh.boundary_vertex_mask[v]}
    if not open_roots:
        return mesh
    cut_ids = [e for e in mesh.crease_edge_ids if find(mesh.edges[e, 0]) in open_roots]
    logger.info("cutting %d open-crease edge(s)", len(cut_ids))
    return cut_along_edges(mesh, cut_ids)
