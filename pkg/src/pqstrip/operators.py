"""Discrete differential operators and per-face ruling estimation.

Face-based tangent fields are stored in local-frame coordinates, either as a
complex number per face or as the interleaved real vector
``[x0, y0, x1, y1, ...]`` of length 2F that the sparse operators act on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .trimesh import LocalFrames, MassMatrices, MeshError, TriMesh

THETA1_DEFAULT = 0.8
THETA2_DEFAULT = -0.014


def interleave(z):
    """Complex per-face field -> interleaved real (2F,) vector."""
    out = np.empty(2 * len(z))
    out[0::2] = np.real(z)
    out[1::2] = np.imag(z)
    return out


def deinterleave(x):
    return x[0::2] + 1j * x[1::2]


@dataclass(frozen=True)
class DiscreteOperators:
    """Sparse gradient, integrated divergence and curl.

    G : (2F, V)   vertex scalars -> in-frame face vectors
    D : (V, 2F)   integrated divergence, ``D = G^T M_X``
    C : (E_int, 2F) per-interior-edge curl ``<xi(f) - xi(g), e>`` using the
        plain (unmatched) face pairing; the field optimizer re-signs rows
        according to the current matching.
    """

    G: sparse.csr_matrix
    D: sparse.csr_matrix
    C: sparse.csr_matrix


def build_gradient(mesh: TriMesh, frames: LocalFrames, masses: MassMatrices):
    """Per-face conforming gradient: for face (i, j, k),
    ``G u (f) = (e_jk^perp u_i + e_ki^perp u_j + e_ij^perp u_k) / (2 m(f))``
    expressed in the local frame."""
    F = mesh.n_faces
    p = mesh.vertices[mesh.faces]
    rows, cols, vals = [], [], []
    for corner in range(3):
        # edge opposite this corner, rotated by +90 deg in the face plane
        a = p[:, (corner + 1) % 3]
        b = p[:, (corner + 2) % 3]
        e = b - a
        ep = np.cross(frames.normal, e)
        coef = ep / (2.0 * masses.face)[:, None]
        cx = np.einsum("ij,ij->i", coef, frames.e1)
        cy = np.einsum("ij,ij->i", coef, frames.e2)
        rows.append(2 * np.arange(F))
        cols.append(mesh.faces[:, corner])
        vals.append(cx)
        rows.append(2 * np.arange(F) + 1)
        cols.append(mesh.faces[:, corner])
        vals.append(cy)
    G = sparse.coo_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(2 * F, mesh.n_vertices)).tocsr()
    return G


def build_curl(mesh: TriMesh, frames: LocalFrames):
    """Plain curl rows ``<xi(f), e> - <xi(g), e>`` per interior edge, with the
    full-length edge vector expressed in each face's own frame."""
    ie = mesh.interior_edges
    f = mesh.edge_faces[ie, 0]
    g = mesh.edge_faces[ie, 1]
    ef = frames.edge_vec_frame[ie, 0]
    eg = frames.edge_vec_frame[ie, 1]
    n = len(ie)
    rows = np.repeat(np.arange(n), 4)
    cols = np.stack([2 * f, 2 * f + 1, 2 * g, 2 * g + 1], axis=1).ravel()
    vals = np.stack([np.real(ef), np.imag(ef), -np.real(eg), -np.imag(eg)], axis=1).ravel()
    return sparse.coo_matrix((vals, (rows, cols)),
                             shape=(n, 2 * mesh.n_faces)).tocsr()


def build_operators(mesh: TriMesh, frames: LocalFrames, masses: MassMatrices):
    G = build_gradient(mesh, frames, masses)
    D = (G.T @ masses.M_X).tocsr()
    C = build_curl(mesh, frames)
    return DiscreteOperators(G=G, D=D, C=C)


def gradient(mesh: TriMesh, frames: LocalFrames, masses: MassMatrices, u):
    """Per-face 3D gradient vectors of a vertex function."""
    G = build_gradient(mesh, frames, masses)
    return frames.to_world(deinterleave(G @ np.asarray(u, dtype=float)))


def divergence(ops: DiscreteOperators, frames: LocalFrames, gamma3):
    """Integrated divergence rows ``D = G^T M_X`` applied to a per-face 3D
    field. Note the adjoint construction makes this the *negated* physical
    divergence: ``D (G u) = L u`` with L the positive cotan stiffness."""
    return ops.D @ interleave(frames.to_frame(np.asarray(gamma3, dtype=float)))


def curl(ops: DiscreteOperators, frames: LocalFrames, xi3):
    """Per-interior-edge curl of a per-face 3D field."""
    return ops.C @ interleave(frames.to_frame(np.asarray(xi3, dtype=float)))


# ---------------------------------------------------------------------------
# shape operator, rulings, confidence


@dataclass
class RulingData:
    """Per-face shape operator output: curvature magnitudes, ruling
    directions and their power representations, and confidence weights."""

    S: np.ndarray            # (F, 2, 2) symmetric in local frame
    kappa1: np.ndarray       # (F,) absolute max curvature
    kappa2: np.ndarray       # (F,) absolute min curvature
    r: np.ndarray            # (F,) complex, unit ruling direction in frame
    r_perp: np.ndarray       # (F,) complex, unit, r rotated by 90 degrees
    R: np.ndarray            # (F,) complex power representation r^2
    R_perp: np.ndarray       # (F,) complex, equals -R
    w: np.ndarray            # (F,) confidence in [0, theta1]
    theta1: float
    theta2: float

    def ruling_world(self, frames: LocalFrames):
        return frames.to_world(self.r)

    def r_perp_world(self, frames: LocalFrames):
        return frames.to_world(self.r_perp)


def shape_operator(mesh: TriMesh, frames: LocalFrames):
    """Least-squares symmetric 2x2 shape operator per face.

    For each face edge with unit in-plane direction ``ehat`` and vertex unit
    normals ``n_a``, ``n_b``, the operator is fit to map ``ehat`` to the
    in-plane projection of ``(n_b - n_a) / |e|``, accumulated over the three
    edges in the least-squares sense.
    """
    vn = mesh.vertex_normals()
    F = mesh.n_faces
    AtA = np.zeros((F, 3, 3))
    Atb = np.zeros((F, 3))
    p = mesh.vertices[mesh.faces]
    for corner in range(3):
        a_idx = mesh.faces[:, corner]
        b_idx = mesh.faces[:, (corner + 1) % 3]
        e = p[:, (corner + 1) % 3] - p[:, corner]
        elen = np.linalg.norm(e, axis=1)
        ehat = e / elen[:, None]
        ex = np.einsum("ij,ij->i", ehat, frames.e1)
        ey = np.einsum("ij,ij->i", ehat, frames.e2)
        dn = (vn[b_idx] - vn[a_idx]) / elen[:, None]
        tx = np.einsum("ij,ij->i", dn, frames.e1)
        ty = np.einsum("ij,ij->i", dn, frames.e2)
        # rows of the per-edge 2x6->2x3 system for unknowns (s11, s12, s22):
        #   [ex, ey, 0] . s = tx       [0, ex, ey] . s = ty
        r1 = np.stack([ex, ey, np.zeros(F)], axis=1)
        r2 = np.stack([np.zeros(F), ex, ey], axis=1)
        AtA += np.einsum("ij,ik->ijk", r1, r1) + np.einsum("ij,ik->ijk", r2, r2)
        Atb += r1 * tx[:, None] + r2 * ty[:, None]
    AtA += 1e-14 * np.eye(3)
    s = np.linalg.solve(AtA, Atb[..., None])[..., 0]
    S = np.empty((F, 2, 2))
    S[:, 0, 0] = s[:, 0]
    S[:, 0, 1] = S[:, 1, 0] = s[:, 1]
    S[:, 1, 1] = s[:, 2]
    return S


def rulings(S):
    """Eigen-decompose the 2x2 shape operators.

    Returns (kappa1, kappa2, r, r_perp, R, R_perp): absolute max/min
    curvature magnitudes and the unit min-|curvature| eigenvector as complex
    numbers, plus power representations. Umbilic faces get the frame axis.
    """
    a = S[:, 0, 0]
    b = S[:, 0, 1]
    c = S[:, 1, 1]
    half_tr = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b**2, 0.0))
    lam1 = half_tr + disc
    lam2 = half_tr - disc
    abs1 = np.abs(lam1)
    abs2 = np.abs(lam2)
    kappa1 = np.maximum(abs1, abs2)
    kappa2 = np.minimum(abs1, abs2)
    # eigenvector of the smaller-|lambda| eigenvalue; (lam-c, b) and
    # (b, lam-a) are algebraically equivalent, keep the better-conditioned one
    lam_min = np.where(abs1 <= abs2, lam1, lam2)
    v1 = np.stack([lam_min - c, b], axis=1)
    v2 = np.stack([b, lam_min - a], axis=1)
    pick1 = np.einsum("ij,ij->i", v1, v1) >= np.einsum("ij,ij->i", v2, v2)
    v = np.where(pick1[:, None], v1, v2)
    umbilic = disc < 1e-10
    v[umbilic] = (1.0, 0.0)
    r = v[:, 0] + 1j * v[:, 1]
    nz = np.abs(r)
    bad = nz < 1e-300
    r = np.where(bad, 1.0 + 0j, r / np.where(bad, 1.0, nz))
    r_perp = 1j * r
    R = r * r
    return kappa1, kappa2, r, r_perp, R, -R


def confidence_weights(kappa1, kappa2, mesh: TriMesh,
                       theta1: float = THETA1_DEFAULT,
                       theta2: float = THETA2_DEFAULT):
    """Logistic-style confidence ``theta1 * (1 - exp(theta2 (k1-k2)^2))``,
    zeroed on boundary-adjacent and crease-adjacent faces."""
    w = theta1 * (1.0 - np.exp(theta2 * (kappa1 - kappa2) ** 2))
    w[mesh.boundary_faces] = 0.0
    w[mesh.crease_faces] = 0.0
    return w


def build_ruling_data(mesh: TriMesh, frames: LocalFrames,
                      theta1: float = THETA1_DEFAULT,
                      theta2: float = THETA2_DEFAULT) -> RulingData:
    S = shape_operator(mesh, frames)
    kappa1, kappa2, r, r_perp, R, R_perp = rulings(S)
    w = confidence_weights(kappa1, kappa2, mesh, theta1, theta2)
    return RulingData(S=S, kappa1=kappa1, kappa2=kappa2, r=r, r_perp=r_perp,
                      R=R, R_perp=R_perp, w=w, theta1=theta1, theta2=theta2)


def export_rulings_csv(path, mesh: TriMesh, frames: LocalFrames, data: RulingData):
    """Debug dump: face index, 3D ruling vector, confidence weight."""
    r3 = data.ruling_world(frames)
    with open(path, "w") as fh:
        fh.write("face,rx,ry,rz,weight\n")
        for f in range(mesh.n_faces):
            fh.write("%d,%.9g,%.9g,%.9g,%.9g\n"
                     % (f, r3[f, 0], r3[f, 1], r3[f, 2], data.w[f]))


def read_field_csv(path):
    """Read a per-face 3D field CSV written by export_rulings_csv (weight
    column optional). Returns (F, 3) array ordered by face index."""
    rows = []
    with open(path) as fh:
        header = fh.readline()
        if not header.lower().startswith("face"):
            fh.seek(0)
        for line in fh:
            tok = line.split(",")
            if len(tok) < 4:
                raise MeshError(f"bad field CSV line: {line.rstrip()}")
            rows.append((int(tok[0]), float(tok[1]), float(tok[2]), float(tok[3])))
    rows.sort()
    return np.asarray([r[1:] for r in rows])
