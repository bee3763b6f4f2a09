"""Analytic developable test surfaces with ground-truth rulings.

Every generator samples an exactly developable surface on a regular (nu x nv)
grid and returns the mesh together with the analytic ruling direction and
normal per face, evaluated at the face barycenter. Quads are split according
to a triangulation style so tests can probe triangulation dependence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trimesh import TriMesh


@dataclass
class GroundTruth:
    """Analytic reference data per face of a generated mesh."""

    ruling: np.ndarray        # (F, 3) unit ruling direction (up to sign)
    normal: np.ndarray        # (F, 3) unit surface normal at face barycenter
    kappa_max: np.ndarray     # (F,) absolute max curvature
    planar_mask: np.ndarray   # (F,) True where the surface is flat (ruling is arbitrary)


def _grid_faces(nu, nv, style, seed=0, wrap_u=False):
    """Triangulate an (nu+1) x (nv+1) vertex grid (nu x nv quads)."""
    npu = nu if wrap_u else nu + 1

    def vid(i, j):
        return (i % npu if wrap_u else i) * (nv + 1) + j

    rng = np.random.default_rng(seed)
    faces = []
    for i in range(nu):
        for j in range(nv):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            if style == "regular":
                flip = False
            elif style == "flipped":
                flip = (i + j) % 2 == 1
            elif style == "random":
                flip = bool(rng.integers(0, 2))
            else:
                raise ValueError(f"unknown triangulation style {style!r}")
            if flip:
                faces.append((a, b, d))
                faces.append((b, c, d))
            else:
                faces.append((a, b, c))
                faces.append((a, c, d))
    return np.asarray(faces, dtype=np.int64)


def _bary(verts, faces):
    return verts[faces].mean(axis=1)


def make_plane(width=1.0, height=1.0, nu=10, nv=10, style="regular", seed=0):
    if nu < 2 or nv < 2:
        raise ValueError("resolution must be at least 2 samples per direction")
    x, y = np.meshgrid(np.linspace(0, width, nu + 1), np.linspace(0, height, nv + 1),
                       indexing="ij")
    verts = np.stack([x.ravel(), y.ravel(), np.zeros(x.size)], axis=1)
    faces = _grid_faces(nu, nv, style, seed)
    F = len(faces)
    gt = GroundTruth(ruling=np.tile([1.0, 0.0, 0.0], (F, 1)),
                     normal=np.tile([0.0, 0.0, 1.0], (F, 1)),
                     kappa_max=np.zeros(F),
                     planar_mask=np.ones(F, dtype=bool))
    return TriMesh(verts, faces), gt


def make_cylinder(radius=0.2, height=1.0, nu=40, nv=10, angle=2 * np.pi,
                  style="regular", seed=0):
    """Cylinder patch of given opening angle (full closed tube when
    ``angle == 2*pi``); rulings are the axis direction."""
    if nu < 2 or nv < 2:
        raise ValueError("resolution must be at least 2 samples per direction")
    closed = abs(angle - 2 * np.pi) < 1e-12
    th = np.linspace(0, angle, nu + (0 if closed else 1), endpoint=not closed)
    z = np.linspace(0, height, nv + 1)
    T, Z = np.meshgrid(th, z, indexing="ij")
    verts = np.stack([radius * np.cos(T.ravel()), radius * np.sin(T.ravel()), Z.ravel()], axis=1)
    faces = _grid_faces(nu, nv, style, seed, wrap_u=closed)
    c = _bary(verts, faces)
    n = c.copy()
    n[:, 2] = 0.0
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    F = len(faces)
    gt = GroundTruth(ruling=np.tile([0.0, 0.0, 1.0], (F, 1)),
                     normal=n,
                     kappa_max=np.full(F, 1.0 / radius),
                     planar_mask=np.zeros(F, dtype=bool))
    return TriMesh(verts, faces), gt


def make_cone(half_angle=np.pi / 6, slant=(0.2, 1.0), nu=40, nv=10,
              angle=2 * np.pi, include_apex=False, style="regular", seed=0):
    """Cone about +z with apex at the origin.

    ``slant`` is the sampled range of distance-from-apex along the surface.
    With ``include_apex`` the apex vertex and its face fan are added (for
    apex-removal tests); rulings are the generator lines through the apex.
    """
    if nu < 2 or nv < 2:
        raise ValueError("resolution must be at least 2 samples per direction")
    closed = abs(angle - 2 * np.pi) < 1e-12
    sa, ca = np.sin(half_angle), np.cos(half_angle)
    th = np.linspace(0, angle, nu + (0 if closed else 1), endpoint=not closed)
    t = np.linspace(slant[0], slant[1], nv + 1)
    T, S = np.meshgrid(th, t, indexing="ij")
    verts = np.stack([S.ravel() * sa * np.cos(T.ravel()),
                      S.ravel() * sa * np.sin(T.ravel()),
                      S.ravel() * ca], axis=1)
    faces = _grid_faces(nu, nv, style, seed, wrap_u=closed)
    if include_apex:
        apex = len(verts)
        verts = np.vstack([verts, [0.0, 0.0, 0.0]])
        nper = nu if closed else nu + 1
        ring = [i * (nv + 1) for i in range(nper)]
        fan = []
        for i in range(nu):
            a, b = ring[i], ring[(i + 1) % nper if closed else i + 1]
            fan.append((apex, b, a))
        faces = np.vstack([faces, np.asarray(fan, dtype=np.int64)])
    c = _bary(verts, faces)
    r = c / np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-300)
    phi = np.arctan2(c[:, 1], c[:, 0])
    # outward normal of the cone ruled by (sa*cos, sa*sin, ca)
    n = np.stack([ca * np.cos(phi), ca * np.sin(phi), -sa * np.ones_like(phi)], axis=1)
    s_bar = np.linalg.norm(c, axis=1)
    F = len(faces)
    gt = GroundTruth(ruling=r, normal=n,
                     kappa_max=ca / (sa * np.maximum(s_bar, 1e-300)),
                     planar_mask=np.zeros(F, dtype=bool))
    return TriMesh(verts, faces), gt


def make_clothoid_strip(curv=(0.5, 6.0), length=1.6, depth=0.8, nu=60, nv=20,
                        style="regular", seed=0):
    """Generalized cylinder over a planar curve with linearly varying
    curvature ``kappa(t) = a + b*t/length``, extruded along z.

    The extrusion direction (0, 0, 1) is the exact ruling everywhere and the
    max curvature equals the profile curvature.
    """
    if nu < 2 or nv < 2:
        raise ValueError("resolution must be at least 2 samples per direction")
    a, b = curv
    t = np.linspace(0.0, length, nu + 1)
    phi = a * t + 0.5 * (b - a) * t**2 / length
    # arc-length integrate the unit tangent with fine quadrature
    tf = np.linspace(0.0, length, 20 * nu + 1)
    ff = a * tf + 0.5 * (b - a) * tf**2 / length
    xf = np.concatenate([[0.0], np.cumsum(np.cos(0.5 * (ff[1:] + ff[:-1])) * np.diff(tf))])
    yf = np.concatenate([[0.0], np.cumsum(np.sin(0.5 * (ff[1:] + ff[:-1])) * np.diff(tf))])
    x = np.interp(t, tf, xf)
    y = np.interp(t, tf, yf)
    z = np.linspace(0, depth, nv + 1)
    X = np.repeat(x, nv + 1)
    Y = np.repeat(y, nv + 1)
    Z = np.tile(z, nu + 1)
    verts = np.stack([X, Y, Z], axis=1)
    faces = _grid_faces(nu, nv, style, seed)
    # faces come in pairs per grid quad; recover the profile parameter from
    # the quad row index rather than from x (the profile may loop back)
    quad_i = np.arange(len(faces)) // (2 * nv)
    tb = 0.5 * (t[quad_i] + t[quad_i + 1])
    kap = a + (b - a) * tb / length
    phib = a * tb + 0.5 * (b - a) * tb**2 / length
    n = np.stack([-np.sin(phib), np.cos(phib), np.zeros_like(phib)], axis=1)
    F = len(faces)
    gt = GroundTruth(ruling=np.tile([0.0, 0.0, 1.0], (F, 1)),
                     normal=n,
                     kappa_max=np.abs(kap),
                     planar_mask=np.zeros(F, dtype=bool))
    return TriMesh(verts, faces), gt


def make_composite(mismatch=np.deg2rad(24.0), middle=0.7, flap=0.45,
                   bend_radius=0.3, height=1.0, nu=40, nv=22,
                   style="regular", seed=0):
    """Planar middle region bridging two cylindrical flaps with mutually
    rotated rulings.

    A fan-shaped grid interpolates the column direction from -mismatch/2
    (left) to +mismatch/2 (right) across the middle strip; the flap regions
    keep their fold direction, so both fold lines lie exactly on grid
    columns and every face is exactly flat or exactly cylindrical. Ruling
    ground truth is meaningful on the flaps only.
    """
    if nu < 6 or nv < 2:
        raise ValueError("resolution too low for the three-region layout")
    a1, a2 = -0.5 * mismatch, 0.5 * mismatch
    dx = (2 * flap + middle) / nu
    n_flap = max(2, int(round(flap / dx)))
    i1, i2 = n_flap, nu - n_flap
    alpha = np.empty(nu + 1)
    alpha[:i1 + 1] = a1
    alpha[i2:] = a2
    alpha[i1:i2 + 1] = np.linspace(a1, a2, i2 - i1 + 1)
    xb = np.arange(nu + 1) * dx
    t = np.linspace(0.0, height, nv + 1)
    P = np.empty(((nu + 1) * (nv + 1), 2))
    for i in range(nu + 1):
        u = np.array([np.sin(alpha[i]), np.cos(alpha[i])])
        P[i * (nv + 1):(i + 1) * (nv + 1)] = np.array([xb[i], 0.0]) + t[:, None] * u
    faces = _grid_faces(nu, nv, style, seed)

    folds = []
    for idx, sgn in ((i1, -1.0), (i2, +1.0)):
        u = np.array([np.sin(alpha[idx]), np.cos(alpha[idx])])
        n = sgn * np.array([u[1], -u[0]])
        if n[0] * sgn < 0:
            n = -n
        folds.append((np.array([xb[idx], 0.0]), u, n))

    verts = np.stack([P[:, 0], P[:, 1], np.zeros(len(P))], axis=1)
    for q, u, n in folds:
        dist = (P - q) @ n
        m = dist > 1e-12
        th = dist[m] / bend_radius
        foot = P[m] - dist[m, None] * n
        verts[m] = np.stack([foot[:, 0] + bend_radius * np.sin(th) * n[0],
                             foot[:, 1] + bend_radius * np.sin(th) * n[1],
                             bend_radius * (1 - np.cos(th))], axis=1)

    c2 = P[faces].mean(axis=1)
    F = len(faces)
    ruling = np.zeros((F, 3))
    normal = np.tile([0.0, 0.0, 1.0], (F, 1))
    kap = np.zeros(F)
    planar = np.ones(F, dtype=bool)
    for q, u, n in folds:
        dist = (c2 - q) @ n
        m = dist > 1e-9
        ruling[m] = np.stack([np.full(m.sum(), u[0]), np.full(m.sum(), u[1]),
                              np.zeros(m.sum())], axis=1)
        th = dist[m] / bend_radius
        normal[m] = np.stack([-np.sin(th) * n[0], -np.sin(th) * n[1],
                              np.cos(th)], axis=1)
        kap[m] = 1.0 / bend_radius
        planar[m] = False
    return TriMesh(verts, faces), GroundTruth(ruling=ruling, normal=normal,
                                              kappa_max=kap, planar_mask=planar)


def make_tri_composite(side=1.0, flap=0.3, bend_radius=0.25, n_side=18,
                       n_flap=6, seed=0):
    """Central planar equilateral triangle with a cylindrical flap bent up
    along each side.

    The three flap rulings are 60 degrees apart (mod 180), so the boundary
    winding forces singular points of the ruling-aligned field inside the
    planar middle. Ground truth rulings are meaningful on the flaps only.
    """
    if n_side < 3 or n_flap < 2:
        raise ValueError("resolution too low")
    corners = side * np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3) / 2]])
    h = side / n_side

    verts2, faces = [], []
    index = {}

    def vid(p):
        key = (round(2.0 * p[0] / h), round(2.0 * p[1] / h))
        if key not in index:
            index[key] = len(verts2)
            verts2.append(np.asarray(p, dtype=float))
        return index[key]

    # central region on a regular triangular lattice, CCW faces (+z normal)
    for row in range(n_side):
        y0 = row * h * np.sqrt(3) / 2
        y1 = (row + 1) * h * np.sqrt(3) / 2
        x0 = row * h / 2
        for col in range(n_side - row):
            a = vid((x0 + col * h, y0))
            b = vid((x0 + (col + 1) * h, y0))
            c = vid((x0 + col * h + h / 2, y1))
            faces.append((a, b, c))
            if col < n_side - row - 1:
                d = vid((x0 + (col + 1) * h + h / 2, y1))
                faces.append((b, d, c))
    n_tri_faces = len(faces)
    n_lattice = len(verts2)
    verts3 = [np.array([p[0], p[1], 0.0]) for p in verts2]

    centroid = corners.mean(axis=0)
    flap_dirs = []
    for s_i in range(3):
        A, B = corners[s_i], corners[(s_i + 1) % 3]
        d = (B - A) / side
        n = np.array([d[1], -d[0]])
        if (A - centroid) @ n < 0:
            n = -n  # outward
        side_ids = [vid(A + d * (k * side / n_side)) for k in range(n_side + 1)]
        if len(verts2) != n_lattice:
            raise AssertionError("side sampling missed the lattice")
        grid = [side_ids]
        for j in range(1, n_flap + 1):
            th = (j * flap / n_flap) / bend_radius
            row_ids = []
            for k in range(n_side + 1):
                p = A + d * (k * side / n_side)
                row_ids.append(len(verts3))
                verts3.append(np.array([
                    p[0] + bend_radius * np.sin(th) * n[0],
                    p[1] + bend_radius * np.sin(th) * n[1],
                    bend_radius * (1.0 - np.cos(th))]))
            grid.append(row_ids)
        # the triangle traverses the shared side a->b; flap quads wind b->a
        for j in range(n_flap):
            for k in range(n_side):
                a, b = grid[j][k], grid[j][k + 1]
                c, dd = grid[j + 1][k + 1], grid[j + 1][k]
                faces.append((b, a, dd))
                faces.append((b, dd, c))
                flap_dirs += [d, d]

    mesh = TriMesh(np.asarray(verts3), np.asarray(faces, dtype=np.int64))
    F = len(faces)
    ruling = np.zeros((F, 3))
    planar = np.ones(F, dtype=bool)
    kap = np.zeros(F)
    for k, d in enumerate(flap_dirs):
        fi = n_tri_faces + k
        ruling[fi] = (d[0], d[1], 0.0)
        planar[fi] = False
        kap[fi] = 1.0 / bend_radius
    return mesh, GroundTruth(ruling=ruling, normal=mesh.face_normals(),
                             kappa_max=kap, planar_mask=planar)


def make_creased(widths=(0.5, 0.5), dihedral=np.pi / 2, depth=0.8, nu=20, nv=16,
                 style="regular", seed=0):
    """Two cylindrically-bent-free (flat) panels joined along a straight
    crease at the given dihedral angle, extruded along z. The crease edges
    (the ridge) are returned with the mesh."""
    if nu < 2 or nv < 2:
        raise ValueError("resolution must be at least 2 samples per direction")
    w0, w1 = widths
    t = np.linspace(-w0, w1, nu + 1)
    ridge_i = int(np.argmin(np.abs(t)))
    t[ridge_i] = 0.0
    ang = np.pi - dihedral
    x = np.where(t < 0, t, t * np.cos(ang))
    yy = np.where(t < 0, 0.0, t * np.sin(ang))
    z = np.linspace(0, depth, nv + 1)
    X = np.repeat(x, nv + 1)
    Y = np.repeat(yy, nv + 1)
    Z = np.tile(z, nu + 1)
    verts = np.stack([X, Y, Z], axis=1)
    faces = _grid_faces(nu, nv, style, seed)
    creases = [(ridge_i * (nv + 1) + j, ridge_i * (nv + 1) + j + 1) for j in range(nv)]
    mesh = TriMesh(verts, faces, creases)
    F = len(faces)
    quad_i = np.arange(F) // (2 * nv)
    left = quad_i < ridge_i
    normal = np.where(left[:, None], [0.0, 1.0, 0.0],
                      [np.sin(ang), -np.cos(ang), 0.0])
    gt = GroundTruth(ruling=np.tile([0.0, 0.0, 1.0], (F, 1)),
                     normal=np.asarray(normal, dtype=float),
                     kappa_max=np.zeros(F),
                     planar_mask=np.ones(F, dtype=bool))
    return mesh, gt


_GENERATORS = {
    "plane": make_plane,
    "cylinder": make_cylinder,
    "cone": make_cone,
    "clothoid": make_clothoid_strip,
    "composite": make_composite,
    "tri_composite": make_tri_composite,
    "creased": make_creased,
}


def generate(kind, **params):
    """Dispatch to a named generator. Returns (TriMesh, GroundTruth)."""
    try:
        gen = _GENERATORS[kind]
    except KeyError:
        raise ValueError(f"unknown surface kind {kind!r}; "
                         f"choose from {sorted(_GENERATORS)}") from None
    return gen(**params)


def perturb(mesh: TriMesh, amplitude: float, seed: int = 0) -> TriMesh:
    """Displace interior vertices by uniform random vectors of norm at most
    ``amplitude * mean_edge_length``. Deterministic for a fixed seed."""
    if amplitude < 0:
        raise ValueError("amplitude must be >= 0")
    if amplitude == 0:
        return mesh
    rng = np.random.default_rng(seed)
    scale = amplitude * mesh.mean_edge_length()
    d = rng.normal(size=(mesh.n_vertices, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d *= scale * rng.random(mesh.n_vertices)[:, None] ** (1.0 / 3.0)
    d[mesh.boundary_vertex_mask] = 0.0
    return TriMesh(mesh.vertices + d, mesh.faces, mesh.crease_edge_pairs())
