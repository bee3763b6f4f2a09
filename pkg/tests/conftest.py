import numpy as np
import pytest

from pqstrip import synth
from pqstrip.trimesh import LocalFrames, MassMatrices, TriMesh


@pytest.fixture(scope="session")
def plane_mesh():
    mesh, gt = synth.make_plane(nu=10, nv=10)
    return mesh, gt


@pytest.fixture(scope="session")
def cylinder_mesh():
    mesh, gt = synth.make_cylinder(radius=0.2, height=1.0, nu=40, nv=10)
    return mesh, gt


def build_geometry(mesh):
    frames = LocalFrames.build(mesh)
    masses = MassMatrices.build(mesh)
    return frames, masses


def random_flat_mesh(seed, n_points=40):
    """Random Delaunay triangulation of a planar point set (z = 0)."""
    from scipy.spatial import Delaunay

    rng = np.random.default_rng(seed)
    pts = rng.random((n_points, 2))
    tri = Delaunay(pts)
    verts = np.column_stack([pts, np.zeros(len(pts))])
    return TriMesh(verts, tri.simplices)


def random_curved_mesh(seed):
    """Seeded mildly perturbed developable sample (stays manifold)."""
    rng = np.random.default_rng(seed)
    kind = rng.integers(0, 3)
    if kind == 0:
        mesh, _ = synth.make_cylinder(radius=float(rng.uniform(0.15, 0.4)),
                                      nu=int(rng.integers(12, 28)),
                                      nv=int(rng.integers(4, 10)))
    elif kind == 1:
        mesh, _ = synth.make_cone(half_angle=float(rng.uniform(0.3, 0.9)),
                                  nu=int(rng.integers(12, 28)),
                                  nv=int(rng.integers(4, 10)))
    else:
        mesh, _ = synth.make_clothoid_strip(nu=int(rng.integers(10, 30)),
                                            nv=int(rng.integers(4, 12)))
    return synth.perturb(mesh, 0.05, seed=seed)
