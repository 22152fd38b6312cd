"""Shared test helpers: finite differences, random rigid transforms, tiny meshes."""

import numpy as np

from splathead.headmesh import CanonicalMesh
from splathead.quaternions import quat_to_rotmat, random_unit_quat


def central_diff(f, x, eps=1e-5):
    """Dense central-difference gradient of scalar f at flat array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(1e-8, np.maximum(np.abs(a), np.abs(b)))


def random_rigid(rng):
    Q = quat_to_rotmat(random_unit_quat(rng))
    t = rng.uniform(-1, 1, size=3)
    return Q, t


def square_atlas_mesh(z=0.0):
    """Two triangles whose UV atlas tiles [0,1]^2 exactly; planar geometry."""
    vertices = np.array([[0.0, 0.0, z], [1.0, 0.0, z], [1.0, 1.0, z], [0.0, 1.0, z]])
    triangles = np.array([[0, 1, 2], [0, 2, 3]])
    uv_corners = np.array([
        [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
        [[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
    ])
    K = 3
    rng = np.random.default_rng(7)
    return CanonicalMesh(
        vertices=vertices, triangles=triangles, uv_corners=uv_corners,
        blend_basis=0.1 * rng.standard_normal((K, 4, 3)),
        eyelid_basis=0.05 * rng.standard_normal((2, 4, 3)),
        jaw_region=np.array([False, False, True, True]),
        jaw_pivot=np.array([0.5, 0.5, 0.0]),
    )


def brute_force_uv_lookup(mesh, uv, eps=1e-9):
    """Exhaustive scan over all UV triangles; oracle for uv_to_surface."""
    hits = []
    for f in range(mesh.num_triangles):
        p1, p2, p3 = mesh.uv_corners[f]
        m = np.array([p2 - p1, p3 - p1]).T
        det = np.linalg.det(m)
        if abs(det) < 1e-14:
            continue
        w2, w3 = np.linalg.solve(m, np.asarray(uv) - p1)
        w1 = 1.0 - w2 - w3
        if w1 >= -eps and w2 >= -eps and w3 >= -eps:
            hits.append((f, np.array([w1, w2, w3])))
    if not hits:
        return None
    return min(hits, key=lambda h: h[0])
