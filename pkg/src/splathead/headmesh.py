"""Parametric head geometry: blendshape deformation, pose articulation,
per-triangle local frames, and UV-atlas lookup.

All operations are pure functions over immutable inputs. Geometry runs in
float64. The *_backward helpers provide the analytic vector-Jacobian products
used by the adaptation stage when tracked parameters are refined.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .quaternions import quat_to_rotmat, quat_to_rotmat_vjp

MIN_TRIANGLE_AREA = 1e-12


@dataclass(frozen=True)
class CanonicalMesh:
    """Canonical head: V x 3 vertices, F x 3 triangles, per-corner UVs in [0,1]^2,
    K expression blendshape slices plus 2 dedicated eyelid slices, and a
    jaw region articulated about `jaw_pivot` (mesh-local x axis)."""

    vertices: np.ndarray        # V x 3
    triangles: np.ndarray       # F x 3 int
    uv_corners: np.ndarray      # F x 3 x 2
    blend_basis: np.ndarray     # K x V x 3
    eyelid_basis: np.ndarray    # 2 x V x 3
    jaw_region: np.ndarray      # V bool
    jaw_pivot: np.ndarray       # 3

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_triangles(self):
        return self.triangles.shape[0]

    @property
    def num_expr(self):
        return self.blend_basis.shape[0]

    def validate(self):
        V = self.num_vertices
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= V):
            raise ValidationError("triangle index out of range")
        areas = triangle_areas(self.vertices, self.triangles)
        bad = np.nonzero(areas <= MIN_TRIANGLE_AREA)[0]
        if bad.size:
            raise ValidationError(f"degenerate triangle {int(bad[0])} (area {areas[bad[0]]:g})")
        if self.uv_corners.min() < 0.0 or self.uv_corners.max() > 1.0:
            raise ValidationError("uv corners outside [0,1]^2")
        if self.blend_basis.shape[1:] != (V, 3) or self.eyelid_basis.shape != (2, V, 3):
            raise ValidationError("blendshape basis shape mismatch")
        if self.jaw_region.shape != (V,):
            raise ValidationError("jaw_region must be per-vertex")
        return self


@dataclass(frozen=True)
class FlameParams:
    """Per-frame drive: expression coefficients, rigid head pose, jaw, eyelids."""

    exp: np.ndarray                 # K
    global_rot: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    global_trans: np.ndarray = field(default_factory=lambda: np.zeros(3))
    jaw_angle: float = 0.0
    eyelids: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def validate(self, mesh: CanonicalMesh):
        if self.exp.shape != (mesh.num_expr,):
            raise ValidationError(
                f"exp has length {self.exp.shape}, mesh expects ({mesh.num_expr},)")
        if abs(np.linalg.norm(self.global_rot) - 1.0) > 1e-6:
            raise ValidationError("global_rot must be a unit quaternion")
        if self.eyelids.shape != (2,):
            raise ValidationError("eyelids must be a 2-vector")
        return self


@dataclass(frozen=True)
class TriangleFrames:
    """Per-triangle local frames: centroid C, rotation R = [edge, n x edge, n],
    scale k = (edge length + perpendicular height) / 2, edge_stat l."""

    C: np.ndarray   # F x 3
    R: np.ndarray   # F x 3 x 3
    k: np.ndarray   # F
    l: np.ndarray   # F


def triangle_areas(vertices, triangles):
    v1, v2, v3 = (vertices[triangles[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(v2 - v1, v3 - v1), axis=-1)


def _jaw_rotmat(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def deform(mesh: CanonicalMesh, params: FlameParams):
    """Blendshape + jaw + global rigid transform; returns V x 3 vertices."""
    params.validate(mesh)
    v = (
        mesh.vertices
        + np.tensordot(params.exp, mesh.blend_basis, axes=1)
        + np.tensordot(params.eyelids, mesh.eyelid_basis, axes=1)
    )
    if params.jaw_angle != 0.0:
        Rj = _jaw_rotmat(params.jaw_angle)
        m = mesh.jaw_region
        v = v.copy()
        v[m] = (v[m] - mesh.jaw_pivot) @ Rj.T + mesh.jaw_pivot
    Rg = quat_to_rotmat(params.global_rot)
    return v @ Rg.T + params.global_trans


def deform_backward(mesh: CanonicalMesh, params: FlameParams, d_vertices):
    """Gradients of sum(d_vertices * deform(...)) wrt the drive parameters.

    Returns a dict with keys exp, eyelids, jaw_angle, global_rot (raw
    quaternion gradient, normalization included), global_trans.
    """
    pre = (
        mesh.vertices
        + np.tensordot(params.exp, mesh.blend_basis, axes=1)
        + np.tensordot(params.eyelids, mesh.eyelid_basis, axes=1)
    )
    Rg = quat_to_rotmat(params.global_rot)
    if params.jaw_angle != 0.0:
        Rj = _jaw_rotmat(params.jaw_angle)
        m = mesh.jaw_region
        jawed = pre.copy()
        jawed[m] = (pre[m] - mesh.jaw_pivot) @ Rj.T + mesh.jaw_pivot
    else:
        jawed = pre
        m = mesh.jaw_region

    d_trans = d_vertices.sum(axis=0)
    d_Rg = d_vertices.T @ jawed
    d_rot = quat_to_rotmat_vjp(params.global_rot, d_Rg)
    d_jawed = d_vertices @ Rg

    c, s = np.cos(params.jaw_angle), np.sin(params.jaw_angle)
    dRj = np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])
    rel = pre[m] - mesh.jaw_pivot
    d_jaw = float(np.sum(d_jawed[m] * (rel @ dRj.T)))
    d_pre = d_jawed.copy()
    if params.jaw_angle != 0.0:
        Rj = _jaw_rotmat(params.jaw_angle)
        d_pre[m] = d_jawed[m] @ Rj
    d_exp = np.tensordot(mesh.blend_basis, d_pre, axes=([1, 2], [0, 1]))
    d_eyelids = np.tensordot(mesh.eyelid_basis, d_pre, axes=([1, 2], [0, 1]))
    return {
        "exp": d_exp,
        "eyelids": d_eyelids,
        "jaw_angle": d_jaw,
        "global_rot": d_rot,
        "global_trans": d_trans,
    }


def triangle_frames(vertices, triangles) -> TriangleFrames:
    """Local frame per triangle. Edge is always v1->v2 of the stored triangle;
    normal = normalize((v2-v1) x (v3-v1)); k = (|edge| + height) / 2."""
    v1, v2, v3 = (vertices[triangles[:, i]] for i in range(3))
    e = v2 - v1
    u = v3 - v1
    nr = np.cross(e, u)
    N = np.linalg.norm(nr, axis=-1)
    bad = np.nonzero(N <= 2 * MIN_TRIANGLE_AREA)[0]
    if bad.size:
        raise ValidationError(f"degenerate triangle {int(bad[0])}")
    l = np.linalg.norm(e, axis=-1)
    ehat = e / l[:, None]
    n = nr / N[:, None]
    b = np.cross(n, ehat)
    h = N / l
    return TriangleFrames(
        C=(v1 + v2 + v3) / 3.0,
        R=np.stack([ehat, b, n], axis=-1),
        k=(l + h) / 2.0,
        l=l,
    )


def triangle_frames_backward(vertices, triangles, d_C=None, d_R=None, d_k=None, d_l=None):
    """Scatter the frame gradients back to V x 3 vertex gradients."""
    F = triangles.shape[0]
    v1, v2, v3 = (vertices[triangles[:, i]] for i in range(3))
    e = v2 - v1
    u = v3 - v1
    nr = np.cross(e, u)
    N = np.linalg.norm(nr, axis=-1)
    l = np.linalg.norm(e, axis=-1)
    ehat = e / l[:, None]
    n = nr / N[:, None]

    zc = np.zeros((F, 3))
    zm = np.zeros((F, 3, 3))
    zs = np.zeros(F)
    gC = zc if d_C is None else d_C
    gR = zm if d_R is None else d_R
    gk = zs if d_k is None else d_k
    gl_direct = zs if d_l is None else d_l

    g_b = gR[:, :, 1]
    g_ehat = gR[:, :, 0] + np.cross(g_b, n)
    g_n = gR[:, :, 2] + np.cross(ehat, g_b)

    g_h = 0.5 * gk
    g_l = 0.5 * gk + gl_direct - (N / l ** 2) * g_h
    g_N = g_h / l

    g_nr = (g_n - n * np.sum(n * g_n, axis=-1, keepdims=True)) / N[:, None] + n * g_N[:, None]
    g_e = (g_ehat - ehat * np.sum(ehat * g_ehat, axis=-1, keepdims=True)) / l[:, None]
    g_e += ehat * g_l[:, None]
    g_e += np.cross(u, g_nr)
    g_u = np.cross(g_nr, e)

    gv = np.zeros_like(vertices)
    third = gC / 3.0
    np.add.at(gv, triangles[:, 0], third - g_e - g_u)
    np.add.at(gv, triangles[:, 1], third + g_e)
    np.add.at(gv, triangles[:, 2], third + g_u)
    return gv


class UVAtlas:
    """Grid-accelerated point-to-triangle lookup over the UV atlas."""

    EPS = 1e-9

    def __init__(self, mesh: CanonicalMesh, grid=32):
        self.mesh = mesh
        p1 = mesh.uv_corners[:, 0]
        d2 = mesh.uv_corners[:, 1] - p1
        d3 = mesh.uv_corners[:, 2] - p1
        det = d2[:, 0] * d3[:, 1] - d2[:, 1] * d3[:, 0]
        ok = np.abs(det) > 1e-14
        safe = np.where(ok, det, 1.0)
        # inverse of the 2x2 edge matrix, rows give (w2, w3) weights
        self._p1 = p1
        self._inv = np.stack(
            [
                np.stack([d3[:, 1] / safe, -d3[:, 0] / safe], axis=-1),
                np.stack([-d2[:, 1] / safe, d2[:, 0] / safe], axis=-1),
            ],
            axis=1,
        )
        self._ok = ok
        self.grid = grid
        lo = mesh.uv_corners.min(axis=1)
        hi = mesh.uv_corners.max(axis=1)
        self._cells = [[[] for _ in range(grid)] for _ in range(grid)]
        for f in range(mesh.num_triangles):
            if not ok[f]:
                continue
            i0 = max(0, min(grid - 1, int(lo[f, 0] * grid)))
            i1 = max(0, min(grid - 1, int(hi[f, 0] * grid)))
            j0 = max(0, min(grid - 1, int(lo[f, 1] * grid)))
            j1 = max(0, min(grid - 1, int(hi[f, 1] * grid)))
            for i in range(i0, i1 + 1):
                for j in range(j0, j1 + 1):
                    self._cells[i][j].append(f)
        self._cells = [[np.asarray(c, dtype=np.int64) for c in row] for row in self._cells]

    def barycentric(self, tris, uv):
        """Barycentric coordinates of point(s) uv in triangle(s) tris."""
        rel = uv - self._p1[tris]
        w23 = np.einsum("...ij,...j->...i", self._inv[tris], rel)
        w1 = 1.0 - w23.sum(axis=-1)
        return np.concatenate([w1[..., None], w23], axis=-1)

    def lookup(self, uv):
        """Containing triangle and barycentric coords of one point, or None."""
        u, v = float(uv[0]), float(uv[1])
        if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
            raise ValidationError("uv outside [0,1]^2")
        g = self.grid
        i = min(g - 1, int(u * g))
        j = min(g - 1, int(v * g))
        cand = self._cells[i][j]
        if cand.size == 0:
            return None
        bary = self.barycentric(cand, np.array([u, v]))
        inside = np.all(bary >= -self.EPS, axis=-1)
        hits = np.nonzero(inside)[0]
        if hits.size == 0:
            return None
        # deterministic tie-break on shared edges: lowest triangle index
        best = hits[np.argmin(cand[hits])]
        return int(cand[best]), bary[best]

    def lookup_batch(self, uvs):
        """Vectorized lookup; returns (tri indices with -1 for uncovered, barycentrics)."""
        M = uvs.shape[0]
        tris = np.full(M, -1, dtype=np.int64)
        barys = np.zeros((M, 3))
        for m in range(M):
            hit = self.lookup(uvs[m])
            if hit is not None:
                tris[m], barys[m] = hit
        return tris, barys


def uv_to_surface(mesh: CanonicalMesh, uv, atlas: UVAtlas | None = None):
    """UV point -> (triangle index, barycentric 3-vector), or None if uncovered."""
    if atlas is None:
        atlas = UVAtlas(mesh)
    return atlas.lookup(np.asarray(uv, dtype=np.float64))
