"""Gaussian attribute representation: the H x W x 14 UV Gaussian map, texel
activations, uniform sampling onto mesh triangles, and the local-to-global
transform that rigs primitives to triangle frames.

Channel layout of a texel: [0:3) position offset, [3:6) log-scale,
[6:10) rotation quaternion (identity-biased raw), [10] opacity logit,
[11:14) color logits.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .headmesh import CanonicalMesh, TriangleFrames, UVAtlas
from .quaternions import (
    quat_mul,
    quat_normalize,
    quat_normalize_vjp,
    quat_to_rotmat,
    quat_to_rotmat_vjp,
    rotmat_to_quat,
)

SCALE_MIN = 1e-4
SCALE_MAX = 10.0
QUAT_BIAS = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class UVGaussianMap:
    data: np.ndarray  # H x W x 14

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 14:
            raise ValidationError(f"UV map must be H x W x 14, got {self.data.shape}")
        if self.data.shape[0] < 2 or self.data.shape[1] < 2:
            raise ValidationError("UV map must be at least 2 x 2")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("UV map contains non-finite entries")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


@dataclass
class LocalGaussians:
    """Triangle-bound local primitives (struct of arrays, P entries)."""

    mu_l: np.ndarray     # P x 3
    s_l: np.ndarray      # P x 3
    r_l: np.ndarray      # P x 4 unit
    rgb_l: np.ndarray    # P x 3
    sigma_l: np.ndarray  # P
    tri: np.ndarray      # P int
    uv: np.ndarray       # P x 2 source texel center
    bary: np.ndarray     # P x 3 barycentric anchor in the parent triangle

    def __len__(self):
        return self.mu_l.shape[0]


@dataclass
class GlobalGaussians:
    """World-space primitives ready for rasterization."""

    mu: np.ndarray     # P x 3
    s: np.ndarray      # P x 3
    r: np.ndarray      # P x 4 unit
    rgb: np.ndarray    # P x 3
    sigma: np.ndarray  # P

    def __len__(self):
        return self.mu.shape[0]

    def as_array(self):
        """Pack into P x 14 (mu, s, r, rgb, sigma)."""
        return np.concatenate(
            [self.mu, self.s, self.r, self.rgb, self.sigma[:, None]], axis=1)

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != 14:
            raise ValidationError(f"expected P x 14 gaussian array, got {a.shape}")
        return cls(mu=a[:, 0:3].copy(), s=a[:, 3:6].copy(), r=a[:, 6:10].copy(),
                   rgb=a[:, 10:13].copy(), sigma=a[:, 13].copy())


def logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def decode_texels(raw):
    """Texel activations; raw has shape ... x 14. Returns a dict of attributes."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != 14:
        raise ValidationError(f"texel must have 14 channels, got {raw.shape[-1]}")
    if not np.all(np.isfinite(raw)):
        raise ValidationError("non-finite texel input")
    return {
        "mu_l": raw[..., 0:3].copy(),
        "s_l": np.clip(np.exp(raw[..., 3:6]), SCALE_MIN, SCALE_MAX),
        "r_l": quat_normalize(raw[..., 6:10] + QUAT_BIAS),
        "sigma_l": logistic(raw[..., 10]),
        "rgb_l": logistic(raw[..., 11:14]),
    }


def decode_texels_backward(raw, d_mu_l, d_s_l, d_r_l, d_sigma_l, d_rgb_l):
    """VJP of decode_texels back to the raw 14-channel texels."""
    raw = np.asarray(raw, dtype=np.float64)
    d_raw = np.zeros_like(raw)
    d_raw[..., 0:3] = d_mu_l
    s = np.exp(raw[..., 3:6])
    live = (s > SCALE_MIN) & (s < SCALE_MAX)
    d_raw[..., 3:6] = np.where(live, s * d_s_l, 0.0)
    d_raw[..., 6:10] = quat_normalize_vjp(raw[..., 6:10] + QUAT_BIAS, d_r_l)
    sig = logistic(raw[..., 10])
    d_raw[..., 10] = sig * (1.0 - sig) * d_sigma_l
    rgb = logistic(raw[..., 11:14])
    d_raw[..., 11:14] = rgb * (1.0 - rgb) * d_rgb_l
    return d_raw


def encode_texels(mu_l, s_l, r_l, sigma_l, rgb_l):
    """Documented inverse of decode_texels (for unit r_l, open-interval sigma/rgb)."""
    def logit(p):
        return np.log(p) - np.log1p(-p)

    raw = np.empty(mu_l.shape[:-1] + (14,), dtype=np.float64)
    raw[..., 0:3] = mu_l
    raw[..., 3:6] = np.log(s_l)
    raw[..., 6:10] = r_l - QUAT_BIAS
    raw[..., 10] = logit(sigma_l)
    raw[..., 11:14] = logit(rgb_l)
    return raw


@dataclass(frozen=True)
class UVBinding:
    """Texel-to-triangle binding for a fixed atlas and map resolution.

    Depends only on mesh topology, so it is computed once and reused across
    training steps. Row-major texel order: rows (v) outer, columns (u) inner.
    """

    rows: np.ndarray  # P int, texel row (v axis)
    cols: np.ndarray  # P int, texel column (u axis)
    uv: np.ndarray    # P x 2 texel centers
    tri: np.ndarray   # P int
    bary: np.ndarray  # P x 3


def compute_binding(mesh: CanonicalMesh, height, width, atlas: UVAtlas | None = None) -> UVBinding:
    if atlas is None:
        atlas = UVAtlas(mesh)
    jj, ii = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    rows = jj.reshape(-1)
    cols = ii.reshape(-1)
    uvs = np.stack([(cols + 0.5) / width, (rows + 0.5) / height], axis=-1)
    tris, barys = atlas.lookup_batch(uvs)
    covered = tris >= 0
    return UVBinding(
        rows=rows[covered].copy(),
        cols=cols[covered].copy(),
        uv=uvs[covered].copy(),
        tri=tris[covered].copy(),
        bary=barys[covered].copy(),
    )


def bind(uvmap: UVGaussianMap, mesh: CanonicalMesh, atlas: UVAtlas | None = None,
         binding: UVBinding | None = None) -> LocalGaussians:
    """Sample the UV map at covered texel centers into local primitives."""
    if binding is None:
        binding = compute_binding(mesh, uvmap.height, uvmap.width, atlas)
    raw = uvmap.data[binding.rows, binding.cols]
    att = decode_texels(raw)
    return LocalGaussians(
        mu_l=att["mu_l"], s_l=att["s_l"], r_l=att["r_l"],
        rgb_l=att["rgb_l"], sigma_l=att["sigma_l"],
        tri=binding.tri.copy(), uv=binding.uv.copy(), bary=binding.bary.copy(),
    )


def anchor_points(vertices, triangles, tri, bary):
    """World-space anchor of each primitive: barycentric point on its triangle."""
    corners = vertices[triangles[tri]]          # P x 3 x 3
    return np.einsum("pc,pcd->pd", bary, corners)


def local_to_global(locals_: LocalGaussians, frames: TriangleFrames,
                    anchors=None) -> GlobalGaussians:
    """Rig local primitives into world space: mu = anchor + k R mu_l,
    s = k s_l, r = quat(R) * r_l; rgb and sigma are copied unchanged.

    `anchors` are world-space anchor points (P x 3); when omitted the triangle
    centroid C is used (zero barycentric offset).
    """
    tri = locals_.tri
    if tri.size and (tri.min() < 0 or tri.max() >= frames.R.shape[0]):
        raise ValidationError("local gaussian references a triangle without a frame")
    R = frames.R[tri]
    k = frames.k[tri]
    base = frames.C[tri] if anchors is None else anchors
    mu = base + k[:, None] * np.einsum("pij,pj->pi", R, locals_.mu_l)
    s = k[:, None] * locals_.s_l
    qf = rotmat_to_quat(R)
    r = quat_mul(qf, locals_.r_l)
    return GlobalGaussians(mu=mu, s=s, r=r, rgb=locals_.rgb_l.copy(),
                           sigma=locals_.sigma_l.copy())


def local_to_global_backward(locals_: LocalGaussians, frames: TriangleFrames,
                             d_mu, d_s, d_rotmat, d_rgb, d_sigma):
    """VJP of the rigging transform.

    `d_rotmat` is the gradient with respect to the global rotation matrix
    (quat_to_rotmat of the rigged quaternion, which equals R @ rotmat(r_l)).
    Returns local-attribute gradients plus per-triangle frame gradients and
    the per-primitive anchor gradient.
    """
    tri = locals_.tri
    R = frames.R[tri]
    k = frames.k[tri]
    Rl = quat_to_rotmat(locals_.r_l)

    d_mu_l = k[:, None] * np.einsum("pji,pj->pi", R, d_mu)
    d_s_l = k[:, None] * d_s
    d_Rl = np.einsum("pji,pjk->pik", R, d_rotmat)
    d_r_l = quat_to_rotmat_vjp(locals_.r_l, d_Rl)

    Rmu = np.einsum("pij,pj->pi", R, locals_.mu_l)
    d_k_per = np.sum(d_mu * Rmu, axis=-1) + np.sum(d_s * locals_.s_l, axis=-1)
    d_R_per = k[:, None, None] * np.einsum("pi,pj->pij", d_mu, locals_.mu_l)
    d_R_per += np.einsum("pik,pjk->pij", d_rotmat, Rl)

    F = frames.R.shape[0]
    d_k_tri = np.zeros(F)
    np.add.at(d_k_tri, tri, d_k_per)
    d_R_tri = np.zeros((F, 3, 3))
    np.add.at(d_R_tri, tri, d_R_per)

    return {
        "mu_l": d_mu_l, "s_l": d_s_l, "r_l": d_r_l,
        "rgb_l": d_rgb, "sigma_l": d_sigma,
        "frame_R": d_R_tri, "frame_k": d_k_tri,
        "anchor": d_mu.copy(),
    }


def scatter_anchor_gradient(d_anchor, triangles, tri, bary, num_vertices):
    """Route anchor gradients to vertex gradients through the barycentric mix."""
    gv = np.zeros((num_vertices, 3))
    contrib = bary[:, :, None] * d_anchor[:, None, :]   # P x 3corners x 3
    np.add.at(gv, triangles[tri], contrib)
    return gv
