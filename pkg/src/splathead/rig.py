"""Composition of the full drive chain: raw UV texels + drive parameters ->
deformed mesh -> triangle frames -> world-space gaussians, with the matching
vector-Jacobian product used by the fitting loops.
"""

from dataclasses import dataclass

import numpy as np

from .gaussians import (
    LocalGaussians,
    UVBinding,
    UVGaussianMap,
    anchor_points,
    compute_binding,
    decode_texels,
    decode_texels_backward,
    local_to_global,
    local_to_global_backward,
    scatter_anchor_gradient,
)
from .headmesh import (
    CanonicalMesh,
    FlameParams,
    deform,
    deform_backward,
    triangle_frames,
    triangle_frames_backward,
)


@dataclass
class RigCache:
    """Intermediates of rig_forward needed by rig_backward."""

    raw: np.ndarray          # P x 14 texels actually bound
    locals_: LocalGaussians
    vertices: np.ndarray
    frames: object
    anchors: np.ndarray


def rig_forward(mesh: CanonicalMesh, binding: UVBinding, uv_raw,
                params: FlameParams):
    """Drive the rig and return (GlobalGaussians, RigCache).

    `uv_raw` is the H x W x 14 raw texel array (a UVGaussianMap is accepted)."""
    if isinstance(uv_raw, UVGaussianMap):
        uv_raw = uv_raw.data
    raw = np.asarray(uv_raw, dtype=np.float64)[binding.rows, binding.cols]
    att = decode_texels(raw)
    lg = LocalGaussians(
        mu_l=att["mu_l"], s_l=att["s_l"], r_l=att["r_l"],
        rgb_l=att["rgb_l"], sigma_l=att["sigma_l"],
        tri=binding.tri, uv=binding.uv, bary=binding.bary,
    )
    verts = deform(mesh, params)
    frames = triangle_frames(verts, mesh.triangles)
    anchors = anchor_points(verts, mesh.triangles, lg.tri, lg.bary)
    gg = local_to_global(lg, frames, anchors)
    cache = RigCache(raw=raw, locals_=lg, vertices=verts, frames=frames,
                     anchors=anchors)
    return gg, cache


def rig_backward(mesh: CanonicalMesh, binding: UVBinding, cache: RigCache,
                 params: FlameParams, d_mu, d_s, d_rotmat, d_rgb, d_sigma,
                 map_shape, d_mu_l_extra=None):
    """VJP of rig_forward. Returns (d_uv_raw H x W x 14, d_params dict,
    d_rgb_l, d_sigma_l) where the rgb/sigma local gradients are also folded
    into d_uv_raw (exposed separately for the color network hook).

    `d_mu_l_extra` adds a direct cotangent on the decoded local positions
    (used by the position regularizer)."""
    lg = cache.locals_
    l2g = local_to_global_backward(lg, cache.frames, d_mu, d_s, d_rotmat,
                                   d_rgb, d_sigma)
    if d_mu_l_extra is not None:
        l2g["mu_l"] = l2g["mu_l"] + d_mu_l_extra
    d_raw = decode_texels_backward(cache.raw, l2g["mu_l"], l2g["s_l"],
                                   l2g["r_l"], l2g["sigma_l"], l2g["rgb_l"])
    H, W = map_shape
    d_uv = np.zeros((H, W, 14))
    d_uv[binding.rows, binding.cols] = d_raw

    gv = triangle_frames_backward(cache.vertices, mesh.triangles,
                                  d_R=l2g["frame_R"], d_k=l2g["frame_k"])
    gv += scatter_anchor_gradient(l2g["anchor"], mesh.triangles, lg.tri,
                                  lg.bary, mesh.num_vertices)
    d_params = deform_backward(mesh, params, gv)
    return d_uv, d_params, l2g["rgb_l"], l2g["sigma_l"]


def make_binding(mesh: CanonicalMesh, height, width) -> UVBinding:
    return compute_binding(mesh, height, width)
