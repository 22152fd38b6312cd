"""Forward and backward splatting renderer: perspective projection of 3D
Gaussians to screen-space splats, 16x16 tile binning, depth-sorted
front-to-back alpha compositing, and analytic gradients for every Gaussian
attribute.

Compositing constants: T cutoff 1e-4, alpha clamp 0.999, alpha floor 1/255,
pixel low-pass 0.3 * I on the 2D covariance. Depth sort is global per frame
with ties broken by input index, so per-tile traversal order is fixed and the
renderer is deterministic for any thread count.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._kernels import ALPHA_MIN, TILE
from .errors import NumericalError, ValidationError
from .gaussians import GlobalGaussians
from .quaternions import quat_to_rotmat, quat_to_rotmat_vjp

LOWPASS = 0.3


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # 3x3 world-to-camera
    translation: np.ndarray  # 3
    near: float = 0.01

    def validate(self):
        if self.fx <= 0 or self.fy <= 0 or self.near <= 0:
            raise ValidationError("camera needs fx, fy, near > 0")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise ValidationError("camera rotation is not orthonormal")
        return self

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height, "near": self.near,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            rotation=np.asarray(d["rotation"], dtype=np.float64),
            translation=np.asarray(d["translation"], dtype=np.float64),
            near=float(d.get("near", 0.01)),
        ).validate()


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    rgb: np.ndarray
    opacity: float


@dataclass
class ImageBuffer:
    rgb: np.ndarray    # H x W x 3 in [0,1]
    alpha: np.ndarray  # H x W in [0,1]


def _cutoff_radius_sq(opacity):
    """Squared Mahalanobis radius beyond which alpha < 1/255 everywhere.

    Never below the conventional 3 sigma so that culling is at least as
    permissive as the stated 3 sigma extent.
    """
    return np.maximum(9.0, 2.0 * np.log(np.maximum(opacity, ALPHA_MIN) / ALPHA_MIN))


def project_all(gaussians: GlobalGaussians, cam: Camera):
    """Vectorized projection. Returns dict with mean2d, cov2d, depth, radius
    (pixel-space binning radius) and a validity mask (False = culled)."""
    W = cam.rotation
    t_cam = gaussians.mu @ W.T + cam.translation
    depth = t_cam[:, 2]
    valid = depth > cam.near

    z = np.where(valid, depth, 1.0)
    x, y = t_cam[:, 0], t_cam[:, 1]
    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=-1)

    Rq = quat_to_rotmat(gaussians.r)
    M = Rq * gaussians.s[:, None, :]
    Sigma = M @ np.transpose(M, (0, 2, 1))

    J = np.zeros((len(gaussians), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / z ** 2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / z ** 2
    U = J @ W
    cov2d = U @ Sigma @ np.transpose(U, (0, 2, 1))
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS

    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    lam_max = mid + np.sqrt(np.maximum(mid ** 2 - det, 0.0))
    radius = np.sqrt(_cutoff_radius_sq(gaussians.sigma) * lam_max)

    inside = (
        (mean2d[:, 0] + radius >= 0.0)
        & (mean2d[:, 0] - radius <= cam.width - 1.0)
        & (mean2d[:, 1] + radius >= 0.0)
        & (mean2d[:, 1] - radius <= cam.height - 1.0)
    )
    valid = valid & inside
    return {
        "mean2d": mean2d, "cov2d": cov2d, "depth": depth,
        "radius": radius, "valid": valid, "t_cam": t_cam,
        "Rq": Rq, "Sigma": Sigma, "U": U, "J": J,
    }


def project(gaussians: GlobalGaussians, cam: Camera, index=0):
    """Single-gaussian projection contract: Splat2D, or None when culled."""
    p = project_all(gaussians, cam.validate())
    if not p["valid"][index]:
        return None
    return Splat2D(
        mean2d=p["mean2d"][index], cov2d=p["cov2d"][index],
        depth=float(p["depth"][index]),
        rgb=gaussians.rgb[index].copy(), opacity=float(gaussians.sigma[index]),
    )


def _check_finite(gaussians: GlobalGaussians):
    for name in ("mu", "s", "r", "rgb", "sigma"):
        if not np.all(np.isfinite(getattr(gaussians, name))):
            raise NumericalError(f"non-finite gaussian attribute {name}")


def _prepare(gaussians, cam):
    """Project, sort, and bin. Returns the per-frame state shared by the
    forward and backward passes."""
    proj = project_all(gaussians, cam)
    valid = np.nonzero(proj["valid"])[0]
    # global front-to-back order; stable sort breaks depth ties by input index
    order = valid[np.argsort(proj["depth"][valid], kind="stable")]

    mean2d = proj["mean2d"][order]
    cov2d = proj["cov2d"][order]
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det,
                      cov2d[:, 0, 0] / det], axis=-1)
    radius = proj["radius"][order]

    tiles_x = (cam.width + TILE - 1) // TILE
    tiles_y = (cam.height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y

    tx0 = np.clip(np.floor((mean2d[:, 0] - radius) / TILE).astype(np.int64), 0, tiles_x - 1)
    tx1 = np.clip(np.floor((mean2d[:, 0] + radius) / TILE).astype(np.int64), 0, tiles_x - 1)
    ty0 = np.clip(np.floor((mean2d[:, 1] - radius) / TILE).astype(np.int64), 0, tiles_y - 1)
    ty1 = np.clip(np.floor((mean2d[:, 1] + radius) / TILE).astype(np.int64), 0, tiles_y - 1)

    spans_x = tx1 - tx0 + 1
    spans_y = ty1 - ty0 + 1
    counts = spans_x * spans_y
    total = int(counts.sum())
    # expand each splat into its tile span without a python loop: number the
    # entries within each splat's block, then unravel into (ty, tx) offsets
    pair_gauss = np.repeat(np.arange(len(order), dtype=np.int64), counts)
    block_start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total, dtype=np.int64) - block_start[pair_gauss]
    lx = local % spans_x[pair_gauss]
    ly = local // spans_x[pair_gauss]
    pair_tile = (ty0[pair_gauss] + ly) * tiles_x + tx0[pair_gauss] + lx
    # stable sort by tile keeps the global depth order within each tile
    perm = np.argsort(pair_tile, kind="stable")
    pair_tile = pair_tile[perm]
    pair_gauss = pair_gauss[perm]
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.add.at(offsets, pair_tile + 1, 1)
    offsets = np.cumsum(offsets)

    return {
        "order": order, "mean2d": np.ascontiguousarray(mean2d),
        "conic": np.ascontiguousarray(conic),
        "rgb": np.ascontiguousarray(np.clip(gaussians.rgb[order], 0.0, 1.0)),
        "opacity": np.ascontiguousarray(np.clip(gaussians.sigma[order], 0.0, 1.0)),
        "tile_gauss": pair_gauss, "tile_offsets": offsets,
        "tiles_x": tiles_x, "n_tiles": n_tiles, "proj": proj,
    }


def _run_tiled(fn, n_tiles, threads, args):
    if threads <= 1 or n_tiles == 1:
        fn(0, n_tiles, *args)
        return
    chunk = (n_tiles + threads - 1) // threads
    spans = [(lo, min(lo + chunk, n_tiles)) for lo in range(0, n_tiles, chunk)]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        list(ex.map(lambda s: fn(s[0], s[1], *args), spans))


def render(gaussians: GlobalGaussians, cam: Camera, background=None,
           threads=1) -> ImageBuffer:
    """Render to an image buffer; alpha = 1 - final transmittance."""
    cam.validate()
    _check_finite(gaussians)
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    out_rgb = np.zeros((cam.height, cam.width, 3))
    out_T = np.ones((cam.height, cam.width))
    if len(gaussians):
        st = _prepare(gaussians, cam)
        _run_tiled(_kernels.forward_tiles, st["n_tiles"], threads,
                   (st["tiles_x"], cam.width, cam.height, st["mean2d"], st["conic"],
                    st["rgb"], st["opacity"], st["tile_gauss"], st["tile_offsets"],
                    out_rgb, out_T))
    out_rgb += out_T[:, :, None] * bg
    return ImageBuffer(rgb=out_rgb, alpha=1.0 - out_T)


def render_backward(gaussians: GlobalGaussians, cam: Camera, d_image,
                    background=None, d_alpha=None, threads=1):
    """Analytic gradients of sum(d_image * rendered_rgb) (+ optional alpha
    cotangent) for every gaussian attribute.

    Returns dict with keys rgb, opacity (sigma), mu, s, r (quaternion) and
    rotmat (gradient wrt the 3x3 rotation matrix of r, used by the rigging
    chain). Gaussians skipped in the forward pass get zero gradient.
    """
    cam.validate()
    _check_finite(gaussians)
    d_image = np.asarray(d_image, dtype=np.float64)
    if d_image.shape != (cam.height, cam.width, 3):
        raise ValidationError(
            f"d_image shape {d_image.shape} != {(cam.height, cam.width, 3)}")
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    if d_alpha is None:
        d_alpha = np.zeros((cam.height, cam.width))
    else:
        d_alpha = np.asarray(d_alpha, dtype=np.float64)
        if d_alpha.shape != (cam.height, cam.width):
            raise ValidationError("d_alpha shape mismatch")

    N = len(gaussians)
    grads = {
        "rgb": np.zeros((N, 3)), "opacity": np.zeros(N), "mu": np.zeros((N, 3)),
        "s": np.zeros((N, 3)), "r": np.zeros((N, 4)), "rotmat": np.zeros((N, 3, 3)),
    }
    if N == 0:
        return grads
    st = _prepare(gaussians, cam)
    npair = len(st["tile_gauss"])
    pair_d_mean = np.zeros((npair, 2))
    pair_d_conic = np.zeros((npair, 3))
    pair_d_rgb = np.zeros((npair, 3))
    pair_d_op = np.zeros(npair)
    _run_tiled(_kernels.backward_tiles, st["n_tiles"], threads,
               (st["tiles_x"], cam.width, cam.height, st["mean2d"], st["conic"],
                st["rgb"], st["opacity"], bg, st["tile_gauss"], st["tile_offsets"],
                d_image, d_alpha, pair_d_mean, pair_d_conic, pair_d_rgb, pair_d_op))

    ns = len(st["order"])
    d_mean2d = np.zeros((ns, 2))
    d_conic = np.zeros((ns, 3))
    d_rgb_s = np.zeros((ns, 3))
    d_op_s = np.zeros(ns)
    np.add.at(d_mean2d, st["tile_gauss"], pair_d_mean)
    np.add.at(d_conic, st["tile_gauss"], pair_d_conic)
    np.add.at(d_rgb_s, st["tile_gauss"], pair_d_rgb)
    np.add.at(d_op_s, st["tile_gauss"], pair_d_op)

    order = st["order"]
    proj = st["proj"]
    cov2d = proj["cov2d"][order]
    A = np.stack([
        np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], axis=-1),
        np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], axis=-1),
    ], axis=1)
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    inv = np.empty_like(cov2d)
    inv[:, 0, 0] = cov2d[:, 1, 1] / det
    inv[:, 1, 1] = cov2d[:, 0, 0] / det
    inv[:, 0, 1] = inv[:, 1, 0] = -cov2d[:, 0, 1] / det
    d_cov = -inv @ A @ inv

    U = proj["U"][order]
    Sigma = proj["Sigma"][order]
    Rq = proj["Rq"][order]
    s = gaussians.s[order]
    J = proj["J"][order]
    W = cam.rotation
    t_cam = proj["t_cam"][order]

    d_Sigma = np.transpose(U, (0, 2, 1)) @ d_cov @ U
    d_U = 2.0 * d_cov @ U @ Sigma
    d_J = d_U @ W.T
    M = Rq * s[:, None, :]
    d_M = 2.0 * d_Sigma @ M
    d_Rq = d_M * s[:, None, :]
    d_s = np.einsum("nik,nik->nk", d_M, Rq)

    x, y, z = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    d_tcam = np.zeros((ns, 3))
    # pinhole mean
    d_tcam[:, 0] += d_mean2d[:, 0] * fx / z
    d_tcam[:, 1] += d_mean2d[:, 1] * fy / z
    d_tcam[:, 2] += -d_mean2d[:, 0] * fx * x / z ** 2 - d_mean2d[:, 1] * fy * y / z ** 2
    # Jacobian entries depend on the camera-space mean as well
    d_tcam[:, 0] += d_J[:, 0, 2] * (-fx / z ** 2)
    d_tcam[:, 1] += d_J[:, 1, 2] * (-fy / z ** 2)
    d_tcam[:, 2] += (
        d_J[:, 0, 0] * (-fx / z ** 2)
        + d_J[:, 0, 2] * (2 * fx * x / z ** 3)
        + d_J[:, 1, 1] * (-fy / z ** 2)
        + d_J[:, 1, 2] * (2 * fy * y / z ** 3)
    )
    d_mu = d_tcam @ W

    rgb_live = ((gaussians.rgb[order] >= 0.0) & (gaussians.rgb[order] <= 1.0))
    op_live = ((gaussians.sigma[order] >= 0.0) & (gaussians.sigma[order] <= 1.0))

    grads["rgb"][order] = np.where(rgb_live, d_rgb_s, 0.0)
    grads["opacity"][order] = np.where(op_live, d_op_s, 0.0)
    grads["mu"][order] = d_mu
    grads["s"][order] = d_s
    grads["rotmat"][order] = d_Rq
    grads["r"][order] = quat_to_rotmat_vjp(gaussians.r[order], d_Rq)
    return grads
