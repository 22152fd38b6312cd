"""Quaternion utilities (w, x, y, z convention) with vector-Jacobian products.

All functions accept arrays with arbitrary leading batch dimensions; the
quaternion lives on the last axis (size 4), rotation matrices on the last two
axes (3x3). The *_vjp helpers back-propagate through the normalization that
`quat_to_rotmat` applies, so raw (unnormalized) quaternion parameters can be
optimized directly.
"""

import numpy as np


def quat_normalize(q):
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / n


def quat_normalize_vjp(q, d_unit):
    """d(q/|q|)^T applied to d_unit, as a function of the raw q."""
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / n
    proj = np.sum(u * d_unit, axis=-1, keepdims=True)
    return (d_unit - u * proj) / n


def quat_mul(p, q):
    """Hamilton product p * q."""
    pw, px, py, pz = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    qw, qx, qy, qz = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ],
        axis=-1,
    )


def quat_mul_vjp(p, q, g):
    """Gradients (d_p, d_q) of sum(g * (p*q)) -- the product is bilinear."""
    gw, gx, gy, gz = g[..., 0], g[..., 1], g[..., 2], g[..., 3]
    pw, px, py, pz = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    qw, qx, qy, qz = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    d_p = np.stack(
        [
            gw * qw + gx * qx + gy * qy + gz * qz,
            -gw * qx + gx * qw + gy * qz - gz * qy,
            -gw * qy - gx * qz + gy * qw + gz * qx,
            -gw * qz + gx * qy - gy * qx + gz * qw,
        ],
        axis=-1,
    )
    d_q = np.stack(
        [
            gw * pw + gx * px + gy * py + gz * pz,
            -gw * px + gx * pw - gy * pz + gz * py,
            -gw * py + gx * pz + gy * pw - gz * px,
            -gw * pz - gx * py + gy * px + gz * pw,
        ],
        axis=-1,
    )
    return d_p, d_q


def _unit_quat_to_rotmat(u):
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    R = np.empty(u.shape[:-1] + (3, 3), dtype=u.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat(q):
    """Rotation matrix of q; q is normalized internally."""
    return _unit_quat_to_rotmat(quat_normalize(q))


def quat_to_rotmat_vjp(q, dR):
    """Gradient of sum(dR * quat_to_rotmat(q)) with respect to the raw q."""
    u = quat_normalize(q)
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    G = dR
    dw = 2 * (
        z * (G[..., 1, 0] - G[..., 0, 1])
        + y * (G[..., 0, 2] - G[..., 2, 0])
        + x * (G[..., 2, 1] - G[..., 1, 2])
    )
    dx = (
        2 * y * (G[..., 0, 1] + G[..., 1, 0])
        + 2 * z * (G[..., 0, 2] + G[..., 2, 0])
        - 4 * x * (G[..., 1, 1] + G[..., 2, 2])
        + 2 * w * (G[..., 2, 1] - G[..., 1, 2])
    )
    dy = (
        -4 * y * (G[..., 0, 0] + G[..., 2, 2])
        + 2 * x * (G[..., 0, 1] + G[..., 1, 0])
        + 2 * w * (G[..., 0, 2] - G[..., 2, 0])
        + 2 * z * (G[..., 1, 2] + G[..., 2, 1])
    )
    dz = (
        -4 * z * (G[..., 0, 0] + G[..., 1, 1])
        + 2 * w * (G[..., 1, 0] - G[..., 0, 1])
        + 2 * x * (G[..., 0, 2] + G[..., 2, 0])
        + 2 * y * (G[..., 1, 2] + G[..., 2, 1])
    )
    d_unit = np.stack([dw, dx, dy, dz], axis=-1)
    return quat_normalize_vjp(q, d_unit)


def rotmat_to_quat(R):
    """Unit quaternion of a rotation matrix (w >= 0), batched, branch-stable."""
    R = np.asarray(R)
    batch = R.shape[:-2]
    Rf = R.reshape((-1, 3, 3))
    q = np.empty((Rf.shape[0], 4), dtype=R.dtype)
    for i in range(Rf.shape[0]):
        m = Rf[i]
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            q[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q[i] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] >= m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q[i] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q[i] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        if q[i, 0] < 0:
            q[i] = -q[i]
    return q.reshape(batch + (4,))


def random_unit_quat(rng, shape=()):
    q = rng.standard_normal(shape + (4,))
    return quat_normalize(q)
