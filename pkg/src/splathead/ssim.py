"""Structural similarity with an 11x11 Gaussian window and analytic gradient.

Statistics are computed with 'valid' windows only, so window weights always
sum to one and constant images hit the closed-form constant-patch value
exactly. The gradient wrt the first image is derived through the convolution
adjoints (a 'full' convolution with the symmetric window).
"""

import numpy as np
from scipy.signal import convolve2d

from .errors import ValidationError

WIN = 11
SIGMA = 1.5
K1 = 0.01
K2 = 0.03
C1 = (K1 * 1.0) ** 2
C2 = (K2 * 1.0) ** 2


def _window():
    r = np.arange(WIN) - (WIN - 1) / 2.0
    g = np.exp(-0.5 * (r / SIGMA) ** 2)
    g /= g.sum()
    return np.outer(g, g)


_W = _window()


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"resolution mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.ndim != 3:
        raise ValidationError(f"expected HxW or HxWxC images, got shape {a.shape}")
    if a.shape[0] < WIN or a.shape[1] < WIN:
        raise ValidationError(
            f"image {a.shape[:2]} smaller than the {WIN}x{WIN} window")
    return a, b


def _stats(x, y):
    mu1 = convolve2d(x, _W, mode="valid")
    mu2 = convolve2d(y, _W, mode="valid")
    s11 = convolve2d(x * x, _W, mode="valid") - mu1 * mu1
    s22 = convolve2d(y * y, _W, mode="valid") - mu2 * mu2
    s12 = convolve2d(x * y, _W, mode="valid") - mu1 * mu2
    return mu1, mu2, s11, s22, s12


def _ssim_map(mu1, mu2, s11, s22, s12):
    A1 = 2.0 * mu1 * mu2 + C1
    A2 = 2.0 * s12 + C2
    B1 = mu1 * mu1 + mu2 * mu2 + C1
    B2 = s11 + s22 + C2
    return A1 * A2 / (B1 * B2), (A1, A2, B1, B2)


def ssim(a, b):
    """Mean local SSIM in [-1, 1], per channel averaged."""
    a, b = _check(a, b)
    total = 0.0
    for c in range(a.shape[2]):
        m, _ = _ssim_map(*_stats(a[:, :, c], b[:, :, c]))
        total += m.mean()
    return total / a.shape[2]


def ssim_backward(a, b):
    """d ssim(a, b) / d a, same shape as a."""
    a, b = _check(a, b)
    grad = np.zeros_like(a)
    for c in range(a.shape[2]):
        x = a[:, :, c]
        y = b[:, :, c]
        mu1, mu2, s11, s22, s12 = _stats(x, y)
        m, (A1, A2, B1, B2) = _ssim_map(mu1, mu2, s11, s22, s12)
        G = np.full(m.shape, 1.0 / (m.size * a.shape[2]))
        dA1 = G * A2 / (B1 * B2)
        dA2 = G * A1 / (B1 * B2)
        dB1 = -G * m / B1
        dB2 = -G * m / B2
        # window-level gradients wrt mu1, s11, s12
        g_s11 = dB2
        g_s12 = 2.0 * dA2
        g_mu1 = 2.0 * mu2 * dA1 + 2.0 * mu1 * dB1 \
            - 2.0 * mu1 * g_s11 - mu2 * g_s12
        # adjoint of a 'valid' convolution with a symmetric window
        adj = lambda f: convolve2d(f, _W, mode="full")
        grad[:, :, c] = adj(g_mu1) + 2.0 * x * adj(g_s11) + y * adj(g_s12)
    return grad
