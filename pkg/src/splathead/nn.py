"""Neural network layers built on the autodiff tape.

Parameters live in a Params registry as named float32 arrays; each training
step creates leaves on a fresh tape via Params.leaves(). Layers are functions
from (leaf dict, prefix, inputs) to output tensors, so the same weights can be
replayed on any tape.
"""

import math

import numpy as np

from . import autodiff as ad
from .errors import ValidationError

DTYPE = np.float32


class Params:
    """Ordered registry of named parameter arrays."""

    def __init__(self):
        self.arrays = {}

    def add(self, name, array):
        if name in self.arrays:
            raise ValidationError(f"duplicate parameter name {name!r}")
        self.arrays[name] = np.asarray(array, dtype=DTYPE)
        return self.arrays[name]

    def leaves(self, tape):
        return {name: tape.leaf(arr) for name, arr in self.arrays.items()}

    def state_dict(self):
        return dict(self.arrays)

    def load_state_dict(self, d):
        for name, arr in d.items():
            if name not in self.arrays:
                raise ValidationError(f"unknown parameter {name!r} in checkpoint")
            if arr.shape != self.arrays[name].shape:
                raise ValidationError(
                    f"shape mismatch for {name!r}: {arr.shape} vs "
                    f"{self.arrays[name].shape}")
            self.arrays[name] = np.asarray(arr, dtype=DTYPE)


def xavier(rng, fan_in, fan_out, shape=None):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape or (fan_in, fan_out)).astype(DTYPE)


def init_linear(params, rng, name, d_in, d_out, zero=False):
    if zero:
        params.add(name + ".w", np.zeros((d_in, d_out)))
    else:
        params.add(name + ".w", xavier(rng, d_in, d_out))
    params.add(name + ".b", np.zeros(d_out))


def linear(p, name, x):
    return ad.add(ad.matmul(x, p[name + ".w"]), p[name + ".b"])


def init_layer_norm(params, name, d):
    params.add(name + ".g", np.ones(d))
    params.add(name + ".b", np.zeros(d))


def layer_norm(p, name, x):
    return ad.add(ad.mul(ad.layer_norm(x, axis=-1), p[name + ".g"]),
                  p[name + ".b"])


def init_attention(params, rng, name, d):
    for part in ("q", "k", "v", "o"):
        init_linear(params, rng, f"{name}.{part}", d, d)


def attention(p, name, q_in, kv_in, num_heads):
    """Multi-head scaled dot-product attention over (T, d) sequences."""
    d = q_in.data.shape[-1]
    if d % num_heads != 0:
        raise ValidationError(f"width {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    def split(t):
        T = t.data.shape[0]
        return ad.transpose(ad.reshape(t, (T, num_heads, dh)), (1, 0, 2))

    q = split(linear(p, name + ".q", q_in))
    k = split(linear(p, name + ".k", kv_in))
    v = split(linear(p, name + ".v", kv_in))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))),
                      1.0 / math.sqrt(dh))
    w = ad.softmax(scores, axis=-1)
    out = ad.matmul(w, v)
    Tq = q_in.data.shape[0]
    out = ad.reshape(ad.transpose(out, (1, 0, 2)), (Tq, d))
    return linear(p, name + ".o", out)


def init_ffn(params, rng, name, d, hidden):
    init_linear(params, rng, name + ".1", d, hidden)
    init_linear(params, rng, name + ".2", hidden, d)


def ffn(p, name, x):
    return linear(p, name + ".2", ad.gelu(linear(p, name + ".1", x)))


def init_film(params, rng, name, d_cond, d):
    # zero init: modulation starts as identity
    init_linear(params, rng, name + ".scale", d_cond, d, zero=True)
    init_linear(params, rng, name + ".shift", d_cond, d, zero=True)


def film(p, name, x, cond):
    """Feature-wise modulation x * (1 + scale(cond)) + shift(cond).

    cond is a (1, d_cond) row broadcast over the sequence."""
    T = x.data.shape[0]
    sc = ad.repeat_rows(linear(p, name + ".scale", cond), T)
    sh = ad.repeat_rows(linear(p, name + ".shift", cond), T)
    return ad.add(ad.mul(x, ad.add_const(sc, 1.0)), sh)


def sinusoidal_embedding(positions, d):
    """Fixed sin/cos embedding, shape (len(positions), d)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = positions[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if emb.shape[-1] < d:
        emb = np.pad(emb, ((0, 0), (0, d - emb.shape[-1])))
    return emb.astype(DTYPE)


def init_conv(params, rng, name, c_in, c_out, k):
    fan_in = c_in * k * k
    fan_out = c_out * k * k
    params.add(name + ".w", xavier(rng, fan_in, fan_out, (c_out, c_in, k, k)))
    params.add(name + ".b", np.zeros(c_out))


def conv(p, name, x, stride=1, pad=0):
    out = ad.conv2d(x, p[name + ".w"], stride=stride, pad=pad)
    b = ad.reshape(p[name + ".b"], (1, out.data.shape[1], 1, 1))
    return ad.add(out, b)
