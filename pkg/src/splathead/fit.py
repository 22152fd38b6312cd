"""Appearance fitting: photometric losses, Adam, the identity generator
prior, per-identity adaptation schedules, the expression-conditioned color
network, and background compositing.
"""

import sys
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation, distance_transform_cdt

from . import autodiff as ad
from . import nn
from .errors import ValidationError
from .gaussians import GlobalGaussians
from .headmesh import FlameParams
from .quaternions import quat_normalize
from .rasterizer import ImageBuffer, render, render_backward
from .rig import rig_backward, rig_forward
from .ssim import ssim, ssim_backward


@dataclass(frozen=True)
class LossWeights:
    l1: float = 0.8
    ssim: float = 0.2
    vgg: float = 0.0
    mu: float = 0.01

    def __post_init__(self):
        for name in ("l1", "ssim", "vgg", "mu"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"loss weight {name} must be finite and >= 0")


def psnr(a, b):
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)


def loss_total(render_rgb, target_rgb, mu_l, w: LossWeights,
               perceptual_hook=None):
    """Weighted photometric + position-regularizer loss.

    Returns (scalar, d_render H x W x 3, d_mu_l P x 3). The perceptual hook,
    when given, must return (value, d_render) and is scaled by w.vgg."""
    render_rgb = np.asarray(render_rgb, dtype=np.float64)
    target_rgb = np.asarray(target_rgb, dtype=np.float64)
    if render_rgb.shape != target_rgb.shape:
        raise ValidationError(
            f"image size mismatch: {render_rgb.shape} vs {target_rgb.shape}")
    diff = render_rgb - target_rgb
    n = diff.size
    total = w.l1 * float(np.mean(np.abs(diff)))
    d_render = w.l1 * np.sign(diff) / n

    if w.ssim > 0:
        total += w.ssim * (1.0 - ssim(render_rgb, target_rgb))
        d_render = d_render - w.ssim * ssim_backward(render_rgb, target_rgb)

    if w.vgg > 0 and perceptual_hook is not None:
        pv, pg = perceptual_hook(render_rgb, target_rgb)
        total += w.vgg * pv
        d_render = d_render + w.vgg * pg

    mu_l = np.asarray(mu_l, dtype=np.float64)
    d_mu_l = np.zeros_like(mu_l)
    if w.mu > 0 and mu_l.size:
        norms = np.linalg.norm(mu_l, axis=-1)
        total += w.mu * float(np.mean(norms))
        nz = norms > 0
        d_mu_l[nz] = w.mu * mu_l[nz] / (norms[nz, None] * mu_l.shape[0])
    return total, d_render, d_mu_l


class AdamState:
    """Per-parameter first/second moment state, keyed by parameter name."""

    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = 0


def adam_step(params, grads, state: AdamState, lr,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update applied in sorted key order, in place."""
    state.t += 1
    t = state.t
    for name in sorted(params):
        p = params[name]
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ValidationError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p, dtype=np.float64)
            state.v[name] = np.zeros_like(p, dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    return params


COLOR_DELTA_BOUND = 0.2
COLOR_HIDDEN = 32


class ColorMLP:
    """Expression/pose-conditioned color correction: rgb + bounded delta.

    Input per gaussian: base rgb (3) + expression (K) + pose (jaw, two
    eyelids, global quaternion = 7). Zero-initialized output layer, so a fresh
    network is the identity map."""

    def __init__(self, num_expr, seed=0):
        self.num_expr = num_expr
        self.params = nn.Params()
        rng = np.random.default_rng(seed)
        d_in = 3 + num_expr + 7
        nn.init_linear(self.params, rng, "c1", d_in, COLOR_HIDDEN)
        nn.init_linear(self.params, rng, "c2", COLOR_HIDDEN, COLOR_HIDDEN)
        nn.init_linear(self.params, rng, "c3", COLOR_HIDDEN, 3, zero=True)

    def cond_vector(self, params: FlameParams):
        return np.concatenate([params.exp, [params.jaw_angle], params.eyelids,
                               params.global_rot]).astype(np.float32)

    def forward(self, p, rgb_t, cond):
        """Tape forward: rgb_t is (P, 3), cond a (K+7,) numpy vector."""
        P = rgb_t.data.shape[0]
        tape = rgb_t.tape
        cond_t = tape.leaf(np.repeat(cond[None, :], P, axis=0))
        x = ad.concat([rgb_t, cond_t], axis=1)
        h = ad.gelu(nn.linear(p, "c1", x))
        h = ad.gelu(nn.linear(p, "c2", h))
        delta = ad.scale(ad.tanh(nn.linear(p, "c3", h)), COLOR_DELTA_BOUND)
        return ad.add(rgb_t, delta)


def color_apply(mlp: ColorMLP, base_rgb, exp, pose):
    """Adjusted rgb, clamped to [0, 1]. `pose` is the 7-vector (jaw,
    eyelids, quaternion)."""
    exp = np.asarray(exp, dtype=np.float32)
    pose = np.asarray(pose, dtype=np.float32)
    if exp.shape != (mlp.num_expr,) or pose.shape != (7,):
        raise ValidationError(
            f"conditioning shape mismatch: exp {exp.shape}, pose {pose.shape}")
    tape = ad.Tape()
    p = mlp.params.leaves(tape)
    rgb_t = tape.leaf(np.asarray(base_rgb, dtype=np.float32))
    out = mlp.forward(p, rgb_t, np.concatenate([exp, pose]))
    return np.clip(out.data.astype(np.float64), 0.0, 1.0)


def composite(render_rgb, alpha, i_ori, mask, radius, feather=2):
    """Blend the rendered head over the original frame inside the dilated
    face mask; bitwise identity outside it. `feather` pixels of linear ramp
    soften the dilated boundary."""
    render_rgb = np.asarray(render_rgb, dtype=np.float64)
    i_ori = np.asarray(i_ori, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    mask = np.asarray(mask)
    if render_rgb.shape != i_ori.shape or alpha.shape != mask.shape \
            or alpha.shape != render_rgb.shape[:2]:
        raise ValidationError(
            f"composite resolution mismatch: render {render_rgb.shape}, "
            f"original {i_ori.shape}, alpha {alpha.shape}, mask {mask.shape}")
    if mask.dtype != bool and not np.all((mask == 0) | (mask == 1)):
        raise ValidationError("face mask must be binary")
    mask = mask.astype(bool)
    if radius > 0:
        dil = binary_dilation(mask, structure=np.ones((2 * radius + 1,) * 2))
    else:
        dil = mask
    if feather > 0:
        dist = distance_transform_cdt(dil, metric="chessboard").astype(np.float64)
        wgt = np.clip(dist / (feather + 1), 0.0, 1.0)
    else:
        wgt = dil.astype(np.float64)
    blend = render_rgb * alpha[:, :, None] + i_ori * (1.0 - alpha[:, :, None])
    out = np.where((wgt > 0)[:, :, None],
                   wgt[:, :, None] * blend + (1.0 - wgt[:, :, None]) * i_ori,
                   i_ori)
    return ImageBuffer(rgb=out, alpha=np.where(dil, alpha, 0.0))


GEN_INPUT = 64


class IdentityGenerator:
    """Conv encoder/decoder mapping a 64 x 64 x 3 reference image to an
    H x W x 14 raw UV Gaussian map."""

    def __init__(self, out_hw=(32, 32), seed=0):
        H, W = out_hw
        if H != W or H & (H - 1) or H < 8:
            raise ValidationError(
                f"generator output must be square power-of-two >= 8, got {out_hw}")
        self.out_hw = out_hw
        self.params = nn.Params()
        rng = np.random.default_rng(seed)
        chans = [3, 24, 48, 96, 96]
        for i in range(4):
            nn.init_conv(self.params, rng, f"enc{i}", chans[i], chans[i + 1], 3)
        # decoder: upsample from 4x4 to the map resolution
        self.n_up = int(np.log2(H // 4))
        dec_chans = [96, 64, 32, 16, 16][: self.n_up + 1]
        for i in range(self.n_up):
            nn.init_conv(self.params, rng, f"dec{i}", dec_chans[i],
                         dec_chans[i + 1], 3)
        nn.init_conv(self.params, rng, "out", dec_chans[self.n_up], 14, 1)
        # start from benign texels: unit-ish scales, opacity ~0.9, gray color
        bias = np.zeros(14, dtype=np.float32)
        bias[3:6] = -1.1
        bias[10] = 2.2
        self.params.arrays["out.b"] = bias

    def num_params(self):
        return sum(a.size for a in self.params.arrays.values())

    def forward(self, p, image_t):
        """image_t: tape tensor (1, 3, 64, 64) -> (H, W, 14) raw map tensor."""
        h = image_t
        for i in range(4):
            h = ad.gelu(nn.conv(p, f"enc{i}", h, stride=2, pad=1))
        for i in range(self.n_up):
            h = ad.gelu(nn.conv(p, f"dec{i}", ad.upsample2d(h), pad=1))
        out = nn.conv(p, "out", h)                   # (1, 14, H, W)
        H, W = self.out_hw
        return ad.reshape(ad.transpose(out, (0, 2, 3, 1)), (H, W, 14))

    def predict(self, image):
        """Numpy convenience: image H x W x 3 in [0,1] -> raw map H x W x 14."""
        tape = ad.Tape()
        p = self.params.leaves(tape)
        t = tape.leaf(_to_nchw(image))
        return self.forward(p, t).data.astype(np.float64)


def _to_nchw(image):
    image = np.asarray(image, dtype=np.float32)
    if image.shape != (GEN_INPUT, GEN_INPUT, 3):
        raise ValidationError(
            f"generator input must be {GEN_INPUT} x {GEN_INPUT} x 3, "
            f"got {image.shape}")
    return (image - 0.5).transpose(2, 0, 1)[None]


def front_facing_mask(params_list, cameras, max_angle_deg=10.0):
    """Frames whose tracked head rotation is within the angle of the camera
    optical axis (head forward is +z in mesh space)."""
    from .quaternions import quat_to_rotmat
    out = []
    for p, cam in zip(params_list, cameras):
        fwd_world = quat_to_rotmat(p.global_rot) @ np.array([0.0, 0.0, 1.0])
        cam_axis = -cam.rotation[2]     # toward the camera, world frame
        cosang = float(fwd_world @ cam_axis) / (
            np.linalg.norm(fwd_world) * np.linalg.norm(cam_axis))
        out.append(np.degrees(np.arccos(np.clip(cosang, -1, 1))) <= max_angle_deg)
    return np.asarray(out)


def photometric_step(mesh, binding, uv_raw, params, cam, target, weights,
                     color_mlp=None, threads=1):
    """One forward/backward through rig -> render -> loss.

    Returns (loss, d_uv_raw, d_params, mlp_grads or None, cache)."""
    gg, cache = rig_forward(mesh, binding, uv_raw, params)
    mlp_tape = mlp_leaves = rgb_out = None
    if color_mlp is not None:
        mlp_tape = ad.Tape()
        mlp_leaves = color_mlp.params.leaves(mlp_tape)
        cond = color_mlp.cond_vector(params)
        rgb_t = mlp_tape.leaf(gg.rgb.astype(np.float32))
        rgb_out = color_mlp.forward(mlp_leaves, rgb_t, cond)
        gg = GlobalGaussians(mu=gg.mu, s=gg.s, r=gg.r,
                             rgb=np.clip(rgb_out.data.astype(np.float64), 0, 1),
                             sigma=gg.sigma)
    img = render(gg, cam, threads=threads)
    loss, d_img, d_mu_l = loss_total(img.rgb, target, cache.locals_.mu_l,
                                     weights)
    grads = render_backward(gg, cam, d_img, threads=threads)
    d_rgb = grads["rgb"]
    mlp_grads = None
    if color_mlp is not None:
        live = (rgb_out.data > 0) & (rgb_out.data < 1)
        mlp_tape.backward(rgb_out, seed=np.where(live, d_rgb, 0.0))
        mlp_grads = {n: mlp_tape.grad(t) for n, t in mlp_leaves.items()}
        d_rgb = mlp_tape.grad(rgb_t).astype(np.float64)
    d_uv, d_params, _, _ = rig_backward(
        mesh, binding, cache, params, d_mu=grads["mu"], d_s=grads["s"],
        d_rotmat=grads["rotmat"], d_rgb=d_rgb, d_sigma=grads["opacity"],
        map_shape=uv_raw.shape[:2], d_mu_l_extra=d_mu_l)
    return loss, d_uv, d_params, mlp_grads, cache


@dataclass
class PriorConfig:
    steps: int = 500
    lr: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    threads: int = 1
    log_every: int = 50


def train_e2v_prior(identities, mesh, binding, gen: IdentityGenerator,
                    config: PriorConfig, log=None):
    """Self-supervised prior: per step pick an identity, a front-facing
    source frame and a random target frame; the generator must predict a UV
    map from the source that reenacts the target under its tracked
    parameters. Returns the per-step loss history."""
    usable = []
    for ident in identities:
        front = np.nonzero(ident["front_facing"])[0]
        if len(ident["params"]) < 2 or front.size == 0:
            print("warning: skipping identity without a usable frame pair",
                  file=sys.stderr)
            continue
        usable.append((ident, front))
    if not usable:
        raise ValidationError("no identity has >= 2 frames with a front-facing source")
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    history = []
    for step in range(config.steps):
        ident, front = usable[rng.integers(len(usable))]
        si = int(front[rng.integers(front.size)])
        ti = int(rng.integers(len(ident["params"])))
        tape = ad.Tape()
        leaves = gen.params.leaves(tape)
        src = ident["images"][si]
        src_rgb = src.rgb if isinstance(src, ImageBuffer) else src
        m_t = gen.forward(leaves, tape.leaf(_to_nchw(src_rgb)))
        uv_raw = m_t.data.astype(np.float64)
        tgt = ident["images"][ti]
        tgt_rgb = tgt.rgb if isinstance(tgt, ImageBuffer) else tgt
        loss, d_uv, _, _, _ = photometric_step(
            mesh, binding, uv_raw, ident["params"][ti], ident["cameras"][ti],
            tgt_rgb, config.weights, threads=config.threads)
        tape.backward(m_t, seed=d_uv)
        grads = {n: tape.grad(t) for n, t in leaves.items()}
        adam_step(gen.params.arrays, grads, state, config.lr)
        history.append(loss)
        if log and step % config.log_every == 0:
            log(step, loss)
    return history


@dataclass
class AdaptationSchedule:
    phase1_steps: int = 90
    phase2_steps: int = 210
    lr_phase1: float = 5e-3
    lr_phase2: float = 2e-3
    lr_flame: float = 1e-4

    def __post_init__(self):
        if self.phase1_steps < 0 or self.phase2_steps < 0:
            raise ValidationError("schedule step counts must be >= 0")

    @classmethod
    def from_total(cls, total_steps, **kw):
        # 30% texel-only warmup, 70% joint refinement
        p1 = int(round(0.3 * total_steps))
        return cls(phase1_steps=p1, phase2_steps=total_steps - p1, **kw)


def _flame_vector(p: FlameParams):
    return {"exp": p.exp.copy(), "rot": p.global_rot.copy(),
            "trans": p.global_trans.copy(), "jaw": np.array([p.jaw_angle]),
            "eyelids": p.eyelids.copy()}


def _flame_from_vector(v) -> FlameParams:
    return FlameParams(exp=v["exp"], global_rot=v["rot"],
                       global_trans=v["trans"], jaw_angle=float(v["jaw"][0]),
                       eyelids=v["eyelids"])


def adapt_identity(dataset, mesh, binding, init_uv_raw,
                   schedule: AdaptationSchedule, seed=0, threads=1,
                   use_color_mlp=True, weights=None, log=None):
    """Customized adaptation of one identity.

    Phase 1 freezes all drive parameters and optimizes texels only; phase 2
    jointly refines texels, per-frame drive parameters, and the color
    network. No position regularizer in this stage. Returns a dict with the
    adapted map, refined params, color network, and the loss history."""
    n_frames = len(dataset["params"])
    if n_frames == 0 or len(dataset["cameras"]) != n_frames \
            or len(dataset["images"]) != n_frames:
        raise ValidationError(
            "every frame needs tracked params, a camera, and an image")
    if weights is None:
        weights = LossWeights(mu=0.0)
    uv_raw = np.array(init_uv_raw, dtype=np.float64)
    flame = [_flame_vector(p) for p in dataset["params"]]
    mlp = ColorMLP(mesh.num_expr, seed=seed) if use_color_mlp else None
    rng = np.random.default_rng(seed)
    history = []

    def target_rgb(i):
        img = dataset["images"][i]
        return img.rgb if isinstance(img, ImageBuffer) else img

    state1 = AdamState()
    for step in range(schedule.phase1_steps):
        i = int(rng.integers(n_frames))
        loss, d_uv, _, _, _ = photometric_step(
            mesh, binding, uv_raw, dataset["params"][i],
            dataset["cameras"][i], target_rgb(i), weights, threads=threads)
        adam_step({"uv": uv_raw}, {"uv": d_uv}, state1, schedule.lr_phase1)
        history.append(loss)
        if log and step % 50 == 0:
            log("phase1", step, loss)

    state2 = AdamState()
    flame_states = [AdamState() for _ in range(n_frames)]
    for step in range(schedule.phase2_steps):
        i = int(rng.integers(n_frames))
        params_i = _flame_from_vector(flame[i])
        loss, d_uv, d_params, mlp_grads, _ = photometric_step(
            mesh, binding, uv_raw, params_i, dataset["cameras"][i],
            target_rgb(i), weights, color_mlp=mlp, threads=threads)
        upd = {"uv": uv_raw}
        g = {"uv": d_uv}
        if mlp is not None:
            for n, arr in mlp.params.arrays.items():
                upd["mlp." + n] = arr
                g["mlp." + n] = mlp_grads[n]
        adam_step(upd, g, state2, schedule.lr_phase2)
        fg = {"exp": d_params["exp"], "rot": d_params["global_rot"],
              "trans": d_params["global_trans"],
              "jaw": np.atleast_1d(d_params["jaw_angle"]),
              "eyelids": d_params["eyelids"]}
        adam_step(flame[i], fg, flame_states[i], schedule.lr_flame)
        flame[i]["rot"] = quat_normalize(flame[i]["rot"])
        history.append(loss)
        if log and step % 50 == 0:
            log("phase2", step, loss)

    return {"uv_raw": uv_raw,
            "params": [_flame_from_vector(v) for v in flame],
            "color_mlp": mlp, "history": history}
