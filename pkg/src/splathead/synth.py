"""Deterministic synthetic assets: a desk-scale head mesh with a grid UV
atlas, smooth blendshapes, ground-truth UV Gaussian maps, drive tracks,
cameras, and pseudo speech features with a known linear map to expressions.

Everything is seeded; identical seeds give bitwise-identical assets.
"""

import os

import numpy as np

from .errors import ValidationError
from .gaussians import UVGaussianMap
from .headmesh import CanonicalMesh, FlameParams
from .io import save_json, write_ggt, write_ppm
from .rasterizer import Camera, render

HEAD_RADIUS = 0.1
DEFAULT_K = 16


def make_head_mesh(nu=12, nv=12, num_expr=DEFAULT_K, seed=0) -> CanonicalMesh:
    """Spherical-band head whose UV atlas tiles [0,1]^2 exactly with grid
    triangles (non-overlapping, full coverage)."""
    rng = np.random.default_rng(seed)
    u = np.linspace(0.0, 1.0, nu + 1)
    v = np.linspace(0.0, 1.0, nv + 1)
    uu, vv = np.meshgrid(u, v, indexing="xy")   # vv rows, uu cols
    theta = (uu - 0.5) * 1.5 * np.pi            # azimuth, face toward +z at u=0.5
    phi = (0.15 + 0.7 * vv) * np.pi             # polar band, poles excluded

    r = HEAD_RADIUS * (1.0 + 0.08 * np.sin(2 * np.pi * uu) * np.sin(np.pi * vv))
    x = r * np.sin(phi) * np.sin(theta)
    y = r * np.cos(phi)
    z = r * np.sin(phi) * np.cos(theta)
    vertices = np.stack([x, y, z], axis=-1).reshape(-1, 3)

    def vid(i, j):
        return j * (nu + 1) + i

    tris, uvs = [], []
    for j in range(nv):
        for i in range(nu):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            tris.append([a, b, c])
            uvs.append([[u[i], v[j]], [u[i + 1], v[j]], [u[i + 1], v[j + 1]]])
            tris.append([a, c, d])
            uvs.append([[u[i], v[j]], [u[i + 1], v[j + 1]], [u[i], v[j + 1]]])
    triangles = np.asarray(tris, dtype=np.int64)
    uv_corners = np.asarray(uvs, dtype=np.float64)

    # smooth low-frequency blendshapes over the (u, v) sheet
    gu = uu.reshape(-1)
    gv = vv.reshape(-1)
    normals = vertices / np.linalg.norm(vertices, axis=-1, keepdims=True)
    basis = np.zeros((num_expr, vertices.shape[0], 3))
    for k in range(num_expr):
        fu, fv = rng.integers(1, 4, size=2)
        pu, pv = rng.uniform(0, 2 * np.pi, size=2)
        amp = 0.006 * rng.uniform(0.5, 1.0)
        profile = np.sin(fu * np.pi * gu + pu) * np.sin(fv * np.pi * gv + pv)
        direction = normals + 0.3 * rng.standard_normal(3)
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        basis[k] = amp * profile[:, None] * direction

    # eyelid slices: localized downward bumps at the two eye positions
    eyelid = np.zeros((2, vertices.shape[0], 3))
    for e, cu in enumerate((0.38, 0.62)):
        w = np.exp(-(((gu - cu) / 0.07) ** 2 + ((gv - 0.35) / 0.06) ** 2))
        eyelid[e, :, 1] = -0.004 * w

    jaw_region = gv > 0.68
    # pivot at the mouth-line height, slightly in front of the head center
    jaw_pivot = np.array([0.0, HEAD_RADIUS * np.cos((0.15 + 0.7 * 0.68) * np.pi), 0.02])

    return CanonicalMesh(
        vertices=vertices, triangles=triangles, uv_corners=uv_corners,
        blend_basis=basis, eyelid_basis=eyelid,
        jaw_region=jaw_region, jaw_pivot=jaw_pivot,
    ).validate()


def random_params(mesh: CanonicalMesh, rng, exp_scale=0.3, pose=True) -> FlameParams:
    from .quaternions import quat_normalize
    exp = exp_scale * rng.standard_normal(mesh.num_expr)
    if pose:
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        ang = rng.uniform(-0.3, 0.3)
        rot = np.concatenate([[np.cos(ang / 2)], np.sin(ang / 2) * axis])
        rot = quat_normalize(rot)
        trans = 0.02 * rng.standard_normal(3)
        jaw = float(rng.uniform(0.0, 0.25))
    else:
        rot = np.array([1.0, 0, 0, 0])
        trans = np.zeros(3)
        jaw = 0.0
    eyelids = rng.uniform(0.0, 1.0, size=2)
    return FlameParams(exp=exp, global_rot=rot, global_trans=trans,
                       jaw_angle=jaw, eyelids=eyelids)


def _smooth_field(rng, height, width, amp, waves=3):
    """Low-frequency sum of sinusoids over the texel grid, range about +-amp."""
    jj, ii = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    gu = (ii + 0.5) / width
    gv = (jj + 0.5) / height
    out = np.zeros((height, width))
    for _ in range(waves):
        fu, fv = rng.uniform(0.5, 3.0, 2)
        pu, pv = rng.uniform(0, 2 * np.pi, 2)
        out += np.sin(2 * np.pi * fu * gu + pu) * np.sin(2 * np.pi * fv * gv + pv)
    return amp * out / waves


def make_gt_uvmap(height=32, width=32, seed=0) -> UVGaussianMap:
    """Ground-truth raw UV Gaussian map: smooth color/opacity fields and
    texel-footprint scales sized so rigged gaussians tile the head surface."""
    rng = np.random.default_rng(seed)
    raw = np.zeros((height, width, 14))
    for c in range(3):
        raw[:, :, c] = _smooth_field(rng, height, width, 0.05)
    for c in range(3, 6):
        raw[:, :, c] = -1.1 + _smooth_field(rng, height, width, 0.2)
    for c in range(6, 10):
        raw[:, :, c] = _smooth_field(rng, height, width, 0.05)
    raw[:, :, 10] = 2.2 + _smooth_field(rng, height, width, 0.5)
    for c in range(11, 14):
        raw[:, :, c] = _smooth_field(rng, height, width, 1.5)
    return UVGaussianMap(data=raw)


def orbit_camera(azimuth_deg, elevation_deg=0.0, dist=0.42,
                 width=64, height=64, f=85.0) -> Camera:
    """Camera on an orbit around the origin, looking at the head center."""
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    eye = dist * np.array([np.sin(az) * np.cos(el), np.sin(el),
                           np.cos(az) * np.cos(el)])
    fwd = -eye / np.linalg.norm(eye)
    right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    t = -R @ eye
    return Camera(fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2,
                  width=width, height=height, rotation=R, translation=t)


def smooth_track(rng, num_frames, dim, scale, waves=3):
    """Smooth trajectory num_frames x dim built from random sinusoids."""
    t = np.linspace(0, 1, num_frames, endpoint=False)
    out = np.zeros((num_frames, dim))
    for d in range(dim):
        for _ in range(waves):
            f = rng.uniform(0.5, 3.0)
            p = rng.uniform(0, 2 * np.pi)
            out[:, d] += np.sin(2 * np.pi * f * t + p)
    return scale * out / waves


def make_drive_track(mesh, num_frames, rng, exp_scale=0.3, frontal=False):
    """Per-frame FlameParams with smooth trajectories. Frontal tracks keep
    the head rotation within a few degrees of identity."""
    from .quaternions import quat_normalize
    K = mesh.num_expr
    exps = smooth_track(rng, num_frames, K, exp_scale)
    jaws = 0.12 * (1.0 + smooth_track(rng, num_frames, 1, 1.0)[:, 0])
    jaws = np.clip(jaws, 0.0, 0.3)
    lids = 0.5 * (1.0 + smooth_track(rng, num_frames, 2, 0.8))
    lids = np.clip(lids, 0.0, 1.0)
    ang_scale = 0.02 if frontal else 0.25
    angs = smooth_track(rng, num_frames, 3, ang_scale)
    trans = smooth_track(rng, num_frames, 3, 0.0 if frontal else 0.01)
    out = []
    for i in range(num_frames):
        half = angs[i] / 2.0
        rot = quat_normalize(np.concatenate([[1.0], half]))
        out.append(FlameParams(exp=exps[i], global_rot=rot,
                               global_trans=trans[i], jaw_angle=float(jaws[i]),
                               eyelids=lids[i]))
    return out


def make_identity_dataset(mesh, uvmap, num_frames, seed, width=64, height=64,
                          frontal_fraction=0.5, binding=None):
    """Rendered ground-truth video of one identity: per-frame params, cameras,
    images, and front-facing flags. Front-facing frames pair a near-identity
    head rotation with a frontal camera."""
    from .rig import make_binding, rig_forward
    rng = np.random.default_rng(seed)
    if binding is None:
        binding = make_binding(mesh, uvmap.height, uvmap.width)
    n_front = int(round(frontal_fraction * num_frames))
    params = (make_drive_track(mesh, n_front, rng, frontal=True)
              + make_drive_track(mesh, num_frames - n_front, rng, frontal=False))
    cams, images, front = [], [], []
    for i, p in enumerate(params):
        if i < n_front:
            az = rng.uniform(-8.0, 8.0)
        else:
            az = rng.uniform(-45.0, 45.0)
        cam = orbit_camera(az, rng.uniform(-5.0, 5.0), width=width, height=height)
        gg, _ = rig_forward(mesh, binding, uvmap, p)
        img = render(gg, cam)
        cams.append(cam)
        images.append(img)
        front.append(i < n_front)
    return {"params": params, "cameras": cams, "images": images,
            "front_facing": np.asarray(front), "binding": binding,
            "uvmap": uvmap}


AUDIO_DIM = 1280
CONTROL_DIM = 8


def audio_projection(seed=1234):
    """Fixed random lift from the smooth control space to pseudo speech
    features. The same projection is shared across all speakers."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((AUDIO_DIM, CONTROL_DIM)) / np.sqrt(CONTROL_DIM)


def speaker_style(speaker_id, K=DEFAULT_K, seed=99):
    """Per-speaker linear map control -> expression: e_t = A_s c_t + b_s."""
    rng = np.random.default_rng(seed + 1000 * speaker_id)
    A = rng.standard_normal((K, CONTROL_DIM)) / np.sqrt(CONTROL_DIM)
    b = 0.2 * rng.standard_normal(K)
    return A, b


def make_a2e_clip(speaker_id, T, rng, K=DEFAULT_K, noise=0.02, proj=None,
                  style_seed=99):
    """One synthetic clip: (audio features T x 1280, expressions T x K)."""
    if proj is None:
        proj = audio_projection()
    c = smooth_track(rng, T, CONTROL_DIM, 1.0)
    audio = c @ proj.T + noise * rng.standard_normal((T, AUDIO_DIM))
    A, b = speaker_style(speaker_id, K=K, seed=style_seed)
    exp = c @ A.T + b
    return audio.astype(np.float32), exp.astype(np.float32)


def make_a2e_dataset(num_speakers, clips_per_speaker, T, seed, K=DEFAULT_K,
                     style_seed=99):
    """List of (audio, expressions, speaker_id) synthetic clips."""
    if num_speakers < 1 or clips_per_speaker < 1 or T < 1:
        raise ValidationError("need at least one speaker, clip, and frame")
    rng = np.random.default_rng(seed)
    proj = audio_projection()
    clips = []
    for s in range(num_speakers):
        for _ in range(clips_per_speaker):
            audio, exp = make_a2e_clip(s, T, rng, K=K, proj=proj,
                                       style_seed=style_seed)
            clips.append((audio, exp, s))
    return clips


def write_a2e_dataset(path, clips, fps=25):
    os.makedirs(path, exist_ok=True)
    meta = {"fps": fps, "clips": []}
    for i, (audio, exp, sid) in enumerate(clips):
        write_ggt(os.path.join(path, f"clip{i:03d}.audio.ggt"), audio)
        write_ggt(os.path.join(path, f"clip{i:03d}.exp.ggt"), exp)
        meta["clips"].append({"index": i, "speaker_id": int(sid),
                              "frames": int(audio.shape[0])})
    save_json(os.path.join(path, "meta.json"), meta)


def read_a2e_dataset(path):
    from .io import load_json, read_ggt
    meta = load_json(os.path.join(path, "meta.json"))
    clips = []
    for entry in meta["clips"]:
        i = entry["index"]
        audio = read_ggt(os.path.join(path, f"clip{i:03d}.audio.ggt"))
        exp = read_ggt(os.path.join(path, f"clip{i:03d}.exp.ggt"))
        clips.append((audio, exp, entry["speaker_id"]))
    return clips, meta


def save_mesh(path, mesh: CanonicalMesh):
    from .io import save_checkpoint
    save_checkpoint(path, {
        "vertices": mesh.vertices, "triangles": mesh.triangles.astype(np.float32),
        "uv_corners": mesh.uv_corners, "blend_basis": mesh.blend_basis,
        "eyelid_basis": mesh.eyelid_basis,
        "jaw_region": mesh.jaw_region.astype(np.float32),
        "jaw_pivot": mesh.jaw_pivot,
    })


def load_mesh(path) -> CanonicalMesh:
    from .io import load_checkpoint
    t = load_checkpoint(path)
    return CanonicalMesh(
        vertices=t["vertices"].astype(np.float64),
        triangles=np.rint(t["triangles"]).astype(np.int64),
        uv_corners=t["uv_corners"].astype(np.float64),
        blend_basis=t["blend_basis"].astype(np.float64),
        eyelid_basis=t["eyelid_basis"].astype(np.float64),
        jaw_region=t["jaw_region"] > 0.5,
        jaw_pivot=t["jaw_pivot"].astype(np.float64),
    ).validate()


def _params_to_dict(p: FlameParams):
    return {"exp": p.exp.tolist(), "rot": p.global_rot.tolist(),
            "trans": p.global_trans.tolist(), "jaw": p.jaw_angle,
            "eyelids": p.eyelids.tolist()}


def params_from_dict(d) -> FlameParams:
    return FlameParams(exp=np.asarray(d["exp"], dtype=np.float64),
                       global_rot=np.asarray(d["rot"], dtype=np.float64),
                       global_trans=np.asarray(d["trans"], dtype=np.float64),
                       jaw_angle=float(d["jaw"]),
                       eyelids=np.asarray(d["eyelids"], dtype=np.float64))


def write_identity_dataset(path, dataset):
    """frames.json + cameras.json + frameNNN.ppm layout."""
    os.makedirs(path, exist_ok=True)
    cams = dataset["cameras"]
    frames = []
    for i, (p, cam, img, ff) in enumerate(zip(dataset["params"], cams,
                                              dataset["images"],
                                              dataset["front_facing"])):
        rec = _params_to_dict(p)
        rec["camera"] = i
        rec["front_facing"] = bool(ff)
        rec["image"] = f"frame{i:03d}.ppm"
        frames.append(rec)
        write_ppm(os.path.join(path, f"frame{i:03d}.ppm"), img.rgb)
    save_json(os.path.join(path, "frames.json"), {"frames": frames})
    save_json(os.path.join(path, "cameras.json"),
              {"cameras": [c.to_dict() for c in cams]})


def read_identity_dataset(path):
    from .io import load_json, read_ppm
    fr = load_json(os.path.join(path, "frames.json"))["frames"]
    cams = [Camera.from_dict(c) for c in
            load_json(os.path.join(path, "cameras.json"))["cameras"]]
    params, images, front, cam_list = [], [], [], []
    for rec in fr:
        params.append(params_from_dict(rec))
        images.append(read_ppm(os.path.join(path, rec["image"])))
        front.append(rec["front_facing"])
        cam_list.append(cams[rec["camera"]])
    return {"params": params, "cameras": cam_list, "images": images,
            "front_facing": np.asarray(front)}
