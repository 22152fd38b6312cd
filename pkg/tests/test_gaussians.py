import numpy as np
import pytest

from splathead.errors import ValidationError
from splathead.gaussians import (
    GlobalGaussians,
    UVGaussianMap,
    anchor_points,
    bind,
    compute_binding,
    decode_texels,
    decode_texels_backward,
    encode_texels,
    local_to_global,
    local_to_global_backward,
    scatter_anchor_gradient,
)
from splathead.headmesh import FlameParams, deform, triangle_frames
from splathead.quaternions import quat_normalize, quat_to_rotmat, rotmat_to_quat
from splathead.synth import make_head_mesh, random_params

from util import brute_force_uv_lookup, central_diff, random_rigid, square_atlas_mesh


class TestDecode:
    def test_zero_texel_defaults(self):
        att = decode_texels(np.zeros(14))
        np.testing.assert_array_equal(att["mu_l"], np.zeros(3))
        np.testing.assert_allclose(att["s_l"], np.ones(3))
        np.testing.assert_allclose(att["r_l"], [1, 0, 0, 0])
        assert att["sigma_l"] == pytest.approx(0.5)
        np.testing.assert_allclose(att["rgb_l"], [0.5] * 3)

    def test_opacity_saturates(self):
        raw = np.zeros(14)
        raw[10] = 20.0
        assert decode_texels(raw)["sigma_l"] == pytest.approx(1.0, abs=1e-6)

    def test_encode_decode_round_trip(self):
        rng = np.random.default_rng(0)
        raw = rng.standard_normal((5, 14))
        att = decode_texels(raw)
        raw2 = encode_texels(att["mu_l"], att["s_l"], att["r_l"],
                             att["sigma_l"], att["rgb_l"])
        att2 = decode_texels(raw2)
        for key in att:
            np.testing.assert_allclose(att2[key], att[key], atol=1e-6)

    def test_non_finite_rejected(self):
        raw = np.zeros(14)
        raw[3] = np.nan
        with pytest.raises(ValidationError):
            decode_texels(raw)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        raw = rng.standard_normal((4, 14))
        cot = {k: rng.standard_normal(np.shape(v))
               for k, v in decode_texels(raw).items()}
        d_raw = decode_texels_backward(raw, cot["mu_l"], cot["s_l"], cot["r_l"],
                                       cot["sigma_l"], cot["rgb_l"])

        def loss(x):
            a = decode_texels(x)
            return float(sum(np.sum(cot[k] * a[k]) for k in cot))

        fd = central_diff(loss, raw.copy())
        np.testing.assert_allclose(d_raw, fd, atol=1e-5)


class TestBind:
    def test_full_cover_2x2(self):
        mesh = square_atlas_mesh()
        uvmap = UVGaussianMap(np.zeros((2, 2, 14)))
        lg = bind(uvmap, mesh)
        assert len(lg) == 4
        for p in range(4):
            want = brute_force_uv_lookup(mesh, lg.uv[p])
            assert want is not None and want[0] == lg.tri[p]
            np.testing.assert_allclose(lg.bary[p], want[1], atol=1e-9)

    def test_no_coverage_gives_empty(self):
        mesh = square_atlas_mesh()
        # shrink the atlas into a corner away from all texel centers
        small = mesh.uv_corners * 0.2
        mesh2 = type(mesh)(vertices=mesh.vertices, triangles=mesh.triangles,
                           uv_corners=small, blend_basis=mesh.blend_basis,
                           eyelid_basis=mesh.eyelid_basis,
                           jaw_region=mesh.jaw_region, jaw_pivot=mesh.jaw_pivot)
        uvmap = UVGaussianMap(np.zeros((2, 2, 14)))
        lg = bind(uvmap, mesh2)
        assert len(lg) == 0

    def test_doubling_resolution_matches_oracle_recount(self):
        mesh = make_head_mesh(nu=4, nv=4, num_expr=4, seed=2)
        for H in (8, 16):
            binding = compute_binding(mesh, H, H)
            count = 0
            for j in range(H):
                for i in range(H):
                    uv = np.array([(i + 0.5) / H, (j + 0.5) / H])
                    if brute_force_uv_lookup(mesh, uv) is not None:
                        count += 1
            assert len(binding.rows) == count

    def test_bind_deterministic(self):
        mesh = make_head_mesh(nu=4, nv=4, num_expr=4, seed=2)
        rng = np.random.default_rng(3)
        uvmap = UVGaussianMap(rng.standard_normal((8, 8, 14)))
        a = bind(uvmap, mesh)
        b = bind(uvmap, mesh)
        for field in ("mu_l", "s_l", "r_l", "rgb_l", "sigma_l", "tri", "uv", "bary"):
            np.testing.assert_array_equal(getattr(a, field), getattr(b, field))


def rig(mesh, params, uvmap, binding=None):
    lg = bind(uvmap, mesh, binding=binding)
    verts = deform(mesh, params)
    frames = triangle_frames(verts, mesh.triangles)
    anchors = anchor_points(verts, mesh.triangles, lg.tri, lg.bary)
    return lg, local_to_global(lg, frames, anchors)


class TestLocalToGlobal:
    def make_locals(self, rng, P, tri_count):
        from splathead.gaussians import LocalGaussians
        return LocalGaussians(
            mu_l=0.3 * rng.standard_normal((P, 3)),
            s_l=np.exp(0.2 * rng.standard_normal((P, 3))),
            r_l=quat_normalize(rng.standard_normal((P, 4))),
            rgb_l=rng.uniform(0, 1, (P, 3)),
            sigma_l=rng.uniform(0.1, 0.9, P),
            tri=rng.integers(0, tri_count, P),
            uv=rng.uniform(0, 1, (P, 2)),
            bary=rng.dirichlet([1, 1, 1], P),
        )

    def test_identity_frame_is_identity(self):
        from splathead.headmesh import TriangleFrames
        rng = np.random.default_rng(4)
        lg = self.make_locals(rng, 6, 1)
        frames = TriangleFrames(C=np.zeros((1, 3)), R=np.eye(3)[None],
                                k=np.ones(1), l=np.ones(1))
        gg = local_to_global(lg, frames)
        np.testing.assert_allclose(gg.mu, lg.mu_l, atol=1e-12)
        np.testing.assert_allclose(gg.s, lg.s_l, atol=1e-12)
        # quaternion equality up to sign
        sgn = np.sign(np.sum(gg.r * lg.r_l, axis=-1))[:, None]
        np.testing.assert_allclose(sgn * gg.r, lg.r_l, atol=1e-9)

    def test_shifted_scaled_frame(self):
        from splathead.gaussians import LocalGaussians
        from splathead.headmesh import TriangleFrames
        lg = LocalGaussians(
            mu_l=np.array([[0.1, 0.0, 0.0]]), s_l=np.array([[1.0, 2.0, 3.0]]),
            r_l=np.array([[1.0, 0, 0, 0]]), rgb_l=np.array([[0.5, 0.5, 0.5]]),
            sigma_l=np.array([0.7]), tri=np.array([0]),
            uv=np.zeros((1, 2)), bary=np.zeros((1, 3)))
        frames = TriangleFrames(C=np.array([[1.0, 2.0, 3.0]]), R=np.eye(3)[None],
                                k=np.array([2.0]), l=np.ones(1))
        gg = local_to_global(lg, frames)
        np.testing.assert_allclose(gg.mu[0], [1.2, 2.0, 3.0], atol=1e-12)
        np.testing.assert_allclose(gg.s[0], [2.0, 4.0, 6.0], atol=1e-12)

    def test_rgb_sigma_bitwise_preserved(self):
        rng = np.random.default_rng(5)
        mesh = make_head_mesh(nu=4, nv=4, num_expr=4, seed=0)
        frames = triangle_frames(mesh.vertices, mesh.triangles)
        lg = self.make_locals(rng, 40, mesh.num_triangles)
        gg = local_to_global(lg, frames)
        assert np.array_equal(gg.rgb, lg.rgb_l)
        assert np.array_equal(gg.sigma, lg.sigma_l)

    def test_missing_frame_rejected(self):
        rng = np.random.default_rng(6)
        lg = self.make_locals(rng, 4, 1)
        lg.tri[:] = 5
        from splathead.headmesh import TriangleFrames
        frames = TriangleFrames(C=np.zeros((1, 3)), R=np.eye(3)[None],
                                k=np.ones(1), l=np.ones(1))
        with pytest.raises(ValidationError):
            local_to_global(lg, frames)

    def test_rigging_equivariance_under_rigid_transforms(self):
        mesh = make_head_mesh(nu=5, nv=5, num_expr=6, seed=7)
        rng = np.random.default_rng(8)
        uvmap = UVGaussianMap(0.5 * rng.standard_normal((8, 8, 14)))
        binding = compute_binding(mesh, 8, 8)
        params = random_params(mesh, rng)
        _, gg = rig(mesh, params, uvmap, binding)
        for _ in range(100):
            Q, t = random_rigid(rng)
            qQ = rotmat_to_quat(Q)
            # transform the rig output
            want_mu = gg.mu @ Q.T + t
            from splathead.quaternions import quat_mul
            want_r = quat_mul(np.broadcast_to(qQ, gg.r.shape), gg.r)
            # rig the transformed mesh (same params baked in world frame):
            verts = deform(mesh, params) @ Q.T + t
            frames = triangle_frames(verts, mesh.triangles)
            lg = bind(uvmap, mesh, binding=binding)
            anchors = anchor_points(verts, mesh.triangles, lg.tri, lg.bary)
            gg2 = local_to_global(lg, frames, anchors)
            np.testing.assert_allclose(gg2.mu, want_mu, atol=1e-6)
            np.testing.assert_allclose(gg2.s, gg.s, atol=1e-6)
            sgn = np.sign(np.sum(gg2.r * want_r, axis=-1))[:, None]
            np.testing.assert_allclose(sgn * gg2.r, want_r, atol=1e-6)

    def test_backward_matches_finite_differences(self):
        mesh = make_head_mesh(nu=4, nv=4, num_expr=4, seed=9)
        rng = np.random.default_rng(10)
        verts = mesh.vertices + 0.01 * rng.standard_normal(mesh.vertices.shape)
        frames = triangle_frames(verts, mesh.triangles)
        lg = self.make_locals(rng, 12, mesh.num_triangles)
        anchors = anchor_points(verts, mesh.triangles, lg.tri, lg.bary)

        cmu = rng.standard_normal((12, 3))
        cs = rng.standard_normal((12, 3))
        cM = rng.standard_normal((12, 3, 3))
        crgb = rng.standard_normal((12, 3))
        csig = rng.standard_normal(12)

        def loss_parts(mu_l, s_l, r_l, verts_):
            from splathead.gaussians import LocalGaussians
            lg2 = LocalGaussians(mu_l=mu_l, s_l=s_l, r_l=quat_normalize(r_l),
                                 rgb_l=lg.rgb_l, sigma_l=lg.sigma_l, tri=lg.tri,
                                 uv=lg.uv, bary=lg.bary)
            fr = triangle_frames(verts_, mesh.triangles)
            an = anchor_points(verts_, mesh.triangles, lg.tri, lg.bary)
            gg = local_to_global(lg2, fr, an)
            M = quat_to_rotmat(gg.r)
            return float(np.sum(cmu * gg.mu) + np.sum(cs * gg.s) + np.sum(cM * M)
                         + np.sum(crgb * gg.rgb) + np.sum(csig * gg.sigma))

        grads = local_to_global_backward(lg, frames, cmu, cs, cM, crgb, csig)
        # local attribute side
        fd_mu = central_diff(lambda x: loss_parts(x, lg.s_l, lg.r_l, verts), lg.mu_l.copy())
        np.testing.assert_allclose(grads["mu_l"], fd_mu, atol=1e-5)
        fd_s = central_diff(lambda x: loss_parts(lg.mu_l, x, lg.r_l, verts), lg.s_l.copy())
        np.testing.assert_allclose(grads["s_l"], fd_s, atol=1e-5)
        fd_r = central_diff(lambda x: loss_parts(lg.mu_l, lg.s_l, x, verts), lg.r_l.copy())
        np.testing.assert_allclose(grads["r_l"], fd_r, atol=1e-5)
        # frame/vertex side, routed through the triangle-frame backward
        from splathead.headmesh import triangle_frames_backward
        gv = triangle_frames_backward(verts, mesh.triangles,
                                      d_R=grads["frame_R"], d_k=grads["frame_k"])
        gv += scatter_anchor_gradient(grads["anchor"], mesh.triangles, lg.tri,
                                      lg.bary, mesh.num_vertices)
        fd_v = central_diff(lambda x: loss_parts(lg.mu_l, lg.s_l, lg.r_l, x),
                            verts.copy(), eps=1e-6)
        np.testing.assert_allclose(gv, fd_v, atol=2e-4)


def test_global_gaussians_array_round_trip():
    rng = np.random.default_rng(11)
    gg = GlobalGaussians(mu=rng.standard_normal((7, 3)), s=rng.uniform(0.1, 1, (7, 3)),
                         r=quat_normalize(rng.standard_normal((7, 4))),
                         rgb=rng.uniform(0, 1, (7, 3)), sigma=rng.uniform(0, 1, 7))
    back = GlobalGaussians.from_array(gg.as_array())
    np.testing.assert_array_equal(back.as_array(), gg.as_array())
