import numpy as np
import pytest

from bodysdf import bodymodel as bm
from bodysdf import diffcore as dc
from bodysdf import kinematics as kin
from bodysdf.diffcore import Tape
from bodysdf.encoding import EncodingConfig


def small_config(parts=2, L=2):
    return bm.ModelConfig(num_parts=parts, width=32,
                          encoding=EncodingConfig(num_frequencies=L))


def identity_transforms(parts):
    return np.tile(np.eye(3), (parts, 1, 1)), np.zeros((parts, 3))


def random_rigid(rng, parts):
    R = kin.rodrigues_batch(rng.uniform(-1.5, 1.5, (parts, 3)))
    t = rng.uniform(-0.4, 0.4, (parts, 3))
    return R, t


class TestGeometricInit:
    def test_sphere_like_at_zero_codes(self):
        cfg = bm.ModelConfig(num_parts=1)
        params = bm.init_params(cfg, seed=3)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2000, 3))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        x *= rng.uniform(0.1, 0.6, 2000)[:, None]
        R, t = identity_transforms(1)
        zf = np.zeros((1, cfg.z_feat_dim))
        s = bm.part_sdf_numpy(cfg, params, x, R, t, zf, np.zeros(64), alpha=0.0)[0]
        target = np.linalg.norm(x, axis=1) - cfg.init_radius
        assert np.abs(s - target).max() < 0.1

    def test_value_at_origin(self):
        cfg = bm.ModelConfig(num_parts=1)
        params = bm.init_params(cfg, seed=5)
        R, t = identity_transforms(1)
        s0 = bm.part_sdf_numpy(cfg, params, np.zeros((1, 3)), R, t,
                               np.zeros((1, cfg.z_feat_dim)), np.zeros(64), 0.0)[0, 0]
        assert abs(s0 + cfg.init_radius) < 0.1

    def test_sign_flip_across_radius(self):
        cfg = bm.ModelConfig(num_parts=1)
        params = bm.init_params(cfg, seed=7)
        R, t = identity_transforms(1)
        pts = np.array([[0.1, 0.0, 0.0], [0.6, 0.0, 0.0]])
        s = bm.part_sdf_numpy(cfg, params, pts, R, t,
                              np.zeros((1, cfg.z_feat_dim)), np.zeros(64), 0.0)[0]
        assert s[0] < 0 < s[1]

    def test_same_seed_identical(self):
        cfg = small_config()
        p1 = bm.init_params(cfg, seed=11)
        p2 = bm.init_params(cfg, seed=11)
        for k in p1:
            assert p1[k].tobytes() == p2[k].tobytes()


class TestDeformationFeatures:
    def test_rest_pose_repeats_root(self):
        cfg = small_config(parts=3)
        R, t = identity_transforms(3)
        t0 = np.array([0.1, -0.2, 0.3])
        vec = bm.pose_feature_vector(R, t, t0)
        np.testing.assert_allclose(vec, np.tile(t0, 3), atol=0)

    def test_zero_projection_gives_zero(self):
        cfg = small_config(parts=3)
        params = bm.init_params(cfg, seed=1)
        params["proj.W"][:] = 0.0
        params["proj.b"][:] = 0.0
        R, t = random_rigid(np.random.default_rng(2), 3)
        z = bm.deformation_features(cfg, params, R, t, np.zeros(3))
        np.testing.assert_array_equal(z, np.zeros((3, cfg.z_feat_dim)))

    def test_blocks_are_rigid_inverse_of_root(self):
        rng = np.random.default_rng(3)
        R, t = random_rigid(rng, 4)
        t0 = rng.uniform(-1, 1, 3)
        vec = bm.pose_feature_vector(R, t, t0).reshape(4, 3)
        for k in range(4):
            np.testing.assert_allclose(vec[k], R[k].T @ (t0 - t[k]), atol=1e-14)


class TestBlend:
    def test_single_part_identity(self):
        assert bm.blend_numpy(np.array([0.37]), 50.0) == 0.37

    def test_closed_form_two_values(self):
        got = bm.blend_numpy(np.array([0.1, 0.5]), 50.0)
        want = 0.1 + 0.4 / (1.0 + np.exp(20.0))
        assert got == pytest.approx(want, abs=1e-15)
        assert got == pytest.approx(0.1000000008, abs=1e-9)

    def test_equal_inputs_exact(self):
        s = np.full(7, -0.23)
        assert bm.blend_numpy(s, 50.0) == -0.23

    def test_convex_combination_bounds(self):
        rng = np.random.default_rng(4)
        s = rng.uniform(-1, 1, (5, 100000))
        out = bm.blend_numpy(s, 50.0)
        assert np.all(out >= s.min(axis=0) - 1e-15)
        assert np.all(out <= s.max(axis=0) + 1e-15)

    def test_sharp_lambda_approaches_min(self):
        rng = np.random.default_rng(5)
        base = rng.uniform(-1, 1, (1, 2000))
        gaps = rng.uniform(0.05, 1.0, (4, 2000))
        s = np.concatenate([base, base + gaps], axis=0)
        out = bm.blend_numpy(s, 500.0)
        assert np.abs(out - s.min(axis=0)).max() < 1e-9

    def test_permutation_invariance(self):
        rng = np.random.default_rng(6)
        s = rng.uniform(-1, 1, (6, 50))
        perm = rng.permutation(6)
        np.testing.assert_allclose(bm.blend_numpy(s, 50.0),
                                   bm.blend_numpy(s[perm], 50.0), atol=1e-15)

    def test_unused_part_negligible(self):
        rng = np.random.default_rng(7)
        lam = 50.0
        s = rng.uniform(-0.05, 0.05, (3, 1000))
        far = s.min(axis=0) + 10.0 / lam + 0.01
        s_plus = np.concatenate([s, far[None]], axis=0)
        diff = np.abs(bm.blend_numpy(s_plus, lam) - bm.blend_numpy(s, lam))
        assert diff.max() < np.exp(-10) * 1.0

    def test_logsumexp_mode_bias(self):
        s = np.full(4, 0.2)
        out = bm.blend_numpy(s, 50.0, mode="logsumexp")
        assert out == pytest.approx(0.2 - np.log(4) / 50.0, abs=1e-12)


class TestForwardConsistency:
    def test_tape_matches_numpy(self):
        cfg = small_config(parts=3, L=3)
        model = bm.BodyModel.create(cfg, seed=2)
        rng = np.random.default_rng(8)
        R, t = random_rigid(rng, 3)
        z_s = rng.normal(0, 0.2, 64)
        t0 = rng.uniform(-0.5, 0.5, 3)
        x = rng.uniform(-0.8, 0.8, (40, 3))
        alpha = 1.7
        zf = bm.deformation_features(cfg, model.params, R, t, t0)
        ref_parts = bm.part_sdf_numpy(cfg, model.params, x, R, t, zf, z_s, alpha)
        ref_blend = bm.blend_numpy(ref_parts, cfg.blend_lambda, cfg.blend_mode)
        tape = Tape()
        out = bm.evaluate_t(tape, model, x, (R, t), z_s, alpha=alpha, t0=t0,
                            want_parts=True)
        np.testing.assert_allclose(out["parts"].val.data, ref_parts, atol=1e-12)
        np.testing.assert_allclose(out["blended"].val.data, ref_blend, atol=1e-12)

    def test_determinism_bitwise(self):
        cfg = small_config()
        model = bm.BodyModel.create(cfg, seed=4)
        rng = np.random.default_rng(9)
        R, t = identity_transforms(2)
        x = rng.uniform(-0.5, 0.5, (10, 3))
        zf = np.zeros((2, cfg.z_feat_dim))
        a = bm.part_sdf_numpy(cfg, model.params, x, R, t, zf, np.zeros(64), 1.0)
        b = bm.part_sdf_numpy(cfg, model.params, x, R, t, zf, np.zeros(64), 1.0)
        assert a.tobytes() == b.tobytes()

    def test_rigid_cotransform_invariance(self):
        cfg = small_config(parts=2)
        model = bm.BodyModel.create(cfg, seed=6)
        rng = np.random.default_rng(10)
        R, t = random_rigid(rng, 2)
        x = rng.uniform(-0.6, 0.6, (20, 3))
        zf = rng.normal(0, 0.1, (2, cfg.z_feat_dim))
        z_s = rng.normal(0, 0.1, 64)
        base = bm.part_sdf_numpy(cfg, model.params, x, R, t, zf, z_s, 1.0)
        R0 = kin.rodrigues(rng.uniform(-1, 1, 3))
        t_0 = rng.uniform(-0.3, 0.3, 3)
        x2 = x @ R0.T + t_0
        R2 = np.einsum("ij,bjk->bik", R0, R)
        t2 = t @ R0.T + t_0
        moved = bm.part_sdf_numpy(cfg, model.params, x2, R2, t2, zf, z_s, 1.0)
        np.testing.assert_allclose(moved, base, atol=1e-10)

    def test_single_part_evaluate_equals_part_sdf(self):
        cfg = small_config(parts=1)
        model = bm.BodyModel.create(cfg, seed=8)
        rng = np.random.default_rng(11)
        x = rng.uniform(-0.5, 0.5, (15, 3))
        R, t = identity_transforms(1)
        zf = bm.deformation_features(cfg, model.params, R, t, np.zeros(3))
        parts = bm.part_sdf_numpy(cfg, model.params, x, R, t, zf, np.zeros(64), 2.0)
        blended = bm.sdf_numpy(cfg, model.params, x, R, t, zf, np.zeros(64), 2.0)
        np.testing.assert_array_equal(blended, parts[0])

    def test_weight_norm_direction_scale_invariance(self):
        cfg = small_config(parts=2)
        model = bm.BodyModel.create(cfg, seed=12)
        rng = np.random.default_rng(12)
        x = rng.uniform(-0.5, 0.5, (25, 3))
        R, t = identity_transforms(2)
        zf = np.zeros((2, cfg.z_feat_dim))
        base = bm.sdf_numpy(cfg, model.params, x, R, t, zf, np.zeros(64), 1.0)
        scaled = {k: v.copy() for k, v in model.params.items()}
        scaled["net.l1.V"] *= 7.3
        got = bm.sdf_numpy(cfg, scaled, x, R, t, zf, np.zeros(64), 1.0)
        np.testing.assert_allclose(got, base, atol=1e-12)


class TestGradients:
    def test_grad_wrt_shape_code_matches_fd(self):
        cfg = small_config(parts=2, L=2)
        model = bm.BodyModel.create(cfg, seed=9)
        rng = np.random.default_rng(13)
        R, t = random_rigid(rng, 2)
        t0 = np.zeros(3)
        x = rng.uniform(-0.5, 0.5, (12, 3))
        z0 = rng.normal(0, 0.3, 64)

        def loss_and_grads(values, want):
            tape = Tape()
            z_s = tape.param(values["z_s"], "z_s")
            out = bm.evaluate_t(tape, model, x, (R, t), z_s, alpha=1.3, t0=t0)
            loss = out["blended"].val.sum()
            return float(loss.data), (tape.backward(loss) if want else None)

        err = dc.check_gradient(loss_and_grads, {"z_s": z0}, eps=1e-4, max_checks=32)
        assert err < 1e-4

    def test_spatial_gradient_matches_fd(self):
        cfg = small_config(parts=2, L=3)
        model = bm.BodyModel.create(cfg, seed=10)
        rng = np.random.default_rng(14)
        R, t = random_rigid(rng, 2)
        x = rng.uniform(-0.5, 0.5, (10, 3))
        z_s = rng.normal(0, 0.2, 64)
        tape = Tape()
        out = bm.evaluate_t(tape, model, x, (R, t), z_s, alpha=2.0, t0=np.zeros(3))
        grad = np.transpose(out["blended"].tan.data)  # (N,3)
        zf = bm.deformation_features(cfg, model.params, R, t, np.zeros(3))
        eps = 1e-5
        for i in range(3):
            e = np.zeros(3)
            e[i] = eps
            up = bm.sdf_numpy(cfg, model.params, x + e, R, t, zf, z_s, 2.0)
            dn = bm.sdf_numpy(cfg, model.params, x - e, R, t, zf, z_s, 2.0)
            fd = (up - dn) / (2 * eps)
            np.testing.assert_allclose(grad[:, i], fd, atol=1e-6)

    def test_logsumexp_blend_gradients(self):
        cfg = small_config(parts=3, L=1)
        cfg.blend_mode = "logsumexp"
        model = bm.BodyModel.create(cfg, seed=13)
        rng = np.random.default_rng(15)
        R, t = random_rigid(rng, 3)
        x = rng.uniform(-0.4, 0.4, (8, 3))
        z0 = rng.normal(0, 0.2, 64)

        def loss_and_grads(values, want):
            tape = Tape()
            z_s = tape.param(values["z_s"], "z_s")
            out = bm.evaluate_t(tape, model, x, (R, t), z_s, alpha=1.0,
                                t0=np.zeros(3))
            loss = (out["blended"].val * out["blended"].val).sum()
            return float(loss.data), (tape.backward(loss) if want else None)

        err = dc.check_gradient(loss_and_grads, {"z_s": z0}, eps=1e-4, max_checks=24)
        assert err < 1e-4
