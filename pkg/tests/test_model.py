import numpy as np
import pytest

from capslab.model import (ModelConfig, backward_batch, decoder_forward,
                           forward_batch, init_params, margin_loss,
                           margin_loss_backward, model_backward,
                           model_forward, predict_votes,
                           predict_votes_backward, primary_caps_forward,
                           reconstruction_decoder, transform_param_count)
from capslab.routing import RoutingConfig
from conftest import central_difference, rel_error

TINY = ModelConfig(input_hw=20, conv1_channels=8, primary_caps_channels=4,
                   decoder_hidden=(32, 64))


def tiny_setup(kind="dynamic", iterations=2, seed=0, shared=False):
    cfg = ModelConfig(input_hw=20, conv1_channels=8, primary_caps_channels=4,
                      decoder_hidden=(32, 64), shared_transform=shared)
    rc = RoutingConfig(kind, iterations)
    params = init_params(cfg, rc, np.random.default_rng(seed))
    return cfg, rc, params


class TestGeometry:
    def test_primary_capsule_count_28(self):
        cfg = ModelConfig(input_hw=28)
        assert cfg.primary_grid == 6
        assert cfg.primary_caps_count == 1152

    def test_primary_capsule_count_40(self):
        cfg = ModelConfig(input_hw=40)
        assert cfg.primary_grid == 12
        assert cfg.primary_caps_count == 4608

    def test_transform_param_counts_and_ratio(self):
        for hw, n in ((28, 1152), (40, 4608)):
            per = transform_param_count(ModelConfig(input_hw=hw))
            shared = transform_param_count(
                ModelConfig(input_hw=hw, shared_transform=True))
            assert per == n * 10 * 8 * 16
            assert shared == 10 * 8 * 16
            assert per // shared == n and per % shared == 0

    def test_transform_tensor_shapes(self):
        cfg, rc, params = tiny_setup()
        assert params["transform"].shape == (cfg.primary_caps_count, 10, 16, 8)
        _, _, params_s = tiny_setup(shared=True)
        assert params_s["transform"].shape == (10, 16, 8)

    def test_rejects_degenerate_config(self):
        with pytest.raises(ValueError):
            ModelConfig(class_count=1)
        with pytest.raises(ValueError):
            ModelConfig(input_hw=12)


class TestPrimaryCaps:
    def test_capsule_count_from_conv_geometry(self):
        cfg = ModelConfig(input_hw=28)
        features = np.random.default_rng(0).normal(
            size=(cfg.primary_caps_channels * cfg.primary_caps_dim,
                  cfg.primary_grid, cfg.primary_grid))
        u = primary_caps_forward(features, cfg)
        assert u.shape == (1152, 8)

    def test_zero_features_zero_capsules(self):
        cfg = TINY
        features = np.zeros((32, cfg.primary_grid, cfg.primary_grid))
        np.testing.assert_array_equal(primary_caps_forward(features, cfg), 0.0)

    def test_norms_below_one(self):
        cfg = TINY
        features = np.random.default_rng(1).normal(
            size=(32, cfg.primary_grid, cfg.primary_grid)) * 10
        u = primary_caps_forward(features, cfg)
        assert (np.linalg.norm(u, axis=-1) < 1.0).all()

    def test_channel_mismatch_rejected(self):
        with pytest.raises(Exception, match="channel"):
            primary_caps_forward(np.zeros((33, 2, 2)), TINY)


class TestPredictVotes:
    def test_equal_per_capsule_weights_match_shared(self):
        rng = np.random.default_rng(2)
        N, M, d_in, d_out = 6, 3, 4, 5
        shared = rng.normal(size=(M, d_out, d_in))
        per_capsule = np.broadcast_to(shared, (N, M, d_out, d_in)).copy()
        u = rng.normal(size=(N, d_in))
        assert np.abs(predict_votes(u, per_capsule)
                      - predict_votes(u, shared)).max() < 1e-12

    def test_identity_transform(self):
        rng = np.random.default_rng(3)
        N, M, d = 5, 3, 4
        W = np.broadcast_to(np.eye(d), (N, M, d, d)).copy()
        u = rng.normal(size=(N, d))
        votes = predict_votes(u, W)
        for j in range(M):
            np.testing.assert_allclose(votes[:, j], u)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(4)
        N, M, d_in, d_out = 3, 2, 4, 5
        W = rng.normal(size=(N, M, d_out, d_in))
        u = rng.normal(size=(N, d_in))
        votes = predict_votes(u, W)
        for i in range(N):
            for j in range(M):
                assert np.abs(votes[i, j] - W[i, j] @ u[i]).max() < 1e-12

    @pytest.mark.parametrize("shared", [False, True])
    def test_gradients(self, shared):
        rng = np.random.default_rng(5)
        N, M, d_in, d_out = 4, 3, 5, 6
        W = rng.normal(size=(M, d_out, d_in) if shared
                       else (N, M, d_out, d_in))
        u = rng.normal(size=(2, N, d_in))
        up = rng.normal(size=(2, N, M, d_out))

        def loss():
            return float((predict_votes(u, W) * up).sum())

        gW, gu = predict_votes_backward(u, W, up)
        assert rel_error(gW, central_difference(loss, W)) < 1e-6
        assert rel_error(gu, central_difference(loss, u)) < 1e-6


class TestMarginLoss:
    def test_inside_both_margins_is_zero(self):
        lengths = np.full(10, 0.05)
        lengths[3] = 0.95
        assert margin_loss(lengths, 3) == 0.0

    def test_direct_evaluation(self):
        # (0.9-0.8)^2 + 0.5*(0.3-0.1)^2 = 0.03
        assert abs(margin_loss(np.array([0.8, 0.3]), 0) - 0.03) < 1e-12

    def test_target_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            margin_loss(np.zeros(5), 7)
        with pytest.raises(ValueError, match="out of range"):
            margin_loss_backward(np.zeros(5), -1)

    def test_gradient(self):
        rng = np.random.default_rng(6)
        lengths = rng.uniform(0.05, 0.85, size=10)

        def loss():
            return margin_loss(lengths, 4)

        assert rel_error(margin_loss_backward(lengths, 4),
                         central_difference(loss, lengths)) < 1e-6


class TestDecoder:
    def test_masking_zeroes_other_rows(self):
        cfg, rc, params = tiny_setup()
        rng = np.random.default_rng(7)
        v = rng.normal(size=(2, 10, 16))
        _, dcache = decoder_forward(v, np.array([3, 7]), params, cfg)
        masked = dcache.masked
        assert np.abs(masked[0, 3] - v[0, 3]).max() == 0.0
        assert np.abs(masked[1, 7] - v[1, 7]).max() == 0.0
        masked[0, 3] = 0.0
        masked[1, 7] = 0.0
        assert np.abs(masked).max() == 0.0

    def test_zero_residual_zero_loss(self):
        cfg, rc, params = tiny_setup()
        rng = np.random.default_rng(8)
        v = rng.normal(size=(10, 16))
        recon, _ = reconstruction_decoder(v, 2, params, cfg,
                                          np.zeros(cfg.input_hw ** 2))
        _, sse = reconstruction_decoder(v, 2, params, cfg, recon)
        assert sse == 0.0

    def test_mask_label_out_of_range(self):
        cfg, rc, params = tiny_setup()
        with pytest.raises(ValueError, match="out of range"):
            reconstruction_decoder(np.zeros((10, 16)), 10, params, cfg,
                                   np.zeros(400))

    def test_decoder_gradients(self):
        cfg, rc, params = tiny_setup()
        rng = np.random.default_rng(9)
        v = rng.normal(size=(2, 10, 16))
        target = rng.uniform(size=(2, cfg.input_hw ** 2))
        labels = np.array([1, 4])

        def loss():
            recon, _ = decoder_forward(v, labels, params, cfg)
            return float(((recon - target) ** 2).sum())

        from capslab.model import decoder_backward
        recon, dcache = decoder_forward(v, labels, params, cfg)
        grads, grad_v = decoder_backward(dcache, params, cfg,
                                         2.0 * (recon - target))
        for name in ("dec1_w", "dec1_b", "dec2_w", "dec2_b", "dec3_w",
                     "dec3_b"):
            assert rel_error(grads[name],
                             central_difference(loss, params[name])) < 1e-6
        assert rel_error(grad_v, central_difference(loss, v)) < 1e-6


class TestFullModel:
    def test_output_shape_and_range(self):
        cfg, rc, params = tiny_setup()
        rng = np.random.default_rng(10)
        lengths, _ = model_forward(rng.uniform(size=(20, 20)), cfg, params, rc)
        assert lengths.shape == (10,)
        assert (lengths >= 0.0).all() and (lengths < 1.0).all()

    def test_forward_deterministic(self):
        cfg, rc, params = tiny_setup()
        rng = np.random.default_rng(11)
        img = rng.uniform(size=(20, 20))
        l1, _ = model_forward(img, cfg, params, rc)
        l2, _ = model_forward(img, cfg, params, rc)
        np.testing.assert_array_equal(l1, l2)

    def test_shared_transform_matches_equal_per_capsule(self):
        cfg, rc, params = tiny_setup(shared=True, seed=3)
        cfg_pc = ModelConfig(input_hw=20, conv1_channels=8,
                             primary_caps_channels=4, decoder_hidden=(32, 64),
                             shared_transform=False)
        params_pc = dict(params)
        params_pc["transform"] = np.broadcast_to(
            params["transform"],
            (cfg.primary_caps_count,) + params["transform"].shape).copy()
        rng = np.random.default_rng(12)
        img = rng.uniform(size=(20, 20))
        l_shared, _ = model_forward(img, cfg, params, rc)
        l_pc, _ = model_forward(img, cfg_pc, params_pc, rc)
        assert np.abs(l_shared - l_pc).max() < 1e-12

    @pytest.mark.parametrize("kind,iters", [("dynamic", 2), ("trainable", 1),
                                            ("none", 1)])
    def test_end_to_end_gradients(self, kind, iters):
        cfg, rc, params = tiny_setup(kind, iters, seed=1)
        rng = np.random.default_rng(13)
        # generic position: fresh params leave relu preactivations exactly at
        # the kink (zero biases), where finite differences are undefined
        for name, w in params.items():
            if name.endswith("_bias") or name.endswith("_b"):
                w += rng.normal(scale=0.05, size=w.shape)
        img = rng.uniform(size=(20, 20))
        target = 3
        _, cache = model_forward(img, cfg, params, rc, target=target)
        grads = backward_batch(cache, params, cfg, rc)

        def loss():
            _, c = model_forward(img, cfg, params, rc, target=target)
            return c.total_loss

        sampler = np.random.default_rng(14)
        names = list(params)
        checked = 0
        worst = 0.0
        while checked < 20:
            name = names[int(sampler.integers(0, len(names)))]
            w = params[name]
            idx = tuple(int(sampler.integers(0, s)) for s in w.shape)
            analytic = grads[name][idx]
            eps = 1e-5
            orig = w[idx]
            w[idx] = orig + eps
            fp = loss()
            w[idx] = orig - eps
            fm = loss()
            w[idx] = orig
            fd = (fp - fm) / (2 * eps)
            scale = max(abs(analytic), abs(fd), 1e-4)
            worst = max(worst, abs(analytic - fd) / scale)
            checked += 1
        assert worst < 1e-4, f"{kind}: worst sampled rel err {worst:.2e}"

    def test_batch_matches_single(self):
        cfg, rc, params = tiny_setup()
        rng = np.random.default_rng(15)
        imgs = rng.uniform(size=(3, 20, 20))
        batch = forward_batch(imgs, params, cfg, rc)
        for b in range(3):
            lengths, _ = model_forward(imgs[b], cfg, params, rc)
            assert np.abs(batch.lengths[b] - lengths).max() < 1e-12

    def test_model_backward_surface(self):
        cfg, rc, params = tiny_setup()
        rng = np.random.default_rng(16)
        img = rng.uniform(size=(20, 20))
        _, cache = model_forward(img, cfg, params, rc, target=5)
        grads = model_backward(cache, params, cfg, rc)
        assert set(grads) == set(params)
        for name in params:
            assert grads[name].shape == params[name].shape

    def test_multi_target_margin_and_no_recon(self):
        cfg, rc, params = tiny_setup()
        rng = np.random.default_rng(17)
        imgs = rng.uniform(size=(2, 20, 20))
        cache = forward_batch(imgs, params, cfg, rc,
                              targets=np.array([1, 2]),
                              targets2=np.array([3, 4]))
        assert not cache.recon_enabled
        np.testing.assert_array_equal(cache.recon_sse, 0.0)
        assert cache.target_hot[0, 1] == 1.0 and cache.target_hot[0, 3] == 1.0
        grads = backward_batch(cache, params, cfg, rc)
        assert set(grads) == set(params)
