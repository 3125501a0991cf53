import math
import struct
import zlib

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import expit

from wsihyb.scorer import (
    EPS, N_POOLED_FEATURES, PIXEL_CENTER, PIXEL_SCALE, POOLED_CENTER, POOLED_SCALE, CheckpointError,
    FeatureSpecError, PatchScorer, SGDConfig, SlideClassifier, TrainingDiverged, classify_patch,
    effective_weights, image_bce_loss, load_checkpoint, patch_features, pooled_features,
    predict_pixel_probs, scorer_loss_and_grad, slide_loss_and_grad, soft_ce_loss, train,
)
from wsihyb.seeding import derive_rng
from wsihyb.synth import BENIGN, LESION, GenConfig, render_slide


def naive_features(px):
    """Direct per-pixel evaluation of every plane with explicit edge clamping."""
    h, w, _ = px.shape
    q = px.astype(np.int64)
    gray = (299 * q[..., 0] + 587 * q[..., 1] + 114 * q[..., 2] + 500) // 1000
    out = np.zeros((7, h, w))
    for i in range(h):
        for j in range(w):
            win = [gray[min(max(i + di, 0), h - 1), min(max(j + dj, 0), w - 1)]
                   for di in range(-4, 5) for dj in range(-4, 5)]
            s, s2 = sum(win), sum(v * v for v in win)
            out[0:3, i, j] = q[i, j] / 255.0
            out[3, i, j] = s / (81 * 255.0)
            out[4, i, j] = (81 * s2 - s * s) / (81 * 81 * 255.0 ** 2)
            dx = gray[i, min(j + 1, w - 1)] - gray[i, max(j - 1, 0)]
            dy = gray[min(i + 1, h - 1), j] - gray[max(i - 1, 0), j]
            out[5, i, j] = math.sqrt(dx * dx + dy * dy) / (2 * 255.0)
            out[6, i, j] = 1.0
    return out


def naive_pooled(planes):
    out = []
    for plane in planes:
        vals = plane.ravel().tolist()
        m = sum(vals) / len(vals)
        out += [m, sum((v - m) ** 2 for v in vals) / len(vals), max(vals)]
    return np.array(out)


def fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-8)


class TestFeatures:
    def test_constant_patch(self):
        planes = patch_features(np.full((20, 20, 3), 128, np.uint8))
        assert not planes[4].any() and not planes[5].any()
        np.testing.assert_array_equal(planes[3], 128 / 255)

    @pytest.mark.parametrize("shape", [(13, 17), (9, 9), (3, 5), (24, 20)])
    def test_matches_double_loop_oracle(self, rng, shape):
        px = rng.integers(0, 256, shape + (3,), dtype=np.uint8)
        np.testing.assert_array_equal(patch_features(px), naive_features(px))

    def test_extremes_do_not_overflow(self):
        px = np.zeros((30, 30, 3), np.uint8)
        px[::2, ::2] = 255
        np.testing.assert_array_equal(patch_features(px), naive_features(px))

    def test_rejects_non_uint8(self):
        with pytest.raises(FeatureSpecError):
            patch_features(np.zeros((8, 8, 3), np.float32))

    def test_pooled_matches_double_loop(self, rng):
        planes = patch_features(rng.integers(0, 256, (16, 12, 3), dtype=np.uint8))
        np.testing.assert_allclose(pooled_features(planes), naive_pooled(planes), rtol=1e-12, atol=1e-15)
        assert pooled_features(planes).shape == (N_POOLED_FEATURES,)


class TestPrediction:
    def test_zero_weights_half(self, rng):
        px = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        assert np.all(predict_pixel_probs(PatchScorer(), px) == 0.5)
        assert classify_patch(SlideClassifier(), px) == 0.5

    def test_logits_use_standardized_features(self, rng):
        planes = patch_features(rng.integers(0, 256, (8, 8, 3), dtype=np.uint8))
        params = rng.normal(size=7)
        std = (planes - PIXEL_CENTER[:, None, None]) * PIXEL_SCALE[:, None, None]
        std[6] = 1.0
        np.testing.assert_allclose(PatchScorer(params).logits(planes), np.tensordot(params, std, 1),
                                   rtol=1e-10, atol=1e-10)
        pooled = pooled_features(planes)
        wp = rng.normal(size=N_POOLED_FEATURES)
        sp = (pooled - POOLED_CENTER) * POOLED_SCALE
        np.testing.assert_allclose(SlideClassifier(wp).logits(pooled), sp @ wp, rtol=1e-10, atol=1e-10)

    def test_per_pixel_given_planes(self, rng):
        planes = patch_features(rng.integers(0, 256, (10, 10, 3), dtype=np.uint8))
        scorer = PatchScorer(rng.normal(size=7))
        perm = rng.permutation(100)
        flat = planes.reshape(7, -1)
        shuffled = flat[:, perm].reshape(planes.shape)
        np.testing.assert_array_equal(predict_pixel_probs(scorer, planes=shuffled).ravel(),
                                      predict_pixel_probs(scorer, planes=planes).ravel()[perm])

    def test_translation_consistent(self, rng):
        px = rng.integers(0, 256, (60, 60, 3), dtype=np.uint8)
        scorer = PatchScorer(rng.normal(size=7))
        k, border = 7, 5
        a = predict_pixel_probs(scorer, px[0:40, 0:40])
        b = predict_pixel_probs(scorer, px[k:40 + k, k:40 + k])
        np.testing.assert_allclose(a[k + border:40 - border, k + border:40 - border],
                                   b[border:40 - k - border, border:40 - k - border], rtol=1e-12)

    def test_pooling_ignores_pixel_order_for_mean_and_var(self, rng):
        px = rng.integers(0, 256, (12, 12, 3), dtype=np.uint8)
        planes = patch_features(px)
        perm = rng.permutation(144)
        shuffled = planes.reshape(7, -1)[:, perm].reshape(planes.shape)
        np.testing.assert_allclose(pooled_features(shuffled), pooled_features(planes), rtol=1e-12)

    def test_wrong_plane_count(self):
        with pytest.raises(FeatureSpecError):
            PatchScorer().logits(np.zeros((6, 4, 4)))

    def test_fitted_separator_finds_lesion_pixels(self):
        cfg = GenConfig(extent=1024, tissue_radius=(350, 450), lesion_count=(3, 3),
                        blob_radius=(120, 160), distractor_count=(0, 0))
        pixels, labels, _ = render_slide(cfg, derive_rng(2, "sep"), True)
        planes = patch_features(pixels[256:768, 256:768]).reshape(7, -1)
        lab = labels[256:768, 256:768].ravel()
        keep = (lab == BENIGN) | (lab == LESION)
        X, y = planes[:, keep][:, ::7], (lab[keep][::7] == LESION).astype(float)
        train_idx, test_idx = np.arange(len(y)) % 2 == 0, np.arange(len(y)) % 2 == 1

        def nll(w):
            z = effective_weights(w, PIXEL_CENTER, PIXEL_SCALE) @ X[:, train_idx]
            return np.mean(np.logaddexp(0, z) - y[train_idx] * z)

        w = minimize(nll, np.zeros(7), method="L-BFGS-B").x
        p = predict_pixel_probs(PatchScorer(w), planes=X[:, test_idx].reshape(7, 1, -1)).ravel()
        pos, neg = p[y[test_idx] == 1], np.sort(p[y[test_idx] == 0])
        auc = np.mean(np.searchsorted(neg, pos, side="left") / len(neg))
        assert auc > 0.95


class TestSoftCrossEntropy:
    def test_perfect_prediction(self):
        loss, _ = soft_ce_loss(np.array([1 - EPS]), np.array([1.0]))
        assert 0 <= loss <= 2e-7

    def test_half_half(self):
        loss, _ = soft_ce_loss(np.array([0.5]), np.array([0.5]))
        assert abs(loss - math.log(2)) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            soft_ce_loss(np.zeros(3), np.zeros(4))

    def test_minimum_at_target(self, rng):
        grid = (np.arange(1000) + 0.5) / 1000
        for y in rng.uniform(0, 1, 20):
            losses = [soft_ce_loss(np.array([p]), np.array([y]))[0] for p in grid]
            assert abs(grid[int(np.argmin(losses))] - y) <= 1e-3

    def test_logit_gradient_matches_finite_differences(self, rng):
        for _ in range(50):
            z = rng.normal(0, 2, 6)
            y = rng.uniform(0, 1, 6)
            _, d = soft_ce_loss(expit(z), y)
            fd = fd_grad(lambda v: soft_ce_loss(expit(v), y)[0], z)
            assert rel_err(d, fd) <= 1e-4

    def test_clamped_pixels_have_zero_gradient(self):
        _, d = soft_ce_loss(np.array([0.0, 1.0, 0.3]), np.array([1.0, 0.0, 0.0]))
        assert d[0] == 0 and d[1] == 0 and d[2] == pytest.approx(0.3 / 3)

    def test_parameter_gradient_matches_finite_differences(self, rng):
        for _ in range(50):
            planes = [patch_features(rng.integers(0, 256, (6, 5, 3), dtype=np.uint8)) for _ in range(3)]
            targets = [rng.uniform(0, 1, (6, 5)) for _ in range(3)]
            params = rng.normal(0, 0.1, 7)
            _, g = scorer_loss_and_grad(params, planes, targets)
            fd = fd_grad(lambda p: scorer_loss_and_grad(p, planes, targets)[0], params)
            assert rel_err(g, fd) <= 1e-4


class TestImageBCE:
    def test_positive_half(self):
        assert abs(image_bce_loss(0.5, 1)[0] - math.log(2)) <= 1e-12

    def test_negative_near_zero(self):
        assert image_bce_loss(EPS, 0)[0] <= 2e-7

    def test_pred_gradient_matches_finite_differences(self, rng):
        for _ in range(50):
            p = rng.uniform(0.05, 0.95, 4)
            y = rng.integers(0, 2, 4).astype(float)
            _, d = image_bce_loss(p, y)
            assert rel_err(d, fd_grad(lambda v: image_bce_loss(v, y)[0], p, 1e-7)) <= 1e-4

    def test_parameter_gradient_matches_finite_differences(self, rng):
        for _ in range(50):
            sets = [np.stack([pooled_features(patch_features(rng.integers(0, 256, (6, 6, 3), dtype=np.uint8)))
                              for _ in range(int(rng.integers(1, 4)))]) for _ in range(3)]
            labels = rng.integers(0, 2, 3).astype(float)
            params = rng.normal(0, 0.05, N_POOLED_FEATURES)
            _, g = slide_loss_and_grad(params, sets, labels)
            fd = fd_grad(lambda p: slide_loss_and_grad(p, sets, labels)[0], params, 1e-6)
            assert rel_err(g, fd) <= 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        for model in (PatchScorer(rng.normal(size=7)), SlideClassifier(rng.normal(size=21))):
            checksum = model.save(tmp_path / "m.ckpt")
            back = load_checkpoint(tmp_path / "m.ckpt")
            assert back == model and back.checksum() == checksum

    def test_round_trip_keeps_fitted_scaling(self, tmp_path, rng):
        model = SlideClassifier(rng.normal(size=21)).with_scaling(rng.normal(3, 2, (50, 21)))
        model.save(tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        np.testing.assert_array_equal(back.center, model.center)
        np.testing.assert_array_equal(back.scale, model.scale)
        rows = rng.normal(size=(4, 21))
        np.testing.assert_array_equal(back.logits(rows), model.logits(rows))

    def test_non_positive_scale_rejected(self, tmp_path):
        data = bytearray(PatchScorer().to_bytes()[:-4])
        data[-8:] = struct.pack("<d", 0.0)
        (tmp_path / "m.ckpt").write_bytes(bytes(data) + struct.pack("<I", zlib.crc32(bytes(data))))
        with pytest.raises(CheckpointError, match="scale"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_corrupt_parameter_byte(self, tmp_path, rng):
        PatchScorer(rng.normal(size=7)).save(tmp_path / "m.ckpt")
        data = bytearray((tmp_path / "m.ckpt").read_bytes())
        data[20] ^= 1
        (tmp_path / "m.ckpt").write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_truncated(self, tmp_path):
        (tmp_path / "m.ckpt").write_bytes(PatchScorer().to_bytes()[:-9])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_feature_spec_mismatch(self):
        with pytest.raises(FeatureSpecError):
            PatchScorer(np.zeros(7), feature_spec=99)

    def test_wrong_parameter_count(self):
        with pytest.raises(FeatureSpecError):
            SlideClassifier(np.zeros(7))

    def test_non_finite(self):
        with pytest.raises(ValueError):
            PatchScorer(np.array([np.nan] + [0.0] * 6))


class TestScaling:
    def test_pooled_fit_is_mean_and_inverse_std(self, rng):
        rows = rng.normal(0, 1, (200, 21)) * rng.uniform(0.01, 100, 21) + rng.uniform(-5, 5, 21)
        rows[:, 18:] = [1.0, 0.0, 1.0]
        model = SlideClassifier().with_scaling(rows)
        np.testing.assert_allclose(model.center[:18], rows[:, :18].mean(0), rtol=1e-12)
        np.testing.assert_allclose(model.scale[:18], 1 / rows[:, :18].std(0), rtol=1e-12)
        np.testing.assert_array_equal(model.center[18:], 0.0)
        np.testing.assert_array_equal(model.scale[18:], 1.0)

    def test_pixel_fit_pools_every_pixel(self, rng):
        planes = [patch_features(rng.integers(0, 256, (9, 7, 3), dtype=np.uint8)) for _ in range(3)]
        rows = np.concatenate([p.reshape(7, -1).T for p in planes])
        model = PatchScorer().with_scaling(planes)
        np.testing.assert_allclose(model.center[:6], rows[:, :6].mean(0), rtol=1e-10)
        np.testing.assert_allclose(model.scale[:6], 1 / rows[:, :6].std(0), rtol=1e-8)
        assert (model.center[6], model.scale[6]) == (0.0, 1.0)

    def test_constant_feature_keeps_unit_scale(self):
        rows = np.ones((10, 21))
        assert np.all(SlideClassifier().with_scaling(rows).scale == 1.0)

    def test_standardized_predictor(self, rng):
        rows = rng.normal(2, 3, (30, 21))
        rows[:, 18:] = [1.0, 0.0, 1.0]
        model = SlideClassifier(rng.normal(size=21)).with_scaling(rows[:20])
        x = rows[20:]
        z = ((x - model.center) * model.scale) @ model.params
        np.testing.assert_allclose(model.logits(x), z, rtol=1e-10, atol=1e-10)

    def test_fitting_keeps_params(self, rng):
        w = rng.normal(size=7)
        model = PatchScorer(w).with_scaling(patch_features(rng.integers(0, 256, (5, 5, 3), dtype=np.uint8)))
        np.testing.assert_array_equal(model.params, w)


def toy_batches(rng_data):
    """100 linearly separable pixels split into 10 one-patch batches."""
    x = rng_data.uniform(0, 255, 100)
    rgb = np.stack([x, x, x], -1).astype(np.uint8).reshape(10, 1, 10, 3)
    target = (rgb[..., 0] > 127).astype(float)
    planes = [patch_features(p) for p in rgb]

    def batches(epoch, rng):
        for i in rng.permutation(10):
            yield [planes[i]], [target[i]]
    return batches


class TestTrain:
    def test_separable_toy_loss_decreases(self):
        _, trace = train(PatchScorer(), toy_batches(np.random.default_rng(0)),
                         lambda p, b: scorer_loss_and_grad(p, *b), SGDConfig(lr=0.01, epochs=5), np.random.default_rng(1))
        assert all(b < a for a, b in zip(trace, trace[1:]))

    def test_zero_lr_leaves_parameters(self):
        start = PatchScorer(np.arange(7) / 10)
        model, _ = train(start, toy_batches(np.random.default_rng(0)),
                         lambda p, b: scorer_loss_and_grad(p, *b), SGDConfig(lr=0.0, epochs=2))
        assert model == start and model is not start

    def test_same_seed_same_parameters(self):
        runs = [train(PatchScorer(), toy_batches(np.random.default_rng(0)),
                      lambda p, b: scorer_loss_and_grad(p, *b), SGDConfig(lr=0.3, epochs=3),
                      np.random.default_rng(9))[0] for _ in range(2)]
        assert runs[0].params.tobytes() == runs[1].params.tobytes()

    def test_non_finite_loss_aborts(self):
        def bad(params, batch):
            return float("nan"), np.zeros_like(params)
        with pytest.raises(TrainingDiverged, match="epoch 0 step 0"):
            train(PatchScorer(), toy_batches(np.random.default_rng(0)), bad, SGDConfig(epochs=1))

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SGDConfig(epochs=0)
