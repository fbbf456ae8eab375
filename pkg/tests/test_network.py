import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.signal import correlate
from scipy.special import expit

from robust_sed.network import layers
from robust_sed.network.gradcheck import check_gradients, random_instance, relative_error
from robust_sed.network.model import (
    DESK_GEOMETRY, FULL_GEOMETRY, Y_CLAMP, DetectorParams, Formulation, Geometry, bce_loss,
    equivalent_threshold, forward, forward_aux, forward_main, init_params, loss_and_grads,
    merge_at, merge_aw, merge_moe, merge_static, moe_gates, predict, tensor_shapes,
)
from robust_sed.network.optim import AdamState, adam_step
from robust_sed.network.training import ClipDataset, TrainConfig, evaluate, train

TINY = Geometry(n_frames=14, n_bands=12, channels=(2, 3, 2), kernel=(3, 3),
                pools=((2, 1), (1, 2)), n_hidden=8, n_quantiles=3, n_ctx_bands=4,
                n_aux_kernels=2, n_experts=4)


def _naive_conv(x, w, b):
    """Valid cross-correlation, one output element at a time."""
    B, H, W, C = x.shape
    O, _, kh, kw = w.shape
    out = np.zeros((B, H - kh + 1, W - kw + 1, O))
    for n in range(B):
        for o in range(O):
            for i in range(H - kh + 1):
                for j in range(W - kw + 1):
                    out[n, i, j, o] = b[o] + np.sum(x[n, i : i + kh, j : j + kw, :]
                                                    * w[o].transpose(1, 2, 0))
    return out


def _naive_pool(x, pool):
    ph, pw = pool
    B, H, W, C = x.shape
    out = np.zeros((B, H // ph, W // pw, C))
    for i in range(H // ph):
        for j in range(W // pw):
            out[:, i, j] = x[:, i * ph : (i + 1) * ph, j * pw : (j + 1) * pw].max(axis=(1, 2))
    return out


def _naive_main(x, p, conv=_naive_conv):
    g, t = p.geometry, p.tensors
    h = x[..., None]
    for i in range(len(g.channels)):
        h = np.maximum(conv(h, t[f"conv{i + 1}_w"], t[f"conv{i + 1}_b"]), 0)
        if i < len(g.pools):
            h = _naive_pool(h, g.pools[i])
    return np.maximum(h.reshape(len(h), -1) @ t["dense4_w"] + t["dense4_b"], 0)


def _scipy_conv(x, w, b):
    B, H, W, C = x.shape
    O, _, kh, kw = w.shape
    out = np.empty((B, H - kh + 1, W - kw + 1, O))
    for n in range(B):
        for o in range(O):
            out[n, :, :, o] = b[o] + sum(
                correlate(x[n, :, :, c], w[o, c], mode="valid", method="direct")
                for c in range(C))
    return out


def _naive_aux(c, p):
    t = p.tensors
    B, Q, F = c.shape
    K = t["aux_conv_w"].shape[0]
    h = np.zeros((B, Q, K))
    for n in range(B):
        for q in range(Q):
            for k in range(K):
                h[n, q, k] = max(0.0, t["aux_conv_b"][k]
                                 + sum(t["aux_conv_w"][k, f] * c[n, q, f] for f in range(F)))
    flat = h.reshape(B, -1)
    return np.maximum(flat @ t["aux_dense_w"] + t["aux_dense_b"], 0)


def _randomized(geometry, form, seed, scale=0.3):
    p = init_params(geometry, form, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for k, v in p.tensors.items():
        p.tensors[k] = np.asarray(v + scale * rng.standard_normal(np.shape(v)))
    return p


class TestGeometry:
    def test_desk_shapes(self):
        assert DESK_GEOMETRY.conv_shapes() == [(24, 30, 12), (10, 13, 12), (6, 9, 24)]
        assert DESK_GEOMETRY.flat_dim == 1296

    def test_full_shapes(self):
        shapes = FULL_GEOMETRY.conv_shapes()
        assert shapes == [(25, 62, 24), (5, 29, 24), (1, 25, 48)]
        assert FULL_GEOMETRY.flat_dim == 1200

    def test_collapsing_geometry(self):
        with pytest.raises(ValueError, match="collapses"):
            Geometry(n_frames=10, n_bands=10)

    def test_parameter_validation(self):
        p = init_params(TINY, "at")
        p.tensors["w_aux"] = np.zeros(3)
        with pytest.raises(ValueError, match=r"dimension mismatch for w_aux: expected \(8,\)"):
            p.validate()
        with pytest.raises(ValueError, match="missing"):
            DetectorParams("moe", TINY, init_params(TINY, "at").tensors)

    def test_formulation_parse(self):
        assert Formulation.parse("MoE") is Formulation.MOE
        with pytest.raises(ValueError, match="unknown formulation"):
            Formulation.parse("gated")

    @pytest.mark.parametrize("form", list(Formulation))
    def test_init_shapes(self, form):
        p = init_params(DESK_GEOMETRY, form)
        for k, shape in tensor_shapes(DESK_GEOMETRY, form).items():
            assert p.tensors[k].shape == shape


class TestForwardMain:
    def test_zero_weights(self):
        p = init_params(TINY, "static")
        for v in p.tensors.values():
            v[...] = 0
        x = np.random.default_rng(0).standard_normal((3, 14, 12))
        np.testing.assert_array_equal(forward_main(x, p), 0.0)

    def test_matches_naive_loops(self):
        p = _randomized(TINY, "static", 1)
        x = np.random.default_rng(2).standard_normal((3, 14, 12))
        z = forward_main(x, p)
        ref = _naive_main(x, p)
        assert np.any(ref > 0)
        np.testing.assert_allclose(z, ref, rtol=1e-10, atol=1e-12)

    def test_desk_matches_direct_correlation(self):
        p = _randomized(DESK_GEOMETRY, "static", 3, scale=0.05)
        x = np.random.default_rng(4).standard_normal((2, 52, 64))
        np.testing.assert_allclose(forward_main(x, p), _naive_main(x, p, _scipy_conv),
                                   rtol=1e-10, atol=1e-12)

    def test_single_patch(self):
        p = _randomized(TINY, "static", 1)
        x = np.random.default_rng(2).standard_normal((14, 12))
        np.testing.assert_allclose(forward_main(x, p), forward_main(x[None], p)[0])

    def test_shape_mismatch(self):
        p = init_params(DESK_GEOMETRY, "static")
        with pytest.raises(ValueError, match=r"expects patches of shape \(52, 64\), got \(104, 128\)"):
            forward_main(np.zeros((1, 104, 128)), p)


class TestForwardAux:
    def test_zero_slice(self):
        p = init_params(TINY, "at")
        np.testing.assert_array_equal(forward_aux(np.zeros((2, 3, 4)), p), 0.0)

    def test_indicator_kernel(self):
        p = init_params(TINY, "at")
        t = p.tensors
        f0 = 2
        t["aux_conv_w"][:] = 0
        t["aux_conv_w"][0, f0] = 1.0
        t["aux_dense_w"][:] = 0
        # embedding unit q reads kernel 0 at quantile q
        for q in range(3):
            t["aux_dense_w"][q * 2 + 0, q] = 1.0
        t["aux_dense_b"][:] = 0.25
        c = np.random.default_rng(0).standard_normal((4, 3, 4))
        z = forward_aux(c, p)
        np.testing.assert_allclose(z[:, :3], np.maximum(c[:, :, f0], 0) + 0.25)
        np.testing.assert_allclose(z[:, 3:], 0.25)

    def test_matches_naive(self):
        p = _randomized(TINY, "moe", 5)
        c = np.random.default_rng(6).standard_normal((3, 3, 4))
        np.testing.assert_allclose(forward_aux(c, p), _naive_aux(c, p), rtol=1e-10, atol=1e-12)

    def test_static_has_no_aux(self):
        with pytest.raises(ValueError, match="no auxiliary branch"):
            forward_aux(np.zeros((1, 3, 4)), init_params(TINY, "static"))


class TestMerges:
    def test_static_closed_form(self):
        z = np.zeros(64)
        z[0] = math.log(3)
        w = np.zeros(64)
        w[0] = 1
        assert merge_static(z, w, 0.0) == pytest.approx(0.75, abs=1e-15)

    def test_aw(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal((100, 8))
        assert merge_aw(z, np.zeros((100, 8)), 0.3) == pytest.approx(expit(0.3))
        za = rng.standard_normal((100, 8))
        ref = [expit(0.3 + sum(a * b for a, b in zip(r, s))) for r, s in zip(z, za)]
        np.testing.assert_allclose(merge_aw(z, za, 0.3), ref, atol=1e-12)

    def test_at(self):
        rng = np.random.default_rng(1)
        z, za = rng.standard_normal((2, 100, 8))
        w, wa = rng.standard_normal((2, 8))
        np.testing.assert_allclose(merge_at(z, np.zeros_like(za), w, wa), expit(z @ w))
        ref = [expit(sum(za[i] * wa) + sum(z[i] * w)) for i in range(100)]
        np.testing.assert_allclose(merge_at(z, za, w, wa), ref, atol=1e-12)

    def test_equivalent_threshold_cases(self):
        wa = np.zeros(4)
        wa[0] = 1.0
        za = np.zeros(4)
        assert equivalent_threshold(0.3, za, wa) == pytest.approx(0.3)
        za[0] = math.log(3)
        assert equivalent_threshold(0.5, za, wa) == pytest.approx(0.25)
        with pytest.raises(ValueError):
            equivalent_threshold(1.0, za, wa)

    def test_moe_saturated_gate(self):
        rng = np.random.default_rng(2)
        M, K = 4, 4
        z = rng.standard_normal(M * K)
        za = np.abs(rng.standard_normal(M * K))
        w = rng.standard_normal(M * K)
        b_aux = np.array([60.0, 0.0, 0.0, 0.0])
        y = merge_moe(z, za, w, 0.2, np.zeros((M, K)), b_aux)
        expected = expit(0.2 + sum(w[K * m] * z[K * m] for m in range(M)))
        assert y == pytest.approx(expected, abs=1e-12)

    def test_moe_matches_naive(self):
        rng = np.random.default_rng(3)
        M, K = 4, 4
        for _ in range(50):
            z, za, w = rng.standard_normal((3, M * K))
            wa = rng.standard_normal((M, K))
            ba = rng.standard_normal(K)
            b = rng.standard_normal()
            alpha = [ba[k] + sum(wa[m, k] * za[K * m + k] for m in range(M)) for k in range(K)]
            e = np.exp(np.array(alpha) - max(alpha))
            gates = e / e.sum()
            experts = [sum(w[K * m + k] * z[K * m + k] for m in range(M)) for k in range(K)]
            ref = expit(b + sum(g * x for g, x in zip(gates, experts)))
            assert merge_moe(z, za, w, b, wa, ba) == pytest.approx(ref, abs=1e-12)
            np.testing.assert_allclose(moe_gates(za, wa, ba), gates, atol=1e-14)


class TestLoss:
    def test_confident_correct(self):
        p = init_params(TINY, "static")
        p.tensors["dense4_w"][:] = 0
        assert bce_loss(np.array([1.0]), [1], p) == pytest.approx(1e-7, rel=1e-3)

    def test_half(self):
        p = init_params(TINY, "static")
        p.tensors["dense4_w"][:] = 0
        assert bce_loss(np.array([0.5, 0.5]), [0, 1], p) == pytest.approx(math.log(2))

    def test_confident_wrong(self):
        p = init_params(TINY, "static")
        l2_term = 1e-3 * np.sum(p.tensors["dense4_w"] ** 2)
        assert bce_loss(np.array([0.9]), [0], p) == pytest.approx(-math.log(0.1) + l2_term)
        assert bce_loss(np.array([0.9]), [0]) == pytest.approx(2.302585092994046)


class TestGradients:
    @pytest.mark.parametrize("form", list(Formulation))
    def test_finite_differences_tiny(self, form):
        rng = np.random.default_rng(7)
        p, x, c, y = random_instance(TINY, form, rng)
        worst, name, count, skipped = check_gradients(p, x, c, y, rng=rng)
        assert count > 0
        assert worst <= 1e-5, (name, worst)

    def test_saturated_correct_prediction(self):
        p = init_params(TINY, "static")
        p.tensors["b"] = np.asarray(40.0)
        x = np.random.default_rng(0).standard_normal((2, 14, 12))
        loss, grads = loss_and_grads(p, x, None, [1, 1], l2=0.0)
        assert loss == pytest.approx(1e-7, rel=1e-3)
        for g in grads.values():
            assert np.max(np.abs(g)) <= 1e-6

    def test_relative_error_floor(self):
        assert relative_error(0.0, 1e-9) == pytest.approx(1e-3)
        assert relative_error(1.0, 1.0) == 0.0

    def test_detects_small_gradient_bug(self, monkeypatch):
        # a 0.1% error on a single tensor must not hide under the roundoff floor
        from robust_sed.network import gradcheck

        def skewed(*args, **kwargs):
            loss, grads = loss_and_grads(*args, **kwargs)
            grads["dense4_b"] = grads["dense4_b"] * 1.001
            return loss, grads

        monkeypatch.setattr(gradcheck, "loss_and_grads", skewed)
        rng = np.random.default_rng(7)
        p, x, c, y = random_instance(TINY, "at", rng)
        worst, name, _, _ = check_gradients(p, x, c, y, rng=rng)
        assert name == "dense4_b" and worst > 1e-4

    @pytest.mark.parametrize("start", [1, 2])
    def test_conv_resume_matches_full_pass(self, start):
        from robust_sed.network.gradcheck import _conv_stack

        rng = np.random.default_rng(2)
        p, x, _, _ = random_instance(DESK_GEOMETRY, "static", rng)
        prefix = []
        flat, digest = _conv_stack(p, x, prefix=prefix)
        p.tensors[f"conv{start + 1}_w"][0, 0, 0, 0] += 0.5
        resumed = _conv_stack(p, x, start, prefix)
        full = _conv_stack(p, x)
        np.testing.assert_array_equal(resumed[0], full[0])
        assert resumed[1] == full[1]
        assert not np.array_equal(resumed[0], flat)

    @given(st.integers(min_value=1, max_value=4), st.integers(min_value=0, max_value=10**6))
    @settings(max_examples=10, deadline=None)
    def test_pool_backward_routes_to_argmax(self, batch, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((batch, 6, 5, 2))
        out, cache = layers.maxpool_forward(x, (2, 2))
        dout = rng.standard_normal(out.shape)
        dx = layers.maxpool_backward(dout, (2, 2), cache)
        # the gradient is a scatter: total mass preserved, remainder row/column untouched
        assert dx.sum() == pytest.approx(dout.sum())
        np.testing.assert_array_equal(dx[:, :, 4], 0.0)
        np.testing.assert_array_equal(out, _naive_pool(x, (2, 2)))
        fast, _ = layers.maxpool_forward(x, (2, 2), return_cache=False)
        np.testing.assert_array_equal(fast, out)


class TestAdam:
    def test_zero_gradients(self):
        t = {"a": np.array([1.0, -2.0])}
        state = AdamState()
        adam_step(t, {"a": np.zeros(2)}, state)
        np.testing.assert_array_equal(t["a"], [1.0, -2.0])
        assert state.step == 1

    def test_first_step(self):
        t = {"a": np.asarray(0.5)}
        adam_step(t, {"a": np.asarray(2.0)}, AdamState())
        # bias-corrected moments are exactly g and g^2
        assert float(t["a"]) == pytest.approx(0.5 - 0.001 * 2.0 / (2.0 + 1e-8), abs=1e-15)

    def test_quadratic_descent(self):
        t = {"a": np.array([3.0])}
        state = AdamState(lr=0.05)
        losses = []
        for _ in range(100):
            losses.append(float(t["a"][0] ** 2))
            adam_step(t, {"a": 2 * t["a"]}, state)
        assert all(b < a for a, b in zip(losses[5:], losses[6:]))

    def test_mismatched_keys(self):
        with pytest.raises(ValueError, match="do not match"):
            adam_step({"a": np.zeros(1)}, {"b": np.zeros(1)}, AdamState())


def _toy_clips(n=40, geometry=TINY, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    x = np.where(labels[:, None, None] == 1, 1.0, -1.0) * np.ones((n,) + (geometry.n_frames,
                                                                         geometry.n_bands))
    x = x + 0.01 * rng.standard_normal(x.shape)
    c = rng.standard_normal((n, geometry.n_quantiles, geometry.n_ctx_bands))
    return ClipDataset(x, labels, c)


class TestTraining:
    @pytest.mark.parametrize("form", ["static", "at"])
    def test_separable_toy(self, form):
        data = _toy_clips()
        p, hist = train(data, TrainConfig(epochs=50, batch_size=8, dtype="float64"), form, TINY)
        from robust_sed.network.training import normalize_inputs
        x, c = normalize_inputs(p.meta["normalization"], data.patches, data.contexts)
        _, acc = evaluate(p, ClipDataset(x, data.labels, c))
        assert acc == 1.0

    def test_zero_epochs(self):
        init = init_params(TINY, "static", seed=3)
        p, hist = train(_toy_clips(), TrainConfig(epochs=0, dtype="float64"), "static", TINY,
                        init=init)
        for k in init.tensors:
            np.testing.assert_array_equal(p.tensors[k], init.tensors[k])
        assert hist.epochs == []

    def test_deterministic(self):
        data = _toy_clips()
        cfg = TrainConfig(epochs=3, batch_size=8, seed=5)
        a, _ = train(data, cfg, "moe", TINY, val=data)
        b, _ = train(data, cfg, "moe", TINY, val=data)
        for k in a.tensors:
            np.testing.assert_array_equal(a.tensors[k], b.tensors[k])

    def test_needs_both_classes(self):
        data = _toy_clips()
        with pytest.raises(ValueError, match="both positive and negative"):
            train(data.subset(data.labels == 1), TrainConfig(epochs=1), "static", TINY)


class TestPredict:
    @pytest.mark.parametrize("form", ["aw", "at", "moe"])
    def test_manual_composition(self, form):
        p = _randomized(TINY, form, 9)
        rng = np.random.default_rng(10)
        x = rng.standard_normal((5, 14, 12))
        c = rng.standard_normal((5, 3, 4))
        z = _naive_main(x, p)
        za = _naive_aux(c, p)
        t = p.tensors
        if form == "aw":
            ref = merge_aw(z, za, t["b"])
        elif form == "at":
            ref = merge_at(z, za, t["w"], t["w_aux"])
        else:
            ref = merge_moe(z, za, t["w"], t["b"], t["moe_w_aux"], t["moe_b_aux"])
        np.testing.assert_allclose(predict(x, c, p), ref, atol=1e-12)
        assert predict(x[0], c[0], p) == pytest.approx(ref[0], abs=1e-12)

    def test_context_required(self):
        with pytest.raises(ValueError, match="requires context"):
            forward(init_params(TINY, "at"), np.zeros((1, 14, 12)))

    def test_clamp_constant(self):
        assert Y_CLAMP == 1e-7
