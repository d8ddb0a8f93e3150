import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from masr.ssl_backbone import (
    EncoderConfig,
    encode,
    encoder_backward,
    encoder_forward,
    init_backbone,
    make_mask,
    make_quantizer,
    pool,
    quantize_targets,
    segment_mean,
    segment_mean_backward,
    ssl_loss,
    stack_frames,
)


def brute_force_targets(features, projection, codebook, stack):
    out = []
    for s in range(features.shape[0] // stack):
        v = np.concatenate([features[s * stack + k] for k in range(stack)]) @ projection
        norm = math.sqrt(sum(c * c for c in v))
        if norm > 0:
            v = v / norm
        best, best_d = 0, None
        for k, row in enumerate(codebook):
            d = sum((a - b) ** 2 for a, b in zip(v, row))
            if best_d is None or d < best_d:
                best, best_d = k, d
        out.append(best)
    return out


class TestQuantizer:
    def test_single_code(self):
        q = make_quantizer(0, 5, 2, 4, 1)
        x = np.random.default_rng(0).standard_normal((9, 5))
        assert quantize_targets(x, q).tolist() == [0] * 4

    def test_regeneration_bit_identical(self):
        a = make_quantizer(11, 6, 2, 4, 8)
        b = make_quantizer(11, 6, 2, 4, 8)
        assert a.projection.tobytes() == b.projection.tobytes()
        assert a.codebook.tobytes() == b.codebook.tobytes()
        np.testing.assert_allclose(np.linalg.norm(a.codebook, axis=1), 1.0, rtol=1e-12)

    def test_immutable(self):
        q = make_quantizer(0, 3, 1, 2, 4)
        with pytest.raises(ValueError):
            q.codebook[0, 0] = 1.0

    def test_exact_codebook_match(self):
        # A stacked input whose projection is a multiple of row k maps to k.
        q = make_quantizer(3, 4, 1, 4, 6)
        for k in range(6):
            x = np.linalg.solve(q.projection.T, 2.5 * q.codebook[k])
            assert quantize_targets(x[None, :], q).tolist() == [k]

    def test_too_short(self):
        q = make_quantizer(0, 3, 2, 2, 4)
        with pytest.raises(ValueError):
            quantize_targets(np.ones((1, 3)), q)

    def test_ten_steps_against_scan(self):
        q = make_quantizer(5, 6, 2, 4, 8)
        x = np.random.default_rng(1).standard_normal((21, 6))
        got = quantize_targets(x, q).tolist()
        assert len(got) == 10
        assert got == brute_force_targets(x, q.projection, q.codebook, 2)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10 ** 6), st.integers(1, 64), st.integers(1, 64), st.integers(1, 3), st.integers(1, 4))
    def test_scan_property(self, seed, T, V, S, F):
        if T < S:
            return
        q = make_quantizer(seed, F, S, 3, V)
        x = np.random.default_rng(seed).standard_normal((T, F))
        assert quantize_targets(x, q).tolist() == brute_force_targets(x, q.projection, q.codebook, S)

    def test_stack_layout(self):
        x = np.arange(10).reshape(5, 2)
        np.testing.assert_array_equal(stack_frames(x, 2), [[0, 1, 2, 3], [4, 5, 6, 7]])


class TestMask:
    def test_zero_prob(self):
        assert make_mask(30, 0.0, 3, 1).indices.size == 0

    def test_all_masked(self):
        assert make_mask(30, 1.0, 1, 1).indices.tolist() == list(range(30))

    def test_recorded(self):
        assert make_mask(50, 0.08, 4, seed=2024).indices.tolist() == [23, 24, 25, 26, 27, 28, 29, 30]

    def test_deterministic_and_clipped(self):
        a = make_mask(20, 0.3, 5, 9)
        b = make_mask(20, 0.3, 5, 9)
        assert a.indices.tolist() == b.indices.tolist()
        assert a.indices.max() < 20
        assert make_mask(3, 1.0, 10, 0).indices.tolist() == [0, 1, 2]

    def test_spans_cover_starts(self):
        from masr._rng import rng_for

        plan = make_mask(40, 0.2, 3, 4)
        starts = np.flatnonzero(rng_for(4, "mask").random(40) < 0.2)
        expect = sorted({s + k for s in starts for k in range(3) if s + k < 40})
        assert plan.indices.tolist() == expect


class TestEncode:
    def test_identity_encoder(self):
        cfg = EncoderConfig(mel_bins=3, stack=2, layers=0, vocab=4)
        params = init_backbone(cfg, 0)
        x = np.random.default_rng(0).standard_normal((6, 3))
        mask = make_mask(3, 0.0, 1, 0)
        np.testing.assert_array_equal(encode(x, mask, params, cfg), stack_frames(x, 2))
        mask = make_mask(3, 1.0, 1, 0)
        z = encode(x, mask, params, cfg)
        np.testing.assert_array_equal(z, np.tile(params["mask_embedding"], (3, 1)))

    def test_all_masked_independent_of_features(self):
        cfg = EncoderConfig(mel_bins=4, stack=1, layers=2, dim=5, vocab=3)
        params = init_backbone(cfg, 2)
        mask = make_mask(7, 1.0, 1, 0)
        rng = np.random.default_rng(0)
        a = encode(rng.standard_normal((7, 4)), mask, params, cfg)
        b = encode(rng.standard_normal((7, 4)), mask, params, cfg)
        np.testing.assert_array_equal(a, b)

    def test_hand_evaluated_block(self):
        # One block, d_z = 3, context 1, F = 1, S = 1: input to step t is (x[t-1], x[t], x[t+1]).
        cfg = EncoderConfig(mel_bins=1, stack=1, context=1, layers=1, dim=3, vocab=2)
        params = init_backbone(cfg, 0)
        params["encoder.w0"] = np.array([[1.0, 0.0, 0.5], [0.0, 1.0, 0.5], [0.0, 0.0, 0.5]])
        params["encoder.b0"] = np.array([0.0, 0.1, -0.2])
        x = np.array([[1.0], [2.0]])
        z = encode(x, None, params, cfg)
        expect = np.array([
            [math.tanh(0.0), math.tanh(1.0 + 0.1), math.tanh(0.5 * (1 + 2) - 0.2)],
            [math.tanh(1.0), math.tanh(2.0 + 0.1), math.tanh(0.5 * (1 + 2) - 0.2)],
        ])
        np.testing.assert_allclose(z, expect, rtol=0, atol=1e-15)

    def test_batched_matches_single(self):
        cfg = EncoderConfig(mel_bins=3, stack=2, context=2, layers=2, dim=4, vocab=3)
        params = init_backbone(cfg, 1)
        rng = np.random.default_rng(3)
        utts = [rng.standard_normal((2 * n, 3)) for n in (3, 1, 5)]
        x = np.concatenate([stack_frames(u, 2) for u in utts])
        z, _ = encoder_forward(x, np.zeros(len(x), dtype=bool), [3, 1, 5], params, cfg)
        single = np.concatenate([encode(u, None, params, cfg) for u in utts])
        np.testing.assert_allclose(z, single, atol=1e-14)

    def test_shape_mismatch(self):
        cfg = EncoderConfig(mel_bins=3, stack=1, layers=1, dim=2, vocab=2)
        with pytest.raises(ValueError):
            encode(np.ones((4, 5)), None, init_backbone(cfg, 0), cfg)


class TestPool:
    def test_constant(self):
        np.testing.assert_array_equal(pool(np.tile([1.5, -2.0], (4, 1))), [1.5, -2.0])

    def test_single(self):
        np.testing.assert_array_equal(pool([[3.0, 4.0]]), [3.0, 4.0])

    def test_hand(self):
        np.testing.assert_allclose(pool([[1, 0], [0, 1], [1, 1]]), [2 / 3, 2 / 3], rtol=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            pool(np.zeros((0, 2)))

    def test_segment_mean_adjoint(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal((9, 3))
        dh = rng.standard_normal((3, 3))
        lengths = [2, 3, 4]
        lhs = (segment_mean(z, lengths) * dh).sum()
        rhs = (z * segment_mean_backward(dh, lengths)).sum()
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestSSLLoss:
    def test_empty_mask(self):
        z = np.ones((4, 3))
        loss, grads, empty = ssl_loss(z, [0, 1, 2, 0], np.zeros(4, bool), np.ones((3, 5)), np.zeros(5))
        assert loss == 0.0 and empty
        assert all(not g.any() for g in grads.values())

    def test_uniform_logits(self):
        z = np.random.default_rng(0).standard_normal((6, 3))
        masked = np.array([1, 0, 1, 1, 0, 0], bool)
        loss, _, empty = ssl_loss(z, [1, 2, 3, 4, 5, 6], masked, np.zeros((3, 8)), np.zeros(8))
        assert not empty
        assert loss == pytest.approx(math.log(8), abs=1e-15)
        assert round(loss, 4) == 2.0794

    def test_non_negative(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            loss, _, _ = ssl_loss(rng.standard_normal((5, 3)), rng.integers(0, 4, 5), rng.random(5) < 0.6,
                                  rng.standard_normal((3, 4)), rng.standard_normal(4))
            assert loss >= 0.0

    def test_gradients_finite_difference(self):
        cfg = EncoderConfig(mel_bins=3, stack=2, context=1, layers=2, dim=4, vocab=5)
        params = init_backbone(cfg, 7)
        rng = np.random.default_rng(7)
        for k in params:
            params[k] = params[k] + 0.3 * rng.standard_normal(params[k].shape)
        x = rng.standard_normal((10, 6))
        masked = np.array([1, 1, 0, 0, 1, 0, 1, 1, 0, 1], bool)
        targets = rng.integers(0, 5, 10)
        lengths = [4, 6]

        def objective(p):
            z, cache = encoder_forward(x, masked, lengths, p, cfg)
            loss, g, _ = ssl_loss(z, targets, masked, p["head.w"], p["head.b"])
            return loss, g, cache

        _, g, cache = objective(params)
        grads = encoder_backward(g["z"], cache, params, cfg)
        grads.update({"head.w": g["head.w"], "head.b": g["head.b"]})
        h = 1e-5
        for name, value in params.items():
            num = np.zeros_like(value)
            for idx in np.ndindex(value.shape):
                orig = value[idx]
                value[idx] = orig + h
                up = objective(params)[0]
                value[idx] = orig - h
                down = objective(params)[0]
                value[idx] = orig
                num[idx] = (up - down) / (2 * h)
            err = np.abs(num - grads[name]).max() / max(np.abs(num).max(), np.abs(grads[name]).max(), 1e-8)
            assert err <= 1e-4, name
