import numpy as np
import pytest

from visitgan import autodiff as ad
from visitgan import generator as gen_mod
from visitgan import nn


def make_state(rng, d, s, dtype=np.float64):
    return gen_mod.init_generator(rng, d, s, dtype=dtype)


def zero_state(d, s, dtype=np.float64):
    return gen_mod.GeneratorState(
        decode=nn.LinearParams(ad.leaf(np.zeros((d, s), dtype=dtype), requires_grad=True)),
        gru=nn.GRUCellParams(ad.leaf(np.zeros((3 * s, d), dtype=dtype), requires_grad=True),
                             ad.leaf(np.zeros((3 * s, s), dtype=dtype), requires_grad=True),
                             ad.leaf(np.zeros(3 * s, dtype=dtype), requires_grad=True)),
        attention=nn.LinearParams(ad.leaf(np.zeros((1, d), dtype=dtype), requires_grad=True)))


class TestDecodeNoise:
    def test_zero_noise_gives_half(self, rng):
        state = make_state(rng, 5, 3)
        out = gen_mod.decode_noise(state, ad.constant(np.zeros(3)))
        assert np.allclose(out.value, 0.5, atol=1e-15)

    def test_identity_weight_analytic(self):
        d = 4
        state = zero_state(d, d)
        state.decode.weight.value[:] = np.eye(d)
        z = ad.constant(np.full(d, np.log(3.0)))
        assert np.allclose(gen_mod.decode_noise(state, z).value, 0.75, atol=1e-15)

    def test_paper_scale_shapes(self):
        d, s = 4880, 256
        state = make_state(np.random.default_rng(0), d, s, dtype=np.float32)
        out = gen_mod.decode_noise(state, ad.constant(np.zeros(s, dtype=np.float32)))
        assert out.value.shape == (d,)


class TestUnroll:
    def test_single_visit_base_case(self, rng):
        state = make_state(rng, 4, 3)
        z = ad.constant(rng.uniform(0, 1, 3))
        probs, hidden = gen_mod.unroll(state, z, 1)
        assert len(probs) == 1 and len(hidden) == 1
        assert np.array_equal(probs[0].value[0], gen_mod.decode_noise(state, z).value)

    def test_zero_parameters_fixed_point(self):
        state = zero_state(4, 3)
        probs, hidden = gen_mod.unroll(state, ad.constant(np.ones(3)), 4)
        for p in probs:
            assert np.array_equal(p.value, np.full((1, 4), 0.5))
        for h in hidden:
            assert np.array_equal(h.value, np.zeros((1, 3)))

    def test_zero_length_rejected(self, rng):
        state = make_state(rng, 4, 3)
        with pytest.raises(ValueError, match="at least 1"):
            gen_mod.unroll(state, ad.constant(np.ones(3)), 0)

    def test_matches_manual_recursion(self, rng):
        d, s, t = 5, 3, 3
        state = make_state(rng, d, s)
        z = ad.constant(rng.uniform(0, 1, (1, s)))
        probs, hidden = gen_mod.unroll(state, z, t)

        p = ad.sigmoid(nn.linear(state.decode, z))
        h = ad.constant(np.zeros((1, s)))
        for step in range(t):
            assert np.array_equal(probs[step].value, p.value)
            h = nn.gru_cell(state.gru, p, h)
            assert np.array_equal(hidden[step].value, h.value)
            p = ad.sigmoid(nn.linear(state.decode, h))

    def test_one_noise_draw_reproducible(self, rng):
        state = make_state(rng, 4, 3)
        z = rng.uniform(0, 1, (2, 3))
        a = gen_mod.unroll(state, ad.constant(z), 3)
        b = gen_mod.unroll(state, ad.constant(z), 3)
        for x, y in zip(a[0] + a[1], b[0] + b[1]):
            assert np.array_equal(x.value, y.value)


class TestAttention:
    def test_single_visit_is_one(self, rng):
        state = make_state(rng, 4, 3)
        probs, _ = gen_mod.unroll(state, ad.constant(rng.uniform(0, 1, 3)), 1)
        assert np.allclose(gen_mod.attention_scores(state, probs).value, [[1.0]])

    def test_identical_columns_uniform(self, rng):
        state = make_state(rng, 4, 3)
        col = ad.constant(rng.uniform(0, 1, (1, 4)))
        scores = gen_mod.attention_scores(state, [col, col, col])
        assert np.allclose(scores.value, 1.0 / 3.0, atol=1e-12)

    def test_softmax_analytic(self):
        state = zero_state(1, 2)
        state.attention.weight.value[:] = np.log(3.0)
        cols = [ad.constant(np.array([[0.0]])), ad.constant(np.array([[1.0]]))]
        scores = gen_mod.attention_scores(state, cols)  # v = [ln 1, ln 3]
        assert np.allclose(scores.value, [[0.25, 0.75]], atol=1e-12)


class TestConditionalMatrix:
    def test_construction(self):
        scores = ad.constant(np.array([[0.25, 0.75]]))
        cols = gen_mod.conditional_matrix(scores, target=2, d=3)
        stacked = np.stack([c.value[0] for c in cols], axis=1)  # (d, T)
        assert np.array_equal(stacked, [[0, 0], [0, 0], [0.25, 0.75]])
        assert stacked.sum() == 1.0

    def test_single_visit_unit_entry(self):
        cols = gen_mod.conditional_matrix(ad.constant(np.array([[1.0]])), target=0, d=2)
        assert np.array_equal(cols[0].value, [[1.0, 0.0]])

    def test_target_out_of_range(self):
        with pytest.raises(ValueError, match="target"):
            gen_mod.conditional_matrix(ad.constant(np.ones((1, 2))), target=3, d=3)


class TestCalibrate:
    def test_zero_condition_is_identity(self, rng):
        p = [ad.constant(rng.uniform(0, 1, (1, 4)))]
        c = [ad.constant(np.zeros((1, 4)))]
        assert np.array_equal(gen_mod.calibrate(p, c)[0].value, p[0].value)

    def test_clips_at_one(self):
        p = [ad.constant(np.array([[0.9, 0.2]]))]
        c = [ad.constant(np.array([[0.75, 0.25]]))]
        assert np.array_equal(gen_mod.calibrate(p, c)[0].value, [[1.0, 0.45]])


class TestGenerate:
    def test_calibration_never_decreases(self, rng):
        state = make_state(rng, 6, 4)
        out = gen_mod.generate(state, ad.constant(rng.uniform(0, 1, (2, 4))), 3, 4)
        for p, raw in zip(out.probs, out.raw):
            assert np.all(p.value >= raw.value)
            assert np.all(p.value <= 1.0)

    def test_target_row_carries_scores(self, rng):
        # calibrated target row is min(1, raw + score_t) and the added
        # conditional mass totals exactly the score distribution (sum 1)
        state = make_state(rng, 5, 3)
        target = 2
        out = gen_mod.generate(state, ad.constant(rng.uniform(0, 1, (1, 3))), target, 4)
        raw = np.array([p.value[0, target] for p in out.raw])
        calibrated = np.array([p.value[0, target] for p in out.probs])
        assert np.array_equal(calibrated, np.minimum(1.0, raw + out.scores.value[0]))
        assert np.allclose(out.scores.value.sum(), 1.0, atol=1e-6)

    def test_condition_off_returns_raw(self, rng):
        state = make_state(rng, 6, 4)
        out = gen_mod.generate(state, ad.constant(rng.uniform(0, 1, 4)), 1, 3,
                               condition=False)
        assert out.probs is out.raw
        assert out.scores.value.shape == (1, 3)

    def test_gradients_reach_all_parameters(self, rng):
        state = make_state(rng, 5, 3)
        z = ad.leaf(rng.uniform(0, 1, (1, 3)), requires_grad=True)
        out = gen_mod.generate(state, z, 2, 3)
        # random mixing weights: a uniform weighting would sit in the softmax
        # null space and null the attention gradient by construction
        mix = ad.constant(rng.uniform(0.5, 1.5, (1, 15)))
        loss = ad.sum(ad.mul(ad.concat(out.probs, axis=1), mix))
        grads = ad.backward(loss)
        for node in [z, state.decode.weight, state.gru.w_x, state.gru.w_h,
                     state.gru.b, state.attention.weight]:
            assert node in grads
            assert np.any(grads[node] != 0.0), f"zero gradient into {node.name}"


class TestFastPath:
    def test_matches_graph_path(self, rng):
        state = gen_mod.init_generator(np.random.default_rng(4), 7, 5)
        z = rng.uniform(0, 1, (4, 5)).astype(np.float32)
        targets = np.array([2, 0, 6, 2])
        probs, hidden = gen_mod.generate_values(state, z, targets, 3)
        for b in range(4):
            out = gen_mod.generate(state, ad.constant(z[b:b + 1]), int(targets[b]), 3)
            assert np.allclose(out.prob_values()[0], probs[b], atol=1e-6)
            assert np.allclose(out.hidden_values()[0], hidden[b], atol=1e-6)

    def test_deterministic(self, rng):
        state = gen_mod.init_generator(np.random.default_rng(4), 7, 5)
        z = rng.uniform(0, 1, (4, 5)).astype(np.float32)
        targets = np.array([1, 1, 3, 0])
        a = gen_mod.generate_values(state, z, targets, 2)
        b = gen_mod.generate_values(state, z, targets, 2)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


class TestSampleDiscrete:
    def test_degenerate_probabilities(self, rng):
        probs = np.zeros((2, 3, 4))
        probs[0] = 1.0
        out = gen_mod.sample_discrete(probs, rng)
        assert np.all(out[0] == 1.0) and np.all(out[1] == 0.0)

    def test_out_of_range_rejected(self, rng):
        with pytest.raises(ValueError, match="0, 1"):
            gen_mod.sample_discrete(np.array([1.5]), rng)

    def test_mean_near_half(self):
        rng = np.random.default_rng(7)
        draws = gen_mod.sample_discrete(np.full(100_000, 0.5), rng)
        assert abs(draws.mean() - 0.5) < 3 * np.sqrt(0.25 / 100_000)

    def test_expected_target_occurrences_is_one_for_zero_raw_row(self, rng):
        # raw target probability 0 plus a conditional row of total mass 1
        # means the expected number of visits containing the target is 1
        scores = np.array([[0.1, 0.2, 0.3, 0.4]])
        cols = gen_mod.conditional_matrix(ad.constant(scores), target=1, d=3)
        calibrated = gen_mod.calibrate(
            [ad.constant(np.zeros((1, 3)))] * 4, cols)
        total = sum(c.value[0, 1] for c in calibrated)
        assert np.allclose(total, 1.0, atol=1e-12)
