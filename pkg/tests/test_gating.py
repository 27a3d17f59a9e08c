import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fndmoe import tensor as T
from fndmoe.errors import ConfigError, InvalidArgumentError
from fndmoe.gating import (
    GateConfig,
    apply_final_selection,
    gumbel_sigmoid,
    sample_gumbel,
    score_features,
    select_top_k,
    two_pass_select,
    two_pass_select_batch,
)
from fndmoe.tensor import Tensor, check_gradients


def scorer_params(d, seed=0):
    rng = np.random.default_rng(seed)
    b = 1 / math.sqrt(d)
    return {
        "scorer.wq": Tensor(rng.uniform(-b, b, (d, d))),
        "scorer.wk": Tensor(rng.uniform(-b, b, (d, d))),
        "scorer.wv": Tensor(rng.uniform(-b, b, (d, d))),
        "scorer.w": Tensor(rng.uniform(-b, b, (d, 1))),
        "scorer.b": Tensor(rng.normal(size=1)),
    }


def oracle_alphas(x, p):
    """Straight-line numpy: residual single-head self-attention, linear head, softmax."""
    wq, wk, wv = (p[k].data for k in ("scorer.wq", "scorer.wk", "scorer.wv"))
    q, k, v = x @ wq, x @ wk, x @ wv
    s = q @ k.T / math.sqrt(x.shape[1])
    a = np.exp(s - s.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    h = x + a @ v
    logits = (h @ p["scorer.w"].data).ravel() + p["scorer.b"].data[0]
    e = np.exp(logits - logits.max())
    return e / e.sum()


def brute_top_k(alphas, k):
    return sorted(sorted(range(len(alphas)), key=lambda i: (-alphas[i], i))[:k])


class FixedUniform:
    """Stand-in generator whose uniform draws are all one value."""

    def __init__(self, value):
        self.value = value

    def random(self, shape):
        return np.full(shape, self.value)


class TestGateConfig:
    def test_defaults(self):
        cfg = GateConfig()
        assert cfg.tau == 1.0 and cfg.threshold == 0.5 and cfg.fallback_keep_best
        assert cfg.resolve_k(10) == 5
        assert cfg.resolve_k(3) == 2

    def test_gumbel_mode_keeps_everything(self):
        assert GateConfig(mode="gumbel", k=2).resolve_k(6) == 6

    @pytest.mark.parametrize("kwargs", [{"tau": 0.0}, {"tau": -1.0}, {"mode": "max"}, {"k": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            GateConfig(**kwargs)

    def test_k_above_m(self):
        with pytest.raises(ConfigError):
            GateConfig(k=7).resolve_k(6)


class TestScoreFeatures:
    def test_singleton(self):
        assert score_features(Tensor(np.ones((1, 8))), scorer_params(8)).data.tolist() == [1.0]

    @pytest.mark.parametrize("seed", range(5))
    def test_identical_vectors_give_uniform_scores(self, seed):
        row = np.random.default_rng(seed).normal(size=8)
        alphas = score_features(Tensor(np.tile(row, (6, 1))), scorer_params(8, seed)).data
        np.testing.assert_allclose(alphas, 1 / 6, atol=1e-9)

    def test_matches_straight_line_oracle(self):
        x = np.random.default_rng(7).normal(size=(4, 8))
        p = scorer_params(8, seed=11)
        np.testing.assert_allclose(score_features(Tensor(x), p).data, oracle_alphas(x, p), atol=1e-10, rtol=0)

    def test_batched_matches_per_sample(self):
        x = np.random.default_rng(1).normal(size=(3, 5, 8))
        p = scorer_params(8)
        batched = score_features(Tensor(x), p).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], oracle_alphas(x[i], p), atol=1e-12)

    @pytest.mark.parametrize("m", [1, 2, 7, 16, 33, 64])
    def test_normalised(self, m):
        x = np.random.default_rng(m).normal(size=(m, 8)) * 3
        assert abs(score_features(Tensor(x), scorer_params(8)).data.sum() - 1.0) < 1e-9

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgumentError):
            score_features(Tensor(np.zeros((0, 8))), scorer_params(8))


class TestSelectTopK:
    def test_keep_all(self):
        assert select_top_k([0.1, 0.5, 0.2, 0.2], 4).tolist() == [0, 1, 2, 3]

    def test_example(self):
        assert brute_top_k([0.4, 0.1, 0.3, 0.2], 2) == [0, 2]
        assert select_top_k([0.4, 0.1, 0.3, 0.2], 2).tolist() == [0, 2]

    def test_ties_go_to_lower_index(self):
        assert select_top_k([0.25] * 4, 2).tolist() == [0, 1]

    @pytest.mark.parametrize("k", [0, 5])
    def test_out_of_range(self, k):
        with pytest.raises(InvalidArgumentError):
            select_top_k([0.25] * 4, k)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=1, max_size=16), st.data())
    def test_matches_brute_force_with_ties(self, levels, data):
        alphas = np.array(levels, dtype=float) / 10
        k = data.draw(st.integers(1, len(levels)))
        assert select_top_k(alphas, k).tolist() == brute_top_k(alphas.tolist(), k)

    def test_batched_rows_are_independent(self):
        a = np.array([[0.1, 0.6, 0.3], [0.5, 0.2, 0.3]])
        assert select_top_k(a, 2).tolist() == [[1, 2], [0, 2]]


class TestGumbel:
    def test_inverse_e_maps_to_zero(self):
        assert sample_gumbel(3, FixedUniform(math.exp(-1.0))).tolist() == [0.0, 0.0, 0.0]

    def test_clamping_keeps_draws_finite(self):
        assert np.all(np.isfinite(sample_gumbel(2, FixedUniform(0.0))))
        assert np.all(np.isfinite(sample_gumbel(2, FixedUniform(1.0))))

    def test_deterministic_given_seed(self):
        a = sample_gumbel((4, 3), np.random.default_rng(9))
        b = sample_gumbel((4, 3), np.random.default_rng(9))
        assert a.tobytes() == b.tobytes()

    def test_moments(self):
        g = sample_gumbel(10**6, np.random.default_rng(2024))
        assert abs(g.mean() - 0.5772156649) < 0.004
        assert abs(g.var() - math.pi**2 / 6) < 0.01

    def test_bad_count(self):
        with pytest.raises(InvalidArgumentError):
            sample_gumbel(0, np.random.default_rng(0))


class TestGumbelSigmoid:
    @pytest.mark.parametrize("tau", [0.05, 1.0, 7.0])
    def test_zero_numerator_gives_half(self, tau):
        alphas = np.array([0.1, 0.5, 0.9])
        z = gumbel_sigmoid(Tensor(alphas), -np.log(alphas), tau).data
        np.testing.assert_allclose(z, 0.5, atol=1e-15)

    def test_low_temperature_saturates(self):
        assert abs(gumbel_sigmoid(Tensor([0.5]), np.array([1.0]), 0.01).item() - 1.0) < 1e-10

    def test_zero_alpha_is_clamped_and_counted(self):
        from collections import Counter

        seen = Counter()
        z = gumbel_sigmoid(Tensor([0.0, 0.5]), np.zeros(2), 1.0, seen).data
        assert np.all(np.isfinite(z)) and seen["alpha_clamped"] == 1

    def test_retention_frequency_at_half(self):
        rng = np.random.default_rng(5)
        n = 10**5
        z = gumbel_sigmoid(Tensor(np.full(n, 0.5)), sample_gumbel(n, rng), 3.0).data
        assert abs(np.mean(z >= 0.5) - (1 - math.exp(-0.5))) < 0.005

    def test_gradient_wrt_alpha(self):
        g = np.random.default_rng(0).normal(size=4)
        err = check_gradients(lambda a: T.tsum(gumbel_sigmoid(a, g, 0.7) * Tensor([1.0, -1.0, 2.0, 0.5])),
                              np.array([0.1, 0.2, 0.3, 0.4]))
        assert err < 1e-7

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            gumbel_sigmoid(Tensor([0.5, 0.5]), np.zeros(3), 1.0)


class TestFinalSelection:
    def test_boundary_is_kept(self):
        rows = Tensor(np.arange(6.0).reshape(3, 2))
        selected, mask = apply_final_selection(rows, Tensor([0.7, 0.5, 0.49]), GateConfig())
        assert mask.tolist() == [True, True, False]
        np.testing.assert_array_equal(selected.data, rows.data[:2])

    def test_fallback_keeps_best(self):
        selected, mask = apply_final_selection(Tensor([[1.0, 1.0], [2.0, 2.0]]), Tensor([0.2, 0.3]), GateConfig())
        assert mask.tolist() == [False, True]
        np.testing.assert_array_equal(selected.data, [[2.0, 2.0]])

    def test_no_fallback_can_empty_the_set(self):
        selected, mask = apply_final_selection(Tensor(np.ones((2, 2))), Tensor([0.2, 0.3]),
                                               GateConfig(fallback_keep_best=False))
        assert not mask.any() and selected.shape == (0, 2)

    def test_soft_training_scales_rows(self):
        rows = Tensor([[2.0, 4.0], [6.0, 8.0]])
        selected, _ = apply_final_selection(rows, Tensor([0.5, 0.5]), GateConfig(straight_through=False), training=True)
        np.testing.assert_array_equal(selected.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_straight_through_forward_is_hard_backward_is_soft(self):
        rows = Tensor([[2.0, 4.0], [6.0, 8.0], [1.0, 1.0]])
        z = Tensor([0.8, 0.3, 0.6], requires_grad=True)
        selected, mask = apply_final_selection(rows, z, GateConfig(straight_through=True), training=True)
        assert mask.tolist() == [True, False, True]
        np.testing.assert_array_equal(selected.data, [[2.0, 4.0], [1.0, 1.0]])
        T.tsum(selected).backward()
        np.testing.assert_array_equal(z.grad, [6.0, 0.0, 2.0])


class TestTwoPassSelect:
    def setup_method(self):
        self.x = np.random.default_rng(3).normal(size=(4, 8))
        self.p = scorer_params(8, seed=4)

    def test_topk_keep_all_is_identity(self):
        selected, trace = two_pass_select(Tensor(self.x), GateConfig(mode="topk", k=4), self.p, None)
        np.testing.assert_array_equal(selected.data, self.x)
        assert trace.mask.all()

    def test_mask_only_on_top_two(self):
        cfg = GateConfig(mode="topk+gumbel", k=2)
        for seed in range(20):
            _, trace = two_pass_select(Tensor(self.x), cfg, self.p, np.random.default_rng(seed))
            top = brute_top_k(oracle_alphas(self.x, self.p).tolist(), 2)
            assert trace.topk_indices.tolist() == top
            assert set(np.nonzero(trace.mask)[0]) <= set(top) and trace.mask.any()
            # z at the survivors follows the closed form with the recorded draws
            a = trace.alphas[top]
            expected = 1 / (1 + np.exp(-(np.log(a) + trace.gumbels[top])))
            np.testing.assert_allclose(trace.z[top], expected, atol=1e-12)
            assert np.all(trace.z[[i for i in range(4) if i not in top]] == 0)

    def test_same_seed_same_trace(self):
        cfg = GateConfig(mode="topk+gumbel", k=3)
        _, a = two_pass_select(Tensor(self.x), cfg, self.p, np.random.default_rng(1))
        _, b = two_pass_select(Tensor(self.x), cfg, self.p, np.random.default_rng(1))
        for field in ("alphas", "topk_indices", "gumbels", "z", "mask"):
            assert getattr(a, field).tobytes() == getattr(b, field).tobytes()

    def test_baseline_modes(self):
        rng = np.random.default_rng(0)
        sig, tr = two_pass_select(Tensor(self.x), GateConfig(mode="sigmoid"), self.p, rng)
        logits = np.log(oracle_alphas(self.x, self.p))
        gate = 1 / (1 + np.exp(-tr.logits))
        np.testing.assert_allclose(sig.data, self.x * gate[:, None], atol=1e-12)
        np.testing.assert_allclose(tr.logits - tr.logits.max(), logits - logits.max(), atol=1e-10)
        soft, tr = two_pass_select(Tensor(self.x), GateConfig(mode="softmax"), self.p, rng)
        np.testing.assert_allclose(soft.data, self.x * tr.alphas[:, None], atol=1e-12)
        _, tr = two_pass_select(Tensor(self.x), GateConfig(mode="gumbel", k=1), self.p, rng)
        assert tr.topk_indices.tolist() == [0, 1, 2, 3]

    def test_mask_subset_of_topk_everywhere(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(50, 10, 8))
        for mode in ("topk", "gumbel", "topk+gumbel"):
            sel = two_pass_select_batch(Tensor(x), GateConfig(mode=mode, k=4), self.p, rng)
            for row in range(50):
                kept = set(np.nonzero(sel.trace.mask[row])[0])
                assert kept <= set(sel.trace.topk_indices[row].tolist())
            np.testing.assert_allclose(sel.trace.alphas.sum(axis=1), 1.0, atol=1e-9)

    def test_gradient_through_soft_gates(self):
        cfg = GateConfig(mode="topk+gumbel", k=3, straight_through=False, tau=0.8)
        g = np.random.default_rng(2).normal(size=4)
        weights = Tensor(np.random.default_rng(3).normal(size=(3, 8)))
        names = list(self.p)

        def loss(x, *ps):
            params = dict(zip(names, ps))
            rows, _ = two_pass_select(x, cfg, params, None, training=True, gumbels=g)
            return T.tsum(T.tanh(rows) * weights)

        err = check_gradients(loss, [self.x] + [self.p[n].data for n in names], eps=1e-5)
        assert err < 1e-5

    def test_trace_csv(self):
        _, trace = two_pass_select(Tensor(self.x), GateConfig(k=2), self.p, np.random.default_rng(0))
        text = trace.to_csv(["a→b", "a→c", "b→c", "c→d"], "s1")
        lines = text.splitlines()
        assert lines[0] == "sample,pair,alpha,g,z,kept"
        assert len(lines) == 5 and lines[1].startswith("s1,a→b,")
        assert sum(int(l.rsplit(",", 1)[1]) for l in lines[1:]) == int(trace.mask.sum())
