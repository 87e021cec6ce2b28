import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spcit.core import DataValidationError, StructuralError
from spcit.rng import Stream
from spcit.transformer import DecoderConfig, DecoderNetwork, pinball_batch, pinball_loss, predict_quantile_grid
from spcit.transformer.network import sinusoidal_positions


def tiny_config(**kw):
    defaults = dict(
        window_w=8,
        input_dim=2,
        quantile_levels=(0.1, 0.5, 0.9),
        d_model=4,
        n_heads=2,
        n_layers=1,
        dropout=0.0,
        seed=3,
    )
    defaults.update(kw)
    return DecoderConfig(**defaults)


# ------------------------------------------------------------ naive oracle

def naive_forward(net: DecoderNetwork, window: np.ndarray) -> np.ndarray:
    """Straight-line reimplementation with explicit position/head loops.

    Shares only the parameter arrays with the network; every operation is
    written out longhand so it exercises none of the vectorized code paths.
    """
    cfg = net.cfg
    w, D = cfg.window_w, cfg.d_model
    dh = D // cfg.n_heads

    def layernorm(vec, g, b):
        mu = sum(vec) / len(vec)
        var = sum((v - mu) ** 2 for v in vec) / len(vec)
        return [(v - mu) / math.sqrt(var + 1e-5) * gi + bi for v, gi, bi in zip(vec, g, b)]

    def gelu1(v):
        c = math.sqrt(2.0 / math.pi)
        return 0.5 * v * (1.0 + math.tanh(c * (v + 0.044715 * v**3)))

    x = [[sum(window[t][i] * net.in_W[i][j] for i in range(cfg.input_dim)) + net.in_b[j]
          for j in range(D)] for t in range(w)]
    pos = sinusoidal_positions(w, D)
    x = [[x[t][j] + pos[t][j] for j in range(D)] for t in range(w)]

    for layer in net.layers:
        normed = [layernorm(x[t], layer.ln1.g, layer.ln1.b) for t in range(w)]
        att = layer.attn
        q = [[sum(normed[t][i] * att.Wq[i][j] for i in range(D)) + att.bq[j] for j in range(D)]
             for t in range(w)]
        k = [[sum(normed[t][i] * att.Wk[i][j] for i in range(D)) + att.bk[j] for j in range(D)]
             for t in range(w)]
        v = [[sum(normed[t][i] * att.Wv[i][j] for i in range(D)) + att.bv[j] for j in range(D)]
             for t in range(w)]
        heads_out = [[0.0] * D for _ in range(w)]
        for h in range(cfg.n_heads):
            lo = h * dh
            for t in range(w):
                scores = []
                for s in range(t + 1):  # causal: only positions <= t
                    dot = sum(q[t][lo + a] * k[s][lo + a] for a in range(dh))
                    scores.append(dot / math.sqrt(dh))
                m = max(scores)
                exps = [math.exp(sc - m) for sc in scores]
                z = sum(exps)
                probs = [e / z for e in exps]
                for a in range(dh):
                    heads_out[t][lo + a] = sum(probs[s] * v[s][lo + a] for s in range(t + 1))
        attn_out = [[sum(heads_out[t][i] * att.Wo[i][j] for i in range(D)) + att.bo[j]
                     for j in range(D)] for t in range(w)]
        x = [[x[t][j] + attn_out[t][j] for j in range(D)] for t in range(w)]

        normed2 = [layernorm(x[t], layer.ln2.g, layer.ln2.b) for t in range(w)]
        ffn = layer.ffn
        F = ffn.W1.shape[1]
        hidden = [[gelu1(sum(normed2[t][i] * ffn.W1[i][j] for i in range(D)) + ffn.b1[j])
                   for j in range(F)] for t in range(w)]
        ffn_out = [[sum(hidden[t][i] * ffn.W2[i][j] for i in range(F)) + ffn.b2[j]
                    for j in range(D)] for t in range(w)]
        x = [[x[t][j] + ffn_out[t][j] for j in range(D)] for t in range(w)]

    x = [layernorm(x[t], net.final_ln.g, net.final_ln.b) for t in range(w)]
    K = cfg.n_quantiles
    return np.array(
        [[sum(x[t][i] * net.out_W[i][j] for i in range(D)) + net.out_b[j] for j in range(K)]
         for t in range(w)]
    )


class TestForward:
    def test_matches_naive_loop_oracle(self):
        cfg = tiny_config(n_layers=2, window_w=6)
        net = DecoderNetwork(cfg)
        rng = np.random.default_rng(0)
        for _ in range(3):
            window = rng.normal(size=(cfg.window_w, cfg.input_dim))
            fast = net.forward_positions(window)[0]
            slow = naive_forward(net, window)
            assert np.max(np.abs(fast - slow)) <= 1e-10

    def test_affine_collapse_with_zero_weights(self):
        cfg = tiny_config()
        net = DecoderNetwork(cfg)
        for arr in net.params().values():
            arr[...] = 0.0
        net.out_b[...] = np.array([1.0, 2.0, 3.0])
        rng = np.random.default_rng(1)
        for _ in range(5):
            out = net.forward(rng.normal(size=(cfg.window_w, cfg.input_dim)))
            assert np.array_equal(out[0], [1.0, 2.0, 3.0])

    def test_causality_exact(self):
        cfg = tiny_config(n_layers=2)
        net = DecoderNetwork(cfg)
        rng = np.random.default_rng(2)
        for _ in range(25):
            window = rng.normal(size=(cfg.window_w, cfg.input_dim))
            base = net.forward_positions(window)[0]
            i = int(rng.integers(0, cfg.window_w - 1))
            perturbed = window.copy()
            perturbed[i + 1 :] += rng.normal(size=perturbed[i + 1 :].shape) * 10
            changed = net.forward_positions(perturbed)[0]
            assert np.array_equal(base[: i + 1], changed[: i + 1])  # bitwise

    def test_shape_validation(self):
        net = DecoderNetwork(tiny_config())
        with pytest.raises(StructuralError):
            net.forward(np.zeros((3, 2)))
        with pytest.raises(StructuralError):
            net.forward(np.zeros((8, 5)))

    def test_eval_mode_deterministic(self):
        net = DecoderNetwork(tiny_config(dropout=0.5))
        window = np.random.default_rng(3).normal(size=(8, 2))
        a = net.forward(window, train=False)
        b = net.forward(window, train=False)
        assert np.array_equal(a, b)

    def test_dropout_active_only_in_train_mode(self):
        net = DecoderNetwork(tiny_config(dropout=0.5))
        window = np.random.default_rng(4).normal(size=(8, 2))
        eval_out = net.forward(window, train=False)
        train_out = net.forward(window, train=True, stream=Stream(0))
        assert not np.array_equal(eval_out, train_out)


class TestPinball:
    def test_simple_values(self):
        assert pinball_loss(2.0, 0.0, 0.5) == 1.0
        assert pinball_loss(0.0, 1.0, 0.9) == pytest.approx(0.1)
        assert pinball_loss(1.5, 1.5, 0.3) == 0.0

    def test_level_bounds(self):
        with pytest.raises(DataValidationError):
            pinball_loss(0.0, 0.0, 1.5)

    def test_batch_is_mean_over_examples_and_levels(self):
        preds = np.array([[0.0, 1.0], [2.0, 2.0]])
        targets = np.array([1.0, 0.0])
        levels = np.array([0.25, 0.75])
        want = np.mean(
            [
                pinball_loss(1.0, 0.0, 0.25), pinball_loss(1.0, 1.0, 0.75),
                pinball_loss(0.0, 2.0, 0.25), pinball_loss(0.0, 2.0, 0.75),
            ]
        )
        loss, grad = pinball_batch(preds, targets, levels)
        assert loss == pytest.approx(want)
        assert grad.shape == preds.shape

    @given(
        st.floats(-100, 100), st.floats(-100, 100), st.floats(-100, 100),
        st.floats(0.01, 0.99),
    )
    @settings(max_examples=200, deadline=None)
    def test_midpoint_convexity_in_prediction(self, eps, a, b, p):
        mid = pinball_loss(eps, (a + b) / 2, p)
        assert mid <= (pinball_loss(eps, a, p) + pinball_loss(eps, b, p)) / 2 + 1e-9


class TestBackward:
    def _loss_and_grads(self, net, wnd, tgt, levels):
        preds = net.forward(wnd, train=True, stream=None)
        loss, dp = pinball_batch(preds, tgt, levels)
        net.zero_grads()
        net.backward_last(dp)
        return loss, {k: v.copy() for k, v in net.grads().items()}

    def test_gradients_match_finite_differences(self):
        cfg = tiny_config()
        net = DecoderNetwork(cfg)
        rng = np.random.default_rng(7)
        wnd = rng.normal(size=(4, cfg.window_w, cfg.input_dim))
        tgt = rng.normal(size=4) * 2.0
        levels = np.array(cfg.quantile_levels)
        _, grads = self._loss_and_grads(net, wnd, tgt, levels)
        params = net.params()
        h = 1e-5
        checked = 0
        pick = np.random.default_rng(0)
        for name, arr in params.items():
            flat = arr.reshape(-1)
            idxs = range(flat.size) if flat.size <= 12 else pick.choice(flat.size, 12, replace=False)
            for i in idxs:
                old = flat[i]
                flat[i] = old + h
                lp, _ = pinball_batch(net.forward(wnd, train=True), tgt, levels)
                flat[i] = old - h
                lm, _ = pinball_batch(net.forward(wnd, train=True), tgt, levels)
                flat[i] = old
                fd = (lp - lm) / (2 * h)
                ad = grads[name].reshape(-1)[i]
                assert abs(ad - fd) <= 1e-6 + 1e-4 * abs(fd), (name, i, ad, fd)
                checked += 1
        assert checked >= 100

    def test_output_bias_gradient_hand_formula(self):
        # d loss / d out_b[k] = mean_batch( -p_k if eps >= eps' else 1-p_k ) / K
        cfg = tiny_config()
        net = DecoderNetwork(cfg)
        rng = np.random.default_rng(8)
        wnd = rng.normal(size=(6, cfg.window_w, cfg.input_dim))
        tgt = rng.normal(size=6) * 3.0
        levels = np.array(cfg.quantile_levels)
        preds = net.forward(wnd, train=True)
        _, dp = pinball_batch(preds, tgt, levels)
        net.zero_grads()
        net.backward_last(dp)
        K = len(levels)
        hand = np.where(tgt[:, None] - preds >= 0, -levels, 1.0 - levels).mean(axis=0) / K
        assert np.allclose(net.grads()["out_proj.b"], hand, atol=1e-12)

    def test_zero_width_batch_gradients_finite(self):
        # exact ties: the slope-p branch applies and gradients stay finite
        cfg = tiny_config()
        net = DecoderNetwork(cfg)
        wnd = np.zeros((2, cfg.window_w, cfg.input_dim))
        preds = net.forward(wnd, train=True)
        tgt = preds[:, 1].copy()  # tie against the median head
        loss, dp = pinball_batch(preds, tgt, levels=np.array(cfg.quantile_levels))
        net.zero_grads()
        net.backward_last(dp)
        for g in net.grads().values():
            assert np.all(np.isfinite(g))
        # tie contribution uses -p (the slope-p branch)
        assert dp[0, 1] == -0.5 / dp.size


class TestQuantileGridPrediction:
    def test_monotone_after_repair(self):
        net = DecoderNetwork(tiny_config())
        grid = predict_quantile_grid(net, np.random.default_rng(9).normal(size=(8, 2)))
        assert np.all(np.diff(grid.values) >= 0)

    def test_equals_sorted_forward(self):
        net = DecoderNetwork(tiny_config())
        wnd = np.random.default_rng(10).normal(size=(8, 2))
        grid = predict_quantile_grid(net, wnd)
        raw = net.forward(wnd)[0]
        assert np.array_equal(grid.values, np.sort(raw))

    def test_head_permutation_permutes_predictions(self):
        cfg = tiny_config()
        net = DecoderNetwork(cfg)
        wnd = np.random.default_rng(11).normal(size=(8, 2))
        base = net.forward(wnd)[0]
        perm = np.array([2, 0, 1])
        net.out_W[...] = net.out_W[:, perm]
        net.out_b[...] = net.out_b[perm]
        swapped = net.forward(wnd)[0]
        assert np.allclose(swapped, base[perm])


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(DataValidationError):
            tiny_config(d_model=5, n_heads=2)

    def test_levels_validated(self):
        with pytest.raises(DataValidationError):
            tiny_config(quantile_levels=(0.5, 0.5))
        with pytest.raises(DataValidationError):
            tiny_config(quantile_levels=(0.1, 1.5))

    def test_ff_default_is_four_x(self):
        assert tiny_config(d_model=8, n_heads=2).ff_dim == 32
