import math

import numpy as np
import pytest

from proprospin import nn
from proprospin.optim import AdamW, clip_grad_norm, grad_global_norm
from proprospin.tensor import Tensor, fd_gradients

from test_tensor import check_grads


def rng64(seed=0):
    return np.random.default_rng(seed)


class TestLayers:
    def test_linear_hand_values(self):
        lin = nn.Linear(2, 2, rng64(), dtype=np.float64)
        lin.W.data[...] = [[1.0, 2.0], [3.0, 4.0]]
        lin.b.data[...] = [10.0, 20.0]
        y = lin(Tensor([[1.0, 1.0]], dtype=np.float64))
        # [1,1] @ [[1,2],[3,4]] + [10,20] = [4+10, 6+20]
        np.testing.assert_allclose(y.data, [[14.0, 26.0]])

    def test_linear_stacked_input(self):
        lin = nn.Linear(3, 4, rng64(1), dtype=np.float64)
        x = rng64(2).normal(size=(2, 5, 3))
        y = lin(Tensor(x, dtype=np.float64)).data
        flat = lin(Tensor(x.reshape(10, 3), dtype=np.float64)).data
        np.testing.assert_allclose(y.reshape(10, 4), flat, rtol=1e-12)

    def test_mlp_gradcheck(self):
        rng = rng64(3)
        mlp = nn.MLP([4, 6, 3], rng, activation="elu", dtype=np.float64)
        x = Tensor(rng.normal(size=(5, 4)), dtype=np.float64)
        check_grads(lambda: mlp(x).square().mean(), mlp.parameters(), tol=5e-6)

    def test_transformer_block_gradcheck(self):
        rng = rng64(4)
        block = nn.TransformerBlock(8, 2, 16, rng, dtype=np.float64)
        x = Tensor(rng.normal(size=(2, 3, 8)), dtype=np.float64)
        check_grads(lambda: block(x).square().mean(), block.parameters(), tol=2e-5)

    def test_attention_permutation_without_positions(self):
        # self-attention with no positional information is permutation
        # equivariant: permuting tokens permutes outputs identically
        rng = rng64(5)
        att = nn.MultiheadSelfAttention(8, 2, rng, dtype=np.float64)
        x = rng.normal(size=(1, 5, 8))
        perm = [3, 0, 4, 1, 2]
        y = att(Tensor(x, dtype=np.float64)).data
        yp = att(Tensor(x[:, perm], dtype=np.float64)).data
        np.testing.assert_allclose(yp, y[:, perm], atol=1e-12)

    def test_lstm_gradcheck(self):
        rng = rng64(6)
        lstm = nn.LSTM(3, 4, rng, dtype=np.float64)
        x = Tensor(rng.normal(size=(2, 5, 3)), dtype=np.float64)
        check_grads(lambda: lstm(x).square().mean(), lstm.parameters(), tol=5e-6)

    def test_lstm_final_state_ignores_padding_free_prefix(self):
        # feeding the same final steps after different prefixes must differ:
        # the recurrence actually carries state
        rng = rng64(7)
        lstm = nn.LSTM(2, 3, rng, dtype=np.float64)
        a = rng.normal(size=(1, 4, 2))
        b = a.copy()
        b[0, 0] += 5.0
        ya = lstm(Tensor(a, dtype=np.float64)).data
        yb = lstm(Tensor(b, dtype=np.float64)).data
        assert np.max(np.abs(ya - yb)) > 1e-8

    def test_parameter_discovery_and_count(self):
        mlp = nn.MLP([4, 8, 2], rng64(8))
        names = [n for n, _ in mlp.named_parameters()]
        assert names == ["layers.0.W", "layers.0.b", "layers.1.W", "layers.1.b"]
        assert mlp.n_parameters() == 4 * 8 + 8 + 8 * 2 + 2

    def test_state_dict_roundtrip(self):
        a = nn.TransformerBlock(8, 2, 16, rng64(9))
        b = nn.TransformerBlock(8, 2, 16, rng64(10))
        b.load_state_dict(a.state_dict())
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_state_dict_mismatch_rejected(self):
        a = nn.MLP([2, 3], rng64(11))
        state = a.state_dict()
        state["bogus"] = np.zeros(1)
        with pytest.raises(KeyError):
            a.load_state_dict(state)

    def test_sinusoidal_positions_hand_values(self):
        pe = nn.sinusoidal_positions(4, 6, dtype=np.float64)
        np.testing.assert_allclose(pe[0], [0, 1, 0, 1, 0, 1], atol=1e-15)
        np.testing.assert_allclose(pe[1, 0], math.sin(1.0), rtol=1e-12)
        np.testing.assert_allclose(pe[1, 1], math.cos(1.0), rtol=1e-12)
        np.testing.assert_allclose(pe[2, 2], math.sin(2.0 / 10000.0 ** (2 / 6)), rtol=1e-12)
        assert np.all(np.abs(pe) <= 1.0)


class TestAdamW:
    def test_first_step_closed_form(self):
        # with constant gradient g, after one step m_hat = g, v_hat = g^2,
        # so the update is lr * (g/(|g|+eps) + wd*p)
        p = Tensor(np.array([2.0, -3.0]), requires_grad=True, dtype=np.float64)
        opt = AdamW([p], lr=0.1, weight_decay=0.01)
        p.grad = np.array([0.5, -1.5])
        assert opt.step()
        expected = np.array(
            [
                2.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 2.0),
                -3.0 - 0.1 * (-1.5 / (1.5 + 1e-8) + 0.01 * -3.0),
            ]
        )
        np.testing.assert_allclose(p.data, expected, rtol=1e-12)
        assert opt.t == 1

    def test_sequence_matches_scalar_reference(self):
        # independent scalar re-implementation, literal arithmetic
        lr, b1, b2, eps, wd = 0.05, 0.9, 0.999, 1e-8, 0.1
        theta, m, v = 1.0, 0.0, 0.0
        grads = [0.3, -0.2, 0.7, 0.1]
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mh = m / (1 - b1**t)
            vh = v / (1 - b2**t)
            theta = theta - lr * (mh / (math.sqrt(vh) + eps) + wd * theta)

        p = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        opt = AdamW([p], lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
        for g in grads:
            p.grad = np.array([g])
            opt.step()
        np.testing.assert_allclose(p.data, [theta], rtol=1e-12)

    def test_decoupled_decay_with_zero_gradient(self):
        # zero gradient leaves moments at zero, so only decay acts:
        # p_n = p_0 * (1 - lr*wd)^n exactly
        p = Tensor(np.array([4.0]), requires_grad=True, dtype=np.float64)
        opt = AdamW([p], lr=0.1, weight_decay=0.5)
        for _ in range(3):
            p.grad = np.array([0.0])
            opt.step()
        np.testing.assert_allclose(p.data, [4.0 * (1 - 0.05) ** 3], rtol=1e-12)

    def test_nan_gradient_skips_step(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
        opt = AdamW([p], lr=0.1)
        p.grad = np.array([np.nan, 0.0])
        assert not opt.step()
        np.testing.assert_array_equal(p.data, [1.0, 2.0])
        assert opt.t == 0
        assert opt.skipped_steps == 1
        np.testing.assert_array_equal(opt.m[0], [0.0, 0.0])
        # a good step afterwards proceeds with t=1 bias correction
        p.grad = np.array([1.0, 1.0])
        assert opt.step()
        assert opt.t == 1

    def test_optimizer_state_roundtrip(self):
        p = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        opt = AdamW([p], lr=0.1)
        p.grad = np.array([0.5])
        opt.step()
        state = opt.state_dict()
        q = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        opt2 = AdamW([q], lr=0.1)
        opt2.load_state_dict(state)
        assert opt2.t == 1
        np.testing.assert_array_equal(opt2.m[0], opt.m[0])


class TestGradClip:
    def test_norm_matches_numpy(self):
        a = Tensor(np.zeros((2, 2)), requires_grad=True, dtype=np.float64)
        b = Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)
        a.grad = np.array([[3.0, 0.0], [0.0, 4.0]])
        b.grad = np.array([0.0, 0.0, 12.0])
        expected = math.sqrt(3.0**2 + 4.0**2 + 12.0**2)  # 13
        assert abs(grad_global_norm([a, b]) - expected) < 1e-12

    def test_clipping_rescales_to_max(self):
        a = Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
        a.grad = np.array([3.0, 4.0])
        norm = clip_grad_norm([a], 1.0)
        assert abs(norm - 5.0) < 1e-12
        np.testing.assert_allclose(a.grad, [0.6, 0.8], rtol=1e-12)
        assert abs(grad_global_norm([a]) - 1.0) < 1e-12

    def test_no_clip_below_max(self):
        a = Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
        a.grad = np.array([0.3, 0.4])
        clip_grad_norm([a], 1.0)
        np.testing.assert_allclose(a.grad, [0.3, 0.4])


class TestDeterminism:
    def test_same_seed_same_training_trajectory(self):
        def run():
            rng = np.random.default_rng(42)
            mlp = nn.MLP([3, 8, 2], rng)
            opt = AdamW(mlp.parameters(), lr=1e-3, weight_decay=0.01)
            data_rng = np.random.default_rng(7)
            x = Tensor(data_rng.normal(size=(16, 3)).astype(np.float32))
            y = Tensor(data_rng.normal(size=(16, 2)).astype(np.float32))
            for _ in range(5):
                opt.zero_grad()
                loss = (mlp(x) - y).square().mean()
                loss.backward()
                opt.step()
            return mlp.state_dict()

        s1, s2 = run(), run()
        for k in s1:
            assert s1[k].tobytes() == s2[k].tobytes(), k
