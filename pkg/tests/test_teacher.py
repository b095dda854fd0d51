"""Policy distribution, GAE, and PPO update tests.

Heavy training behaviour (reward actually improving) lives in the acceptance
suite; here every oracle is small enough to verify by hand or brute force.
"""

import math

import numpy as np
import pytest

from proprospin import io_utils
from proprospin.env.config import EnvConfig, RandomizationRanges
from proprospin.env.hand_env import HandEnv, SimulationDiverged
from proprospin.optim import AdamW
from proprospin.teacher import (
    CURVE_HEADER,
    GaussianPolicy,
    PPOConfig,
    RolloutBuffer,
    UpdateDiverged,
    ValueNet,
    act,
    clipped_surrogate,
    gae,
    gaussian_squash_logp,
    load_teacher,
    normalize_advantages,
    ppo_update,
    save_teacher,
    train_teacher,
)
from proprospin.tensor import Tensor, fd_gradients, no_grad

OBS_DIM = 45
ACT_DIM = 8


def small_policy(seed=0, hidden=(16, 16), dtype=np.float32, **kw):
    rng = np.random.default_rng(seed)
    return GaussianPolicy(OBS_DIM, ACT_DIM, rng, hidden=hidden, dtype=dtype, **kw)


def random_obs(n, seed=1):
    return np.random.default_rng(seed).standard_normal((n, OBS_DIM)).astype(np.float32)


class TestPolicyDistribution:
    def test_deterministic_action_bounded_and_repeatable(self):
        pol = small_policy()
        obs = 50.0 * random_obs(16)  # drive the trunk hard; tanh must still bound
        a1, lp1 = act(pol, obs, deterministic=True)
        a2, _ = act(pol, obs, deterministic=True)
        assert np.array_equal(a1, a2)
        assert np.all(np.abs(a1) <= 1.0)
        assert np.all(np.isfinite(lp1))

    def test_single_obs_convenience(self):
        pol = small_policy()
        a, lp = act(pol, random_obs(1)[0], deterministic=True)
        assert a.shape == (ACT_DIM,)
        assert np.isscalar(lp) or lp.shape == ()

    def test_vanishing_noise_near_deterministic(self):
        pol = GaussianPolicy(6, 2, np.random.default_rng(0), hidden=(8,))
        pol.log_std.data[:] = pol.log_std_min  # smallest permitted noise scale
        obs = np.random.default_rng(1).standard_normal((1, 6)).astype(np.float32)
        det, _ = act(pol, obs, deterministic=True)
        rng = np.random.default_rng(0)
        draws = [act(pol, obs, rng=rng)[0] for _ in range(3)]
        for a in draws:
            assert np.max(np.abs(a - det)) < 1e-2
        for a, b in zip(draws, draws[1:]):
            assert np.max(np.abs(a - b)) < 1e-2

    def test_log_prob_matches_density_recomputation(self):
        pol = small_policy(seed=3)
        obs = random_obs(32, seed=4)
        rng = np.random.default_rng(5)
        a, lp, u = pol.sample(obs, rng=rng)
        with no_grad():
            mu = pol.trunk(Tensor(obs)).data
        ls = np.clip(pol.log_std.data, pol.log_std_min, pol.log_std_max)
        want = gaussian_squash_logp(u, mu, ls)
        np.testing.assert_allclose(lp, want, atol=1e-6)
        # and the hand formula, term by term
        z = (u.astype(np.float64) - mu) / np.exp(ls.astype(np.float64))
        base = (
            -0.5 * np.sum(z * z, axis=-1)
            - np.sum(ls)
            - 0.5 * ACT_DIM * math.log(2.0 * math.pi)
        )
        corr = np.sum(np.log(1.0 - np.tanh(u.astype(np.float64)) ** 2 + 1e-6), axis=-1)
        np.testing.assert_allclose(lp, base - corr, atol=1e-6)

    def test_differentiable_log_prob_agrees_with_sampler(self):
        pol = small_policy(seed=6)
        obs = random_obs(16, seed=7)
        _, lp, u = pol.sample(obs, rng=np.random.default_rng(8))
        lp_t = pol.log_prob_of(Tensor(obs), Tensor(u))
        np.testing.assert_allclose(lp_t.data, lp, atol=1e-5)

    def test_nonfinite_obs_rejected(self):
        pol = small_policy()
        obs = random_obs(2)
        obs[1, 3] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            act(pol, obs, deterministic=True)

    def test_stochastic_requires_rng(self):
        with pytest.raises(ValueError, match="Generator"):
            act(small_policy(), random_obs(1))

    def test_entropy_monotone_in_clamp_floor(self):
        pol = small_policy()
        pol.log_std.data[:] = -20.0  # below every floor tested
        ents = []
        for floor in (-6.0, -4.0, -2.0, 0.0, 1.0):
            pol.log_std_min = floor
            ents.append(float(pol.entropy().data))
        assert all(a < b for a, b in zip(ents, ents[1:]))

    def test_entropy_matches_gaussian_formula(self):
        pol = small_policy()
        ls = np.clip(pol.log_std.data, pol.log_std_min, pol.log_std_max)
        want = np.sum(ls) + 0.5 * ACT_DIM * (1.0 + math.log(2.0 * math.pi))
        assert abs(float(pol.entropy().data) - want) < 1e-5


class TestGAE:
    def test_lambda_zero_is_one_step_td(self):
        rng = np.random.default_rng(0)
        r = rng.standard_normal((6, 3))
        v = rng.standard_normal((7, 3))
        d = np.zeros((6, 3), dtype=bool)
        adv, ret = gae(r, v, d, gamma=0.9, lam=0.0)
        np.testing.assert_allclose(adv, r + 0.9 * v[1:] - v[:-1], atol=1e-12)
        np.testing.assert_allclose(ret, adv + v[:-1], atol=1e-12)

    def test_gamma_zero_returns_equal_rewards(self):
        rng = np.random.default_rng(1)
        r = rng.standard_normal((5, 2))
        v = rng.standard_normal((6, 2))
        d = np.zeros((5, 2), dtype=bool)
        # gamma=0 kills both bootstrap and recursion: A_t = r_t - V_t
        adv, ret = gae(r, v, d, gamma=1e-300, lam=0.95)
        np.testing.assert_allclose(ret, r, atol=1e-9)

    def test_three_step_brute_force(self):
        # single env, no terminations: A_t = sum_k (gamma*lam)^k delta_{t+k}
        r = np.array([[1.0], [2.0], [3.0]])
        v = np.array([[0.5], [1.5], [2.5], [3.5]])
        d = np.zeros((3, 1), dtype=bool)
        gamma, lam = 0.9, 0.8
        delta = [r[t, 0] + gamma * v[t + 1, 0] - v[t, 0] for t in range(3)]
        want = [
            delta[0] + gamma * lam * delta[1] + (gamma * lam) ** 2 * delta[2],
            delta[1] + gamma * lam * delta[2],
            delta[2],
        ]
        adv, ret = gae(r, v, d, gamma, lam)
        np.testing.assert_allclose(adv[:, 0], want, atol=1e-12)
        np.testing.assert_allclose(ret, adv + v[:-1], atol=1e-12)

    def test_done_masks_bootstrap_and_recursion(self):
        r = np.array([[1.0], [2.0], [3.0]])
        v = np.array([[0.5], [1.5], [2.5], [3.5]])
        d = np.array([[False], [True], [False]])
        gamma, lam = 0.9, 0.8
        adv, _ = gae(r, v, d, gamma, lam)
        # step 1 terminates: delta_1 has no bootstrap, and A_1 has no tail
        d2 = r[2, 0] + gamma * v[3, 0] - v[2, 0]
        d1 = r[1, 0] - v[1, 0]
        d0 = r[0, 0] + gamma * v[1, 0] - v[0, 0]
        np.testing.assert_allclose(adv[:, 0], [d0 + gamma * lam * d1, d1, d2], atol=1e-12)

    def test_shape_validation(self):
        with pytest.raises(ValueError, match="values"):
            gae(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((3, 2), bool), 0.9, 0.9)
        with pytest.raises(ValueError, match="dones"):
            gae(np.zeros((3, 2)), np.zeros((4, 2)), np.zeros((2, 2), bool), 0.9, 0.9)


def filled_buffer(policy, value_net, env, horizon, rng):
    buf = RolloutBuffer(horizon, env.n_envs, env.obs_dim, env.dof)
    obs = env.reset()
    for _ in range(horizon):
        action, logp, u = policy.sample(obs, rng=rng)
        value = value_net.predict(obs)
        res = env.step(action)
        buf.add(obs, u, logp, res.reward, value, res.done | res.truncated)
        obs = res.obs
    buf.finalize(value_net.predict(obs), 0.99, 0.95)
    return buf


def tiny_env(n_envs=2, seed=0):
    return HandEnv(
        EnvConfig(randomization=RandomizationRanges.disabled()), n_envs, seed=seed
    )


class TestPPOUpdate:
    def test_advantage_normalization_invariant(self):
        adv = np.random.default_rng(2).standard_normal(4096) * 37.0 + 5.0
        normed = normalize_advantages(adv)
        assert abs(normed.mean()) < 1e-6
        assert 1.0 - 1e-3 <= normed.std() <= 1.0 + 1e-3

    def test_hand_computed_clipped_objective(self):
        # scalar cases: ratio inside the band, clipped above, clipped below
        eps = 0.2
        cases = [
            # (ratio, advantage, expected objective term)
            (1.1, 2.0, min(1.1 * 2.0, 1.2 * 2.0)),   # inside band
            (1.5, 2.0, min(1.5 * 2.0, 1.2 * 2.0)),   # clip caps the gain
            (0.5, -3.0, min(0.5 * -3.0, 0.8 * -3.0)),  # clip caps the gain (A<0)
            (1.5, -1.0, min(1.5 * -1.0, 1.2 * -1.0)),  # pessimistic: unclipped
        ]
        for ratio, adv, want in cases:
            logp_new = Tensor(np.array([math.log(ratio)], dtype=np.float64))
            loss, ratios = clipped_surrogate(logp_new, np.zeros(1), np.array([adv]), eps)
            assert abs(float(loss.data) - (-want)) < 1e-9
            assert abs(ratios[0] - ratio) < 1e-12

    def test_old_equals_new_gives_unit_ratio_zero_clipfrac(self):
        env = tiny_env()
        pol = small_policy(seed=11)
        vn = ValueNet(OBS_DIM, np.random.default_rng(12), hidden=(16, 16))
        buf = filled_buffer(pol, vn, env, horizon=6, rng=np.random.default_rng(13))
        # lr=0 keeps parameters frozen, so every minibatch sees old == new
        cfg = PPOConfig(iterations=1, n_envs=2, horizon=6, lr=0.0, epochs=2, minibatches=2)
        opt = AdamW(pol.parameters() + vn.parameters(), lr=0.0)
        stats = ppo_update(pol, vn, buf, cfg, opt, np.random.default_rng(14))
        assert stats["clip_frac"] == 0.0
        assert abs(stats["kl"]) < 1e-5
        data = buf.flattened()
        lp = pol.log_prob_of(Tensor(data["obs"]), Tensor(data["pre_tanh"]))
        ratio = np.exp(lp.data - data["log_probs"])
        assert np.max(np.abs(ratio - 1.0)) < 1e-3

    def test_zero_advantages_leave_policy_trunk_untouched(self):
        env = tiny_env()
        pol = small_policy(seed=21)
        vn = ValueNet(OBS_DIM, np.random.default_rng(22), hidden=(16, 16))
        buf = filled_buffer(pol, vn, env, horizon=4, rng=np.random.default_rng(23))
        buf.advantages = np.zeros_like(buf.advantages)
        w_before = {n: p.data.copy() for n, p in pol.trunk.named_parameters()}
        ls_before = pol.log_std.data.copy()
        cfg = PPOConfig(iterations=1, n_envs=2, horizon=4, lr=1e-3, epochs=1, minibatches=1)
        opt = AdamW(pol.parameters() + vn.parameters(), lr=1e-3)
        ppo_update(pol, vn, buf, cfg, opt, np.random.default_rng(24))
        for n, p in pol.trunk.named_parameters():
            np.testing.assert_array_equal(p.data, w_before[n])
        # the entropy bonus still moves log_std
        assert np.any(pol.log_std.data != ls_before)

    def test_nonfinite_loss_aborts_with_diagnostics(self):
        env = tiny_env()
        pol = small_policy(seed=31)
        vn = ValueNet(OBS_DIM, np.random.default_rng(32), hidden=(16, 16))
        buf = filled_buffer(pol, vn, env, horizon=4, rng=np.random.default_rng(33))
        buf.log_probs[0, 0] = np.nan
        cfg = PPOConfig(iterations=1, n_envs=2, horizon=4, epochs=1, minibatches=1)
        opt = AdamW(pol.parameters() + vn.parameters(), lr=cfg.lr)
        with pytest.raises(UpdateDiverged) as exc:
            ppo_update(pol, vn, buf, cfg, opt, np.random.default_rng(34))
        assert "policy_loss" in exc.value.diagnostics

    def test_stats_keys_and_finiteness(self):
        env = tiny_env()
        pol = small_policy(seed=41)
        vn = ValueNet(OBS_DIM, np.random.default_rng(42), hidden=(16, 16))
        buf = filled_buffer(pol, vn, env, horizon=4, rng=np.random.default_rng(43))
        cfg = PPOConfig(iterations=1, n_envs=2, horizon=4, epochs=2, minibatches=2)
        opt = AdamW(pol.parameters() + vn.parameters(), lr=cfg.lr)
        stats = ppo_update(pol, vn, buf, cfg, opt, np.random.default_rng(44))
        assert set(stats) == {"policy_loss", "value_loss", "entropy", "kl", "clip_frac"}
        assert all(np.isfinite(v) for v in stats.values())


class TestSurrogateGradient:
    def test_inside_band_matches_unclipped_estimator(self):
        """FD check on one transition: within the clip band the clipped
        surrogate's gradient equals the plain importance-weighted estimator."""
        rng = np.random.default_rng(51)
        pol = GaussianPolicy(3, 2, rng, hidden=(4,), dtype=np.float64)
        obs = rng.standard_normal((1, 3))
        _, logp0, u = pol.sample(obs, rng=rng)
        adv = np.array([0.7])
        params = pol.parameters()

        def clipped():
            lp = pol.log_prob_of(Tensor(obs, dtype=np.float64), Tensor(u, dtype=np.float64))
            return clipped_surrogate(lp, logp0, adv, clip_eps=0.2)[0]

        def unclipped():
            lp = pol.log_prob_of(Tensor(obs, dtype=np.float64), Tensor(u, dtype=np.float64))
            ratio = (lp - Tensor(logp0, dtype=np.float64)).exp()
            return -(ratio * Tensor(adv, dtype=np.float64)).mean()

        loss_c = clipped()
        loss_c.backward()
        grads_c = [p.grad.copy() for p in params]
        for p in params:
            p.zero_grad()
        loss_u = unclipped()
        loss_u.backward()
        grads_u = [p.grad.copy() for p in params]
        for gc, gu in zip(grads_c, grads_u):
            np.testing.assert_allclose(gc, gu, rtol=1e-12, atol=1e-14)

        fd = fd_gradients(clipped, params, eps=1e-6)
        for g, f in zip(grads_c, fd):
            scale = max(np.max(np.abs(f)), 1e-8)
            assert np.max(np.abs(g - f)) / scale < 1e-4


class TestTrainTeacher:
    def test_zero_iterations_checkpoint_equals_initialization(self, tmp_path):
        env = tiny_env()
        cfg = PPOConfig(iterations=0, n_envs=2, horizon=4)
        pol, vn, hist = train_teacher(env, cfg, out_dir=tmp_path, seed=9)
        assert hist == []
        loaded_pol, loaded_vn, meta = load_teacher(tmp_path / "teacher_final.ptck")
        assert meta["iteration"] == 0
        for k, v in pol.state_dict().items():
            np.testing.assert_array_equal(v, loaded_pol.state_dict()[k])
        for k, v in vn.state_dict().items():
            np.testing.assert_array_equal(v, loaded_vn.state_dict()[k])
        header, rows = io_utils.read_csv(tmp_path / "learning_curve.csv")
        assert header == CURVE_HEADER
        assert rows == []

    def test_short_run_writes_curve_and_checkpoint(self, tmp_path):
        env = tiny_env()
        cfg = PPOConfig(
            iterations=3, n_envs=2, horizon=5, epochs=1, minibatches=1, checkpoint_every=2
        )
        _, _, hist = train_teacher(env, cfg, out_dir=tmp_path, seed=10)
        assert len(hist) == 3
        header, rows = io_utils.read_csv(tmp_path / "learning_curve.csv")
        assert header == CURVE_HEADER
        assert len(rows) == 3
        assert [float(r[0]) for r in rows] == [0.0, 1.0, 2.0]
        assert (tmp_path / "teacher_it2.ptck").exists()
        assert (tmp_path / "teacher_final.ptck").exists()
        # CSV floats round-trip exactly (writer uses repr)
        for row, h in zip(rows, hist):
            assert [float(x) for x in row] == [h[c] for c in CURVE_HEADER]

    def test_env_size_mismatch_rejected(self):
        env = tiny_env()
        with pytest.raises(ValueError, match="n_envs"):
            train_teacher(env, PPOConfig(iterations=1, n_envs=4, horizon=4))

    def test_divergence_reports_iteration(self, tmp_path):
        env = tiny_env()

        def boom(actions):
            raise SimulationDiverged("physics blew up", {"x": 1})

        env.step = boom
        cfg = PPOConfig(iterations=1, n_envs=2, horizon=4)
        with pytest.raises(SimulationDiverged, match="iteration 0"):
            train_teacher(env, cfg, out_dir=tmp_path, seed=1)

    def test_checkpoint_kind_guard(self, tmp_path):
        io_utils.save_checkpoint(
            tmp_path / "bogus.ptck", {"w": np.zeros(3, np.float32)}, {"kind": "student"}
        )
        with pytest.raises(io_utils.IncompatibleCheckpointError, match="student"):
            load_teacher(tmp_path / "bogus.ptck")


class TestConfigValidation:
    @pytest.mark.parametrize(
        "kw",
        [
            {"gamma": 0.0},
            {"gamma": 1.5},
            {"gae_lambda": 0.0},
            {"clip_eps": 0.0},
            {"iterations": -1},
            {"minibatches": 0},
        ],
    )
    def test_bad_values_rejected(self, kw):
        with pytest.raises(ValueError):
            PPOConfig(**kw)
