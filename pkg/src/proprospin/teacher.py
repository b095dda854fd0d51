"""Privileged-observation teacher: tanh-squashed Gaussian policy trained with PPO.

The policy network maps the full 4D+13 observation to a pre-squash action
mean; a state-independent log-std vector controls exploration noise.  Actions
sent to the environment are tanh(sample) and therefore always inside the
[-1, 1] command range.  Log-probabilities include the tanh change-of-variables
correction computed from the stored pre-squash sample, so importance ratios
between policy iterates stay exact.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io_utils
from .env.hand_env import SimulationDiverged
from .nn import MLP, Module
from .optim import AdamW, clip_grad_norm
from .tensor import DEFAULT_DTYPE, Tensor, matmul, minimum, no_grad

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_LOG_2PI = math.log(2.0 * math.pi)
# floor inside log(1 - tanh(u)^2 + eps); keeps the squash correction finite
# when |u| is large enough that tanh saturates in float32
_SQUASH_EPS = 1e-6

DEFAULT_HIDDEN = (512, 512, 256, 128)


class UpdateDiverged(RuntimeError):
    """PPO minibatch produced a non-finite loss; carries loss diagnostics."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class PPOConfig:
    iterations: int = 2000
    n_envs: int = 64
    horizon: int = 160
    lr: float = 1e-4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 5
    minibatches: int = 4
    entropy_coef: float = 0.003
    value_coef: float = 0.5
    max_grad_norm: float = 1.0
    init_log_std: float = -0.5
    checkpoint_every: int = 500

    def __post_init__(self) -> None:
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if not (0.0 < self.gae_lambda <= 1.0):
            raise ValueError(f"gae_lambda must be in (0, 1], got {self.gae_lambda}")
        if self.clip_eps <= 0.0:
            raise ValueError(f"clip_eps must be positive, got {self.clip_eps}")
        if self.iterations < 0 or self.horizon <= 0 or self.n_envs <= 0:
            raise ValueError("iterations must be >= 0; horizon and n_envs positive")
        if self.epochs <= 0 or self.minibatches <= 0:
            raise ValueError("epochs and minibatches must be positive")


class GaussianPolicy(Module):
    """Diagonal Gaussian over pre-squash actions; emitted actions are tanh(u)."""

    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        rng: np.random.Generator,
        hidden: tuple[int, ...] = DEFAULT_HIDDEN,
        init_log_std: float = -0.5,
        dtype=DEFAULT_DTYPE,
    ):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.hidden = tuple(hidden)
        self.np_dtype = np.dtype(dtype)
        self.log_std_min = LOG_STD_MIN
        self.log_std_max = LOG_STD_MAX
        self.trunk = MLP([obs_dim, *hidden, act_dim], rng, activation="elu", dtype=dtype)
        self.log_std = Tensor(
            np.full(act_dim, init_log_std, dtype=dtype), requires_grad=True
        )

    # ------------------------------------------------------------------
    # numpy-side inference (rollouts)
    def _check_obs(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=self.np_dtype)
        if not np.all(np.isfinite(obs)):
            raise ValueError("non-finite observation passed to policy")
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"expected obs dim {self.obs_dim}, got {obs.shape[-1]}")
        return obs

    def sample(
        self,
        obs: np.ndarray,
        rng: np.random.Generator | None = None,
        deterministic: bool = False,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Sample actions for a batch of observations.

        Returns (action, log_prob, pre_tanh).  ``pre_tanh`` is what PPO must
        store: re-evaluating its log-probability under updated parameters is
        the importance ratio, and the squash correction cancels.
        """
        obs = self._check_obs(np.atleast_2d(obs))
        with no_grad():
            mu = self.trunk(Tensor(obs)).data
        log_std = np.clip(self.log_std.data, self.log_std_min, self.log_std_max)
        std = np.exp(log_std)
        if deterministic:
            u = mu.copy()
        else:
            if rng is None:
                raise ValueError("stochastic sampling needs a Generator")
            eps = rng.standard_normal(mu.shape)
            u = (mu + std * eps).astype(self.np_dtype)
        action = np.tanh(u)
        logp = gaussian_squash_logp(u, mu, log_std)
        return action, logp, u

    # ------------------------------------------------------------------
    # differentiable pieces (updates)
    def clamped_log_std(self) -> Tensor:
        return self.log_std.clip(self.log_std_min, self.log_std_max)

    def log_prob_of(self, obs: Tensor, pre_tanh: Tensor) -> Tensor:
        """Log-density of stored pre-squash actions; differentiable in params.

        The tanh correction term depends only on ``pre_tanh`` (constant data
        from the rollout buffer), so it is computed outside the graph.
        """
        mu = self.trunk(obs)
        log_std = self.clamped_log_std()
        diff = pre_tanh - mu
        inv_var = (log_std * (-2.0)).exp()
        quad = matmul(diff.square(), inv_var.reshape(-1, 1)).reshape(-1)
        base = quad * (-0.5) - log_std.sum() - 0.5 * self.act_dim * _LOG_2PI
        corr = _squash_correction(pre_tanh.data)
        return base - Tensor(corr.astype(self.np_dtype))

    def entropy(self) -> Tensor:
        """Entropy of the pre-squash Gaussian (state-independent)."""
        const = 0.5 * self.act_dim * (1.0 + _LOG_2PI)
        return self.clamped_log_std().sum() + const


class ValueNet(Module):
    def __init__(
        self,
        obs_dim: int,
        rng: np.random.Generator,
        hidden: tuple[int, ...] = DEFAULT_HIDDEN,
        dtype=DEFAULT_DTYPE,
    ):
        self.obs_dim = obs_dim
        self.hidden = tuple(hidden)
        self.np_dtype = np.dtype(dtype)
        self.trunk = MLP([obs_dim, *hidden, 1], rng, activation="elu", dtype=dtype)

    def __call__(self, obs: Tensor) -> Tensor:
        return self.trunk(obs).reshape(-1)

    def predict(self, obs: np.ndarray) -> np.ndarray:
        with no_grad():
            v = self(Tensor(np.asarray(obs, dtype=self.np_dtype))).data
        return v


def _squash_correction(u: np.ndarray) -> np.ndarray:
    """Sum over action dims of log(1 - tanh(u)^2 + eps), float64."""
    t = np.tanh(np.asarray(u, dtype=np.float64))
    return np.sum(np.log(1.0 - t * t + _SQUASH_EPS), axis=-1)


def gaussian_squash_logp(u: np.ndarray, mu: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """log p(tanh(u)) for u ~ N(mu, exp(log_std)^2), squash correction included."""
    u64 = np.asarray(u, dtype=np.float64)
    mu64 = np.asarray(mu, dtype=np.float64)
    ls64 = np.asarray(log_std, dtype=np.float64)
    z = (u64 - mu64) / np.exp(ls64)
    base = -0.5 * np.sum(z * z, axis=-1) - np.sum(ls64) - 0.5 * u.shape[-1] * _LOG_2PI
    return base - _squash_correction(u64)


def act(
    policy: GaussianPolicy,
    obs: np.ndarray,
    deterministic: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Convenience wrapper returning (action, log_prob); accepts 1-D obs."""
    single = np.asarray(obs).ndim == 1
    action, logp, _ = policy.sample(obs, rng=rng, deterministic=deterministic)
    if single:
        return action[0], logp[0]
    return action, logp


# ----------------------------------------------------------------------
# advantage estimation
def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation with episode-boundary masking.

    ``rewards`` and ``dones`` are (T, N); ``values`` is (T+1, N) and its last
    row is the bootstrap value of the state after the final step.  A done at
    step t cuts both the bootstrap and the recursion at t.  Timeouts must be
    handled by the caller (fold gamma*V(terminal_obs) into the reward and mark
    the step done).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    horizon, n = rewards.shape
    if values.shape != (horizon + 1, n):
        raise ValueError(
            f"values must be (T+1, N) = {(horizon + 1, n)}, got {values.shape}"
        )
    if dones.shape != (horizon, n):
        raise ValueError(f"dones must be {(horizon, n)}, got {dones.shape}")
    live = 1.0 - np.asarray(dones, dtype=np.float64)
    adv = np.zeros((horizon, n), dtype=np.float64)
    carry = np.zeros(n, dtype=np.float64)
    for t in range(horizon - 1, -1, -1):
        delta = rewards[t] + gamma * live[t] * values[t + 1] - values[t]
        carry = delta + gamma * lam * live[t] * carry
        adv[t] = carry
    return adv, adv + values[:-1]


class RolloutBuffer:
    """Fixed-size (horizon, n_envs) storage for one PPO iteration."""

    def __init__(self, horizon: int, n_envs: int, obs_dim: int, act_dim: int):
        self.horizon = horizon
        self.n_envs = n_envs
        self.obs = np.zeros((horizon, n_envs, obs_dim), dtype=np.float32)
        self.pre_tanh = np.zeros((horizon, n_envs, act_dim), dtype=np.float32)
        self.log_probs = np.zeros((horizon, n_envs), dtype=np.float64)
        self.rewards = np.zeros((horizon, n_envs), dtype=np.float64)
        self.values = np.zeros((horizon + 1, n_envs), dtype=np.float64)
        self.dones = np.zeros((horizon, n_envs), dtype=bool)
        self.advantages: np.ndarray | None = None
        self.returns: np.ndarray | None = None
        self.step = 0

    def add(self, obs, pre_tanh, log_prob, reward, value, done) -> None:
        t = self.step
        if t >= self.horizon:
            raise IndexError("rollout buffer full")
        self.obs[t] = obs
        self.pre_tanh[t] = pre_tanh
        self.log_probs[t] = log_prob
        self.rewards[t] = reward
        self.values[t] = value
        self.dones[t] = done
        self.step = t + 1

    def finalize(self, last_value: np.ndarray, gamma: float, lam: float) -> None:
        if self.step != self.horizon:
            raise RuntimeError(f"buffer has {self.step}/{self.horizon} steps")
        self.values[-1] = last_value
        adv, ret = gae(self.rewards, self.values, self.dones, gamma, lam)
        if not np.all(np.isfinite(adv)):
            raise FloatingPointError("non-finite advantages")
        self.advantages = adv
        self.returns = ret

    def flattened(self) -> dict[str, np.ndarray]:
        if self.advantages is None or self.returns is None:
            raise RuntimeError("finalize() before flattened()")
        b = self.horizon * self.n_envs
        return {
            "obs": self.obs.reshape(b, -1),
            "pre_tanh": self.pre_tanh.reshape(b, -1),
            "log_probs": self.log_probs.reshape(b),
            "advantages": self.advantages.reshape(b),
            "returns": self.returns.reshape(b),
        }


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def clipped_surrogate(
    logp_new: Tensor,
    logp_old: np.ndarray,
    advantages: np.ndarray,
    clip_eps: float,
) -> tuple[Tensor, np.ndarray]:
    """Negative clipped PPO objective; also returns the detached ratios."""
    dtype = logp_new.dtype
    ratio = (logp_new - Tensor(np.asarray(logp_old, dtype=dtype))).exp()
    adv_t = Tensor(np.asarray(advantages, dtype=dtype))
    surr = minimum(
        ratio * adv_t,
        ratio.clip(1.0 - clip_eps, 1.0 + clip_eps) * adv_t,
    )
    return -surr.mean(), ratio.data


def ppo_update(
    policy: GaussianPolicy,
    value_net: ValueNet,
    buffer: RolloutBuffer,
    cfg: PPOConfig,
    optimizer: AdamW,
    rng: np.random.Generator,
) -> dict[str, float]:
    """One PPO update over the whole buffer; returns mean minibatch stats."""
    data = buffer.flattened()
    adv = normalize_advantages(data["advantages"]).astype(np.float32)
    rets = data["returns"].astype(np.float32)
    logp_old_all = data["log_probs"]
    batch = adv.shape[0]
    params = policy.parameters() + value_net.parameters()

    acc = {k: 0.0 for k in ("policy_loss", "value_loss", "entropy", "kl", "clip_frac")}
    count = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(batch)
        for k, idx in enumerate(np.array_split(perm, cfg.minibatches)):
            obs_t = Tensor(data["obs"][idx])
            u_t = Tensor(data["pre_tanh"][idx])
            logp = policy.log_prob_of(obs_t, u_t)
            logp_old = logp_old_all[idx]
            policy_loss, ratio = clipped_surrogate(logp, logp_old, adv[idx], cfg.clip_eps)
            v = value_net(obs_t)
            value_loss = (v - Tensor(rets[idx])).square().mean()
            entropy = policy.entropy()
            loss = (
                policy_loss
                + cfg.value_coef * value_loss
                - cfg.entropy_coef * entropy
            )
            if not np.isfinite(loss.data):
                raise UpdateDiverged(
                    f"non-finite PPO loss at epoch {epoch} minibatch {k}",
                    {
                        "policy_loss": float(policy_loss.data),
                        "value_loss": float(value_loss.data),
                        "entropy": float(entropy.data),
                        "ratio_max": float(np.max(ratio)),
                        "adv_absmax": float(np.max(np.abs(adv[idx]))),
                    },
                )
            for p in params:
                p.zero_grad()
            loss.backward()
            clip_grad_norm(params, cfg.max_grad_norm)
            optimizer.step()

            acc["policy_loss"] += float(policy_loss.data)
            acc["value_loss"] += float(value_loss.data)
            acc["entropy"] += float(entropy.data)
            acc["kl"] += float(np.mean(logp_old - logp.data))
            acc["clip_frac"] += float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps))
            count += 1
    return {k: v / count for k, v in acc.items()}


# ----------------------------------------------------------------------
# checkpointing
def teacher_arrays(policy: GaussianPolicy, value_net: ValueNet) -> dict[str, np.ndarray]:
    arrays = {f"policy.{n}": p.data for n, p in policy.named_parameters()}
    arrays.update({f"value.{n}": p.data for n, p in value_net.named_parameters()})
    return arrays


def save_teacher(
    path: str | Path,
    policy: GaussianPolicy,
    value_net: ValueNet,
    extra: dict | None = None,
) -> None:
    meta = {
        "kind": "teacher",
        "obs_dim": policy.obs_dim,
        "act_dim": policy.act_dim,
        "hidden": list(policy.hidden),
    }
    if extra:
        meta.update(extra)
    io_utils.save_checkpoint(path, teacher_arrays(policy, value_net), meta)


def load_teacher(path: str | Path) -> tuple[GaussianPolicy, ValueNet, dict]:
    meta, arrays = io_utils.load_checkpoint(path)
    kind = meta.get("kind")
    if kind != "teacher":
        raise io_utils.IncompatibleCheckpointError(
            f"cannot load kind={kind!r} checkpoint as kind='teacher'"
        )
    rng = np.random.default_rng(0)
    hidden = tuple(meta["hidden"])
    policy = GaussianPolicy(meta["obs_dim"], meta["act_dim"], rng, hidden=hidden)
    value_net = ValueNet(meta["obs_dim"], rng, hidden=hidden)
    try:
        policy.load_state_dict(
            {n[len("policy."):]: a for n, a in arrays.items() if n.startswith("policy.")}
        )
        value_net.load_state_dict(
            {n[len("value."):]: a for n, a in arrays.items() if n.startswith("value.")}
        )
    except KeyError as e:
        raise io_utils.IncompatibleCheckpointError(str(e)) from e
    return policy, value_net, meta


# ----------------------------------------------------------------------
# training loop
REWARD_TERMS = ("pos", "mag", "dir", "smooth", "vel", "act", "rate", "total")
CURVE_HEADER = (
    ["iteration"]
    + [f"reward_{t}" for t in REWARD_TERMS]
    + ["policy_loss", "value_loss", "entropy", "kl", "clip_frac"]
)


def train_teacher(
    env,
    cfg: PPOConfig,
    out_dir: str | Path | None = None,
    seed: int = 0,
    progress: bool = False,
) -> tuple[GaussianPolicy, ValueNet, list[dict[str, float]]]:
    """Rollout -> GAE -> clipped-surrogate update loop.

    Writes ``learning_curve.csv`` and ``teacher_final.ptck`` to ``out_dir``
    (plus ``teacher_it{N}.ptck`` every ``cfg.checkpoint_every`` iterations).
    Returns the trained nets and the per-iteration stat rows.
    """
    if env.n_envs != cfg.n_envs:
        raise ValueError(f"env has {env.n_envs} envs but cfg.n_envs={cfg.n_envs}")
    init_rng, sample_rng, shuffle_rng = (
        np.random.default_rng(c) for c in np.random.SeedSequence(seed).spawn(3)
    )
    policy = GaussianPolicy(
        env.obs_dim, env.dof, init_rng, init_log_std=cfg.init_log_std
    )
    value_net = ValueNet(env.obs_dim, init_rng)
    optimizer = AdamW(policy.parameters() + value_net.parameters(), lr=cfg.lr)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    history: list[dict[str, float]] = []

    def write_outputs(final: bool, iteration: int) -> None:
        if out is None:
            return
        rows = [[h[c] for c in CURVE_HEADER] for h in history]
        io_utils.write_csv(out / "learning_curve.csv", CURVE_HEADER, rows)
        name = "teacher_final.ptck" if final else f"teacher_it{iteration}.ptck"
        save_teacher(out / name, policy, value_net, {"iteration": iteration})

    obs = env.reset()
    buffer = RolloutBuffer(cfg.horizon, cfg.n_envs, env.obs_dim, env.dof)
    for it in range(cfg.iterations):
        buffer.step = 0
        term_sums = {t: 0.0 for t in REWARD_TERMS}
        try:
            for _ in range(cfg.horizon):
                action, logp, u = policy.sample(obs, rng=sample_rng)
                value = value_net.predict(obs)
                res = env.step(action)
                reward = res.reward.astype(np.float64)
                # timeouts are not failures: bootstrap the cut-off return
                # through the terminal observation, then mask like a done
                trunc = res.truncated & ~res.done
                if np.any(trunc):
                    v_term = value_net.predict(res.terminal_obs[trunc])
                    reward[trunc] += cfg.gamma * v_term
                buffer.add(obs, u, logp, reward, value, res.done | res.truncated)
                for t in REWARD_TERMS[:-1]:
                    term_sums[t] += float(np.mean(res.terms[t]))
                term_sums["total"] += float(np.mean(res.reward))
                obs = res.obs
            buffer.finalize(value_net.predict(obs), cfg.gamma, cfg.gae_lambda)
        except SimulationDiverged as e:
            raise SimulationDiverged(f"iteration {it}: {e}", e.snapshot) from e
        stats = ppo_update(policy, value_net, buffer, cfg, optimizer, shuffle_rng)
        row = {"iteration": float(it)}
        row.update({f"reward_{t}": term_sums[t] / cfg.horizon for t in REWARD_TERMS})
        row.update(stats)
        history.append(row)
        if progress and (it % 10 == 0 or it == cfg.iterations - 1):
            print(
                f"iter {it}: reward {row['reward_total']:.2f} "
                f"dir {row['reward_dir']:.2f} kl {stats['kl']:.4f}",
                file=sys.stderr,
                flush=True,
            )
        if cfg.checkpoint_every > 0 and (it + 1) % cfg.checkpoint_every == 0:
            write_outputs(final=False, iteration=it + 1)
    write_outputs(final=True, iteration=cfg.iterations)
    return policy, value_net, history
