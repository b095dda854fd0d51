"""Batched planar hand environment.

``HandEnv`` steps N independent environments in lockstep at the policy rate
(sub-stepping the physics kernel), applies the EMA action filter, draws
per-episode randomization and per-step sensor noise from per-env generators,
and maintains the sensor-history ring buffer the student consumes.

Observation layout (teacher, privileged), total 4*D + 13:

    [ q normalized to [-1, 1] (D) | qd (D) | object position (3)
    | object yaw quaternion (4) | command (6) | prev action (D)
    | prev applied command (D) ]

The command block is [target position (3), target angular velocity (3)];
only the z rate is ever nonzero for this task.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import physics
from .config import EnvConfig
from .rewards import reward_terms

try:
    from . import _kernels

    _HAVE_CYTHON = True
except ImportError:  # pragma: no cover - depends on build environment
    _kernels = None
    _HAVE_CYTHON = False

DEFAULT_BACKEND = "cython" if _HAVE_CYTHON else "numpy"


def _affine(u: float, rng: tuple[float, float]) -> float:
    return rng[0] + (rng[1] - rng[0]) * u


def _log_affine(u: float, rng: tuple[float, float]) -> float:
    lo, hi = math.log(rng[0]), math.log(rng[1])
    return math.exp(lo + (hi - lo) * u)


def get_backend(name: str = "auto"):
    """Resolve a backend name to its substep function.

    ``auto`` honors the ``PROPROSPIN_BACKEND`` environment variable before
    falling back to the compiled kernel when it is available.
    """
    if name == "auto":
        name = os.environ.get("PROPROSPIN_BACKEND", DEFAULT_BACKEND)
    if name == "cython":
        if not _HAVE_CYTHON:
            raise RuntimeError("cython kernel not built; reinstall or use backend='numpy'")
        return _kernels.substep_batch, "cython"
    if name == "numpy":
        return physics.substep_batch, "numpy"
    raise ValueError(f"unknown backend {name!r}")


class SimulationDiverged(RuntimeError):
    """Physics produced non-finite state; carries a snapshot for debugging."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class Event:
    env: int
    kind: str   # rotation | drop | timeout
    t: float    # episode time, seconds
    value: float  # rotation: signed direction; drop: 0 contact-loss, 1 distance


@dataclass
class StepResult:
    obs: np.ndarray
    reward: np.ndarray
    terms: dict[str, np.ndarray]
    done: np.ndarray
    truncated: np.ndarray
    terminal_obs: np.ndarray
    events: list[Event] = field(default_factory=list)


class HandEnv:
    def __init__(
        self,
        cfg: EnvConfig,
        n_envs: int,
        seed: int = 0,
        history_len: int = 64,
        backend: str = "auto",
        teacher_obs_mode: str = "privileged",
        pose_noise_std: float = 0.0,
    ):
        if teacher_obs_mode not in ("privileged", "proprio_only"):
            raise ValueError(f"unknown teacher_obs_mode {teacher_obs_mode!r}")
        self.cfg = cfg
        self.n_envs = n_envs
        self.seed = seed
        self.teacher_obs_mode = teacher_obs_mode
        self.pose_noise_std = float(pose_noise_std)
        self._substep, self.backend = get_backend(backend)

        hand = cfg.hand
        self.dof = hand.dof
        self.n_fingers = hand.n_fingers
        self.has_object = cfg.obj is not None

        # geometry (fingers evenly spaced on the base circle, pointing inward)
        angles = np.arange(hand.n_fingers) * (2.0 * math.pi / hand.n_fingers)
        self.base_ang = angles
        self.base_x = hand.base_radius * np.cos(angles)
        self.base_y = hand.base_radius * np.sin(angles)
        self.link_len = np.asarray(hand.link_lengths, dtype=np.float64)
        self.lim_lo = np.tile(np.asarray(hand.joint_limits_lo), hand.n_fingers)
        self.lim_hi = np.tile(np.asarray(hand.joint_limits_hi), hand.n_fingers)
        self.neutral = np.tile(np.asarray(hand.neutral_pose), hand.n_fingers)

        n, d = n_envs, self.dof
        self.q = np.zeros((n, d))
        self.qd = np.zeros((n, d))
        self.th_m = np.zeros((n, d))
        self.th_eff = np.zeros((n, d))
        self.obj = np.zeros((n, 6))
        self.rot_acc = np.zeros(n)
        self.contact = np.zeros((n, self.n_fingers), dtype=np.uint8)

        self.applied = np.zeros((n, d))
        self.prev_action = np.zeros((n, d))
        self.prev_applied = np.zeros((n, d))
        self.cmd = np.zeros((n, 6))
        self.omega_prev = np.zeros(n)

        # per-episode randomized dynamics
        self.ks = np.zeros(n)
        self.ds = np.zeros(n)
        self.inertia = np.zeros(n)
        self.mu = np.zeros(n)
        self.obj_mass = np.ones(n)
        self.obj_inertia = np.ones(n)

        # sensing
        self.sensor_bias = np.zeros((n, d))
        self.read_pos = np.zeros((n, d))
        self.read_vel = np.zeros((n, d))
        self._prev_raw_read = np.zeros((n, d))
        self._pose_noise = np.zeros((n, 4))

        # episode bookkeeping
        self.t = np.zeros(n)
        self.grace_start = np.zeros(n)
        self.low_contact_time = np.zeros(n)
        self.last_event_rot = np.zeros(n)

        self.history_len = history_len
        self.history = np.zeros((n, history_len, 2 * d), dtype=np.float32)
        self._hist_ptr = 0

        self.rngs = [
            np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(i,))))
            for i in range(n_envs)
        ]

    # ------------------------------------------------------------------
    @property
    def obs_dim(self) -> int:
        return 4 * self.dof + 13

    @property
    def dt_policy(self) -> float:
        return self.cfg.sim.dt_policy

    # ------------------------------------------------------------------
    def reset(self) -> np.ndarray:
        self._reset_envs(np.arange(self.n_envs))
        self.history[:] = 0.0
        self._hist_ptr = 0
        self._fill_history(np.arange(self.n_envs))
        return self.teacher_obs()

    def _reset_envs(self, idx: np.ndarray) -> None:
        cfg = self.cfg
        rnd = cfg.randomization
        for i in idx:
            rng = self.rngs[i]
            u = rng.uniform(size=9)
            self.mu[i] = self._combined_friction(u, i)
            self.inertia[i] = cfg.hand.inertia * _affine(u[1], rnd.link_mass_scale)
            self.ks[i] = cfg.hand.stiffness * _log_affine(u[2], rnd.stiffness_scale)
            self.ds[i] = cfg.hand.spring_damping * _log_affine(u[3], rnd.damping_scale)
            if self.has_object:
                scale = _affine(u[5], rnd.object_mass_scale)
                self.obj_mass[i] = cfg.obj.mass * scale
                self.obj_inertia[i] = cfg.obj.inertia_value * scale
                yaw = _affine(u[6], rnd.initial_yaw)
            else:
                yaw = 0.0
            mag = cfg.command.omega_min + (cfg.command.omega_max - cfg.command.omega_min) * u[7]
            if cfg.command.direction == "positive":
                sign = 1.0
            elif cfg.command.direction == "negative":
                sign = -1.0
            else:
                sign = 1.0 if u[8] < 0.5 else -1.0
            self.cmd[i] = [0.0, 0.0, 0.0, 0.0, 0.0, sign * mag]
            self.obj[i] = [0.0, 0.0, yaw, 0.0, 0.0, 0.0]
            self.sensor_bias[i] = rng.normal(0.0, cfg.sensor.bias_std, self.dof)

        self.q[idx] = self.neutral
        self.qd[idx] = 0.0
        self.th_m[idx] = self.neutral
        self.th_eff[idx] = self.neutral
        self.rot_acc[idx] = 0.0
        self.last_event_rot[idx] = 0.0
        self.omega_prev[idx] = 0.0
        neutral_action = 2.0 * (self.neutral - self.lim_lo) / (self.lim_hi - self.lim_lo) - 1.0
        self.applied[idx] = neutral_action
        self.prev_action[idx] = neutral_action
        self.prev_applied[idx] = neutral_action
        self.t[idx] = 0.0
        self.grace_start[idx] = 0.0
        self.low_contact_time[idx] = 0.0
        self.contact[idx] = 0
        self._update_readings(idx, reset=True)
        self._draw_pose_noise(idx)

    def _combined_friction(self, u: np.ndarray, i: int) -> float:
        cfg = self.cfg
        rnd = cfg.randomization
        mu_hand = cfg.hand.friction_coef * _affine(u[0], rnd.hand_friction_scale)
        if not self.has_object:
            return mu_hand
        if rnd.object_friction is None:
            mu_obj = cfg.obj.friction
        else:
            mu_obj = _affine(u[4], rnd.object_friction)
        return 0.5 * (mu_hand + mu_obj)

    # ------------------------------------------------------------------
    def _update_readings(self, idx: np.ndarray, reset: bool = False) -> None:
        """Draw per-step sensor noise and refresh stored readings."""
        sensor = self.cfg.sensor
        dtp = self.dt_policy
        d = self.dof
        for i in idx:
            eps = self.rngs[i].standard_normal(2 * d)
            if sensor.mode == "joint_sensor":
                raw = self.q[i] + self.sensor_bias[i] + sensor.noise_std * eps[:d]
                vel = self.qd[i] + sensor.velocity_noise_std * eps[d:]
            else:
                raw = self.th_m[i] + self.sensor_bias[i] + sensor.noise_std * eps[:d]
                if reset:
                    vel = np.zeros(d)
                else:
                    vel = (raw - self._prev_raw_read[i]) / dtp
            self.read_pos[i] = raw
            self.read_vel[i] = vel
            self._prev_raw_read[i] = raw

    def _draw_pose_noise(self, idx: np.ndarray) -> None:
        if self.pose_noise_std <= 0.0:
            return
        for i in idx:
            self._pose_noise[i] = self.pose_noise_std * self.rngs[i].standard_normal(4)

    # ------------------------------------------------------------------
    def _norm_q(self, q: np.ndarray) -> np.ndarray:
        return 2.0 * (q - self.lim_lo) / (self.lim_hi - self.lim_lo) - 1.0

    def teacher_obs(self) -> np.ndarray:
        yaw = self.obj[:, 2]
        pos = np.zeros((self.n_envs, 3))
        quat = np.zeros((self.n_envs, 4))
        if self.teacher_obs_mode == "privileged":
            pos[:, 0] = self.obj[:, 0]
            pos[:, 1] = self.obj[:, 1]
            quat[:, 0] = np.cos(0.5 * yaw)
            quat[:, 3] = np.sin(0.5 * yaw)
            if self.pose_noise_std > 0.0:
                pos += self._pose_noise[:, :3]
                noisy_yaw = yaw + self._pose_noise[:, 3]
                quat[:, 0] = np.cos(0.5 * noisy_yaw)
                quat[:, 3] = np.sin(0.5 * noisy_yaw)
        obs = np.concatenate(
            [
                self._norm_q(self.q),
                self.qd,
                pos,
                quat,
                self.cmd,
                self.prev_action,
                self.prev_applied,
            ],
            axis=1,
        )
        return obs.astype(np.float32)

    def sensor_tokens(self) -> np.ndarray:
        """Current (normalized position, velocity) reading, shape (N, 2D)."""
        return np.concatenate(
            [self._norm_q(self.read_pos), self.read_vel], axis=1
        ).astype(np.float32)

    def _fill_history(self, idx: np.ndarray) -> None:
        """Seed every slot of the given rows with the current reading."""
        tok = self.sensor_tokens()
        self.history[idx] = tok[idx][:, None, :]

    def _push_history(self) -> None:
        self._hist_ptr = (self._hist_ptr + 1) % self.history_len
        self.history[:, self._hist_ptr, :] = self.sensor_tokens()

    def student_history(self, window: int) -> np.ndarray:
        """Last ``window`` readings, oldest first: shape (N, window, 2D)."""
        if window > self.history_len:
            raise ValueError(f"window {window} exceeds history length {self.history_len}")
        idx = (self._hist_ptr - np.arange(window - 1, -1, -1)) % self.history_len
        return self.history[:, idx, :]

    def action_context(self) -> np.ndarray:
        """(prev raw action, prev applied command), shape (N, 2D)."""
        return np.concatenate([self.prev_action, self.prev_applied], axis=1).astype(np.float32)

    def commands(self) -> np.ndarray:
        return self.cmd.astype(np.float32)

    def privileged_labels(self) -> dict[str, np.ndarray]:
        """Clean reconstruction targets for the current state."""
        pos = np.zeros((self.n_envs, 3), dtype=np.float32)
        pos[:, 0] = self.obj[:, 0]
        pos[:, 1] = self.obj[:, 1]
        return {
            "obj_pos": pos,
            "q": self.q.astype(np.float32),
            "qd": self.qd.astype(np.float32),
        }

    # ------------------------------------------------------------------
    def step(self, actions: np.ndarray) -> StepResult:
        cfg = self.cfg
        actions = np.clip(np.asarray(actions, dtype=np.float64), -1.0, 1.0)
        if actions.shape != (self.n_envs, self.dof):
            raise ValueError(f"actions must be {(self.n_envs, self.dof)}, got {actions.shape}")

        alpha = cfg.sim.ema_alpha
        self.applied = alpha * actions + (1.0 - alpha) * self.applied
        target = self.lim_lo + 0.5 * (self.applied + 1.0) * (self.lim_hi - self.lim_lo)

        self._substep(
            self.q, self.qd, self.th_m, self.th_eff, self.obj, self.rot_acc,
            self.contact, target,
            self.ks, self.ds, self.inertia, self.mu, self.obj_mass, self.obj_inertia,
            self.lim_lo, self.lim_hi,
            self.base_x, self.base_y, self.base_ang, self.link_len,
            cfg.sim.substeps, cfg.sim.dt,
            cfg.hand.joint_damping, cfg.hand.motor_time_constant, cfg.hand.backlash,
            cfg.obj.radius if self.has_object else 0.0,
            cfg.sim.contact_stiffness, cfg.sim.contact_damping, cfg.sim.slip_smoothing,
            cfg.sim.lin_damping, cfg.sim.rot_damping,
            cfg.sim.gravity * cfg.sim.load_lever,
            1 if self.has_object else 0,
        )

        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.obj))):
            bad = np.where(~np.isfinite(self.q).all(axis=1) | ~np.isfinite(self.obj).all(axis=1))[0]
            raise SimulationDiverged(
                f"non-finite state in envs {bad.tolist()}",
                snapshot={"envs": bad.tolist(), "q": self.q[bad].copy(), "obj": self.obj[bad].copy()},
            )

        dtp = self.dt_policy
        self.t += dtp

        terms = reward_terms(
            cfg.reward,
            obj_xy=self.obj[:, :2],
            omega=self.obj[:, 5],
            omega_prev=self.omega_prev,
            cmd_omega=self.cmd[:, 5],
            qd=self.qd,
            action=actions,
            prev_action=self.prev_action,
            dt=dtp,
            has_object=self.has_object,
        )
        reward = terms["total"].astype(np.float32)

        self.omega_prev = self.obj[:, 5].copy()
        self.prev_action = actions.copy()
        self.prev_applied = self.applied.copy()

        self._update_readings(np.arange(self.n_envs))
        self._draw_pose_noise(np.arange(self.n_envs))
        self._push_history()

        events: list[Event] = []
        done = np.zeros(self.n_envs, dtype=bool)
        truncated = np.zeros(self.n_envs, dtype=bool)

        # rotation events: one per full signed turn of accumulated rotation
        for i in range(self.n_envs):
            while self.rot_acc[i] - self.last_event_rot[i] >= 2.0 * math.pi:
                self.last_event_rot[i] += 2.0 * math.pi
                events.append(Event(i, "rotation", float(self.t[i]), 1.0))
            while self.rot_acc[i] - self.last_event_rot[i] <= -2.0 * math.pi:
                self.last_event_rot[i] -= 2.0 * math.pi
                events.append(Event(i, "rotation", float(self.t[i]), -1.0))

        if self.has_object:
            ncont = self.contact.sum(axis=1)
            in_grace = (self.t - self.grace_start) <= cfg.drop_grace
            low = ncont < cfg.min_contacts
            self.low_contact_time = np.where(low & ~in_grace, self.low_contact_time + dtp, 0.0)
            dist = np.sqrt(self.obj[:, 0] ** 2 + self.obj[:, 1] ** 2)
            dropped_contact = self.low_contact_time > cfg.drop_contact_time
            dropped_dist = dist > cfg.drop_distance
            for i in np.where(dropped_contact | dropped_dist)[0]:
                events.append(Event(int(i), "drop", float(self.t[i]),
                                    1.0 if dropped_dist[i] else 0.0))
                if cfg.terminate_on_drop:
                    done[i] = True
                else:
                    # re-seat the disk at the center and restart the grace clock
                    self.obj[i, 0] = 0.0
                    self.obj[i, 1] = 0.0
                    self.obj[i, 3:] = 0.0
                    self.grace_start[i] = self.t[i]
                    self.low_contact_time[i] = 0.0

        timeout = self.t >= cfg.episode_timeout - 0.5 * dtp
        for i in np.where(timeout)[0]:
            events.append(Event(int(i), "timeout", float(self.t[i]), 0.0))
        done |= timeout
        truncated |= timeout

        terminal_obs = np.zeros((self.n_envs, self.obs_dim), dtype=np.float32)
        if done.any():
            snap = self.teacher_obs()
            terminal_obs[done] = snap[done]
            idx = np.where(done)[0]
            self._reset_envs(idx)
            self._fill_history(idx)

        return StepResult(
            obs=self.teacher_obs(),
            reward=reward,
            terms=terms,
            done=done,
            truncated=truncated,
            terminal_obs=terminal_obs,
            events=events,
        )
