"""Reward terms for the rotate-in-place task.

Shaped attraction terms (position, speed magnitude, direction, smoothness)
are positive kernels; effort terms (joint velocity, action magnitude, action
rate) are quadratic penalties.  Everything is a pure function of the step
data so terms can be recomputed offline from logged trajectories.
"""

from __future__ import annotations

import numpy as np

from .config import RewardConfig


def reward_terms(
    cfg: RewardConfig,
    *,
    obj_xy: np.ndarray,      # (N, 2) object center
    omega: np.ndarray,       # (N,) object angular velocity after the step
    omega_prev: np.ndarray,  # (N,) object angular velocity one policy step ago
    cmd_omega: np.ndarray,   # (N,) commanded angular velocity (z)
    qd: np.ndarray,          # (N, D) joint rates
    action: np.ndarray,      # (N, D) current raw action
    prev_action: np.ndarray,  # (N, D) previous raw action
    dt: float,
    has_object: bool = True,
) -> dict[str, np.ndarray]:
    n = obj_xy.shape[0]
    zeros = np.zeros(n)

    if has_object:
        dist = np.sqrt(obj_xy[:, 0] ** 2 + obj_xy[:, 1] ** 2)
        r_pos = cfg.w_pos * np.exp(-dist / cfg.sigma_pos)
        r_mag = cfg.w_mag * np.exp(-np.abs(np.abs(omega) - np.abs(cmd_omega)) / cfg.sigma_mag)
        # planar cosine similarity degenerates to a sign agreement test
        agree = np.sign(omega) * np.sign(cmd_omega)
        r_dir = cfg.w_dir * agree
        accel = np.abs(omega - omega_prev) / (dt * cfg.sigma_smooth)
        if cfg.smooth_penalty_mode:
            r_smooth = -cfg.w_smooth * accel
        else:
            r_smooth = cfg.w_smooth * np.exp(-accel)
    else:
        r_pos = r_mag = r_dir = r_smooth = zeros

    r_vel = -cfg.w_vel * np.sum(qd * qd, axis=1)
    r_act = -cfg.w_act * np.sum(action * action, axis=1)
    da = action - prev_action
    r_rate = -cfg.w_rate * np.sum(da * da, axis=1)

    total = r_pos + r_mag + r_dir + r_smooth + r_vel + r_act + r_rate
    return {
        "pos": r_pos,
        "mag": r_mag,
        "dir": r_dir,
        "smooth": r_smooth,
        "vel": r_vel,
        "act": r_act,
        "rate": r_rate,
        "total": total,
    }
