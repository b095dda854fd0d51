"""Planar hand dynamics, NumPy reference kernel.

The model, per joint: a motor angle tracks its target through a first-order
lag, drives the joint through a backlash play element followed by a series
elastic coupling, and the joint integrates under spring, damping, contact,
and load torques with semi-implicit Euler.  The object is a free disk in the
plane with penalty contact at the fingertips.

Pipeline for one substep (order matters and is shared verbatim with the
Cython kernel in ``_kernels.pyx``; keep the two in lockstep):

1. ``th_m += dt/tau_m * (target - th_m)``
2. play operator: ``th_eff = clamp(th_eff, th_m - backlash, th_m + backlash)``
3. non-contact torques integrated into the joint rates: series elastic
   ``ks*(th_eff - q) - ds*qd``, viscous joint damping, and the out-of-plane
   gravity load on the proximal joint of each finger that supported the
   disk last substep (split across those supports); disk drag likewise
4. contact geometry frozen for the substep: fingertip positions, tip
   Jacobians, penetration against the disk
5. contact impulses by projected Gauss-Seidel over the fingers: per visit,
   a spring-damper normal force (damper solved implicitly against the
   end-of-substep approach rate) and a regularized Coulomb friction force
   (``mu*F_n*tanh(slip/v_eps)`` solved implicitly against the
   end-of-substep slip), applied as impulse deltas to the joint rates and
   the disk velocity; contact flags refreshed from the final normal forces
6. positions from the updated rates, hard clamp at the joint limits (the
   velocity component into a limit is zeroed)
7. disk pose from the updated disk velocity

Working at the impulse level after the springs have already kicked the
rates means stick friction cancels those kicks within the same substep;
solving contact from forces sampled at the start of the substep instead
sustains a substep-scale limit cycle at these stiffnesses.

All state arrays are float64 and updated in place.
"""

from __future__ import annotations

import math

import numpy as np

BACKEND = "numpy"

# fixed iteration counts keep trajectories deterministic; values are shared
# with the compiled kernel in _kernels.pyx, keep them in lockstep
PGS_SWEEPS = 8
NEWTON_STEPS = 4

# Portable sine/cosine: Cody-Waite range reduction plus minimax polynomial
# kernels, evaluated with plain IEEE adds and multiplies only.  The two
# backends must produce bit-identical trajectories, and library sin/cos
# (libm, numpy's vectorized loops) disagree at the last ulp between builds;
# one ulp inside a contact step forks the whole rollout.  Joint angles stay
# well inside the |x| < 1e6 range where the two-term reduction is exact.
_INVPIO2 = 6.36619772367581382433e-01
_PIO2_HI = 1.57079632673412561417e+00
_PIO2_LO = 6.07710050650619224932e-11
_S1 = -1.66666666666666324348e-01
_S2 = 8.33333333332248946124e-03
_S3 = -1.98412698298579493134e-04
_S4 = 2.75573137070700676789e-06
_S5 = -2.50507602534068634195e-08
_S6 = 1.58969099521155010221e-10
_C1 = 4.16666666666666019037e-02
_C2 = -1.38888888888741095749e-03
_C3 = 2.48015872894767294178e-05
_C4 = -2.75573143513906633035e-07
_C5 = 2.08757232129817482790e-09
_C6 = -1.13596475577881948265e-11


def portable_sincos(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bit-reproducible elementwise (sin, cos) for float64 arrays."""
    n = np.rint(x * _INVPIO2)
    y = (x - n * _PIO2_HI) - n * _PIO2_LO
    z = y * y
    ks = y + y * z * (_S1 + z * (_S2 + z * (_S3 + z * (_S4 + z * (_S5 + z * _S6)))))
    kc = 1.0 - 0.5 * z + z * z * (_C1 + z * (_C2 + z * (_C3 + z * (_C4 + z * (_C5 + z * _C6)))))
    m = n.astype(np.int64) & 3
    sin_v = np.where(m == 0, ks, np.where(m == 1, kc, np.where(m == 2, -ks, -kc)))
    cos_v = np.where(m == 0, kc, np.where(m == 1, -ks, np.where(m == 2, -kc, ks)))
    return sin_v, cos_v


def substep_batch(
    q: np.ndarray,          # (N, D) joint angles, in/out
    qd: np.ndarray,         # (N, D) joint rates, in/out
    th_m: np.ndarray,       # (N, D) motor angles, in/out
    th_eff: np.ndarray,     # (N, D) transmission output angles, in/out
    obj: np.ndarray,        # (N, 6) x, y, yaw, vx, vy, omega, in/out
    rot_acc: np.ndarray,    # (N,) integral of omega dt, in/out
    contact: np.ndarray,    # (N, F) uint8, in/out: per-finger contact flags,
                            # read as last substep's support set, refreshed
                            # every substep
    target: np.ndarray,     # (N, D) motor target angles
    ks: np.ndarray,         # (N,) series stiffness
    ds: np.ndarray,         # (N,) series damping
    inertia: np.ndarray,    # (N,) joint inertia
    mu: np.ndarray,         # (N,) effective contact friction
    obj_mass: np.ndarray,   # (N,)
    obj_inertia: np.ndarray,  # (N,)
    lim_lo: np.ndarray,     # (D,)
    lim_hi: np.ndarray,     # (D,)
    base_x: np.ndarray,     # (F,)
    base_y: np.ndarray,     # (F,)
    base_ang: np.ndarray,   # (F,)
    link_len: np.ndarray,   # (K,)
    n_sub: int,
    dt: float,
    joint_damping: float,
    tau_m: float,
    backlash: float,
    obj_radius: float,
    k_c: float,
    d_c: float,
    v_eps: float,
    lin_damp: float,
    rot_damp: float,
    load_coef: float,       # gravity * load lever arm
    has_object: int,
) -> None:
    n_env, dof = q.shape
    n_fingers = base_x.shape[0]
    n_links = link_len.shape[0]
    rate = dt / tau_m

    for _ in range(n_sub):
        # 1-2: motor lag, then the play element
        th_m += rate * (target - th_m)
        np.clip(th_eff, th_m - backlash, th_m + backlash, out=th_eff)

        # 3: series elastic torque, plus the out-of-plane gravity load
        # shared across the fingers that supported the disk last substep
        tau = ks[:, None] * (th_eff - q) - ds[:, None] * qd
        if has_object:
            prev_nc = contact.sum(axis=1).astype(np.float64)
            load = obj_mass * load_coef / np.maximum(prev_nc, 1.0)
            for f in range(n_fingers):
                tau[:, f * n_links] -= np.where(contact[:, f] > 0, load, 0.0)

        # non-contact forces go straight into the velocities; the contact
        # solve below then works at the impulse level against the
        # post-force velocities, so stick cancels spring and load kicks
        # within the same substep instead of reacting one substep late
        qd += dt * (tau - joint_damping * qd) / inertia[:, None]

        if has_object:
            obj[:, 3] += dt * (-lin_damp * obj[:, 3]) / obj_mass
            obj[:, 4] += dt * (-lin_damp * obj[:, 4]) / obj_mass
            obj[:, 5] += dt * (-rot_damp * obj[:, 5]) / obj_inertia

            # 4: contact geometry, frozen for the substep.  Forward
            # kinematics along each chain (inward-pointing root), tip
            # Jacobian columns via suffix sums, rows projected onto the
            # contact normal and tangent, and the diagonal admittance of
            # each contact.  The tangential diagonal is padded by the
            # finger count: coordinated sweeps load the disk coherently,
            # and overestimating the diagonal only slows the sweep
            # iteration below, never destabilizes it.
            ox, oy = obj[:, 0], obj[:, 1]
            geo = []
            for f in range(n_fingers):
                j0 = f * n_links
                ang = np.full(n_env, base_ang[f] + math.pi)
                px = np.full(n_env, base_x[f])
                py = np.full(n_env, base_y[f])
                sins = np.empty((n_links, n_env))
                coss = np.empty((n_links, n_env))
                for k in range(n_links):
                    ang = ang + q[:, j0 + k]
                    s, c = portable_sincos(ang)
                    sins[k], coss[k] = s, c
                    px = px + link_len[k] * c
                    py = py + link_len[k] * s
                jx = np.empty((n_links, n_env))
                jy = np.empty((n_links, n_env))
                sx = np.zeros(n_env)
                sy = np.zeros(n_env)
                for k in range(n_links - 1, -1, -1):
                    sx = sx + link_len[k] * sins[k]
                    sy = sy + link_len[k] * coss[k]
                    jx[k] = -sx
                    jy[k] = sy
                dx = px - ox
                dy = py - oy
                dist = np.sqrt(dx * dx + dy * dy)
                dist = np.maximum(dist, 1e-9)
                pen = obj_radius - dist
                nx = dx / dist
                ny = dy / dist
                jn = np.empty((n_links, n_env))
                jt = np.empty((n_links, n_env))
                for k in range(n_links):
                    jn[k] = jx[k] * nx + jy[k] * ny
                    jt[k] = jx[k] * -ny + jy[k] * nx
                g_n = 1.0 / obj_mass
                g_t = n_fingers * (1.0 / obj_mass + dist * dist / obj_inertia)
                for k in range(n_links):
                    g_n = g_n + jn[k] * jn[k] / inertia
                    g_t = g_t + jt[k] * jt[k] / inertia
                active = pen > 0.0
                geo.append((j0, jx, jy, jn, jt, nx, ny, dist, pen, g_n, g_t, active))

            # 5: projected Gauss-Seidel over the contacts.  Each visit
            # re-solves one contact exactly against the current iterate
            # velocities and applies the impulse delta immediately, so the
            # fixed point is the simultaneous solution for all contacts
            # regardless of the diagonal estimates.  Fixed sweep and Newton
            # counts keep trajectories deterministic.
            #
            # Normal force: spring on the frozen penetration plus a damper
            # solved implicitly against the end-of-substep approach rate,
            #   f_d = d_c * pen_rate / (1 + d_c * dt * g_n),
            # which caps itself at the impulse that stops the approach.
            #
            # Friction: regularized Coulomb solved implicitly against the
            # end-of-substep slip, ft = mu*fn*sat(slip_end/v_eps) with the
            # algebraic saturation sat(x) = x/sqrt(1+x^2) (exact IEEE ops
            # only, so both backends agree to the bit).  With
            # s_eff = slip + dt*g_t*ft_prev the update is the root of
            #   ft - mu*fn*sat((s_eff - dt*g_t*ft)/v_eps) = 0,
            # unique (monotone residual) and bracketed by
            # [0, min(mu*fn, |s_eff|/(dt*g_t))] so a fixed count of
            # safeguarded Newton steps suffices.
            fn_acc = np.zeros((n_fingers, n_env))
            ft_acc = np.zeros((n_fingers, n_env))
            for _ in range(PGS_SWEEPS):
                for f in range(n_fingers):
                    j0, jx, jy, jn, jt, nx, ny, dist, pen, g_n, g_t, active = geo[f]
                    vtx = np.zeros(n_env)
                    vty = np.zeros(n_env)
                    for k in range(n_links):
                        vtx = vtx + jx[k] * qd[:, j0 + k]
                        vty = vty + jy[k] * qd[:, j0 + k]
                    pen_rate = -(nx * (vtx - obj[:, 3]) + ny * (vty - obj[:, 4]))
                    f_d = d_c * pen_rate / (1.0 + d_c * dt * g_n)
                    fn = np.where(active, np.maximum(k_c * pen + f_d, 0.0), 0.0)
                    imp = (fn - fn_acc[f]) * dt
                    for k in range(n_links):
                        qd[:, j0 + k] += imp * jn[k] / inertia
                    obj[:, 3] -= imp * nx / obj_mass
                    obj[:, 4] -= imp * ny / obj_mass
                    fn_acc[f] = fn

                    vtx = np.zeros(n_env)
                    vty = np.zeros(n_env)
                    for k in range(n_links):
                        vtx = vtx + jx[k] * qd[:, j0 + k]
                        vty = vty + jy[k] * qd[:, j0 + k]
                    slip = ((vtx - obj[:, 3]) * -ny + (vty - obj[:, 4]) * nx) - obj[:, 5] * dist
                    mu_fn = mu * fn
                    g_dt = dt * g_t
                    s_eff = slip + g_dt * ft_acc[f]
                    bound = np.minimum(mu_fn, np.abs(s_eff) / g_dt)
                    lo = np.where(s_eff >= 0.0, 0.0, -bound)
                    hi = np.where(s_eff >= 0.0, bound, 0.0)
                    ft = 0.5 * (lo + hi)
                    for _ in range(NEWTON_STEPS):
                        u = (s_eff - g_dt * ft) / v_eps
                        w = 1.0 + u * u
                        rw = np.sqrt(w)
                        resid = ft - mu_fn * (u / rw)
                        dresid = 1.0 + mu_fn * g_dt / v_eps / (w * rw)
                        lo = np.where(resid < 0.0, ft, lo)
                        hi = np.where(resid > 0.0, ft, hi)
                        stp = ft - resid / dresid
                        inside = (stp > lo) & (stp < hi)
                        ft = np.where(inside, stp, 0.5 * (lo + hi))
                    imp = (ft - ft_acc[f]) * dt
                    for k in range(n_links):
                        qd[:, j0 + k] -= imp * jt[k] / inertia
                    obj[:, 3] += imp * -ny / obj_mass
                    obj[:, 4] += imp * nx / obj_mass
                    obj[:, 5] += imp * dist / obj_inertia
                    ft_acc[f] = ft

            for f in range(n_fingers):
                contact[:, f] = fn_acc[f] > 0.0

        # 6: positions, hard clamp at the limits
        q += dt * qd
        below = q < lim_lo
        above = q > lim_hi
        q[below] = np.broadcast_to(lim_lo, q.shape)[below]
        q[above] = np.broadcast_to(lim_hi, q.shape)[above]
        qd[below & (qd < 0.0)] = 0.0
        qd[above & (qd > 0.0)] = 0.0

        # 7: disk positions
        if has_object:
            obj[:, 0] += dt * obj[:, 3]
            obj[:, 1] += dt * obj[:, 4]
            obj[:, 2] += dt * obj[:, 5]
            rot_acc += dt * obj[:, 5]


def fingertip_positions(
    q: np.ndarray,
    base_x: np.ndarray,
    base_y: np.ndarray,
    base_ang: np.ndarray,
    link_len: np.ndarray,
) -> np.ndarray:
    """Tip (x, y) per finger for a batch of poses; shape (N, F, 2)."""
    n_env = q.shape[0]
    n_fingers = base_x.shape[0]
    n_links = link_len.shape[0]
    tips = np.empty((n_env, n_fingers, 2))
    for f in range(n_fingers):
        ang = np.full(n_env, base_ang[f] + math.pi)
        px = np.full(n_env, base_x[f])
        py = np.full(n_env, base_y[f])
        for k in range(n_links):
            ang = ang + q[:, f * n_links + k]
            s, c = portable_sincos(ang)
            px = px + link_len[k] * c
            py = py + link_len[k] * s
        tips[:, f, 0] = px
        tips[:, f, 1] = py
    return tips
