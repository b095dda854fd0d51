# cython: boundscheck=False, wraparound=False, cdivision=True
"""Planar hand dynamics, compiled kernel.

Same contract and arithmetic as ``physics.substep_batch`` (the NumPy
reference); see that module's docstring for the model and the contact
solve.  Keep every formula and its evaluation order in lockstep with the
reference: the backend equivalence tests compare the two trajectories
directly.
"""

import numpy as np

from libc.math cimport M_PI, fabs, rint, sqrt

BACKEND = "cython"

# keep in lockstep with physics.PGS_SWEEPS / physics.NEWTON_STEPS
DEF PGS_SWEEPS = 8
DEF NEWTON_STEPS = 4

# Portable sine/cosine, same constants and evaluation order as
# physics.portable_sincos.  libm sin/cos differ from numpy's loops at the
# last ulp, which is enough to fork a contact trajectory, so both backends
# evaluate the same polynomial kernels with exact IEEE ops.
DEF INVPIO2 = 6.36619772367581382433e-01
DEF PIO2_HI = 1.57079632673412561417e+00
DEF PIO2_LO = 6.07710050650619224932e-11
DEF KS1 = -1.66666666666666324348e-01
DEF KS2 = 8.33333333332248946124e-03
DEF KS3 = -1.98412698298579493134e-04
DEF KS4 = 2.75573137070700676789e-06
DEF KS5 = -2.50507602534068634195e-08
DEF KS6 = 1.58969099521155010221e-10
DEF KC1 = 4.16666666666666019037e-02
DEF KC2 = -1.38888888888741095749e-03
DEF KC3 = 2.48015872894767294178e-05
DEF KC4 = -2.75573143513906633035e-07
DEF KC5 = 2.08757232129817482790e-09
DEF KC6 = -1.13596475577881948265e-11


cdef inline void _sincos(double x, double* s_out, double* c_out) noexcept nogil:
    cdef double n = rint(x * INVPIO2)
    cdef double y = (x - n * PIO2_HI) - n * PIO2_LO
    cdef double z = y * y
    cdef double ks = y + y * z * (KS1 + z * (KS2 + z * (KS3 + z * (KS4 + z * (KS5 + z * KS6)))))
    cdef double kc = 1.0 - 0.5 * z + z * z * (KC1 + z * (KC2 + z * (KC3 + z * (KC4 + z * (KC5 + z * KC6)))))
    cdef long long m = (<long long> n) & 3
    if m == 0:
        s_out[0] = ks
        c_out[0] = kc
    elif m == 1:
        s_out[0] = kc
        c_out[0] = -ks
    elif m == 2:
        s_out[0] = -ks
        c_out[0] = -kc
    else:
        s_out[0] = -kc
        c_out[0] = ks


def substep_batch(
    double[:, ::1] q,
    double[:, ::1] qd,
    double[:, ::1] th_m,
    double[:, ::1] th_eff,
    double[:, ::1] obj,
    double[::1] rot_acc,
    unsigned char[:, ::1] contact,
    double[:, ::1] target,
    double[::1] ks,
    double[::1] ds,
    double[::1] inertia,
    double[::1] mu,
    double[::1] obj_mass,
    double[::1] obj_inertia,
    double[::1] lim_lo,
    double[::1] lim_hi,
    double[::1] base_x,
    double[::1] base_y,
    double[::1] base_ang,
    double[::1] link_len,
    int n_sub,
    double dt,
    double joint_damping,
    double tau_m,
    double backlash,
    double obj_radius,
    double k_c,
    double d_c,
    double v_eps,
    double lin_damp,
    double rot_damp,
    double load_coef,
    int has_object,
):
    cdef Py_ssize_t n_env = q.shape[0]
    cdef Py_ssize_t dof = q.shape[1]
    cdef Py_ssize_t n_fingers = base_x.shape[0]
    cdef Py_ssize_t n_links = link_len.shape[0]
    cdef double rate = dt / tau_m
    cdef double nf = <double> n_fingers

    tau_arr = np.empty(dof, dtype=np.float64)
    cdef double[::1] tau = tau_arr
    sc_arr = np.empty((2, n_links), dtype=np.float64)
    cdef double[:, ::1] sc = sc_arr
    jx_arr = np.empty((n_fingers, n_links), dtype=np.float64)
    jy_arr = np.empty((n_fingers, n_links), dtype=np.float64)
    jn_arr = np.empty((n_fingers, n_links), dtype=np.float64)
    jt_arr = np.empty((n_fingers, n_links), dtype=np.float64)
    cdef double[:, ::1] jx = jx_arr
    cdef double[:, ::1] jy = jy_arr
    cdef double[:, ::1] jn = jn_arr
    cdef double[:, ::1] jt = jt_arr
    gnx_arr = np.empty((8, n_fingers), dtype=np.float64)
    cdef double[:, ::1] gf = gnx_arr   # rows: nx, ny, dist, pen, g_n, g_t, fn_acc, ft_acc
    act_arr = np.zeros(n_fingers, dtype=np.uint8)
    cdef unsigned char[::1] act = act_arr

    cdef Py_ssize_t s, i, j, f, k, j0, it
    cdef double lo_b, hi_b, ang, px, py, sx, sy
    cdef double dx, dy, dist, pen, nx, ny, g_n, g_t
    cdef double vtx, vty, pen_rate, f_d, fn, imp, slip
    cdef double mu_fn, g_dt, s_eff, bound, tmp, flo, fhi, ft
    cdef double u, w, rw, resid, dresid, stp, load, nc_d

    for s in range(n_sub):
        for i in range(n_env):
            # 1-2: motor lag, then the play element
            for j in range(dof):
                th_m[i, j] += rate * (target[i, j] - th_m[i, j])
                lo_b = th_m[i, j] - backlash
                hi_b = th_m[i, j] + backlash
                if th_eff[i, j] < lo_b:
                    th_eff[i, j] = lo_b
                elif th_eff[i, j] > hi_b:
                    th_eff[i, j] = hi_b
                tau[j] = ks[i] * (th_eff[i, j] - q[i, j]) - ds[i] * qd[i, j]

            # 3: gravity load from last substep's support set, then all
            # non-contact torques straight into the joint rates
            if has_object:
                nc_d = 0.0
                for f in range(n_fingers):
                    if contact[i, f]:
                        nc_d += 1.0
                if nc_d < 1.0:
                    nc_d = 1.0
                load = obj_mass[i] * load_coef / nc_d
                for f in range(n_fingers):
                    if contact[i, f]:
                        tau[f * n_links] -= load
            for j in range(dof):
                qd[i, j] = qd[i, j] + dt * (tau[j] - joint_damping * qd[i, j]) / inertia[i]

            if has_object:
                obj[i, 3] = obj[i, 3] + dt * (-lin_damp * obj[i, 3]) / obj_mass[i]
                obj[i, 4] = obj[i, 4] + dt * (-lin_damp * obj[i, 4]) / obj_mass[i]
                obj[i, 5] = obj[i, 5] + dt * (-rot_damp * obj[i, 5]) / obj_inertia[i]

                # 4: contact geometry, frozen for the substep
                for f in range(n_fingers):
                    j0 = f * n_links
                    ang = base_ang[f] + M_PI
                    px = base_x[f]
                    py = base_y[f]
                    for k in range(n_links):
                        ang = ang + q[i, j0 + k]
                        _sincos(ang, &sc[0, k], &sc[1, k])
                        px = px + link_len[k] * sc[1, k]
                        py = py + link_len[k] * sc[0, k]
                    sx = 0.0
                    sy = 0.0
                    for k in range(n_links - 1, -1, -1):
                        sx = sx + link_len[k] * sc[0, k]
                        sy = sy + link_len[k] * sc[1, k]
                        jx[f, k] = -sx
                        jy[f, k] = sy
                    dx = px - obj[i, 0]
                    dy = py - obj[i, 1]
                    dist = sqrt(dx * dx + dy * dy)
                    if dist < 1e-9:
                        dist = 1e-9
                    pen = obj_radius - dist
                    nx = dx / dist
                    ny = dy / dist
                    g_n = 1.0 / obj_mass[i]
                    g_t = nf * (1.0 / obj_mass[i] + dist * dist / obj_inertia[i])
                    for k in range(n_links):
                        jn[f, k] = jx[f, k] * nx + jy[f, k] * ny
                        jt[f, k] = jx[f, k] * -ny + jy[f, k] * nx
                        g_n = g_n + jn[f, k] * jn[f, k] / inertia[i]
                        g_t = g_t + jt[f, k] * jt[f, k] / inertia[i]
                    gf[0, f] = nx
                    gf[1, f] = ny
                    gf[2, f] = dist
                    gf[3, f] = pen
                    gf[4, f] = g_n
                    gf[5, f] = g_t
                    gf[6, f] = 0.0
                    gf[7, f] = 0.0
                    act[f] = 1 if pen > 0.0 else 0

                # 5: projected Gauss-Seidel over the contacts; see the
                # reference kernel for the scheme and the bracketed Newton
                for it in range(PGS_SWEEPS):
                    for f in range(n_fingers):
                        j0 = f * n_links
                        nx = gf[0, f]
                        ny = gf[1, f]
                        dist = gf[2, f]
                        pen = gf[3, f]
                        g_n = gf[4, f]
                        g_t = gf[5, f]
                        vtx = 0.0
                        vty = 0.0
                        for k in range(n_links):
                            vtx = vtx + jx[f, k] * qd[i, j0 + k]
                            vty = vty + jy[f, k] * qd[i, j0 + k]
                        pen_rate = -(nx * (vtx - obj[i, 3]) + ny * (vty - obj[i, 4]))
                        f_d = d_c * pen_rate / (1.0 + d_c * dt * g_n)
                        if act[f]:
                            fn = k_c * pen + f_d
                            if fn < 0.0:
                                fn = 0.0
                        else:
                            fn = 0.0
                        imp = (fn - gf[6, f]) * dt
                        for k in range(n_links):
                            qd[i, j0 + k] += imp * jn[f, k] / inertia[i]
                        obj[i, 3] -= imp * nx / obj_mass[i]
                        obj[i, 4] -= imp * ny / obj_mass[i]
                        gf[6, f] = fn

                        vtx = 0.0
                        vty = 0.0
                        for k in range(n_links):
                            vtx = vtx + jx[f, k] * qd[i, j0 + k]
                            vty = vty + jy[f, k] * qd[i, j0 + k]
                        slip = ((vtx - obj[i, 3]) * -ny + (vty - obj[i, 4]) * nx) - obj[i, 5] * dist
                        mu_fn = mu[i] * fn
                        g_dt = dt * g_t
                        s_eff = slip + g_dt * gf[7, f]
                        tmp = fabs(s_eff) / g_dt
                        bound = mu_fn if mu_fn < tmp else tmp
                        if s_eff >= 0.0:
                            flo = 0.0
                            fhi = bound
                        else:
                            flo = -bound
                            fhi = 0.0
                        ft = 0.5 * (flo + fhi)
                        for k in range(NEWTON_STEPS):
                            u = (s_eff - g_dt * ft) / v_eps
                            w = 1.0 + u * u
                            rw = sqrt(w)
                            resid = ft - mu_fn * (u / rw)
                            dresid = 1.0 + mu_fn * g_dt / v_eps / (w * rw)
                            if resid < 0.0:
                                flo = ft
                            elif resid > 0.0:
                                fhi = ft
                            stp = ft - resid / dresid
                            if stp > flo and stp < fhi:
                                ft = stp
                            else:
                                ft = 0.5 * (flo + fhi)
                        imp = (ft - gf[7, f]) * dt
                        for k in range(n_links):
                            qd[i, j0 + k] -= imp * jt[f, k] / inertia[i]
                        obj[i, 3] += imp * -ny / obj_mass[i]
                        obj[i, 4] += imp * nx / obj_mass[i]
                        obj[i, 5] += imp * dist / obj_inertia[i]
                        gf[7, f] = ft

                for f in range(n_fingers):
                    contact[i, f] = 1 if gf[6, f] > 0.0 else 0

            # 6: positions, hard clamp at the limits
            for j in range(dof):
                q[i, j] += dt * qd[i, j]
                if q[i, j] < lim_lo[j]:
                    q[i, j] = lim_lo[j]
                    if qd[i, j] < 0.0:
                        qd[i, j] = 0.0
                elif q[i, j] > lim_hi[j]:
                    q[i, j] = lim_hi[j]
                    if qd[i, j] > 0.0:
                        qd[i, j] = 0.0

            # 7: disk pose
            if has_object:
                obj[i, 0] += dt * obj[i, 3]
                obj[i, 1] += dt * obj[i, 4]
                obj[i, 2] += dt * obj[i, 5]
                rot_acc[i] += dt * obj[i, 5]
