"""Numba-compiled numerical cores shared by the plant, controller and trial loop.

Everything here operates on plain float64 scalars/arrays so the same compiled
routines serve both the public step-wise API (plant.py, dec.py) and the fast
closed-loop driver used for dataset generation.  All math is strict IEEE
(fastmath off) so results are bit-reproducible.
"""

import math

import numpy as np
from numba import njit

# trial status codes returned by simulate_loop
STATUS_OK = 0
STATUS_SWAY = 1
STATUS_DIVERGED = 2


@njit(cache=True, nogil=True)
def mass_matrix(coupling, inertias, theta):
    """Configuration-dependent 3x3 mass matrix in absolute segment angles."""
    m = np.empty((3, 3))
    for j in range(3):
        for k in range(3):
            m[j, k] = coupling[j, k] * math.cos(theta[j] - theta[k])
        m[j, j] += inertias[j]
    return m


@njit(cache=True, nogil=True)
def bias_forces(coupling, grav_weight, g, theta, omega):
    """Centrifugal/Coriolis plus gravity terms; EOM reads M*acc + bias = Q."""
    b = np.empty(3)
    for j in range(3):
        s = 0.0
        for k in range(3):
            s += coupling[j, k] * math.sin(theta[j] - theta[k]) * omega[k] * omega[k]
        b[j] = s - g * grav_weight[j] * math.sin(theta[j])
    return b


@njit(cache=True, nogil=True)
def joint_to_segment_torques(joint_torques):
    """Map joint torques to generalized forces on the absolute segment angles.

    Joint j drives the segment directly above it and reacts on the one below.
    """
    q = np.empty(3)
    q[0] = joint_torques[0] - joint_torques[1]
    q[1] = joint_torques[1] - joint_torques[2]
    q[2] = joint_torques[2]
    return q


@njit(cache=True, nogil=True)
def _projection(locked_code):
    # locked_code: 0 none, 1 knee, 2 hip, 3 both
    if locked_code == 1:
        p = np.zeros((3, 2))
        p[0, 0] = 1.0
        p[1, 0] = 1.0
        p[2, 1] = 1.0
    elif locked_code == 2:
        p = np.zeros((3, 2))
        p[0, 0] = 1.0
        p[1, 1] = 1.0
        p[2, 1] = 1.0
    elif locked_code == 3:
        p = np.ones((3, 1))
    else:
        p = np.eye(3)
    return p


@njit(cache=True, nogil=True)
def accelerations(coupling, inertias, grav_weight, g, theta, omega,
                  joint_torques, locked_code):
    """Solve the equations of motion for the segment angular accelerations.

    Locked joints are handled by projecting the dynamics onto the reduced
    coordinate set (segments across a locked joint share one acceleration).
    """
    mm = mass_matrix(coupling, inertias, theta)
    rhs = joint_to_segment_torques(joint_torques) - bias_forces(
        coupling, grav_weight, g, theta, omega)
    if locked_code == 0:
        return np.linalg.solve(mm, rhs)
    p = _projection(locked_code)
    mr = p.T @ mm @ p
    qr = p.T @ rhs
    return p @ np.linalg.solve(mr, qr)


@njit(cache=True, nogil=True)
def integrate_step(coupling, inertias, grav_weight, g, theta, omega,
                   joint_torques, dt, locked_code):
    """One semi-implicit Euler step: velocities first, then positions."""
    acc = accelerations(coupling, inertias, grav_weight, g, theta, omega,
                        joint_torques, locked_code)
    new_omega = omega + dt * acc
    new_theta = theta + dt * new_omega
    return new_theta, new_omega


@njit(cache=True, nogil=True)
def com_sway_above(masses, lengths, coms, theta):
    """Sway angle of the COM of all segments above each joint, about that joint.

    Exact geometry via atan2 of the horizontal/vertical COM offset; no
    small-angle approximation.
    """
    cs = np.empty(3)
    for j in range(3):
        x = 0.0
        y = 0.0
        for i in range(j, 3):
            px = 0.0
            py = 0.0
            for k in range(j, i):
                px += lengths[k] * math.sin(theta[k])
                py += lengths[k] * math.cos(theta[k])
            px += coms[i] * math.sin(theta[i])
            py += coms[i] * math.cos(theta[i])
            x += masses[i] * px
            y += masses[i] * py
        cs[j] = math.atan2(x, y)
    return cs


@njit(cache=True, nogil=True)
def joint_coordinates(theta, omega, support_tilt, support_tilt_rate):
    """Joint angles/rates from absolute segment angles and support tilt."""
    ja = np.empty(3)
    jr = np.empty(3)
    ja[0] = theta[0] - support_tilt
    ja[1] = theta[1] - theta[0]
    ja[2] = theta[2] - theta[1]
    jr[0] = omega[0] - support_tilt_rate
    jr[1] = omega[1] - omega[0]
    jr[2] = omega[2] - omega[1]
    return ja, jr


@njit(cache=True, nogil=True)
def dead_band(x, threshold):
    """Dead-band nonlinearity: zero inside +-threshold, shifted identity outside."""
    if x < -threshold:
        return x + threshold
    if x > threshold:
        return x - threshold
    return 0.0


@njit(cache=True, nogil=True)
def servo_core(kp, ki, kd, eps, t_g, integrator, prev_eps, prev_tg,
               delay_line, delay_len, delay_ptr, dt):
    """PID servo with transport delay on the feedback branch.

    The negated PID output is pushed through the delay line; the
    proportional-derivative disturbance branch (t_g) is applied undelayed and
    carries no integral term.  Returns the commanded torque and the updated
    scalar state (the delay line is mutated in place).
    """
    new_integ = integrator + eps * dt
    u = kp * eps + kd * (eps - prev_eps) / dt + ki * new_integ
    if delay_len > 0:
        delayed = delay_line[delay_ptr]
        delay_line[delay_ptr] = -u
        new_ptr = (delay_ptr + 1) % delay_len
    else:
        delayed = -u
        new_ptr = delay_ptr
    tau = delayed + kp * t_g + kd * (t_g - prev_tg) / dt
    return tau, new_integ, eps, t_g, new_ptr


@njit(cache=True, nogil=True)
def passive_core(kp_pass, kd_pass, joint_angle, joint_rate):
    return -(kp_pass * joint_angle + kd_pass * joint_rate)


@njit(cache=True, nogil=True)
def control_core(ja, jr, cs,
                 masses, lengths, coms,
                 kp, ki, kd, ctrl_c,
                 kp_pass, kd_pass, threshold,
                 integ, prev_eps, prev_tg,
                 delay_lines, delay_len, delay_ptr,
                 tilt_estimate, prev_fs_signal, dt):
    """One 2 ms control step for all three modules.

    ja/jr/cs are the true joint angles, joint rates and per-joint COM sway
    (ideal proprioceptive and vestibular sensing).  The ankle module
    integrates the dead-banded foot-in-space velocity estimate, which is
    up-channeled so every module can express its controlled variable against
    the gravitational vertical.  The gravity-compensation branch is applied
    with restoring orientation (it opposes the sensed COM sway).

    Returns (torques[3], tilt_estimate, prev_fs_signal); the per-module state
    arrays are updated in place.
    """
    # support-tilt estimator: d/dt(body-in-space) - d/dt(body-to-foot),
    # rates formed by backward difference of the ideal position signals
    fs_signal = cs[0] - ja[0]
    combined_rate = (fs_signal - prev_fs_signal) / dt
    new_estimate = tilt_estimate + dt * dead_band(combined_rate, threshold)

    # segment space angles reconstructed from the tilt estimate plus the
    # proprioceptive joint chain
    th_hat = np.empty(3)
    th_hat[0] = new_estimate + ja[0]
    th_hat[1] = th_hat[0] + ja[1]
    th_hat[2] = th_hat[1] + ja[2]
    cs_hat = com_sway_above(masses, lengths, coms, th_hat)

    tau = np.empty(3)
    for j in range(3):
        if ctrl_c[j] > 0.0:
            eps = cs_hat[j]
        elif j == 0:
            eps = ja[0] + new_estimate
        else:
            eps = ja[j]
        t_g = -cs[j]
        tau_j, integ[j], prev_eps[j], prev_tg[j], delay_ptr[j] = servo_core(
            kp[j], ki[j], kd[j], eps, t_g,
            integ[j], prev_eps[j], prev_tg[j],
            delay_lines[j], delay_len[j], delay_ptr[j], dt)
        tau[j] = tau_j + passive_core(kp_pass[j], kd_pass[j], ja[j], jr[j])
    return tau, new_estimate, fs_signal


@njit(cache=True, nogil=True)
def simulate_loop(masses, lengths, coms, inertias, coupling, grav_weight, g,
                  kp, ki, kd, delay_len, ctrl_c, kp_pass, kd_pass, threshold,
                  tilt, tilt_rate, dt, decim, sway_abort, locked_code):
    """Full closed-loop trial at the control step dt, decimated outputs.

    tilt/tilt_rate are sampled on the dt grid (len n_steps+1); every decim-th
    state is recorded.  Aborts when |body COM sway| reaches sway_abort or the
    state diverges.  Returns (alpha_ss, alpha_ls, alpha_ts, alpha_bs, status,
    abort_step, peak_sway).
    """
    n_steps = tilt.shape[0] - 1
    n_samples = n_steps // decim + 1
    out_ss = np.zeros(n_samples)
    out_ls = np.zeros(n_samples)
    out_ts = np.zeros(n_samples)
    out_bs = np.zeros(n_samples)

    theta = np.zeros(3)
    omega = np.zeros(3)

    integ = np.zeros(3)
    prev_eps = np.zeros(3)
    prev_tg = np.zeros(3)
    max_len = 1
    for j in range(3):
        if delay_len[j] > max_len:
            max_len = delay_len[j]
    delay_lines = np.zeros((3, max_len))
    delay_ptr = np.zeros(3, dtype=np.int64)
    tilt_estimate = 0.0
    prev_fs_signal = 0.0

    status = STATUS_OK
    abort_step = -1
    peak_sway = 0.0

    for k in range(n_steps + 1):
        ja, jr = joint_coordinates(theta, omega, tilt[k], tilt_rate[k])
        cs = com_sway_above(masses, lengths, coms, theta)
        alpha_bs = cs[0]

        if k % decim == 0:
            i = k // decim
            out_ss[i] = theta[0]
            out_ls[i] = theta[1]
            out_ts[i] = theta[2]
            out_bs[i] = alpha_bs

        abs_bs = abs(alpha_bs)
        if abs_bs > peak_sway:
            peak_sway = abs_bs
        if abs_bs >= sway_abort:
            status = STATUS_SWAY
            abort_step = k
            break
        if k == n_steps:
            break

        tau, tilt_estimate, prev_fs_signal = control_core(
            ja, jr, cs, masses, lengths, coms,
            kp, ki, kd, ctrl_c, kp_pass, kd_pass, threshold,
            integ, prev_eps, prev_tg,
            delay_lines, delay_len, delay_ptr,
            tilt_estimate, prev_fs_signal, dt)

        theta, omega = integrate_step(coupling, inertias, grav_weight, g,
                                      theta, omega, tau, dt, locked_code)

        ok = True
        for j in range(3):
            if not (math.isfinite(theta[j]) and math.isfinite(omega[j])):
                ok = False
            elif abs(theta[j]) >= math.pi / 2.0:
                ok = False
        if not ok:
            status = STATUS_DIVERGED
            abort_step = k + 1
            break

    return out_ss, out_ls, out_ts, out_bs, status, abort_step, peak_sway
