"""Per-joint balance-control modules: delayed PID servo, gravity compensation,
dead-band support-tilt estimator with up-channeling, and passive spring-damper
torque.

Sign conventions: positive joint torque accelerates the segment above the
joint in the positive (forward) direction.  The servo feedback is -PID(eps)
through the transport delay; the gravity-compensation branch (Kp + s*Kd on the
disturbance angle equivalent, no integral term, no delay) is applied with
restoring orientation so that it opposes the sensed COM sway.
"""

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _kernels
from .plant import JOINTS


class Controlled(Enum):
    """Controlled variable of a module; encoded +1 / -1 in the target vector."""

    COM_SWAY = 1.0
    JOINT_ANGLE = -1.0


# Default control parameters per joint module.  Active gains in N*m/rad,
# N*m/(rad*s), N*m*s/rad; delays in seconds; passive stiffness/damping in
# N*m/rad and N*m*s/rad.
TABLE_DEFAULTS = {
    "ankle": dict(kp=465.98, ki=11.649, kd=116.49, delay=0.10,
                  passive_kp=232.5, passive_kd=145.0),
    "knee": dict(kp=245.25, ki=6.1312, kd=18.394, delay=0.07,
                 passive_kp=61.25, passive_kd=11.25),
    "hip": dict(kp=73.575, ki=1.8394, kd=18.394, delay=0.1210,
                passive_kp=36.5, passive_kd=11.25),
}

# Foot-rotation velocity threshold of the tilt estimator (rad/s).
DEFAULT_THRESHOLD = 0.03

CONTROL_DT = 0.002


@dataclass(frozen=True)
class ModuleParams:
    kp: float
    ki: float
    kd: float
    delay: float
    controlled: Controlled = Controlled.COM_SWAY

    def __post_init__(self):
        if self.kp < 0 or self.ki < 0 or self.kd < 0:
            raise ValueError("servo gains must be non-negative")
        if self.delay < 0:
            raise ValueError("delay must be non-negative")

    def delay_steps(self, dt=CONTROL_DT):
        """Delay rounded to the nearest whole control step."""
        return int(math.floor(self.delay / dt + 0.5))


@dataclass(frozen=True)
class PassiveParams:
    kp: float
    kd: float

    def __post_init__(self):
        if self.kp < 0 or self.kd < 0:
            raise ValueError("passive coefficients must be non-negative")


@dataclass(frozen=True)
class Defaults:
    """Bundle of per-joint defaults plus the estimator threshold."""

    modules: tuple
    passive: tuple
    threshold: float = DEFAULT_THRESHOLD

    @classmethod
    def table(cls, controlled=Controlled.COM_SWAY, threshold=DEFAULT_THRESHOLD):
        mods = tuple(
            ModuleParams(kp=TABLE_DEFAULTS[j]["kp"], ki=TABLE_DEFAULTS[j]["ki"],
                         kd=TABLE_DEFAULTS[j]["kd"],
                         delay=TABLE_DEFAULTS[j]["delay"], controlled=controlled)
            for j in JOINTS)
        pas = tuple(
            PassiveParams(kp=TABLE_DEFAULTS[j]["passive_kp"],
                          kd=TABLE_DEFAULTS[j]["passive_kd"])
            for j in JOINTS)
        return cls(modules=mods, passive=pas, threshold=threshold)


class ModuleState:
    """Mutable servo state for one control module."""

    def __init__(self, params, dt=CONTROL_DT):
        steps = params.delay_steps(dt)
        self.integrator = 0.0
        self.prev_error = 0.0
        self.prev_tg = 0.0
        self.delay_line = np.zeros(max(steps, 1))
        self.delay_len = steps
        self.delay_ptr = 0
        self.tilt_estimate = 0.0
        self.prev_fs_signal = 0.0


def dead_band(x, threshold):
    """Dead-band f_theta: identity shifted toward zero outside +-threshold."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    return _kernels.dead_band(float(x), float(threshold))


def tilt_estimator_step(state, vest_body_rate, prop_joint_rate, threshold, dt):
    """Integrate the dead-banded foot-in-space velocity estimate.

    The foot-in-space rate is the body-in-space rate minus the body-to-foot
    (ankle joint) rate.  Updates and returns state.tilt_estimate.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    combined = float(vest_body_rate) - float(prop_joint_rate)
    state.tilt_estimate += dt * _kernels.dead_band(combined, float(threshold))
    return state.tilt_estimate


def gravity_equivalent(model, kin, joint):
    """Angle equivalent of the gravity disturbance at a joint.

    Equals the sway of the COM of the segments above the joint (ideal
    vestibular sensing); the servo's (Kp + s*Kd) turns it into torque.
    """
    return float(kin.com_sway_above[joint])


def servo_step(state, params, eps, t_g, dt):
    """One servo update; returns the commanded torque.

    Pushes -(Kp*eps + Kd*deps + Ki*int(eps)) into the delay line and pops the
    command issued delay_steps ago; adds the undelayed (Kp + s*Kd) branch on
    t_g.  Derivatives are backward differences against zero initial history.
    """
    tau, state.integrator, state.prev_error, state.prev_tg, state.delay_ptr = \
        _kernels.servo_core(params.kp, params.ki, params.kd, float(eps),
                            float(t_g), state.integrator, state.prev_error,
                            state.prev_tg, state.delay_line, state.delay_len,
                            state.delay_ptr, dt)
    return tau


def passive_torque(pp, joint_angle, joint_rate):
    """Spring-damper torque -(Kp_pass*angle + Kd_pass*rate)."""
    return _kernels.passive_core(pp.kp, pp.kd, float(joint_angle), float(joint_rate))


class ControllerState:
    """Controller for one simulation: three module states plus shared wiring.

    The ankle module owns the support-tilt estimator; its estimate is
    up-channeled so knee and hip can express their controlled variables in
    space coordinates.
    """

    def __init__(self, model, params, passive, threshold=DEFAULT_THRESHOLD,
                 dt=CONTROL_DT):
        if len(params) != 3 or len(passive) != 3:
            raise ValueError("need parameters for exactly three modules")
        self.model = model
        self.params = tuple(params)
        self.passive = tuple(passive)
        self.threshold = float(threshold)
        self.dt = float(dt)
        self.modules = [ModuleState(p, dt) for p in self.params]

    def arrays(self):
        """Flat parameter arrays in the layout the simulation kernel uses."""
        kp = np.array([p.kp for p in self.params])
        ki = np.array([p.ki for p in self.params])
        kd = np.array([p.kd for p in self.params])
        dlen = np.array([p.delay_steps(self.dt) for p in self.params],
                        dtype=np.int64)
        ctrl_c = np.array([p.controlled.value for p in self.params])
        kp_pass = np.array([p.kp for p in self.passive])
        kd_pass = np.array([p.kd for p in self.passive])
        return kp, ki, kd, dlen, ctrl_c, kp_pass, kd_pass


def control_step(ctrl, kin, dt=None):
    """Run all three modules for one control step; returns joint torques[3].

    kin must be the current SegmentKinematics (ideal sensors).  Per module:
    eps follows the controlled-variable flag, the gravity branch uses the true
    COM sway, and servo plus passive torques sum at the joint.
    """
    dt = ctrl.dt if dt is None else dt
    kp, ki, kd, dlen, ctrl_c, kp_pass, kd_pass = ctrl.arrays()
    integ = np.array([m.integrator for m in ctrl.modules])
    prev_eps = np.array([m.prev_error for m in ctrl.modules])
    prev_tg = np.array([m.prev_tg for m in ctrl.modules])
    max_len = max(int(dlen.max()), 1)
    delay_lines = np.zeros((3, max_len))
    for j, m in enumerate(ctrl.modules):
        delay_lines[j, :m.delay_line.shape[0]] = m.delay_line
    delay_ptr = np.array([m.delay_ptr for m in ctrl.modules], dtype=np.int64)

    tau, tilt_estimate, prev_fs = _kernels.control_core(
        kin.joint_angles, kin.joint_velocities, kin.com_sway_above,
        ctrl.model.masses, ctrl.model.lengths, ctrl.model.coms,
        kp, ki, kd, ctrl_c, kp_pass, kd_pass, ctrl.threshold,
        integ, prev_eps, prev_tg, delay_lines, dlen, delay_ptr,
        ctrl.modules[0].tilt_estimate, ctrl.modules[0].prev_fs_signal, dt)

    for j, m in enumerate(ctrl.modules):
        m.integrator = integ[j]
        m.prev_error = prev_eps[j]
        m.prev_tg = prev_tg[j]
        m.delay_line[:] = delay_lines[j, :m.delay_line.shape[0]]
        m.delay_ptr = int(delay_ptr[j])
    ctrl.modules[0].tilt_estimate = tilt_estimate
    ctrl.modules[0].prev_fs_signal = prev_fs
    return tau
