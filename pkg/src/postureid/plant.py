"""Rigid-body dynamics of a triple inverted pendulum (shank, thigh, trunk).

The body pivots at the ankle on a support surface that tilts about the ankle
axis; the ankle's world position is fixed, so the tilt enters the mechanics
only through the ankle joint angle.  Segment orientations are absolute angles
measured from the gravitational vertical, positive forward.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

SEGMENTS = ("shank", "thigh", "trunk")
JOINTS = ("ankle", "knee", "hip")

GRAVITY = 9.81

# Body-segment table for an ~80 kg adult; thin-rod inertia about the COM.
DEFAULT_SEGMENTS = {
    "shank": dict(mass=7.4, length=0.44, com=0.25),
    "thigh": dict(mass=16.0, length=0.43, com=0.19),
    "trunk": dict(mass=50.6, length=0.80, com=0.30),
}

_LOCK_CODES = {(): 0, ("knee",): 1, ("hip",): 2, ("knee", "hip"): 3}


@dataclass(frozen=True)
class Anthropometry:
    """Per-segment masses (kg), lengths (m), COM distances from the proximal
    joint (m), inertias about the COM (kg m^2), and gravity (m/s^2)."""

    masses: tuple
    lengths: tuple
    coms: tuple
    inertias: tuple
    g: float = GRAVITY

    @classmethod
    def default(cls, g=GRAVITY):
        m, l, c = [], [], []
        for name in SEGMENTS:
            seg = DEFAULT_SEGMENTS[name]
            m.append(seg["mass"])
            l.append(seg["length"])
            c.append(seg["com"])
        inertia = tuple(mi * li * li / 12.0 for mi, li in zip(m, l))
        return cls(tuple(m), tuple(l), tuple(c), inertia, g)


@dataclass
class PlantState:
    """Absolute segment orientations (rad) and angular velocities (rad/s)."""

    theta: np.ndarray
    omega: np.ndarray

    @classmethod
    def upright(cls):
        return cls(np.zeros(3), np.zeros(3))

    @property
    def diverged(self):
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.omega))):
            return True
        return bool(np.any(np.abs(self.theta) >= math.pi / 2.0))


@dataclass
class SegmentKinematics:
    """Joint-space view of a plant state.

    joint_angles: ankle = theta[0] - support_tilt, knee = theta[1] - theta[0],
    hip = theta[2] - theta[1].  com_sway_above[j] is the sway of the COM of
    all segments above joint j, about joint j, w.r.t. the vertical.
    """

    joint_angles: np.ndarray
    joint_velocities: np.ndarray
    com_sway_above: np.ndarray

    @property
    def body_com_sway(self):
        return self.com_sway_above[0]


@dataclass
class PlantModel:
    """Assembled pendulum model with cached aggregate quantities."""

    anthro: Anthropometry
    masses: np.ndarray = field(repr=False, default=None)
    lengths: np.ndarray = field(repr=False, default=None)
    coms: np.ndarray = field(repr=False, default=None)
    inertias: np.ndarray = field(repr=False, default=None)
    coupling: np.ndarray = field(repr=False, default=None)
    grav_weight: np.ndarray = field(repr=False, default=None)
    m_above: np.ndarray = None
    h_above: np.ndarray = None
    mgh: np.ndarray = None

    @property
    def g(self):
        return self.anthro.g


def build_plant(anthro=None):
    """Validate the anthropometry and cache the constant dynamics terms.

    Raises ValueError for non-positive masses/lengths/COM distances or a COM
    distance exceeding the segment length.
    """
    if anthro is None:
        anthro = Anthropometry.default()
    m = np.asarray(anthro.masses, dtype=float)
    l = np.asarray(anthro.lengths, dtype=float)
    c = np.asarray(anthro.coms, dtype=float)
    inertia = np.asarray(anthro.inertias, dtype=float)
    if m.shape != (3,) or l.shape != (3,) or c.shape != (3,):
        raise ValueError("anthropometry requires exactly three segments")
    if np.any(m <= 0) or np.any(l <= 0) or np.any(c <= 0):
        raise ValueError("masses, lengths and COM distances must be positive")
    if np.any(c > l):
        raise ValueError("segment COM distance cannot exceed segment length")
    if np.any(inertia < 0):
        raise ValueError("segment inertias must be non-negative")

    # coupling[j,k]*cos(theta_j - theta_k) builds the mass matrix; kappa is
    # the lever of coordinate j in the position of segment i's COM
    coupling = np.zeros((3, 3))
    for j in range(3):
        for k in range(3):
            total = 0.0
            for i in range(max(j, k), 3):
                kj = l[j] if j < i else c[i]
                kk = l[k] if k < i else c[i]
                total += m[i] * kj * kk
            coupling[j, k] = total

    grav_weight = np.array([m[j] * c[j] + l[j] * m[j + 1:].sum() for j in range(3)])

    # aggregate mass/COM height above each joint at upright
    joint_height = np.array([0.0, l[0], l[0] + l[1]])
    com_height = np.array([c[0], l[0] + c[1], l[0] + l[1] + c[2]])
    m_above = np.array([m[j:].sum() for j in range(3)])
    h_above = np.array([
        np.sum(m[j:] * (com_height[j:] - joint_height[j])) / m[j:].sum()
        for j in range(3)
    ])
    mgh = m_above * anthro.g * h_above

    return PlantModel(anthro=anthro, masses=m, lengths=l, coms=c,
                      inertias=inertia, coupling=coupling,
                      grav_weight=grav_weight, m_above=m_above,
                      h_above=h_above, mgh=mgh)


def _locked_code(locked):
    key = tuple(sorted(locked, key=JOINTS.index)) if locked else ()
    try:
        return _LOCK_CODES[key]
    except KeyError:
        raise ValueError(f"cannot lock joints {locked!r}; only knee/hip lockable")


def dynamics_step(model, state, joint_torques, support_tilt, dt, locked=()):
    """Advance one semi-implicit Euler step of M(th)*acc + bias = B*tau.

    Returns the new PlantState; check .diverged on the result.  The support
    tilt does not enter the free dynamics (the tilt axis passes through the
    ankle), it is part of the signature for interface symmetry with
    kinematics().
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    tau = np.asarray(joint_torques, dtype=float)
    theta, omega = _kernels.integrate_step(
        model.coupling, model.inertias, model.grav_weight, model.g,
        state.theta.astype(float), state.omega.astype(float),
        tau, dt, _locked_code(locked))
    return PlantState(theta, omega)


def kinematics(model, state, support_tilt, support_tilt_rate=0.0):
    """Joint angles/velocities and per-joint COM sway for a plant state."""
    ja, jr = _kernels.joint_coordinates(
        state.theta.astype(float), state.omega.astype(float),
        float(support_tilt), float(support_tilt_rate))
    cs = _kernels.com_sway_above(model.masses, model.lengths, model.coms,
                                 state.theta.astype(float))
    return SegmentKinematics(joint_angles=ja, joint_velocities=jr,
                             com_sway_above=cs)


def theta_from_joints(joint_angles, support_tilt):
    """Inverse of the joint-angle map (round-trip identity with kinematics)."""
    ja = np.asarray(joint_angles, dtype=float)
    theta = np.empty(3)
    theta[0] = ja[0] + support_tilt
    theta[1] = ja[1] + theta[0]
    theta[2] = ja[2] + theta[1]
    return theta


def total_energy(model, state, g=None):
    """Kinetic plus potential energy (potential zero at the ankle plane)."""
    g = model.g if g is None else g
    theta = state.theta
    omega = state.omega
    kin = 0.0
    for j in range(3):
        kin += 0.5 * model.inertias[j] * omega[j] ** 2
        for k in range(3):
            kin += 0.5 * model.coupling[j, k] * math.cos(theta[j] - theta[k]) \
                * omega[j] * omega[k]
    pot = g * float(np.sum(model.grav_weight * np.cos(theta)))
    return kin + pot


def mass_matrix(model, theta):
    """Expose M(theta) for inspection and tests."""
    return _kernels.mass_matrix(model.coupling, model.inertias,
                                np.asarray(theta, dtype=float))
