import math

import numpy as np
import pytest

from postureid import plant

DT = 0.002


def test_default_mgh_matches_hand_sum(model):
    # independent oracle: sum of m_i * g * h_i over the segment table
    g = 9.81
    heights = {"shank": 0.25, "thigh": 0.44 + 0.19, "trunk": 0.44 + 0.43 + 0.30}
    expected = sum(plant.DEFAULT_SEGMENTS[s]["mass"] * g * heights[s]
                   for s in plant.SEGMENTS)
    assert expected == pytest.approx(697.80492, abs=1e-9)
    assert model.mgh[0] == pytest.approx(expected, abs=1e-9)


def test_single_mass_at_unit_height():
    # trunk reduces to 1 kg at 1 m above the hip
    anthro = plant.Anthropometry(masses=(1.0, 1.0, 1.0),
                                 lengths=(0.5, 0.5, 1.0),
                                 coms=(0.25, 0.25, 1.0),
                                 inertias=(0.0, 0.0, 0.0))
    m = plant.build_plant(anthro)
    assert m.mgh[2] == pytest.approx(9.81, abs=1e-12)


def test_mgh_ordering(model):
    assert model.mgh[2] < model.mgh[1] < model.mgh[0]
    rng = np.random.default_rng(7)
    for _ in range(20):
        masses = tuple(rng.uniform(1, 60, 3))
        lengths = tuple(rng.uniform(0.2, 1.0, 3))
        coms = tuple(l * rng.uniform(0.2, 1.0) for l in lengths)
        m = plant.build_plant(plant.Anthropometry(masses, lengths, coms,
                                                  (0.1, 0.1, 0.1)))
        assert m.mgh[2] < m.mgh[1] < m.mgh[0]


@pytest.mark.parametrize("bad", [
    dict(masses=(0.0, 1, 1)),
    dict(masses=(-2.0, 1, 1)),
    dict(lengths=(0.5, 0.0, 0.5)),
    dict(coms=(0.6, 0.2, 0.2)),  # com beyond segment length
])
def test_build_plant_rejects_invalid(bad):
    base = dict(masses=(1.0, 1.0, 1.0), lengths=(0.5, 0.5, 0.5),
                coms=(0.2, 0.2, 0.2), inertias=(0.1, 0.1, 0.1))
    base.update(bad)
    with pytest.raises(ValueError):
        plant.build_plant(plant.Anthropometry(**base))


def test_upright_equilibrium_exact(model):
    st = plant.PlantState.upright()
    for _ in range(200):
        st = plant.dynamics_step(model, st, np.zeros(3), 0.0, DT)
    assert np.all(st.theta == 0.0) and np.all(st.omega == 0.0)


def test_determinism(model):
    st = plant.PlantState(np.array([0.1, 0.0, -0.05]), np.array([0.0, 0.1, 0.0]))
    tau = np.array([1.0, -2.0, 0.5])
    a = plant.dynamics_step(model, st, tau, 0.01, DT)
    b = plant.dynamics_step(model, st, tau, 0.01, DT)
    assert np.array_equal(a.theta, b.theta) and np.array_equal(a.omega, b.omega)


def test_locked_joint_sip_growth_rate(model):
    # all joints locked: single pendulum about the ankle; the linearized
    # unstable eigenvalue is sqrt(mgh / J_total)
    j_total = 0.0
    dists = [0.25, 0.44 + 0.19, 0.44 + 0.43 + 0.30]
    for i, name in enumerate(plant.SEGMENTS):
        seg = plant.DEFAULT_SEGMENTS[name]
        j_total += seg["mass"] * seg["length"] ** 2 / 12.0 \
            + seg["mass"] * dists[i] ** 2
    lam = math.sqrt(model.mgh[0] / j_total)

    eps = 0.01
    st = plant.PlantState(np.full(3, eps), np.full(3, lam * eps))
    for _ in range(int(0.5 / DT)):
        st = plant.dynamics_step(model, st, np.zeros(3), 0.0, DT,
                                 locked=("knee", "hip"))
    lam_emp = math.log(st.theta[0] / eps) / 0.5
    assert abs(lam_emp - lam) / lam < 0.02
    # the constraint held exactly
    assert st.theta[1] == pytest.approx(st.theta[0], abs=1e-12)
    assert st.theta[2] == pytest.approx(st.theta[0], abs=1e-12)


def test_energy_conservation_zero_gravity():
    model = plant.build_plant(plant.Anthropometry.default(g=0.0))
    st = plant.PlantState(np.array([0.1, -0.05, 0.2]),
                          np.array([0.005, 0.01, -0.0075]))
    e0 = plant.total_energy(model, st)
    for sec in range(1, 6):
        for _ in range(int(1.0 / DT)):
            st = plant.dynamics_step(model, st, np.zeros(3), 0.0, DT)
        drift = abs(plant.total_energy(model, st) - e0) / abs(e0)
        assert drift <= 1e-6 * sec


def test_passive_damped_energy_nonincreasing_and_converges():
    # large stiffness with damping from a stable start: no oscillation
    # blow-up (explicit damping caps kd at roughly 2*J_min/dt)
    kp, kd = 3000.0, 150.0

    def passive_torques(st):
        ja = np.array([st.theta[0], st.theta[1] - st.theta[0],
                       st.theta[2] - st.theta[1]])
        jr = np.array([st.omega[0], st.omega[1] - st.omega[0],
                       st.omega[2] - st.omega[1]])
        return -(kp * ja + kd * jr)

    def energy(model, st):
        ja = np.array([st.theta[0], st.theta[1] - st.theta[0],
                       st.theta[2] - st.theta[1]])
        return plant.total_energy(model, st) + 0.5 * kp * np.sum(ja ** 2)

    # energy audit without gravity: dissipation only
    model0 = plant.build_plant(plant.Anthropometry.default(g=0.0))
    st = plant.PlantState(np.array([0.1, 0.05, -0.05]), np.zeros(3))
    prev = energy(model0, st)
    for _ in range(2000):
        st = plant.dynamics_step(model0, st, passive_torques(st), 0.0, DT)
        e = energy(model0, st)
        assert e <= prev + 1e-12 * max(1.0, abs(prev))
        prev = e

    # with gravity: settles toward the sagging equilibrium without blow-up
    model = plant.build_plant()
    st = plant.PlantState(np.full(3, 0.05), np.zeros(3))
    for _ in range(int(10.0 / DT)):
        st = plant.dynamics_step(model, st, passive_torques(st), 0.0, DT)
        assert not st.diverged
    assert np.all(np.abs(st.omega) < 5e-4)
    assert np.all(np.abs(st.theta) < 0.01)


def test_mass_matrix_symmetric_positive_definite(model):
    rng = np.random.default_rng(11)
    for _ in range(100):
        th = rng.uniform(-np.pi / 2, np.pi / 2, 3)
        m = plant.mass_matrix(model, th)
        assert np.allclose(m, m.T, atol=1e-12)
        assert np.all(np.linalg.eigvalsh(m) > 0)


def test_divergence_flag(model):
    st = plant.PlantState(np.array([1.6, 0.0, 0.0]), np.zeros(3))
    assert st.diverged
    st = plant.PlantState(np.array([np.nan, 0.0, 0.0]), np.zeros(3))
    assert st.diverged
    assert not plant.PlantState.upright().diverged


class TestKinematics:
    def test_upright(self, model):
        kin = plant.kinematics(model, plant.PlantState.upright(), 0.0)
        assert np.all(kin.joint_angles == 0.0)
        assert np.all(kin.com_sway_above == 0.0)
        assert kin.body_com_sway == 0.0

    def test_collinear_lean(self, model):
        st = plant.PlantState(np.full(3, 0.1), np.zeros(3))
        kin = plant.kinematics(model, st, 0.0)
        assert kin.joint_angles[0] == pytest.approx(0.1, abs=1e-15)
        assert kin.joint_angles[1] == pytest.approx(0.0, abs=1e-15)
        assert kin.joint_angles[2] == pytest.approx(0.0, abs=1e-15)
        # collinear segments: every COM lies on the body axis
        assert np.allclose(kin.com_sway_above, 0.1, atol=1e-12)

    def test_support_tilt_enters_ankle_angle(self, model):
        kin = plant.kinematics(model, plant.PlantState.upright(), 0.05)
        assert kin.joint_angles[0] == pytest.approx(-0.05, abs=1e-15)
        assert kin.joint_angles[1] == 0.0 and kin.joint_angles[2] == 0.0

    def test_joint_angle_round_trip(self, model):
        rng = np.random.default_rng(3)
        for _ in range(25):
            theta = rng.uniform(-0.5, 0.5, 3)
            tilt = rng.uniform(-0.1, 0.1)
            st = plant.PlantState(theta, np.zeros(3))
            kin = plant.kinematics(model, st, tilt)
            back = plant.theta_from_joints(kin.joint_angles, tilt)
            assert np.allclose(back, theta, atol=1e-14)

    def test_velocities(self, model):
        st = plant.PlantState(np.zeros(3), np.array([0.3, 0.5, 0.1]))
        kin = plant.kinematics(model, st, 0.0, support_tilt_rate=0.1)
        assert kin.joint_velocities[0] == pytest.approx(0.2)
        assert kin.joint_velocities[1] == pytest.approx(0.2)
        assert kin.joint_velocities[2] == pytest.approx(-0.4)
