"""Whole-body model and torque-level impedance control.

The default plant is a planar system in the vertical x-z plane: one
prismatic base joint along x carrying an n-link revolute arm.  Its rigid
body model is block structured,

    M = blkdiag(M_v, M_a(q_a)),   bias = (D_v qd_b, C_a(q_a, qd_a) qd_a),

i.e. the base behaves as a virtual mass-damper and is not inertially
coupled to the arm; only the task Jacobian couples them.  A commanded
task wrench F is mapped to joint torques by the weighted minimum-torque
resolution

    tau = W^-1 M^-1 J^T L_W L^-1 F + (I - W^-1 M^-1 J^T L_W J M^-1) tau_0

with L = (J M^-1 J^T)^-1, L_W = (J M^-1 W^-1 M^-1 J^T)^-1 and
W = H^T M^-1 H, which realizes F exactly and injects tau_0 without
disturbing the task.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class NearSingularJacobian(RuntimeError):
    """Task-space inertia is ill conditioned at this configuration."""


class NearSingularWeightedInertia(RuntimeError):
    """Weighted task-space inertia is ill conditioned."""


@dataclass(frozen=True)
class RobotModel:
    """Planar prismatic-base + revolute-arm plant parameters.

    Links are uniform rods (COM at mid-length, inertia m l^2 / 12 about
    the COM unless overridden).  mount_height is the arm shoulder height
    above the ground, gravity acts along -z.
    """

    link_lengths: tuple[float, ...] = (0.30, 0.25, 0.15)
    link_masses: tuple[float, ...] = (2.0, 1.2, 0.6)
    link_inertias: tuple[float, ...] | None = None
    base_mass: float = 12.0
    base_damping: float = 18.0
    mount_height: float = 0.40
    gravity: float = 9.81
    cond_max: float = 1e8

    @property
    def n_arm(self) -> int:
        return len(self.link_lengths)

    @property
    def n_base(self) -> int:
        return 1

    @property
    def n_joints(self) -> int:
        return self.n_base + self.n_arm

    @property
    def task_dim(self) -> int:
        return 2

    def inertias(self) -> tuple[float, ...]:
        if self.link_inertias is not None:
            return self.link_inertias
        return tuple(m * l * l / 12.0 for m, l in zip(self.link_masses, self.link_lengths))

    def validate(self) -> None:
        if self.n_arm < 1:
            raise ValueError("need at least one arm link")
        if len(self.link_masses) != self.n_arm:
            raise ValueError("link_masses length mismatch")
        if self.link_inertias is not None and len(self.link_inertias) != self.n_arm:
            raise ValueError("link_inertias length mismatch")
        if any(l <= 0 for l in self.link_lengths) and not all(
            l >= 0 for l in self.link_lengths
        ):
            raise ValueError("link lengths must be non-negative")
        if any(m <= 0 for m in self.link_masses):
            raise ValueError("link masses must be positive")
        if self.base_mass <= 0 or self.base_damping < 0:
            raise ValueError("bad base parameters")
        if self.cond_max <= 1:
            raise ValueError("cond_max must exceed 1")


@dataclass
class RobotState:
    q: np.ndarray  # (n,) base position then arm angles
    qd: np.ndarray  # (n,)

    def copy(self) -> "RobotState":
        return RobotState(self.q.copy(), self.qd.copy())


def forward_kinematics(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """End-effector position (x, z)."""
    x = q[0]
    z = model.mount_height
    ang = 0.0
    for j in range(model.n_arm):
        ang += q[1 + j]
        x += model.link_lengths[j] * math.cos(ang)
        z += model.link_lengths[j] * math.sin(ang)
    return np.array([x, z])


def task_jacobian(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """2 x n Jacobian of the end-effector position."""
    n = model.n_joints
    jac = np.zeros((2, n))
    jac[0, 0] = 1.0
    angs = np.cumsum(q[1:])
    sines = np.sin(angs) * model.link_lengths
    cosines = np.cos(angs) * model.link_lengths
    # column j collects the links distal to joint j
    for j in range(model.n_arm):
        jac[0, 1 + j] = -np.sum(sines[j:])
        jac[1, 1 + j] = np.sum(cosines[j:])
    return jac


def _arm_rnea(
    model: RobotModel,
    q_a: np.ndarray,
    qd_a: np.ndarray,
    qdd_a: np.ndarray,
    with_gravity: bool,
) -> np.ndarray:
    """Inverse dynamics of the fixed-base planar arm.

    Standard two-pass Newton-Euler written for a chain of revolute
    joints in a vertical plane; gravity is injected as an upward base
    acceleration.
    """
    n = model.n_arm
    lengths = model.link_lengths
    masses = model.link_masses
    inertias = model.inertias()

    ang = 0.0
    omega = 0.0
    alpha = 0.0
    a_joint = (0.0, model.gravity if with_gravity else 0.0)
    com_acc = [None] * n
    omegas = [0.0] * n
    alphas = [0.0] * n
    r_com = [None] * n
    r_link = [None] * n
    for i in range(n):
        ang += q_a[i]
        omega += qd_a[i]
        alpha += qdd_a[i]
        c, s = math.cos(ang), math.sin(ang)
        lx, lz = lengths[i] * c, lengths[i] * s
        rx, rz = 0.5 * lx, 0.5 * lz
        # a_com = a_joint + alpha x r - omega^2 r  (2-D cross: alpha x r = alpha * perp(r))
        acx = a_joint[0] - alpha * rz - omega * omega * rx
        acz = a_joint[1] + alpha * rx - omega * omega * rz
        com_acc[i] = (acx, acz)
        omegas[i] = omega
        alphas[i] = alpha
        r_com[i] = (rx, rz)
        r_link[i] = (lx, lz)
        a_joint = (
            a_joint[0] - alpha * lz - omega * omega * lx,
            a_joint[1] + alpha * lx - omega * omega * lz,
        )

    tau = np.zeros(n)
    fx, fz, nz = 0.0, 0.0, 0.0
    for i in range(n - 1, -1, -1):
        acx, acz = com_acc[i]
        gx, gz = masses[i] * acx, masses[i] * acz
        rx, rz = r_com[i]
        lx, lz = r_link[i]
        # torque about joint i: link inertia + child wrench shifted here
        nz = inertias[i] * alphas[i] + nz + (rx * gz - rz * gx) + (lx * fz - lz * fx)
        fx += gx
        fz += gz
        tau[i] = nz
    return tau


def dynamics_terms(model: RobotModel, state: RobotState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inertia matrix, velocity-dependent bias vector and gravity vector.

    The bias is returned as a vector (already multiplied by qd): the base
    entry is the virtual damping force, the arm entries come from the
    Newton-Euler pass at zero acceleration.
    """
    n = model.n_joints
    na = model.n_arm
    q_a = state.q[1:]
    qd_a = state.qd[1:]

    mass = np.zeros((n, n))
    mass[0, 0] = model.base_mass
    zero = np.zeros(na)
    for j in range(na):
        unit = np.zeros(na)
        unit[j] = 1.0
        mass[1:, 1 + j] = _arm_rnea(model, q_a, zero, unit, with_gravity=False)
    mass[1:, 1:] = 0.5 * (mass[1:, 1:] + mass[1:, 1:].T)

    bias = np.zeros(n)
    bias[0] = model.base_damping * state.qd[0]
    bias[1:] = _arm_rnea(model, q_a, qd_a, zero, with_gravity=False)

    grav = np.zeros(n)
    grav[1:] = _arm_rnea(model, q_a, zero, zero, with_gravity=True)
    return mass, bias, grav


def coriolis_matrix(model: RobotModel, state: RobotState, h: float = 1e-6) -> np.ndarray:
    """Arm Coriolis matrix from Christoffel symbols of the inertia matrix.

    Partial derivatives of M_a are taken by central differences; used for
    cross-checks and the Cartesian bias term, not in the control loop.
    """
    na = model.n_arm
    qd_a = state.qd[1:]
    dm = np.zeros((na, na, na))
    for k in range(na):
        sp = state.copy()
        sm = state.copy()
        sp.q[1 + k] += h
        sm.q[1 + k] -= h
        mp, _, _ = dynamics_terms(model, sp)
        mm, _, _ = dynamics_terms(model, sm)
        dm[:, :, k] = (mp[1:, 1:] - mm[1:, 1:]) / (2.0 * h)
    cq = np.zeros((na, na))
    for i in range(na):
        for j in range(na):
            cq[i, j] = 0.5 * np.sum(
                (dm[i, j, :] + dm[i, :, j] - dm[j, :, i]) * qd_a
            )
    full = np.zeros((model.n_joints, model.n_joints))
    full[0, 0] = model.base_damping
    full[1:, 1:] = cq
    return full


def inverse_inertia(model: RobotModel, mass: np.ndarray) -> np.ndarray:
    """Block-aware inverse of the whole-body inertia matrix."""
    n = mass.shape[0]
    inv = np.zeros((n, n))
    inv[0, 0] = 1.0 / mass[0, 0]
    inv[1:, 1:] = np.linalg.inv(mass[1:, 1:])
    return inv


def cartesian_inertia(mass_inv: np.ndarray, jac: np.ndarray, cond_max: float = 1e8) -> np.ndarray:
    """Task-space inertia (J M^-1 J^T)^-1 with a conditioning guard."""
    a = jac @ mass_inv @ jac.T
    a = 0.5 * (a + a.T)
    evals = np.linalg.eigvalsh(a)
    if evals[0] <= 0.0 or evals[-1] / evals[0] > cond_max:
        raise NearSingularJacobian(
            f"task inertia condition {evals[-1] / max(evals[0], 1e-300):.2e} exceeds {cond_max:.1e}"
        )
    lam = np.linalg.inv(a)
    return 0.5 * (lam + lam.T)


def weighting_matrix(h_diag: np.ndarray, mass_inv: np.ndarray) -> np.ndarray:
    """W = H^T M^-1 H for a diagonal joint weighting H."""
    return (h_diag[:, None] * mass_inv) * h_diag[None, :]


def weighted_inverse_dynamics(
    mass: np.ndarray,
    jac: np.ndarray,
    lam: np.ndarray,
    w: np.ndarray,
    wrench: np.ndarray,
    tau_0: np.ndarray,
    cond_max: float = 1e8,
) -> np.ndarray:
    """Joint torques realizing the task wrench with weighted effort.

    Solves min ||tau - tau_0||_W subject to the task dynamics producing
    the requested wrench; closed form as in the module docstring.
    """
    mass_inv = np.linalg.inv(mass)
    w_inv = np.linalg.inv(w)
    jmi = jac @ mass_inv
    a_w = jmi @ w_inv @ jmi.T
    a_w = 0.5 * (a_w + a_w.T)
    evals = np.linalg.eigvalsh(a_w)
    if evals[0] <= 0.0 or evals[-1] / evals[0] > cond_max:
        raise NearSingularWeightedInertia(
            f"weighted task inertia condition exceeds {cond_max:.1e}"
        )
    lam_w = np.linalg.inv(a_w)
    gain = w_inv @ jmi.T @ lam_w
    return gain @ np.linalg.solve(lam, wrench) + tau_0 - gain @ (jmi @ tau_0)


def impedance_wrench(
    x: np.ndarray,
    xdot: np.ndarray,
    x_d: np.ndarray,
    k_diag: np.ndarray,
    d_diag: np.ndarray,
) -> np.ndarray:
    """Restoring Cartesian impedance command F = K (x_d - x) - D xdot.

    The desired velocity is treated as zero (quasi-static task), so the
    damping term acts on the measured velocity alone.
    """
    return k_diag * (x_d - x) - d_diag * xdot


def secondary_task(
    q: np.ndarray,
    qd: np.ndarray,
    q_0: np.ndarray,
    k0_diag: np.ndarray,
    d0_diag: np.ndarray,
) -> np.ndarray:
    """Joint-space posture torque tau_0 = -D_0 qd - K_0 (q - q_0)."""
    return -d0_diag * qd - k0_diag * (q - q_0)


@dataclass(frozen=True)
class ModeGains:
    """Joint weighting and posture gains for one control mode."""

    h_diag: np.ndarray
    k0_diag: np.ndarray
    d0_diag: np.ndarray


def manipulation_gains(model: RobotModel) -> ModeGains:
    """Arm-favouring weights: base torque is expensive."""
    n_b, n_a = model.n_base, model.n_arm
    return ModeGains(
        h_diag=np.array([10.0] * n_b + [2.0] * n_a),
        k0_diag=np.full(n_b + n_a, 2.0),
        d0_diag=np.full(n_b + n_a, 1.0),
    )


def locomotion_gains(model: RobotModel) -> ModeGains:
    """Base-favouring weights with a stiff posture hold on the arm."""
    n_b, n_a = model.n_base, model.n_arm
    return ModeGains(
        h_diag=np.array([2.0] * n_b + [10.0] * n_a),
        k0_diag=np.full(n_b + n_a, 50.0),
        d0_diag=np.full(n_b + n_a, 8.0),
    )


MODE_GAINS = {"manipulation": manipulation_gains, "locomotion": locomotion_gains}


def ik_position(
    model: RobotModel,
    target: np.ndarray,
    q_seed: np.ndarray,
    iters: int = 200,
    tol: float = 1e-10,
) -> np.ndarray:
    """Damped least-squares inverse kinematics for the planar plant."""
    q = np.asarray(q_seed, dtype=float).copy()
    lam2 = 1e-6
    for _ in range(iters):
        err = target - forward_kinematics(model, q)
        if float(err @ err) < tol * tol:
            return q
        jac = task_jacobian(model, q)
        jjt = jac @ jac.T + lam2 * np.eye(2)
        q = q + jac.T @ np.linalg.solve(jjt, err)
    err = target - forward_kinematics(model, q)
    if float(err @ err) > 1e-6:
        raise ValueError(f"IK failed to reach {target}, residual {np.linalg.norm(err):.2e} m")
    return q


@dataclass(frozen=True)
class PointMassPlant:
    """Cartesian double integrator with a constant task inertia.

    Joint space equals task space (J = I), no gravity and no bias; used
    to exercise the 3-axis pipeline with the same controller algebra.
    """

    inertia_diag: tuple[float, ...] = (5.0, 5.0, 5.0)
    damping: float = 0.0
    cond_max: float = 1e8

    @property
    def n_joints(self) -> int:
        return len(self.inertia_diag)

    @property
    def task_dim(self) -> int:
        return len(self.inertia_diag)

    def fk(self, q: np.ndarray) -> np.ndarray:
        return q.copy()

    def jacobian(self, q: np.ndarray) -> np.ndarray:
        return np.eye(self.n_joints)

    def dynamics(self, state: RobotState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.n_joints
        mass = np.diag(self.inertia_diag)
        bias = self.damping * state.qd
        return mass, bias, np.zeros(n)
