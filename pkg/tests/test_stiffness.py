"""Stiffness program, damping law and energy tank tests."""
from __future__ import annotations

import numpy as np
import pytest

from qp_oracle import feasible, objective, oracle_solve
from vicsim.stiffness import (
    Infeasible,
    InteractionModelInputs,
    QpWeights,
    StiffnessEnvelope,
    StiffnessQp,
    TankState,
    damping_from_stiffness,
    interaction_coefficients,
    interaction_wrench,
    qp_objective,
    solve_stiffness_qp,
    tank_constraint,
    tank_step,
    vic_step,
)

PAPER_ENVELOPE = StiffnessEnvelope(
    k_min=np.array([200.0, 200.0, 200.0]),
    k_max=np.array([1000.0, 1000.0, 1000.0]),
    f_max=np.array([60.0, 60.0, 60.0]),
)
PAPER_WEIGHTS = QpWeights(q_diag=np.full(3, 3200.0), r_diag=np.ones(3))


def random_instance(rng, m=None, force_tank=None):
    """Random feasible program instance; resamples until feasible."""
    while True:
        dim = m if m is not None else int(rng.integers(1, 4))
        k_min = rng.uniform(50.0, 400.0, dim)
        env = StiffnessEnvelope(
            k_min=k_min,
            k_max=k_min + rng.uniform(100.0, 900.0, dim),
            f_max=rng.uniform(20.0, 100.0, dim),
        )
        weights = QpWeights(
            q_diag=rng.uniform(100.0, 5000.0, dim), r_diag=rng.uniform(0.1, 10.0, dim)
        )
        x_err = rng.uniform(-0.06, 0.06, dim)
        x_err[rng.random(dim) < 0.15] = 0.0
        xdot_err = rng.uniform(-0.5, 0.5, dim)
        d_diag = rng.uniform(0.0, 60.0, dim)
        affine = d_diag * xdot_err
        f_d = rng.uniform(-50.0, 50.0, dim)
        with_tank = force_tank if force_tank is not None else (rng.random() < 0.7)
        c, b = None, None
        if with_tank:
            tank = TankState(x_t=float(rng.uniform(0.95, 2.5)))
            c, b = tank_constraint(tank, x_err, xdot_err, d_diag, env.k_min, dt=1e-3)
        # independent feasibility screen: per-axis intervals plus tank row
        lo, hi = env.k_min.copy(), env.k_max.copy()
        ok = True
        for j in range(dim):
            if x_err[j] == 0.0:
                ok &= abs(affine[j]) <= env.f_max[j]
                continue
            f_lo = (-env.f_max[j] - affine[j]) / x_err[j]
            f_hi = (env.f_max[j] - affine[j]) / x_err[j]
            if x_err[j] < 0:
                f_lo, f_hi = f_hi, f_lo
            lo[j], hi[j] = max(lo[j], f_lo), min(hi[j], f_hi)
            ok &= lo[j] <= hi[j]
        if ok and c is not None:
            corner = np.where(c > 0, lo, hi)
            ok &= float(c @ corner) <= b
        if not ok:
            continue
        return StiffnessQp(
            affine=affine,
            slope=x_err,
            f_desired=f_d,
            weights=weights,
            envelope=env,
            tank_coeff=c,
            tank_bound=b,
        )


def kkt_residual(problem, sol):
    """Worst stationarity/complementarity violation of a solution."""
    w = problem.weights
    hess = w.q_diag * problem.slope**2 + w.r_diag
    lin = w.q_diag * problem.slope * (problem.f_desired - problem.affine) + w.r_diag * problem.envelope.k_min
    grad = hess * sol.k - lin
    lam = sol.tank_multiplier
    c = problem.tank_coeff if problem.tank_coeff is not None else np.zeros_like(sol.k)
    env = problem.envelope
    # effective per-axis interval (box intersected with payload band)
    lo, hi = env.k_min.copy(), env.k_max.copy()
    for j in range(problem.dim):
        s = problem.slope[j]
        if s == 0.0:
            continue
        f_lo = (-env.f_max[j] - problem.affine[j]) / s
        f_hi = (env.f_max[j] - problem.affine[j]) / s
        if s < 0:
            f_lo, f_hi = f_hi, f_lo
        lo[j], hi[j] = max(lo[j], f_lo), min(hi[j], f_hi)
    res = 0.0
    scale = 1.0 + float(np.max(np.abs(grad)))
    for j in range(problem.dim):
        station = grad[j] + lam * c[j]
        gap_lo = sol.k[j] - lo[j]
        gap_hi = hi[j] - sol.k[j]
        if gap_lo <= 1e-7 * (1 + abs(lo[j])):
            res = max(res, -station)  # multiplier at lower bound must be >= 0
        elif gap_hi <= 1e-7 * (1 + abs(hi[j])):
            res = max(res, station)
        else:
            res = max(res, abs(station))
    if problem.tank_coeff is not None:
        res = max(res, -lam * scale)
        res = max(res, abs(lam * (float(c @ sol.k) - problem.tank_bound)))
    return res / scale


class TestDampingLaw:
    def test_exact_on_grid(self):
        for k in (0.0, 200.0, 500.0, 1000.0):
            d = damping_from_stiffness(np.array([k]))[0]
            assert d == 2.0 * 0.707 * np.sqrt(k)

    def test_frozen_values(self):
        d = damping_from_stiffness(np.array([200.0, 500.0, 1000.0]))
        assert d == pytest.approx([19.99698, 31.61800, 44.71461], abs=1e-4)

    def test_elementwise(self):
        k = np.array([100.0, 400.0])
        d = damping_from_stiffness(k)
        assert np.array_equal(d, 2 * 0.707 * np.sqrt(k))


class TestInteractionModel:
    def test_worked_example(self):
        inputs = InteractionModelInputs(
            x_err=np.array([0.0, 0.01]),
            xdot_err=np.zeros(2),
            d_diag=np.zeros(2),
        )
        f = interaction_wrench(inputs, np.array([200.0, 500.0]))
        assert np.allclose(f, [0.0, 5.0], atol=1e-14)

    def test_variants_agree_at_zero_acceleration(self):
        rng = np.random.default_rng(0)
        m = 3
        inputs = InteractionModelInputs(
            x_err=rng.normal(0, 0.02, m),
            xdot_err=rng.normal(0, 0.1, m),
            d_diag=rng.uniform(10, 40, m),
            mu=rng.normal(0, 0.5, (m, m)),
            xdd_err=np.zeros(m),
            lambda_task=np.diag(rng.uniform(1, 5, m)),
        )
        k = rng.uniform(200, 1000, m)
        a = interaction_wrench(inputs, k, "simplified")
        b = interaction_wrench(inputs, k, "no-inertia")
        assert np.allclose(a, b, atol=1e-14)

    def test_coefficients_reproduce_wrench(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            m = int(rng.integers(1, 4))
            inputs = InteractionModelInputs(
                x_err=rng.normal(0, 0.03, m),
                xdot_err=rng.normal(0, 0.2, m),
                d_diag=rng.uniform(0, 50, m),
            )
            k = rng.uniform(100, 900, m)
            affine, slope = interaction_coefficients(inputs)
            assert np.allclose(affine + slope * k, interaction_wrench(inputs, k), atol=1e-12)


class TestTank:
    def test_initial_state_paper_values(self):
        tank = TankState()
        assert tank.energy == pytest.approx(0.5)
        assert tank.epsilon == 0.4
        assert tank.sigma == 1.0

    def test_single_step_increment(self):
        # dissipation 0.5 W for 1 ms stores 5e-4 J
        tank = TankState(x_t=1.0)
        xdot_err = np.array([0.5, 0.0])
        d_diag = np.array([2.0, 2.0])
        k = np.array([200.0, 200.0])
        new, stored, exchanged = tank_step(
            tank, np.zeros(2), xdot_err, d_diag, k, k, dt=1e-3
        )
        assert stored == pytest.approx(5.0e-4, rel=1e-12)
        assert exchanged == 0.0
        assert new.energy == pytest.approx(0.5 + 5.0e-4, rel=1e-12)

    def test_sigma_gates_storage_when_full(self):
        full = TankState(x_t=np.sqrt(2.0 * 5.0))
        assert full.sigma == 0.0
        new, stored, _ = tank_step(
            full, np.zeros(1), np.array([1.0]), np.array([30.0]), np.array([200.0]), np.array([200.0]), 1e-3
        )
        assert stored == 0.0
        assert new.energy == pytest.approx(full.energy)

    def test_exchange_dropped_below_floor(self):
        low = TankState(x_t=np.sqrt(2.0 * 0.3))  # below epsilon
        new, stored, exchanged = tank_step(
            low,
            np.array([0.02]),
            np.array([-0.3]),
            np.array([20.0]),
            np.array([900.0]),
            np.array([200.0]),
            1e-3,
        )
        assert exchanged == 0.0
        assert new.energy >= low.energy  # storage only

    def test_constraint_row_matches_step_arithmetic(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            m = int(rng.integers(1, 4))
            tank = TankState(x_t=float(rng.uniform(0.95, 3.0)))
            x_err = rng.normal(0, 0.03, m)
            xdot_err = rng.normal(0, 0.3, m)
            d_diag = rng.uniform(5, 50, m)
            k_min = rng.uniform(100, 300, m)
            k = rng.uniform(k_min, k_min + 700)
            dt = 1e-3
            c, b = tank_constraint(tank, x_err, xdot_err, d_diag, k_min, dt)
            new, stored, exchanged = tank_step(tank, x_err, xdot_err, d_diag, k, k_min, dt)
            margin = b - float(c @ k)
            # c.k <= b  iff  the stepped energy stays above the floor
            assert new.energy - tank.epsilon == pytest.approx(margin, abs=1e-12)

    def test_constraint_requires_headroom(self):
        with pytest.raises(ValueError):
            tank_constraint(
                TankState(x_t=0.5), np.zeros(1), np.zeros(1), np.ones(1), np.ones(1), 1e-3
            )


class TestQpSolver:
    def test_scalar_worked_example(self):
        problem = StiffnessQp(
            affine=np.zeros(1),
            slope=np.array([0.01]),
            f_desired=np.array([10.0]),
            weights=QpWeights(q_diag=np.array([3200.0]), r_diag=np.array([1.0])),
            envelope=StiffnessEnvelope(
                k_min=np.array([200.0]), k_max=np.array([1000.0]), f_max=np.array([60.0])
            ),
        )
        sol = solve_stiffness_qp(problem)
        # stationarity: k = (Q xe Fd + R kmin) / (Q xe^2 + R) = 520 / 1.32
        assert sol.k[0] == pytest.approx(520.0 / 1.32, abs=1e-9)
        assert sol.k[0] == pytest.approx(393.94, abs=0.01)
        assert not sol.tank_active

    def test_matches_oracle_random_instances(self):
        rng = np.random.default_rng(3)
        for i in range(120):
            problem = random_instance(rng)
            sol = solve_stiffness_qp(problem)
            ref = oracle_solve(problem)
            assert ref is not None, f"instance {i}: oracle found no feasible point"
            ref_obj = objective(problem, ref)
            assert sol.objective <= ref_obj + 1e-6 * (1.0 + abs(ref_obj)), (
                f"instance {i}: solver {sol.objective} vs oracle {ref_obj}"
            )
            assert feasible(problem, sol.k, tol=1e-10)

    def test_kkt_residual_small(self):
        rng = np.random.default_rng(4)
        for _ in range(150):
            problem = random_instance(rng)
            sol = solve_stiffness_qp(problem)
            assert kkt_residual(problem, sol) <= 1e-8

    def test_tank_bind_reduces_stiffness(self):
        # negative x_err * xdot_err product drains the tank, so the row
        # binds and must cap the stiffness below its free optimum
        x_err = np.array([0.02])
        xdot_err = np.array([-0.4])
        d_diag = np.array([5.0])
        tank = TankState(x_t=np.sqrt(2.0 * 0.4005))
        c, b = tank_constraint(tank, x_err, xdot_err, d_diag, np.array([200.0]), dt=1e-3)
        envelope = StiffnessEnvelope(
            k_min=np.array([200.0]), k_max=np.array([3000.0]), f_max=np.array([80.0])
        )
        weights = QpWeights(q_diag=np.array([3200.0]), r_diag=np.array([1.0]))
        problem = StiffnessQp(
            affine=d_diag * xdot_err,
            slope=x_err,
            f_desired=np.array([50.0]),
            weights=weights,
            envelope=envelope,
            tank_coeff=c,
            tank_bound=b,
        )
        unconstrained = StiffnessQp(
            affine=problem.affine,
            slope=problem.slope,
            f_desired=problem.f_desired,
            weights=weights,
            envelope=envelope,
        )
        free = solve_stiffness_qp(unconstrained)
        sol = solve_stiffness_qp(problem)
        assert sol.tank_active
        assert sol.k[0] < free.k[0]
        assert float(c @ sol.k) <= b + 1e-10
        # exact stiffness on the row: c k = b
        assert sol.k[0] == pytest.approx(b / c[0], rel=1e-9)

    def test_payload_band_clamps(self):
        problem = StiffnessQp(
            affine=np.zeros(1),
            slope=np.array([0.1]),  # 10 cm error: force = 0.1 k
            f_desired=np.array([70.0]),
            weights=QpWeights(q_diag=np.array([3200.0]), r_diag=np.array([1.0])),
            envelope=StiffnessEnvelope(
                k_min=np.array([200.0]), k_max=np.array([1000.0]), f_max=np.array([60.0])
            ),
        )
        sol = solve_stiffness_qp(problem)
        assert sol.k[0] == pytest.approx(600.0, abs=1e-9)  # 0.1 * 600 = 60 N cap

    def test_zero_error_axis_rests_at_floor(self):
        problem = StiffnessQp(
            affine=np.zeros(2),
            slope=np.array([0.0, 0.02]),
            f_desired=np.array([10.0, 10.0]),
            weights=QpWeights(q_diag=np.full(2, 3200.0), r_diag=np.ones(2)),
            envelope=StiffnessEnvelope(
                k_min=np.full(2, 200.0), k_max=np.full(2, 1000.0), f_max=np.full(2, 60.0)
            ),
        )
        sol = solve_stiffness_qp(problem)
        assert sol.k[0] == 200.0

    def test_infeasible_payload_raises(self):
        problem = StiffnessQp(
            affine=np.array([100.0]),  # damping already above the payload cap
            slope=np.array([0.0]),
            f_desired=np.array([0.0]),
            weights=QpWeights(q_diag=np.array([3200.0]), r_diag=np.array([1.0])),
            envelope=StiffnessEnvelope(
                k_min=np.array([200.0]), k_max=np.array([1000.0]), f_max=np.array([60.0])
            ),
        )
        with pytest.raises(Infeasible):
            solve_stiffness_qp(problem)

    def test_force_error_monotone_in_q(self):
        # more force authority can only tighten tracking on that axis
        x_err = np.array([0.015])
        base = dict(
            affine=np.array([1.2]),
            slope=x_err,
            f_desired=np.array([12.0]),
            envelope=StiffnessEnvelope(
                k_min=np.array([200.0]), k_max=np.array([1000.0]), f_max=np.array([60.0])
            ),
        )
        errs = []
        for q in (10.0, 100.0, 1000.0, 10000.0, 100000.0):
            sol = solve_stiffness_qp(
                StiffnessQp(weights=QpWeights(q_diag=np.array([q]), r_diag=np.array([1.0])), **base)
            )
            force = base["affine"] + x_err * sol.k
            errs.append(abs(float(force - base["f_desired"])))
        assert all(a >= b - 1e-12 for a, b in zip(errs, errs[1:]))


class TestVicStep:
    ENV2 = StiffnessEnvelope(
        k_min=np.array([200.0, 200.0]),
        k_max=np.array([1000.0, 1000.0]),
        f_max=np.array([60.0, 60.0]),
    )
    W2 = QpWeights(q_diag=np.full(2, 3200.0), r_diag=np.ones(2))

    def step(self, mode, tank=None, **kw):
        args = dict(
            x=np.array([0.0, 0.0]),
            xdot=np.array([0.0, 0.0]),
            x_d=np.array([0.01, -0.02]),
            f_d=np.array([5.0, -10.0]),
            k_prev=np.array([300.0, 400.0]),
            tank=tank or TankState(),
            envelope=self.ENV2,
            weights=self.W2,
            dt=1e-3,
        )
        args.update(kw)
        return vic_step(mode, **args)

    def test_ls_holds_floor_hs_holds_ceiling(self):
        assert np.array_equal(self.step("ls").k_diag, self.ENV2.k_min)
        assert np.array_equal(self.step("hs").k_diag, self.ENV2.k_max)

    def test_damping_always_from_previous_stiffness(self):
        out = self.step("os")
        assert np.array_equal(out.d_diag, damping_from_stiffness(np.array([300.0, 400.0])))

    def test_bypass_at_floor_emits_k_min_exactly(self):
        low = TankState(x_t=np.sqrt(2.0 * 0.4))  # exactly at epsilon
        out = self.step("os", tank=low)
        assert out.bypass
        assert np.array_equal(out.k_diag, self.ENV2.k_min)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            self.step("xx")

    def test_wrench_matches_impedance_law(self):
        out = self.step("ls", xdot=np.array([0.1, 0.0]))
        want = self.ENV2.k_min * np.array([0.01, -0.02]) - out.d_diag * np.array([0.1, 0.0])
        assert np.allclose(out.wrench, want, atol=1e-12)

    def test_tank_ledger_reconciles_over_rollout(self):
        rng = np.random.default_rng(5)
        tank = TankState()
        k_prev = self.ENV2.k_min.copy()
        total = tank.energy
        increments = 0.0
        for _ in range(500):
            out = self.step(
                "os",
                tank=tank,
                k_prev=k_prev,
                x=rng.normal(0, 0.01, 2),
                xdot=rng.normal(0, 0.1, 2),
                x_d=rng.normal(0, 0.01, 2),
                f_d=rng.normal(0, 10, 2),
            )
            increments += out.stored_inc + out.exchanged_inc
            tank = out.tank
            k_prev = out.k_diag
            assert tank.energy >= tank.epsilon - 1e-9
        assert tank.energy - total == pytest.approx(increments, abs=1e-9)
