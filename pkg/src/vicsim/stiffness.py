"""Per-step optimization of diagonal task stiffness under force, payload
and passivity constraints.

Each control step solves, over the diagonal stiffness k,

    min 1/2 ||F(k) - F_d||^2_Q + 1/2 ||k - k_min||^2_R
    s.t. k_min <= k <= k_max
         -F_max <= F(k) <= F_max
         T(t-1) + Tdot(k) dt >= eps            (energy tank)

where the quasi-static interaction model F(k) = (mu + D) xdot_err +
diag(x_err) k is affine in k.  Q, R and the interaction model are
diagonal, so box and payload constraints reduce to per-axis intervals
and the tank row is the only coupling constraint.  The solver clips the
unconstrained minimizer to the intervals and, when the tank row binds,
finds the exact multiplier by walking the breakpoints of the piecewise
linear dual residual; this is exact for this convex QP.

The tank stores dissipated energy and pays for stiffness increases:

    Tdot = sigma xdot_err' D xdot_err + x_err' diag(k - k_min) xdot_err

with the second term dropped once T <= eps, and sigma forced to 0 while
T >= T_max to keep the stored energy bounded.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .whole_body import impedance_wrench

DAMPING_RATIO = 0.707


class Infeasible(RuntimeError):
    """The constraint set of the stiffness program is empty."""


def damping_from_stiffness(k_diag: np.ndarray) -> np.ndarray:
    """Critically damped profile d = 2 * 0.707 * sqrt(k), elementwise."""
    return 2.0 * DAMPING_RATIO * np.sqrt(k_diag)


@dataclass(frozen=True)
class StiffnessEnvelope:
    """Admissible stiffness box and interaction force limits, per axis."""

    k_min: np.ndarray
    k_max: np.ndarray
    f_max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "k_min", np.asarray(self.k_min, dtype=float))
        object.__setattr__(self, "k_max", np.asarray(self.k_max, dtype=float))
        object.__setattr__(self, "f_max", np.asarray(self.f_max, dtype=float))

    @property
    def dim(self) -> int:
        return self.k_min.shape[0]

    def validate(self) -> None:
        if not (self.k_min.shape == self.k_max.shape == self.f_max.shape):
            raise ValueError("envelope arrays must share a shape")
        if np.any(self.k_min < 0.0) or np.any(self.k_max < self.k_min):
            raise ValueError("need 0 <= k_min <= k_max")
        if np.any(self.f_max <= 0.0):
            raise ValueError("force limits must be positive")


@dataclass(frozen=True)
class QpWeights:
    """Diagonal force-tracking (Q) and stiffness-economy (R) weights."""

    q_diag: np.ndarray
    r_diag: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q_diag", np.asarray(self.q_diag, dtype=float))
        object.__setattr__(self, "r_diag", np.asarray(self.r_diag, dtype=float))

    def validate(self) -> None:
        if self.q_diag.shape != self.r_diag.shape:
            raise ValueError("Q and R must share a shape")
        if np.any(self.q_diag <= 0.0) or np.any(self.r_diag <= 0.0):
            raise ValueError("weights must be strictly positive")


@dataclass(frozen=True)
class TankState:
    """Energy tank; T = x_t^2 / 2."""

    x_t: float = 1.0
    epsilon: float = 0.4
    t_max: float = 5.0

    @property
    def energy(self) -> float:
        return 0.5 * self.x_t * self.x_t

    @property
    def sigma(self) -> float:
        """Dissipation storage gate: off while the tank is full."""
        return 0.0 if self.energy >= self.t_max else 1.0

    def validate(self) -> None:
        if self.epsilon <= 0.0 or self.t_max <= self.epsilon:
            raise ValueError("need 0 < epsilon < t_max")
        if self.x_t < 0.0:
            raise ValueError("tank level must be non-negative")


@dataclass(frozen=True)
class InteractionModelInputs:
    """State-derived quantities the interaction model consumes.

    x_err = x_d - x and xdot_err = xd_d - xdot with the desired velocity
    taken as zero.  mu is the Cartesian velocity coupling matrix (zero in
    the quasi-static default); the acceleration error and task inertia
    only participate in the model variants kept for analysis.
    """

    x_err: np.ndarray
    xdot_err: np.ndarray
    d_diag: np.ndarray
    mu: np.ndarray | None = None
    xdd_err: np.ndarray | None = None
    lambda_task: np.ndarray | None = None
    lambda_shaped: np.ndarray | None = None


def interaction_wrench(
    inputs: InteractionModelInputs, k_diag: np.ndarray, variant: str = "simplified"
) -> np.ndarray:
    """Predicted interaction wrench for a candidate stiffness.

    simplified:        F = (mu + D) xdot_err + K x_err
    no-inertia:        F = Lambda(x) xdd_err + (mu + D) xdot_err + K x_err
    inertia-shaping:   F = Lambda_d xdd_err + D xdot_err + K x_err
    """
    spring = k_diag * inputs.x_err
    damp = inputs.d_diag * inputs.xdot_err
    coupling = inputs.mu @ inputs.xdot_err if inputs.mu is not None else 0.0
    if variant == "simplified":
        return coupling + damp + spring
    if variant == "no-inertia":
        return inputs.lambda_task @ inputs.xdd_err + coupling + damp + spring
    if variant == "inertia-shaping":
        return inputs.lambda_shaped @ inputs.xdd_err + damp + spring
    raise ValueError(f"unknown interaction model variant {variant!r}")


def interaction_coefficients(inputs: InteractionModelInputs) -> tuple[np.ndarray, np.ndarray]:
    """Affine decomposition F(k) = affine + slope * k of the simplified model."""
    affine = inputs.d_diag * inputs.xdot_err
    if inputs.mu is not None:
        affine = affine + inputs.mu @ inputs.xdot_err
    return affine, inputs.x_err.copy()


def tank_constraint(
    tank: TankState,
    x_err: np.ndarray,
    xdot_err: np.ndarray,
    d_diag: np.ndarray,
    k_min: np.ndarray,
    dt: float,
) -> tuple[np.ndarray, float]:
    """Linear row c . k <= b equivalent to T + Tdot dt >= epsilon."""
    if tank.energy <= tank.epsilon:
        raise ValueError("tank constraint is only defined above the epsilon floor")
    diss = tank.sigma * float(xdot_err @ (d_diag * xdot_err))
    c = -(x_err * xdot_err) * dt
    b = tank.energy + diss * dt - tank.epsilon + float(c @ k_min)
    return c, b


def tank_step(
    tank: TankState,
    x_err: np.ndarray,
    xdot_err: np.ndarray,
    d_diag: np.ndarray,
    k_diag: np.ndarray,
    k_min: np.ndarray,
    dt: float,
) -> tuple[TankState, float, float]:
    """Advance the tank one step; returns (state, stored, exchanged) in J.

    The exchange term is active only above the epsilon floor; below it
    the caller is expected to have clamped k to k_min already.
    """
    diss_inc = tank.sigma * float(xdot_err @ (d_diag * xdot_err)) * dt
    if tank.energy > tank.epsilon:
        var_inc = float((x_err * (k_diag - k_min)) @ xdot_err) * dt
    else:
        var_inc = 0.0
    energy = tank.energy + diss_inc + var_inc
    if energy < 0.0:
        raise AssertionError(f"tank energy became negative ({energy:.3e} J)")
    return (
        TankState(x_t=math.sqrt(2.0 * energy), epsilon=tank.epsilon, t_max=tank.t_max),
        diss_inc,
        var_inc,
    )


@dataclass(frozen=True)
class StiffnessQp:
    """One program instance in the affine force model."""

    affine: np.ndarray
    slope: np.ndarray
    f_desired: np.ndarray
    weights: QpWeights
    envelope: StiffnessEnvelope
    tank_coeff: np.ndarray | None = None
    tank_bound: float | None = None

    @property
    def dim(self) -> int:
        return self.slope.shape[0]


@dataclass(frozen=True)
class QpSolution:
    k: np.ndarray
    objective: float
    tank_active: bool
    tank_multiplier: float


def qp_objective(problem: StiffnessQp, k: np.ndarray) -> float:
    force_err = problem.affine + problem.slope * k - problem.f_desired
    econ = k - problem.envelope.k_min
    return 0.5 * float(
        force_err @ (problem.weights.q_diag * force_err) + econ @ (problem.weights.r_diag * econ)
    )


def _axis_intervals(problem: StiffnessQp) -> tuple[np.ndarray, np.ndarray]:
    """Intersect the stiffness box with the payload band, per axis."""
    env = problem.envelope
    lo = env.k_min.copy()
    hi = env.k_max.copy()
    for j in range(problem.dim):
        s = problem.slope[j]
        if s == 0.0:
            if abs(problem.affine[j]) > env.f_max[j]:
                raise Infeasible(f"axis {j}: payload bound unreachable at zero slope")
            continue
        f_lo = (-env.f_max[j] - problem.affine[j]) / s
        f_hi = (env.f_max[j] - problem.affine[j]) / s
        if s < 0.0:
            f_lo, f_hi = f_hi, f_lo
        lo[j] = max(lo[j], f_lo)
        hi[j] = min(hi[j], f_hi)
        if lo[j] > hi[j]:
            raise Infeasible(f"axis {j}: stiffness box and payload band do not intersect")
    return lo, hi


def solve_stiffness_qp(problem: StiffnessQp) -> QpSolution:
    """Exact solution via interval clipping plus a tank multiplier search.

    Raises Infeasible when the per-axis intervals are empty or the tank
    row cannot be met inside them.
    """
    problem.weights.validate()
    problem.envelope.validate()
    w = problem.weights
    hess = w.q_diag * problem.slope * problem.slope + w.r_diag
    lin = w.q_diag * problem.slope * (problem.f_desired - problem.affine) + w.r_diag * problem.envelope.k_min
    k_free = lin / hess
    lo, hi = _axis_intervals(problem)
    k = np.clip(k_free, lo, hi)

    c = problem.tank_coeff
    b = problem.tank_bound
    if c is None or float(c @ k) <= b:
        return QpSolution(k=k, objective=qp_objective(problem, k), tank_active=False, tank_multiplier=0.0)

    moving = c != 0.0
    if not np.any(moving):
        raise Infeasible("tank row is constant and violated")

    def k_of(lam: float) -> np.ndarray:
        return np.clip(k_free - lam * c / hess, lo, hi)

    # lambda values where each axis enters or leaves its clip range
    points = [0.0]
    for j in np.flatnonzero(moving):
        for bound in (lo[j], hi[j]):
            lam_j = (k_free[j] - bound) * hess[j] / c[j]
            if lam_j > 0.0:
                points.append(lam_j)
    points = sorted(set(points))

    lam_star = None
    for left, right in zip(points, points[1:] + [None]):
        g_left = float(c @ k_of(left)) - b
        if g_left <= 0.0:
            lam_star = left
            break
        k_left = k_of(left)
        unclip = moving & (k_left > lo) & (k_left < hi)
        slope_g = -float(np.sum(c[unclip] ** 2 / hess[unclip]))
        if right is not None:
            g_right = float(c @ k_of(right)) - b
            if g_right > 0.0:
                continue
        if slope_g == 0.0:
            if right is None:
                raise Infeasible("tank row cannot be met inside the stiffness intervals")
            continue
        lam_star = left - g_left / slope_g
        break
    if lam_star is None:
        raise Infeasible("tank row cannot be met inside the stiffness intervals")

    k = k_of(lam_star)
    # directed rounding: never leave the tank row violated by float dust
    for _ in range(3):
        gap = float(c @ k) - b
        if gap <= 0.0:
            break
        k_now = k_of(lam_star)
        unclip = moving & (k_now > lo) & (k_now < hi)
        denom = float(np.sum(c[unclip] ** 2 / hess[unclip]))
        lam_star += gap / denom * (1.0 + 1e-12) if denom > 0.0 else abs(lam_star) * 1e-12 + 1e-18
        k = k_of(lam_star)
    if float(c @ k) - b > 0.0:
        raise Infeasible("tank row violated after multiplier polish")
    return QpSolution(
        k=k, objective=qp_objective(problem, k), tank_active=True, tank_multiplier=float(lam_star)
    )


STIFFNESS_MODES = ("ls", "hs", "os")


@dataclass(frozen=True)
class VicCommand:
    """Outcome of one variable-impedance control step."""

    k_diag: np.ndarray
    d_diag: np.ndarray
    wrench: np.ndarray
    tank: TankState
    sigma: float
    stored_inc: float
    exchanged_inc: float
    bypass: bool
    infeasible: bool


def vic_step(
    mode: str,
    x: np.ndarray,
    xdot: np.ndarray,
    x_d: np.ndarray,
    f_d: np.ndarray,
    k_prev: np.ndarray,
    tank: TankState,
    envelope: StiffnessEnvelope,
    weights: QpWeights,
    dt: float,
) -> VicCommand:
    """One stiffness selection + impedance command step.

    ls holds the envelope floor, hs the ceiling; os runs the constrained
    program with the tank ledger.  Damping always derives from the
    previous stiffness so the program coefficients stay causal.
    """
    if mode not in STIFFNESS_MODES:
        raise ValueError(f"unknown stiffness mode {mode!r}")
    envelope.validate()
    d_diag = damping_from_stiffness(k_prev)
    x_err = x_d - x
    xdot_err = -xdot  # desired velocity is zero in the quasi-static model
    bypass = False
    infeasible = False

    if mode == "ls":
        k = envelope.k_min.copy()
    elif mode == "hs":
        k = envelope.k_max.copy()
    else:
        if tank.energy <= tank.epsilon:
            k = envelope.k_min.copy()
            bypass = True
        else:
            inputs = InteractionModelInputs(x_err=x_err, xdot_err=xdot_err, d_diag=d_diag)
            affine, slope = interaction_coefficients(inputs)
            c, b = tank_constraint(tank, x_err, xdot_err, d_diag, envelope.k_min, dt)
            problem = StiffnessQp(
                affine=affine,
                slope=slope,
                f_desired=f_d,
                weights=weights,
                envelope=envelope,
                tank_coeff=c,
                tank_bound=b,
            )
            try:
                k = solve_stiffness_qp(problem).k
            except Infeasible:
                k = envelope.k_min.copy()
                infeasible = True

    if mode == "os":
        sigma = tank.sigma
        new_tank, stored, exchanged = tank_step(
            tank, x_err, xdot_err, d_diag, k, envelope.k_min, dt
        )
        if tank.energy > tank.epsilon and new_tank.energy < tank.epsilon - 1e-9:
            raise AssertionError(
                f"tank fell below the floor: {new_tank.energy:.12f} < {tank.epsilon}"
            )
    else:
        sigma, new_tank, stored, exchanged = tank.sigma, tank, 0.0, 0.0

    wrench = impedance_wrench(x, xdot, x_d, k, d_diag)
    return VicCommand(
        k_diag=k,
        d_diag=d_diag,
        wrench=wrench,
        tank=new_tank,
        sigma=sigma,
        stored_inc=stored,
        exchanged_inc=exchanged,
        bypass=bypass,
        infeasible=infeasible,
    )
