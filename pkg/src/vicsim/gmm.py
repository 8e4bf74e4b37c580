"""Gaussian mixture learning on demonstration data and time-conditioned
regression for reference generation.

Rows are joint vectors (t, x_d, xd_d, f) with task dimension m, so the
mixture lives in R^(1+3m).  Conditioning on t yields a desired position,
velocity and interaction force trajectory plus a moment-matched covariance.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

_CSV_FLOAT = "%.17g"  # shortest lossless round-trip for float64


class DegenerateComponentError(RuntimeError):
    """A component kept collapsing after exhausting the restart budget."""


class NumericalUnderflowError(RuntimeError):
    """Conditioning produced no finite component likelihood."""


@dataclass(frozen=True)
class EmConfig:
    """Expectation-maximization settings.

    tol is an absolute threshold on the change of total log-likelihood,
    reg_floor is added to every covariance diagonal after each M-step
    (SI units), and restart_limit bounds how many collapsed components
    get re-seeded before fitting aborts.
    """

    max_iters: int = 200
    tol: float = 1e-6
    reg_floor: float = 1e-6
    seed: int = 0
    restart_limit: int = 5


@dataclass
class DemoDataset:
    """Recorded teaching demonstrations.

    Arrays share the leading row axis; demo_ids groups rows into
    individual demonstrations and t must increase strictly within each.
    """

    demo_ids: np.ndarray  # (N,) int
    t: np.ndarray  # (N,) s
    pos: np.ndarray  # (N, m) desired position, m
    vel: np.ndarray  # (N, m) desired velocity, m/s
    force: np.ndarray  # (N, m) estimated interaction force, N

    def __post_init__(self) -> None:
        self.demo_ids = np.asarray(self.demo_ids, dtype=int)
        self.t = np.asarray(self.t, dtype=float)
        self.pos = np.atleast_2d(np.asarray(self.pos, dtype=float))
        self.vel = np.atleast_2d(np.asarray(self.vel, dtype=float))
        self.force = np.atleast_2d(np.asarray(self.force, dtype=float))

    @property
    def task_dim(self) -> int:
        return self.pos.shape[1]

    @property
    def n_rows(self) -> int:
        return self.t.shape[0]

    @property
    def demo_labels(self) -> list[int]:
        seen: dict[int, None] = {}
        for d in self.demo_ids:
            seen.setdefault(int(d), None)
        return list(seen)

    def rows_of(self, demo_id: int) -> np.ndarray:
        return np.flatnonzero(self.demo_ids == demo_id)

    def validate(self) -> None:
        n = self.n_rows
        m = self.task_dim
        if m not in (1, 2, 3):
            raise ValueError(f"unsupported task dimension {m}")
        for name, arr, shape in (
            ("demo_ids", self.demo_ids, (n,)),
            ("t", self.t, (n,)),
            ("pos", self.pos, (n, m)),
            ("vel", self.vel, (n, m)),
            ("force", self.force, (n, m)),
        ):
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        for d in self.demo_labels:
            td = self.t[self.rows_of(d)]
            if td.size and np.any(np.diff(td) <= 0.0):
                raise ValueError(f"time not strictly increasing in demo {d}")

    def joint_matrix(self) -> np.ndarray:
        """Stack rows as (N, 1+3m) vectors (t, pos, vel, force)."""
        return np.hstack([self.t[:, None], self.pos, self.vel, self.force])

    def save_csv(self, path: str | Path) -> None:
        if self.n_rows == 0:
            raise ValueError("refusing to write an empty dataset")
        self.validate()
        m = self.task_dim
        header = (
            ["demo_id", "t"]
            + [f"x{j}" for j in range(m)]
            + [f"xd{j}" for j in range(m)]
            + [f"f{j}" for j in range(m)]
        )
        body = self.joint_matrix()
        with open(path, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for i in range(self.n_rows):
                cells = [str(int(self.demo_ids[i]))]
                cells += [_CSV_FLOAT % v for v in body[i]]
                fh.write(",".join(cells) + "\n")

    @classmethod
    def load_csv(cls, path: str | Path) -> "DemoDataset":
        with open(path, "r", newline="") as fh:
            header = fh.readline().strip().split(",")
            raw = [line.strip().split(",") for line in fh if line.strip()]
        if header[:2] != ["demo_id", "t"]:
            raise ValueError(f"unexpected demo CSV header in {path}")
        n_cols = len(header)
        if (n_cols - 2) % 3 != 0:
            raise ValueError(f"demo CSV column count {n_cols} is not 2+3m")
        m = (n_cols - 2) // 3
        if not raw:
            raise ValueError(f"no rows in {path}")
        data = np.array([[float(c) for c in row] for row in raw])
        if data.shape[1] != n_cols:
            raise ValueError(f"ragged rows in {path}")
        ds = cls(
            demo_ids=data[:, 0].astype(int),
            t=data[:, 1],
            pos=data[:, 2 : 2 + m],
            vel=data[:, 2 + m : 2 + 2 * m],
            force=data[:, 2 + 2 * m :],
        )
        ds.validate()
        return ds


def align_demos(data: DemoDataset, grid_hz: float = 100.0) -> DemoDataset:
    """Linearly rescale every demo to the mean demo duration and resample
    all channels onto a uniform grid.

    Velocities are scaled by the same time factor so they stay consistent
    with the rescaled positions.
    """
    data.validate()
    labels = data.demo_labels
    if len(labels) < 2:
        raise ValueError("alignment needs at least 2 demos")
    durations = []
    for d in labels:
        td = data.t[data.rows_of(d)]
        durations.append(td[-1] - td[0])
    mean_dur = float(np.mean(durations))
    n_grid = max(2, int(round(mean_dur * grid_hz)) + 1)
    grid = np.linspace(0.0, mean_dur, n_grid)

    ids, ts, ps, vs, fs = [], [], [], [], []
    for d, dur in zip(labels, durations):
        idx = data.rows_of(d)
        tau = (data.t[idx] - data.t[idx[0]]) * (mean_dur / dur)
        scale = dur / mean_dur  # dx/dtau = dx/dt * dt/dtau
        ids.append(np.full(n_grid, d, dtype=int))
        ts.append(grid)
        ps.append(_interp_columns(grid, tau, data.pos[idx]))
        vs.append(_interp_columns(grid, tau, data.vel[idx] * scale))
        fs.append(_interp_columns(grid, tau, data.force[idx]))
    return DemoDataset(
        demo_ids=np.concatenate(ids),
        t=np.concatenate(ts),
        pos=np.vstack(ps),
        vel=np.vstack(vs),
        force=np.vstack(fs),
    )


def _interp_columns(grid: np.ndarray, t: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return np.column_stack([np.interp(grid, t, cols[:, j]) for j in range(cols.shape[1])])


@dataclass(frozen=True)
class GaussianMixture:
    """Full-covariance mixture over joint rows, immutable after fitting."""

    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    covariances: np.ndarray  # (K, D, D)
    task_dim: int
    t_range: tuple[float, float]
    converged: bool = True
    loglik_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_restarts: int = 0

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def input_dims(self) -> tuple[int, ...]:
        return (0,)

    @property
    def output_dims(self) -> tuple[int, ...]:
        return tuple(range(1, self.dim))

    def validate(self) -> None:
        kk, dd = self.means.shape
        if self.weights.shape != (kk,) or self.covariances.shape != (kk, dd, dd):
            raise ValueError("inconsistent mixture shapes")
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ValueError("mixture weights do not sum to 1")
        if np.any(self.weights <= 0.0):
            raise ValueError("mixture weights must be positive")
        if dd != 1 + 3 * self.task_dim:
            raise ValueError("dimension does not match task_dim")
        for k in range(kk):
            cov = self.covariances[k]
            if np.max(np.abs(cov - cov.T)) > 1e-12:
                raise ValueError(f"covariance {k} not symmetric")
            if np.min(np.linalg.eigvalsh(cov)) <= 0.0:
                raise ValueError(f"covariance {k} not positive definite")


def fit_em(data: DemoDataset, n_components: int, config: EmConfig = EmConfig()) -> GaussianMixture:
    """Fit a full-covariance mixture with expectation-maximization.

    Components are initialized from contiguous time bins plus a seeded
    jitter, which makes the fit deterministic for a fixed (data, K, seed).
    Collapsed components are re-seeded from a random row; if that happens
    more than restart_limit times a DegenerateComponentError is raised.
    Non-convergence is reported through the converged flag, not an error.

    The covariance floor makes the M-step slightly inexact, so once an
    iteration stops improving the previous (best) parameters are returned
    and the trace is cut there, keeping it non-decreasing.
    """
    data.validate()
    X = data.joint_matrix()
    n, d = X.shape
    if n_components < 1:
        raise ValueError("n_components must be >= 1")
    if n < 10 * n_components:
        raise ValueError(f"{n} rows is too few for K={n_components} (need >= {10 * n_components})")
    if len(data.demo_labels) < 2:
        raise ValueError("training needs at least 2 demos")

    rng = np.random.default_rng(config.seed)
    reg = config.reg_floor * np.eye(d)
    global_cov = _floored(np.cov(X.T, bias=True).reshape(d, d) + reg, config.reg_floor)
    jitter_scale = 1e-6 * (X.std(axis=0) + 1e-12)

    order = np.argsort(X[:, 0], kind="stable")
    bins = np.array_split(order, n_components)
    weights = np.array([len(b) / n for b in bins])
    means = np.vstack([X[b].mean(axis=0) + rng.normal(0.0, jitter_scale) for b in bins])
    covs = np.stack(
        [
            _floored(np.cov(X[b].T, bias=True).reshape(d, d) + reg, config.reg_floor)
            if len(b) > 1
            else global_cov.copy()
            for b in bins
        ]
    )

    trace: list[float] = []
    prev_ll = -np.inf
    converged = False
    restarts = 0
    for _ in range(config.max_iters):
        log_resp, ll = _e_step(X, weights, means, covs)
        delta = ll - prev_ll
        if delta <= 0.0:
            # the regularization floor makes the fixed point wobble; keep
            # the previous parameters, which scored at least as well
            weights, means, covs = prev_params
            converged = -delta <= 10.0 * config.tol
            if not converged:
                log.warning("log-likelihood decreased by %.3e, stopping", -delta)
            break
        trace.append(ll)
        if delta < config.tol and np.isfinite(prev_ll):
            converged = True
            break
        prev_ll = ll
        prev_params = (weights.copy(), means.copy(), covs.copy())

        resp = np.exp(log_resp)
        nk = resp.sum(axis=0)
        collapsed = np.flatnonzero(nk < 1e-8)
        safe_nk = np.maximum(nk, 1e-300)
        weights = nk / nk.sum()
        means = (resp.T @ X) / safe_nk[:, None]
        for k in range(n_components):
            diff = X - means[k]
            cov = (resp[:, k, None] * diff).T @ diff / safe_nk[k]
            covs[k] = _floored(0.5 * (cov + cov.T) + reg, config.reg_floor)
        if collapsed.size:
            restarts += collapsed.size
            if restarts > config.restart_limit:
                raise DegenerateComponentError(
                    f"{restarts} component restarts exceeded limit {config.restart_limit}"
                )
            for k in collapsed:
                means[k] = X[rng.integers(n)] + rng.normal(0.0, jitter_scale)
                covs[k] = global_cov.copy()
                weights[k] = 1.0 / n
            weights = weights / weights.sum()
            # comparison baseline is void after a re-seed
            prev_ll = -np.inf

    if not converged:
        log.warning("EM did not converge within %d iterations", config.max_iters)
    model = GaussianMixture(
        weights=weights,
        means=means,
        covariances=covs,
        task_dim=data.task_dim,
        t_range=(float(X[:, 0].min()), float(X[:, 0].max())),
        converged=converged,
        loglik_trace=np.asarray(trace),
        n_restarts=restarts,
    )
    model.validate()
    return model


def _floored(cov: np.ndarray, reg_floor: float) -> np.ndarray:
    """Guarantee min eigenvalue >= reg_floor despite rounding."""
    evals, evecs = np.linalg.eigh(cov)
    lo = float(evals.min())
    if lo < reg_floor:
        cov = cov + (reg_floor - lo + 1e-3 * reg_floor) * np.eye(cov.shape[0])
    return 0.5 * (cov + cov.T)


def _e_step(X, weights, means, covs):
    n = X.shape[0]
    k = weights.shape[0]
    log_prob = np.empty((n, k))
    for j in range(k):
        log_prob[:, j] = _log_gaussian(X, means[j], covs[j])
    weighted = log_prob + np.log(weights)[None, :]
    norm = _logsumexp(weighted)
    return weighted - norm[:, None], float(norm.sum())


def _log_gaussian(X, mean, cov):
    d = mean.shape[0]
    chol = np.linalg.cholesky(cov)
    diff = np.linalg.solve(chol, (X - mean).T)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (d * np.log(2.0 * np.pi) + logdet + np.sum(diff * diff, axis=0))


def _logsumexp(a: np.ndarray) -> np.ndarray:
    hi = a.max(axis=-1, keepdims=True)
    return (hi + np.log(np.sum(np.exp(a - hi), axis=-1, keepdims=True))).squeeze(-1)


@dataclass(frozen=True)
class ReferenceSample:
    """One time slice of the regressed reference."""

    t: float
    x_d: np.ndarray
    xdot_d: np.ndarray
    f_d: np.ndarray
    output_covariance: np.ndarray
    extrapolated: bool = False
    jump_exceeded: bool = False


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Regressed reference over a time grid, array-of-struct layout."""

    t: np.ndarray  # (N,)
    x_d: np.ndarray  # (N, m)
    xdot_d: np.ndarray  # (N, m)
    f_d: np.ndarray  # (N, m)
    extrapolated: np.ndarray  # (N,) bool
    jump_exceeded: bool = False

    @property
    def task_dim(self) -> int:
        return self.x_d.shape[1]


def _conditional_parts(model: GaussianMixture):
    mu_t = model.means[:, 0]
    mu_o = model.means[:, 1:]
    s_tt = model.covariances[:, 0, 0]
    s_ot = model.covariances[:, 1:, 0]
    s_oo = model.covariances[:, 1:, 1:]
    gain = s_ot / s_tt[:, None]
    cond_cov = s_oo - gain[:, :, None] * s_ot[:, None, :]
    return mu_t, mu_o, s_tt, gain, cond_cov


def _mixing_weights(model: GaussianMixture, t_grid: np.ndarray) -> np.ndarray:
    mu_t = model.means[:, 0]
    s_tt = model.covariances[:, 0, 0]
    diff = t_grid[:, None] - mu_t[None, :]
    log_h = (
        np.log(model.weights)[None, :]
        - 0.5 * (np.log(2.0 * np.pi * s_tt)[None, :] + diff * diff / s_tt[None, :])
    )
    bad = ~np.all(np.isfinite(log_h), axis=1)
    if np.any(bad):
        finite_any = np.any(np.isfinite(log_h[bad]), axis=1)
        if not np.all(finite_any):
            # fall back to the nearest component in Mahalanobis distance
            dist = np.abs(diff[bad]) / np.sqrt(s_tt)[None, :]
            if not np.all(np.isfinite(dist)):
                raise NumericalUnderflowError("no finite component likelihood")
            one_hot = np.zeros((bad.sum(), model.n_components))
            one_hot[np.arange(bad.sum()), np.argmin(dist, axis=1)] = 1.0
            h = np.exp(log_h - _logsumexp(log_h)[:, None])
            h[bad] = one_hot
            return h
    return np.exp(log_h - _logsumexp(log_h)[:, None])


def regress(model: GaussianMixture, t_grid: np.ndarray, max_step: float = 0.05) -> ReferenceTrajectory:
    """Condition the mixture on every grid time.

    Output mean is the responsibility-weighted blend of per-component
    conditional means; a jump flag is raised when consecutive desired
    positions move more than max_step.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size == 0:
        raise ValueError("time grid must be a non-empty 1-D array")
    if np.any(np.diff(t_grid) <= 0.0):
        raise ValueError("time grid must increase strictly")
    model.validate()
    m = model.task_dim
    mu_t, mu_o, s_tt, gain, _ = _conditional_parts(model)
    h = _mixing_weights(model, t_grid)  # (N, K)
    cond_means = mu_o[None, :, :] + gain[None, :, :] * (t_grid[:, None] - mu_t[None, :])[:, :, None]
    mean = np.einsum("nk,nkd->nd", h, cond_means)
    lo, hi = model.t_range
    extrapolated = (t_grid < lo) | (t_grid > hi)
    x_d = mean[:, :m]
    jumps = np.linalg.norm(np.diff(x_d, axis=0), axis=1)
    jump_exceeded = bool(jumps.size and float(jumps.max()) > max_step)
    if jump_exceeded:
        log.warning("reference jump %.3f m exceeds max_step %.3f m", float(jumps.max()), max_step)
    return ReferenceTrajectory(
        t=t_grid,
        x_d=x_d,
        xdot_d=mean[:, m : 2 * m],
        f_d=mean[:, 2 * m :],
        extrapolated=extrapolated,
        jump_exceeded=jump_exceeded,
    )


def gmr_condition(model: GaussianMixture, t: float) -> ReferenceSample:
    """Condition on a single time, including the moment-matched covariance."""
    model.validate()
    m = model.task_dim
    t_arr = np.array([float(t)])
    mu_t, mu_o, s_tt, gain, cond_cov = _conditional_parts(model)
    h = _mixing_weights(model, t_arr)[0]
    cond_means = mu_o + gain * (float(t) - mu_t)[:, None]
    mean = h @ cond_means
    second = np.einsum("k,kij->ij", h, cond_cov) + np.einsum(
        "k,ki,kj->ij", h, cond_means, cond_means
    )
    cov = second - np.outer(mean, mean)
    cov = 0.5 * (cov + cov.T)
    lo, hi = model.t_range
    return ReferenceSample(
        t=float(t),
        x_d=mean[:m],
        xdot_d=mean[m : 2 * m],
        f_d=mean[2 * m :],
        output_covariance=cov,
        extrapolated=bool(t < lo or t > hi),
    )


def generate_reference(
    model: GaussianMixture, t_grid: np.ndarray, max_step: float = 0.05
) -> list[ReferenceSample]:
    """Per-sample view of regress(), with covariances attached."""
    traj = regress(model, t_grid, max_step=max_step)
    samples = []
    prev = None
    for i, t in enumerate(traj.t):
        sample = gmr_condition(model, float(t))
        jump = prev is not None and float(np.linalg.norm(sample.x_d - prev)) > max_step
        samples.append(
            ReferenceSample(
                t=sample.t,
                x_d=sample.x_d,
                xdot_d=sample.xdot_d,
                f_d=sample.f_d,
                output_covariance=sample.output_covariance,
                extrapolated=bool(traj.extrapolated[i]),
                jump_exceeded=jump,
            )
        )
        prev = sample.x_d
    return samples


def save_model(model: GaussianMixture, path: str | Path) -> None:
    model.validate()
    payload = {
        "weights": model.weights.tolist(),
        "means": model.means.tolist(),
        "covariances": model.covariances.tolist(),
        "task_dim": model.task_dim,
        "t_range": list(model.t_range),
        "converged": model.converged,
        "n_restarts": model.n_restarts,
        "loglik_trace": model.loglik_trace.tolist(),
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_model(path: str | Path) -> GaussianMixture:
    payload = json.loads(Path(path).read_text())
    model = GaussianMixture(
        weights=np.asarray(payload["weights"], dtype=float),
        means=np.asarray(payload["means"], dtype=float),
        covariances=np.asarray(payload["covariances"], dtype=float),
        task_dim=int(payload["task_dim"]),
        t_range=(float(payload["t_range"][0]), float(payload["t_range"][1])),
        converged=bool(payload["converged"]),
        loglik_trace=np.asarray(payload.get("loglik_trace", []), dtype=float),
        n_restarts=int(payload.get("n_restarts", 0)),
    )
    model.validate()
    return model
