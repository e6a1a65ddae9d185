"""Deterministic-equivalent layer: fixed point and asymptotic score statistics.

Solves the self-consistent system coupling per-task trace statistics to the
effective interaction matrix, then evaluates the small-dimensional matrices
that characterize the asymptotic Gaussian law of the scores: for an
unlabeled sample of class j in task t,

    f ~ N(m_j^t, (sigma^t)^2),
    m_j^t   = a_j^t . y / (1 - delta^t),
    sigma^t = sqrt(y^T B^t y) / (1 - delta^t),

with ``a_j^t`` and ``B^t`` assembled from the fixed point, the class-mean
Gram matrix and the growth profile. The placement of the (1 - delta) factor
follows the full derivation and was validated against Monte Carlo; see the
moment-matching tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import GrowthProfile
from .errors import (
    DivergentSeries,
    InvalidRegion,
    NegativeVariance,
    NoConvergence,
    SingularMatrix,
)

FIXED_POINT_TOL = 1e-12
FIXED_POINT_CAP = 10_000
VARIANCE_CLAMP = 1e-10
RESOLVENT_COND_MAX = 1e12


@dataclass(frozen=True)
class FixedPoint:
    """Converged solution (delta, calA) of the self-consistent system,
    together with the derived per-class and per-task trace vectors."""

    delta: np.ndarray
    calA: np.ndarray
    delta_tilde: np.ndarray
    delta_bar: np.ndarray
    residual: float
    iterations: int

    @property
    def num_tasks(self) -> int:
        return self.delta.shape[0]


@dataclass(frozen=True)
class TheoryInputs:
    """Everything the asymptotic evaluator needs besides the fixed point.

    ``cal_m`` is the 2T-by-2T Gram matrix of (centered) class means, true or
    estimated. ``dbar`` and ``dtilde`` are the block-diagonal first- and
    second-moment statistics of the label probabilities; with certain labels
    they reduce to the identity and the labeled class shares.
    """

    cal_m: np.ndarray
    profile: GrowthProfile
    lambda_tilde: np.ndarray
    dbar: np.ndarray
    dtilde: np.ndarray

    def __post_init__(self):
        T = self.profile.num_tasks
        for name in ("cal_m", "dbar", "dtilde"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != (2 * T, 2 * T):
                raise ValueError(f"{name} must be 2T x 2T")
            object.__setattr__(self, name, a)
        lt = np.asarray(self.lambda_tilde, dtype=np.float64)
        if lt.shape != (T, T):
            raise ValueError("lambda_tilde must be T x T")
        object.__setattr__(self, "lambda_tilde", lt)

    @classmethod
    def with_certain_labels(cls, cal_m, profile: GrowthProfile, lambda_tilde) -> "TheoryInputs":
        """Specialize to certain labels: dbar is the identity, dtilde the
        diagonal of labeled class shares within each task."""
        return cls(
            cal_m=cal_m,
            profile=profile,
            lambda_tilde=lambda_tilde,
            dbar=np.eye(2 * profile.num_tasks),
            dtilde=np.diag(certain_label_share(profile)),
        )


def certain_label_share(profile: GrowthProfile) -> np.ndarray:
    """2T vector of labeled class shares n_lj^t / n_l^t, written through the
    growth proxies as (rho * eta) / (rho_bar * eta_bar) per entry."""
    per_task = profile.rho_bar * profile.eta_bar
    return profile.rho * profile.eta / np.repeat(per_task, 2)


def _cal_a_of(delta_bar: np.ndarray, lam_tilde: np.ndarray) -> np.ndarray:
    """Effective interaction matrix for given per-task trace weights.

    The core matrix must stay positive definite: iteration from zero grows
    monotonically below the smallest fixed point, so losing definiteness
    means no fixed point exists for these parameters.
    """
    core = np.diag(1.0 / delta_bar) - lam_tilde
    if np.linalg.eigvalsh(core).min() <= 0.0:
        raise InvalidRegion(
            "resolvent core lost positive definiteness; alpha too small for "
            "the deterministic equivalent to exist"
        )
    inner = np.linalg.solve(core, lam_tilde)
    return lam_tilde + lam_tilde @ inner


def _delta_vectors(delta, profile: GrowthProfile):
    T = delta.shape[0]
    denom = profile.num_tasks * profile.c * (1.0 - np.repeat(delta, 2))
    delta_tilde = profile.rho / denom
    delta_bar = delta_tilde[0::2] + delta_tilde[1::2]
    return delta_tilde, delta_bar


def solve_fixed_point(lambda_tilde, profile: GrowthProfile) -> FixedPoint:
    """Iterate the two defining equations to a max-norm residual of 1e-12.

    Plain fixed-point iteration from delta = 0; on detected oscillation
    (residual increase) the step is damped by successive halving. Raises
    :class:`InvalidRegion` when the equivalent does not exist for these
    parameters (some delta reaches 1 or the core matrix turns singular),
    :class:`NoConvergence` at the iteration cap.
    """
    lam_tilde = np.asarray(lambda_tilde, dtype=np.float64)
    T = profile.num_tasks
    if lam_tilde.shape != (T, T):
        raise ValueError("lambda_tilde must be T x T")
    if not np.isfinite(lam_tilde).all():
        raise ValueError("lambda_tilde entries must be finite")
    if not np.allclose(lam_tilde, lam_tilde.T, atol=1e-10):
        raise ValueError("lambda_tilde must be symmetric")

    delta = np.zeros(T)
    theta = 1.0
    prev_res = np.inf
    prev_dir = None
    for it in range(1, FIXED_POINT_CAP + 1):
        delta_tilde, delta_bar = _delta_vectors(delta, profile)
        cal_a = _cal_a_of(delta_bar, lam_tilde)
        update = np.diag(cal_a) / T
        if not np.isfinite(update).all() or (update >= 1.0).any():
            raise InvalidRegion(
                "fixed point left the valid region (delta >= 1); alpha too small"
            )
        step = update - delta
        res = float(np.max(np.abs(step)))
        if res <= FIXED_POINT_TOL:
            delta = update
            delta_tilde, delta_bar = _delta_vectors(delta, profile)
            cal_a = _cal_a_of(delta_bar, lam_tilde)
            final_res = float(np.max(np.abs(np.diag(cal_a) / T - delta)))
            return FixedPoint(
                delta=delta,
                calA=cal_a,
                delta_tilde=delta_tilde,
                delta_bar=delta_bar,
                residual=final_res,
                iterations=it,
            )
        # Oscillation means the step direction flipped while the residual
        # grew; plain monotone growth must keep full steps so a missing
        # fixed point reaches the invalidity boundary and is reported as
        # such rather than stalling.
        direction = np.sign(step)
        if prev_dir is not None and res > prev_res and (direction * prev_dir < 0).any():
            theta = max(theta / 2.0, 2.0**-16)
        else:
            theta = min(theta * 1.25, 1.0)
        prev_res = res
        prev_dir = direction
        delta = delta + theta * step
    raise NoConvergence(
        f"fixed point residual {prev_res:.3e} above tolerance after {FIXED_POINT_CAP} iterations"
    )


def _expand(mat_t: np.ndarray) -> np.ndarray:
    """Expand a T x T matrix to 2T x 2T by duplicating rows and columns."""
    return np.kron(mat_t, np.ones((2, 2)))


def theta_matrices(fp: FixedPoint, inputs: TheoryInputs) -> tuple[np.ndarray, np.ndarray]:
    """First-order matrices (Theta0, Theta); Theta resolves Theta0 against
    the per-class trace weights."""
    two_t = 2 * fp.num_tasks
    theta0 = _expand(fp.calA) * inputs.cal_m
    core = np.eye(two_t) - theta0 * fp.delta_tilde[None, :]
    if np.linalg.cond(core) > RESOLVENT_COND_MAX:
        raise SingularMatrix(
            "first-order resolvent is numerically singular; invalid parameter region"
        )
    theta = np.linalg.solve(core, theta0)
    return theta0, theta


@dataclass(frozen=True)
class SecondOrder:
    """Second-order interaction matrix S with its per-target weight rows:
    ``r[t]`` over classes (length 2T) and ``r_bar[t]`` over tasks (length T)."""

    s: np.ndarray
    r: np.ndarray
    r_bar: np.ndarray


def s_matrix(fp: FixedPoint, profile: GrowthProfile) -> SecondOrder:
    """Sum the geometric series of squared interactions.

    Raises :class:`DivergentSeries` when the series does not converge
    (spectral radius of the weighted one-step matrix at or above 1).
    """
    T = fp.num_tasks
    s_bar = fp.calA**2 / (T * T * profile.c * (1.0 - fp.delta[None, :]) ** 2)
    step = profile.rho_bar[:, None] * s_bar
    radius = np.max(np.abs(np.linalg.eigvals(step)))
    if radius >= 1.0:
        raise DivergentSeries(
            f"second-order series diverges (spectral radius {radius:.6g} >= 1)"
        )
    s = np.linalg.solve((np.eye(T) - step).T, s_bar.T).T
    r = profile.rho[None, :] * np.repeat(s, 2, axis=1)
    r_bar = profile.rho_bar[None, :] * s
    return SecondOrder(s=s, r=r, r_bar=r_bar)


@dataclass(frozen=True)
class TheoryStats:
    """Asymptotic score statistics for one target task.

    ``a`` stacks a_1 and a_2 as rows; ``b`` is the symmetrized quadratic-form
    matrix. ``mean``/``std`` evaluate the Gaussian parameters for a given
    label-value vector.
    """

    target_task: int
    delta_t: float
    gamma: float
    a: np.ndarray
    b: np.ndarray
    theta0: np.ndarray
    theta: np.ndarray
    second_order: SecondOrder
    omega_bar: np.ndarray
    t_weights: np.ndarray
    m1: float | None = None
    m2: float | None = None
    sigma: float | None = None

    def mean(self, tilde_y, j: int) -> float:
        """Predicted score mean for class j in {1, 2}."""
        ty = np.asarray(tilde_y, dtype=np.float64)
        return float(self.a[j - 1] @ ty / (1.0 - self.delta_t))

    def variance_quad(self, tilde_y) -> float:
        """Quadratic form y^T B y, clamped at slightly negative values."""
        ty = np.asarray(tilde_y, dtype=np.float64)
        quad = float(ty @ self.b @ ty)
        if quad < -VARIANCE_CLAMP:
            raise NegativeVariance(
                f"predicted variance form is negative ({quad:.3e}); "
                "theory inputs outside validity region"
            )
        return max(quad, 0.0)

    def std(self, tilde_y) -> float:
        """Predicted score standard deviation (shared by both classes)."""
        return float(np.sqrt(self.variance_quad(tilde_y)) / (1.0 - self.delta_t))

    def with_labels(self, tilde_y) -> "TheoryStats":
        """Return a copy with m1, m2, sigma filled in for these labels."""
        return TheoryStats(
            target_task=self.target_task,
            delta_t=self.delta_t,
            gamma=self.gamma,
            a=self.a,
            b=self.b,
            theta0=self.theta0,
            theta=self.theta,
            second_order=self.second_order,
            omega_bar=self.omega_bar,
            t_weights=self.t_weights,
            m1=self.mean(tilde_y, 1),
            m2=self.mean(tilde_y, 2),
            sigma=self.std(tilde_y),
        )


def theory_stats(
    fp: FixedPoint,
    inputs: TheoryInputs,
    target_task: int,
    tilde_y=None,
) -> TheoryStats:
    """Assemble (a_1, a_2, B) for the given 1-based target task.

    When ``tilde_y`` is provided the Gaussian parameters are evaluated and
    stored on the result.
    """
    T = fp.num_tasks
    if not 1 <= target_task <= T:
        raise ValueError(f"target task must be in [1, {T}]")
    t = target_task - 1
    profile = inputs.profile
    theta0, theta = theta_matrices(fp, inputs)
    so = s_matrix(fp, profile)

    two_t = 2 * T
    ones2 = np.ones((2, 2))
    gamma_full = np.kron(np.eye(T), ones2)
    e_tt = np.zeros((T, T))
    e_tt[t, t] = 1.0
    gamma_t = np.kron(e_tt, ones2)
    gamma = T * profile.c * fp.delta[t] / profile.rho_bar[t]

    d_eta = inputs.profile.eta
    d_dt = fp.delta_tilde
    r_t = so.r[t]
    rbar_t = so.r_bar[t]

    e_sel = np.zeros(T)
    e_sel[t] = 1.0
    omega0 = _expand(fp.calA @ np.diag(e_sel + rbar_t) @ fp.calA) * inputs.cal_m
    left = np.eye(two_t) - theta0 * d_dt[None, :]
    right = np.eye(two_t) - d_dt[:, None] * theta0
    omega_bar = np.linalg.solve(left, np.linalg.solve(right.T, omega0.T).T)

    t_weights = np.kron(np.diag(rbar_t * profile.eta_bar), ones2)

    core = theta - gamma * gamma_full
    dbar = inputs.dbar
    a_rows = np.empty((2, two_t))
    for j in range(2):
        e = np.zeros(two_t)
        e[2 * t + j] = 1.0
        a_rows[j] = (e @ core) * d_dt * d_eta @ dbar

    scale_left = (d_eta * d_dt)[:, None]
    term1 = dbar.T @ (
        d_eta[:, None] * ((2.0 * d_dt[:, None] * core - gamma_t) * r_t[None, :]) * d_eta[None, :]
    ) @ dbar
    mid = theta @ (r_t[:, None] * theta) + omega_bar - gamma**2 * gamma_t
    term2 = dbar.T @ (scale_left * mid * (d_eta * d_dt)[None, :]) @ dbar
    term3 = t_weights * inputs.dtilde
    b = term1 + term2 + term3
    b = (b + b.T) / 2.0

    stats = TheoryStats(
        target_task=target_task,
        delta_t=float(fp.delta[t]),
        gamma=float(gamma),
        a=a_rows,
        b=b,
        theta0=theta0,
        theta=theta,
        second_order=so,
        omega_bar=omega_bar,
        t_weights=t_weights,
    )
    if tilde_y is not None:
        stats = stats.with_labels(tilde_y)
    return stats
