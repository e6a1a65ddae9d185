"""Estimation and self-calibration: class-mean Gram estimation, task
relatedness, label-uncertainty statistics, optimal label values, decision
thresholds, predicted errors, and the regularization grid search.

Everything here works on small (2T-dimensional) estimated quantities; no
step touches the raw features except the initial Gram estimation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize
import scipy.special

from .classifier import spectral_norm_wtilde
from .data import (
    Dataset,
    GrowthProfile,
    center_taskwise,
    class_index,
    growth_profile_of,
)
from .errors import (
    DegenerateClass,
    DegenerateSeparation,
    DegenerateTask,
    DivergentSeries,
    DomainError,
    GenuineClassUnknown,
    IllConditioned,
    InsufficientData,
    InvalidRegion,
    NegativeVariance,
    NoConvergence,
    NoValidAlpha,
    SingularMatrix,
)
from .theory import FixedPoint, TheoryInputs, TheoryStats, solve_fixed_point, theory_stats

LABEL_COND_MAX = 1e10
DEGENERATE_NORM_TOL = 1e-10


def gaussian_tail(x):
    """Upper-tail probability of the standard Gaussian."""
    return 0.5 * scipy.special.erfc(np.asarray(x, dtype=np.float64) / np.sqrt(2.0))


def gaussian_tail_inverse(q: float) -> float:
    """Inverse of :func:`gaussian_tail` on (0, 1), by a safeguarded
    root-finder bracketing the tail function."""
    if not 0.0 < q < 1.0:
        raise DomainError(f"tail probability must lie in (0, 1), got {q}")
    return float(
        scipy.optimize.brentq(
            lambda x: gaussian_tail(x) - q, -40.0, 40.0, xtol=1e-13, maxiter=200
        )
    )


@dataclass(frozen=True)
class MeanGramEstimate:
    """Estimated Gram matrix of the centered class means.

    ``sample_pairs`` records how many independent sample pairs entered each
    entry; ``split_seed`` the seed of the half/half split used on diagonal
    entries (required there to keep the two factors independent).
    """

    cal_m_hat: np.ndarray
    sample_pairs: np.ndarray
    split_seed: int


def _labeled_class_columns(dataset: Dataset) -> list[np.ndarray]:
    """Centered labeled columns grouped per (task, class) in 2T order.

    Grouping uses genuine classes when known, otherwise the most likely
    declared class of each probabilistic label.
    """
    groups = []
    for task in dataset.tasks:
        labels = task.labels
        if labels.genuine_classes is not None:
            cls = labels.genuine_classes
        else:
            cls = labels.declared_classes()
        for j in (1, 2):
            groups.append(task.labeled[:, cls == j])
    return groups


def estimate_mean_gram(dataset: Dataset, seed: int = 0) -> MeanGramEstimate:
    """Estimate the class-mean Gram matrix from centered labeled data.

    Off-diagonal entries average the inner products of the two class-mean
    estimates; diagonal entries split the class's labeled samples into two
    random halves and cross the half means, which keeps the two factors
    independent. Requires at least two labeled samples per class.

    Task-wise centering couples all columns of a task through the shared
    sample mean, which shifts every within-task pair inner product by
    -p/n_t; the estimator adds that amount back so within-task entries stay
    unbiased (without it, near-rank-one within-task blocks turn indefinite
    and corrupt the label optimization downstream).
    """
    groups = _labeled_class_columns(dataset)
    two_t = len(groups)
    rng = np.random.default_rng(seed)
    halves = []
    for g in groups:
        k = g.shape[1]
        if k < 2:
            raise InsufficientData(
                f"every class needs at least 2 labeled samples for Gram "
                f"estimation (got {k})"
            )
        perm = rng.permutation(k)
        halves.append((g[:, perm[: k // 2]], g[:, perm[k // 2 :]]))
    cal_m = np.zeros((two_t, two_t))
    pairs = np.zeros((two_t, two_t), dtype=np.int64)
    means = [g.mean(axis=1) for g in groups]
    centering_shift = np.repeat([dataset.p / task.n for task in dataset.tasks], 2)
    for i in range(two_t):
        for k in range(i, two_t):
            if i == k:
                a, b = halves[i]
                cal_m[i, i] = a.mean(axis=1) @ b.mean(axis=1) + centering_shift[i]
                pairs[i, i] = a.shape[1] * b.shape[1]
            else:
                val = means[i] @ means[k]
                if i // 2 == k // 2:
                    val += centering_shift[i]
                cal_m[i, k] = cal_m[k, i] = val
                pairs[i, k] = pairs[k, i] = groups[i].shape[1] * groups[k].shape[1]
    return MeanGramEstimate(cal_m_hat=cal_m, sample_pairs=pairs, split_seed=seed)


def estimate_lambda(mean_gram: MeanGramEstimate) -> np.ndarray:
    """Task-relatedness matrix: absolute cosine of the class-mean difference
    vectors, read off the estimated Gram entries.

    The diagonal is forced to 1 and off-diagonal magnitudes are clipped to
    [0, 1] against estimation noise.
    """
    m = mean_gram.cal_m_hat
    two_t = m.shape[0]
    T = two_t // 2
    diff = np.zeros((T, T))
    for t in range(T):
        for s in range(T):
            i1, i2 = class_index(t + 1, 1), class_index(t + 1, 2)
            k1, k2 = class_index(s + 1, 1), class_index(s + 1, 2)
            diff[t, s] = m[i1, k1] - m[i1, k2] - m[i2, k1] + m[i2, k2]
    norms_sq = np.diag(diff)
    if (norms_sq <= DEGENERATE_NORM_TOL**2).any():
        bad = int(np.argmax(norms_sq <= DEGENERATE_NORM_TOL**2)) + 1
        raise DegenerateTask(
            f"task {bad}: estimated class-mean difference norm is not positive"
        )
    norms = np.sqrt(norms_sq)
    lam = np.abs(diff) / np.outer(norms, norms)
    lam = np.clip(lam, 0.0, 1.0)
    np.fill_diagonal(lam, 1.0)
    return lam


@dataclass(frozen=True)
class UncertaintyStats:
    """Block-diagonal first- and second-moment label statistics, 2x2 per
    task: average per-genuine-class probabilities and probability products."""

    dbar: np.ndarray
    dtilde: np.ndarray


def _dtilde_of(dataset: Dataset) -> np.ndarray:
    two_t = 2 * dataset.num_tasks
    out = np.zeros((two_t, two_t))
    for ti, task in enumerate(dataset.tasks):
        probs = task.labels.probabilities
        n_l = probs.shape[0]
        if n_l == 0:
            raise DegenerateClass(f"task {ti + 1} has no labeled samples")
        block = probs.T @ probs / n_l
        out[2 * ti : 2 * ti + 2, 2 * ti : 2 * ti + 2] = block
    return out


def uncertainty_stats(dataset: Dataset) -> UncertaintyStats:
    """Exact finite-sample label-uncertainty statistics.

    The first-moment block averages, over labeled samples genuinely in each
    class, the probability assigned to either class; it therefore needs the
    genuine classes, which probabilistic labels on real data do not carry —
    in that case :class:`GenuineClassUnknown` is raised and callers may fall
    back to the identity-block assumption.
    """
    two_t = 2 * dataset.num_tasks
    dbar = np.zeros((two_t, two_t))
    for ti, task in enumerate(dataset.tasks):
        labels = task.labels
        if labels.genuine_classes is None:
            raise GenuineClassUnknown(
                f"task {ti + 1}: genuine classes behind probabilistic labels "
                "are unknown"
            )
        for j in (1, 2):
            mask = labels.genuine_classes == j
            if not mask.any():
                raise DegenerateClass(
                    f"task {ti + 1} class {j} has no labeled samples"
                )
            row = labels.probabilities[mask].mean(axis=0)
            dbar[2 * ti + (j - 1), 2 * ti : 2 * ti + 2] = row
    return UncertaintyStats(dbar=dbar, dtilde=_dtilde_of(dataset))


def label_moment_stats(dataset: Dataset) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """(dbar, dtilde, warnings) with graceful fallback: when genuine classes
    are unavailable the first-moment block defaults to the identity and a
    warning is recorded."""
    try:
        stats = uncertainty_stats(dataset)
        return stats.dbar, stats.dtilde, []
    except GenuineClassUnknown:
        return (
            np.eye(2 * dataset.num_tasks),
            _dtilde_of(dataset),
            [
                "genuine classes behind probabilistic labels unknown; "
                "assuming identity first-moment blocks"
            ],
        )


@dataclass(frozen=True)
class OptimalLabels:
    """Label values maximizing the standardized class separation for one
    target task, normalized to unit norm with the target's class-2 entry
    nonnegative; ``raw`` is the unnormalized solve."""

    y_star: np.ndarray
    raw: np.ndarray


def optimal_labels(stats: TheoryStats) -> OptimalLabels:
    """Solve B y = a_2 - a_1 and normalize to unit norm.

    The raw solve already orients the separation the right way round
    ((a_2 - a_1) . y > 0 since B is positive definite), which in sane
    instances makes the target task's class-2 entry nonnegative; the
    orientation is kept even if that entry came out negative, because
    flipping it would invert every prediction.
    """
    if np.linalg.cond(stats.b) > LABEL_COND_MAX:
        raise IllConditioned("quadratic-form matrix is too ill-conditioned")
    raw = np.linalg.solve(stats.b, stats.a[1] - stats.a[0])
    norm = np.linalg.norm(raw)
    if norm == 0.0:
        raise IllConditioned("optimal labels are identically zero")
    return OptimalLabels(y_star=raw / norm, raw=raw)


@dataclass(frozen=True)
class EqualError:
    """Cut where both class-conditional errors are equal."""


@dataclass(frozen=True)
class WeightedPrior:
    """Minimize the class-size-weighted error; needs the unlabeled class
    counts (explicit here, or resolved from ground truth in benchmark mode)."""

    n_u1: float | None = None
    n_u2: float | None = None


@dataclass(frozen=True)
class FalseNegativeCap:
    """Cap the class-2 error at ``p_cap`` and minimize the class-1 error."""

    p_cap: float

    def __post_init__(self):
        if not 0.0 < self.p_cap < 1.0:
            raise ValueError("p_cap must lie in (0, 1)")


ThresholdPolicy = EqualError | WeightedPrior | FalseNegativeCap


def threshold(policy: ThresholdPolicy, m1: float, m2: float, sigma: float) -> float:
    """Decision cut for the given policy and predicted score moments."""
    if isinstance(policy, EqualError):
        return 0.5 * (m1 + m2)
    if isinstance(policy, WeightedPrior):
        if policy.n_u1 is None or policy.n_u2 is None:
            raise ValueError("WeightedPrior needs resolved unlabeled class counts")
        if not m2 > m1:
            raise DegenerateSeparation(
                f"weighted-prior threshold needs m2 > m1 (got {m1:.6g}, {m2:.6g})"
            )
        return 0.5 * (m1 + m2) + sigma**2 / (m2 - m1) * np.log(policy.n_u1 / policy.n_u2)
    if isinstance(policy, FalseNegativeCap):
        return m2 - sigma * gaussian_tail_inverse(policy.p_cap)
    raise TypeError(f"unknown threshold policy {policy!r}")


def predicted_errors(m1: float, m2: float, sigma: float, zeta: float) -> tuple[float, float]:
    """Class-conditional error probabilities at the given cut."""
    if not sigma > 0.0:
        raise DegenerateSeparation("predicted score deviation must be positive")
    eps1 = float(gaussian_tail((zeta - m1) / sigma))
    eps2 = float(gaussian_tail((m2 - zeta) / sigma))
    return eps1, eps2


def optimal_error(stats: TheoryStats) -> float:
    """Best achievable average error over label values and the equal-error
    cut, in closed form from the separation quadratic."""
    if np.linalg.cond(stats.b) > LABEL_COND_MAX:
        raise IllConditioned("quadratic-form matrix is too ill-conditioned")
    diff = stats.a[1] - stats.a[0]
    quad = float(diff @ np.linalg.solve(stats.b, diff))
    if quad < 0.0:
        raise NegativeVariance(f"separation quadratic is negative ({quad:.3e})")
    return float(gaussian_tail(0.5 * np.sqrt(quad)))


@dataclass(frozen=True)
class GridPoint:
    """Diagnostics for one grid alpha: predicted best error, or the reason
    the point was skipped."""

    alpha: float
    eps_star: float | None
    status: str


@dataclass(frozen=True)
class AlphaSearchResult:
    alpha: float
    fixed_point: FixedPoint
    stats: TheoryStats
    labels: OptimalLabels
    eps_star: float
    grid: tuple[GridPoint, ...]


_SKIPPABLE = (
    InvalidRegion,
    DivergentSeries,
    SingularMatrix,
    NoConvergence,
    NegativeVariance,
    IllConditioned,
    DegenerateSeparation,
)


def search_alpha(
    lam: np.ndarray,
    cal_m: np.ndarray,
    profile: GrowthProfile,
    dbar: np.ndarray,
    dtilde: np.ndarray,
    target_task: int,
    alphas,
) -> AlphaSearchResult:
    """Evaluate the predicted optimal error over a grid of alphas and keep
    the minimizer (ties break toward smaller alpha). Grid points where the
    asymptotic layer fails are skipped and recorded."""
    best = None
    diagnostics = []
    for alpha in np.sort(np.asarray(alphas, dtype=np.float64)):
        try:
            lam_tilde = lam / alpha
            fp = solve_fixed_point(lam_tilde, profile)
            inputs = TheoryInputs(
                cal_m=cal_m,
                profile=profile,
                lambda_tilde=lam_tilde,
                dbar=dbar,
                dtilde=dtilde,
            )
            stats = theory_stats(fp, inputs, target_task)
            labels = optimal_labels(stats)
            eps = optimal_error(stats)
        except _SKIPPABLE as exc:
            diagnostics.append(
                GridPoint(alpha=float(alpha), eps_star=None, status=type(exc).__name__)
            )
            continue
        diagnostics.append(GridPoint(alpha=float(alpha), eps_star=eps, status="ok"))
        if best is None or eps < best.eps_star:
            best = AlphaSearchResult(
                alpha=float(alpha),
                fixed_point=fp,
                stats=stats,
                labels=labels,
                eps_star=eps,
                grid=(),
            )
    if best is None:
        raise NoValidAlpha(
            "every regularization grid point failed: "
            + ", ".join(f"{g.alpha:.4g}:{g.status}" for g in diagnostics)
        )
    return AlphaSearchResult(
        alpha=best.alpha,
        fixed_point=best.fixed_point,
        stats=best.stats,
        labels=best.labels,
        eps_star=best.eps_star,
        grid=tuple(diagnostics),
    )


DEFAULT_GRID_BOUNDS = (1.05, 100.0)
DEFAULT_GRID_POINTS = 16


def default_alpha_multipliers(
    points: int = DEFAULT_GRID_POINTS, bounds: tuple[float, float] = DEFAULT_GRID_BOUNDS
) -> np.ndarray:
    """Log-spaced multipliers of the measured weight-operator norm; the
    convexity constraint pins the grid to that scale."""
    return np.geomspace(bounds[0], bounds[1], points)


@dataclass(frozen=True)
class TaskCalibration:
    """Calibrated hyperparameters and self-predicted performance for one
    target task."""

    target_task: int
    alpha: float
    y_star: np.ndarray
    threshold: float
    m1: float
    m2: float
    sigma: float
    eps1: float
    eps2: float
    eps_star: float
    delta: np.ndarray
    grid: tuple[GridPoint, ...] = field(repr=False)


@dataclass(frozen=True)
class CalibrationReport:
    """Output of the full self-calibration pipeline."""

    mean_gram: MeanGramEstimate
    lam: np.ndarray
    wtilde_norm: float
    profile: GrowthProfile
    dbar: np.ndarray
    dtilde: np.ndarray
    tasks: tuple[TaskCalibration, ...]
    warnings: tuple[str, ...]

    def for_task(self, task: int) -> TaskCalibration:
        for tc in self.tasks:
            if tc.target_task == task:
                return tc
        raise KeyError(f"no calibration for task {task}")


def _resolve_weighted_prior(
    policy: WeightedPrior, dataset: Dataset, task_index: int
) -> tuple[ThresholdPolicy, list[str]]:
    if policy.n_u1 is not None and policy.n_u2 is not None:
        return policy, []
    task = dataset.tasks[task_index]
    if task.unlabeled_classes is not None:
        g = task.unlabeled_classes
        n1, n2 = float((g == 1).sum()), float((g == 2).sum())
        if n1 > 0 and n2 > 0:
            return WeightedPrior(n_u1=n1, n_u2=n2), []
    return EqualError(), [
        f"task {task_index + 1}: unlabeled class counts unavailable for the "
        "weighted-prior threshold; falling back to equal-error"
    ]


def calibrate(
    dataset: Dataset,
    policy: ThresholdPolicy = EqualError(),
    alpha_grid=None,
    *,
    target_tasks=None,
    seed: int = 0,
) -> CalibrationReport:
    """Full self-calibration: center, estimate the class-mean Gram and task
    relatedness, then grid-search the regularization per target task by the
    predicted optimal error and derive labels, threshold and predicted
    errors at the chosen point.

    ``alpha_grid`` may be an explicit array of absolute alphas or an array
    of multipliers of the measured weight-operator norm given as
    ``("mult", array)``; by default 16 log-spaced multipliers in
    [1.05, 100].
    """
    profile = growth_profile_of(dataset)
    centered = center_taskwise(dataset)
    mean_gram = estimate_mean_gram(centered, seed)
    lam = estimate_lambda(mean_gram)
    wnorm = spectral_norm_wtilde(centered, lam)
    dbar, dtilde, warnings = label_moment_stats(dataset)

    if alpha_grid is None:
        alphas = default_alpha_multipliers() * wnorm
    elif isinstance(alpha_grid, tuple) and len(alpha_grid) == 2 and alpha_grid[0] == "mult":
        alphas = np.asarray(alpha_grid[1], dtype=np.float64) * wnorm
    else:
        alphas = np.asarray(alpha_grid, dtype=np.float64)

    if target_tasks is None:
        target_tasks = range(1, dataset.num_tasks + 1)

    calibrations = []
    for task in target_tasks:
        result = search_alpha(
            lam, mean_gram.cal_m_hat, profile, dbar, dtilde, task, alphas
        )
        y_star = result.labels.y_star
        m1 = result.stats.mean(y_star, 1)
        m2 = result.stats.mean(y_star, 2)
        sigma = result.stats.std(y_star)
        task_policy, policy_warns = (
            _resolve_weighted_prior(policy, dataset, task - 1)
            if isinstance(policy, WeightedPrior)
            else (policy, [])
        )
        warnings.extend(policy_warns)
        zeta = threshold(task_policy, m1, m2, sigma)
        eps1, eps2 = predicted_errors(m1, m2, sigma, zeta)
        calibrations.append(
            TaskCalibration(
                target_task=task,
                alpha=result.alpha,
                y_star=y_star,
                threshold=zeta,
                m1=m1,
                m2=m2,
                sigma=sigma,
                eps1=eps1,
                eps2=eps2,
                eps_star=result.eps_star,
                delta=result.fixed_point.delta,
                grid=result.grid,
            )
        )
    return CalibrationReport(
        mean_gram=mean_gram,
        lam=lam,
        wtilde_norm=wnorm,
        profile=profile,
        dbar=dbar,
        dtilde=dtilde,
        tasks=tuple(calibrations),
        warnings=tuple(warnings),
    )
