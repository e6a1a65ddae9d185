"""Problem data containers and dimension bookkeeping.

Conventions used everywhere in the library:

* feature blocks are ``(p, n)`` arrays, one column per sample;
* class indices are 1-based, in ``{1, 2}``;
* per-class vectors of length ``2T`` are ordered
  ``(task 1, class 1), (task 1, class 2), (task 2, class 1), ...``;
* within a task, labeled columns come first, unlabeled columns last.

All containers are immutable after construction and safe to share
read-only across threads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateClass

PROB_ROW_TOL = 1e-12


def _as_matrix(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class LabelAssignment:
    """Per-labeled-sample class information.

    ``probabilities`` holds one row ``(d_i1, d_i2)`` per labeled sample with
    nonnegative entries summing to 1. Certain labels are the special case of
    rows equal to ``(1, 0)`` or ``(0, 1)``; use :meth:`certain` to build them.

    ``genuine_classes`` optionally records the ground-truth class of each
    labeled sample (available for synthetic benchmarks); for certain labels
    it defaults to the declared classes.
    """

    probabilities: np.ndarray
    genuine_classes: np.ndarray | None = None

    def __post_init__(self):
        probs = np.asarray(self.probabilities, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[1] != 2:
            raise ValueError("probabilities must have shape (n_labeled, 2)")
        if probs.size and (probs < -PROB_ROW_TOL).any():
            raise ValueError("label probabilities must be nonnegative")
        if probs.size and np.abs(probs.sum(axis=1) - 1.0).max() > PROB_ROW_TOL:
            raise ValueError("label probability rows must sum to 1")
        object.__setattr__(self, "probabilities", probs)
        if self.genuine_classes is not None:
            g = np.asarray(self.genuine_classes, dtype=np.int64)
            if g.shape != (probs.shape[0],):
                raise ValueError("genuine_classes length must match probabilities")
            if g.size and not np.isin(g, (1, 2)).all():
                raise ValueError("genuine classes must be 1 or 2")
            object.__setattr__(self, "genuine_classes", g)

    @classmethod
    def certain(cls, classes) -> "LabelAssignment":
        """Build from hard class indices in {1, 2}."""
        c = np.asarray(classes, dtype=np.int64)
        if c.size and not np.isin(c, (1, 2)).all():
            raise ValueError("class indices must be 1 or 2")
        probs = np.zeros((c.shape[0], 2))
        if c.size:
            probs[np.arange(c.shape[0]), c - 1] = 1.0
        return cls(probabilities=probs, genuine_classes=c)

    @property
    def n_labeled(self) -> int:
        return self.probabilities.shape[0]

    @property
    def is_certain(self) -> bool:
        return bool(np.isin(self.probabilities, (0.0, 1.0)).all())

    def declared_classes(self) -> np.ndarray:
        """Most-likely class per sample (ties go to class 1)."""
        return np.where(self.probabilities[:, 1] > self.probabilities[:, 0], 2, 1)

    def label_values(self, y_pair) -> np.ndarray:
        """Per-sample label values ``d_i1*y1 + d_i2*y2``."""
        return self.probabilities @ np.asarray(y_pair, dtype=np.float64)


@dataclass(frozen=True)
class TaskData:
    """One task's feature blocks plus label information.

    ``unlabeled_classes`` optionally carries the ground-truth classes of the
    unlabeled columns (benchmark mode only); it never influences scores,
    only growth-profile bookkeeping and error measurement.
    """

    labeled: np.ndarray
    unlabeled: np.ndarray
    labels: LabelAssignment
    unlabeled_classes: np.ndarray | None = None

    def __post_init__(self):
        lab = _as_matrix(self.labeled, "labeled")
        unlab = _as_matrix(self.unlabeled, "unlabeled")
        if lab.shape[0] != unlab.shape[0]:
            raise ValueError("labeled and unlabeled blocks must share feature dim")
        if lab.shape[1] != self.labels.n_labeled:
            raise ValueError("labeled column count must match label rows")
        object.__setattr__(self, "labeled", lab)
        object.__setattr__(self, "unlabeled", unlab)
        if self.unlabeled_classes is not None:
            g = np.asarray(self.unlabeled_classes, dtype=np.int64)
            if g.shape != (unlab.shape[1],):
                raise ValueError("unlabeled_classes length must match columns")
            if g.size and not np.isin(g, (1, 2)).all():
                raise ValueError("unlabeled classes must be 1 or 2")
            object.__setattr__(self, "unlabeled_classes", g)

    @property
    def p(self) -> int:
        return self.labeled.shape[0]

    @property
    def n_labeled(self) -> int:
        return self.labeled.shape[1]

    @property
    def n_unlabeled(self) -> int:
        return self.unlabeled.shape[1]

    @property
    def n(self) -> int:
        return self.n_labeled + self.n_unlabeled

    def block(self) -> np.ndarray:
        """Full (p, n) block, labeled columns first."""
        return np.concatenate([self.labeled, self.unlabeled], axis=1)


@dataclass(frozen=True)
class Dataset:
    """An ordered collection of tasks sharing one feature dimension."""

    tasks: tuple[TaskData, ...]

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if not tasks:
            raise ValueError("need at least one task")
        p = tasks[0].p
        for t in tasks:
            if t.p != p:
                raise ValueError("all tasks must share the feature dimension")
            if t.n < 1:
                raise ValueError("each task needs at least one sample")
        object.__setattr__(self, "tasks", tasks)

    @property
    def p(self) -> int:
        return self.tasks[0].p

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def n_total(self) -> int:
        return sum(t.n for t in self.tasks)


@dataclass(frozen=True)
class GrowthProfile:
    """Finite-sample proxies of the proportional-regime constants.

    ``c`` is p/n; ``rho`` the 2T per-class sample proportions; ``rho_bar``
    the T per-task proportions; ``eta`` the 2T labeled fractions within each
    class; ``eta_bar`` the T labeled fractions within each task. Class counts
    may be fractional when ground truth is unavailable and proportions are
    inferred from labeled data.
    """

    c: float
    rho: np.ndarray
    rho_bar: np.ndarray
    eta: np.ndarray
    eta_bar: np.ndarray
    class_counts: np.ndarray = field(repr=False)
    labeled_class_counts: np.ndarray = field(repr=False)

    @property
    def num_tasks(self) -> int:
        return self.rho_bar.shape[0]


class SolverPath(enum.Enum):
    """How to solve the score system: dense n-by-n, the Tp-sized
    factorized form, or pick by size."""

    DIRECT_N = "direct-n"
    WOODBURY_TP = "woodbury-tp"
    AUTO = "auto"


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of one fitted classifier.

    ``tilde_y`` holds the 2T per-class label values; ``thresholds`` one
    decision cut per task. ``alpha`` must exceed the spectral norm of the
    coupled weight operator, which is checked at solve time.
    """

    alpha: float
    lam: np.ndarray
    tilde_y: np.ndarray
    thresholds: np.ndarray
    solver_path: SolverPath = SolverPath.AUTO

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=np.float64)
        T = lam.shape[0]
        if lam.shape != (T, T):
            raise ValueError("lam must be square")
        if not np.allclose(lam, lam.T, atol=1e-12):
            raise ValueError("lam must be symmetric")
        if np.abs(np.diag(lam) - 1.0).max() > 1e-9:
            raise ValueError("lam diagonal entries must equal 1")
        if np.abs(lam).max() > 1.0 + 1e-9:
            raise ValueError("lam entries must lie in [-1, 1]")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        ty = np.asarray(self.tilde_y, dtype=np.float64)
        if ty.shape != (2 * T,):
            raise ValueError("tilde_y must have length 2T")
        th = np.asarray(self.thresholds, dtype=np.float64)
        if th.shape != (T,):
            raise ValueError("thresholds must have length T")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "tilde_y", ty)
        object.__setattr__(self, "thresholds", th)

    @property
    def num_tasks(self) -> int:
        return self.lam.shape[0]


def class_index(task: int, cls: int) -> int:
    """0-based position of (1-based task, class in {1,2}) in a 2T vector."""
    return 2 * (task - 1) + (cls - 1)


def _task_class_counts(task: TaskData) -> tuple[np.ndarray, np.ndarray]:
    """(labeled counts, unlabeled counts) per class for one task.

    Labeled counts use genuine classes when known, otherwise the expected
    counts implied by the probabilistic labels. Unlabeled counts use ground
    truth when present, otherwise split n_u by the labeled proportions.
    """
    labels = task.labels
    if labels.genuine_classes is not None:
        g = labels.genuine_classes
        n_l = np.array([(g == 1).sum(), (g == 2).sum()], dtype=np.float64)
    else:
        n_l = labels.probabilities.sum(axis=0)
    if task.unlabeled_classes is not None:
        g = task.unlabeled_classes
        n_u = np.array([(g == 1).sum(), (g == 2).sum()], dtype=np.float64)
    else:
        tot = n_l.sum()
        share = n_l / tot if tot > 0 else np.full(2, 0.5)
        n_u = task.n_unlabeled * share
    return n_l, n_u


def growth_profile_of(dataset: Dataset, *, for_calibration: bool = True) -> GrowthProfile:
    """Compute the finite-sample growth profile of a dataset.

    With ``for_calibration`` (the default) every class of every task must
    hold at least one sample and one labeled sample, otherwise
    :class:`DegenerateClass` is raised: the asymptotic calibration layer
    cannot do without a minimum amount of labeled data in each class.
    """
    T = dataset.num_tasks
    n = dataset.n_total
    p = dataset.p
    rho = np.zeros(2 * T)
    rho_bar = np.zeros(T)
    eta = np.zeros(2 * T)
    eta_bar = np.zeros(T)
    n_class = np.zeros(2 * T)
    n_labeled_class = np.zeros(2 * T)
    for ti, task in enumerate(dataset.tasks):
        n_l, n_u = _task_class_counts(task)
        for j in (1, 2):
            k = class_index(ti + 1, j)
            n_lab = n_l[j - 1]
            n_tot = n_l[j - 1] + n_u[j - 1]
            if for_calibration and (n_tot <= 0 or n_lab <= 0):
                raise DegenerateClass(
                    f"task {ti + 1} class {j}: needs samples in every class "
                    f"(total {n_tot:g}, labeled {n_lab:g})"
                )
            n_class[k] = n_tot
            n_labeled_class[k] = n_lab
            rho[k] = n_tot / n
            eta[k] = n_lab / n_tot if n_tot > 0 else 0.0
        rho_bar[ti] = task.n / n
        eta_bar[ti] = task.n_labeled / task.n
    return GrowthProfile(
        c=p / n,
        rho=rho,
        rho_bar=rho_bar,
        eta=eta,
        eta_bar=eta_bar,
        class_counts=n_class,
        labeled_class_counts=n_labeled_class,
    )


def center_taskwise(dataset: Dataset) -> Dataset:
    """Subtract each task's joint sample mean (labeled and unlabeled columns
    together) from every column of that task's block."""
    out = []
    for task in dataset.tasks:
        block = task.block()
        centered = block - block.mean(axis=1, keepdims=True)
        out.append(
            TaskData(
                labeled=centered[:, : task.n_labeled],
                unlabeled=centered[:, task.n_labeled :],
                labels=task.labels,
                unlabeled_classes=task.unlabeled_classes,
            )
        )
    return Dataset(tasks=tuple(out))


def materialize_labels(dataset: Dataset, tilde_y: np.ndarray) -> np.ndarray:
    """Full-length label vector over all samples (task blocks in order,
    labeled columns first): labeled entries mix the per-class values by the
    label probabilities, unlabeled entries are 0."""
    T = dataset.num_tasks
    ty = np.asarray(tilde_y, dtype=np.float64)
    if ty.shape != (2 * T,):
        raise ValueError("tilde_y must have length 2T")
    parts = []
    for ti, task in enumerate(dataset.tasks):
        pair = ty[2 * ti : 2 * ti + 2]
        parts.append(task.labels.label_values(pair))
        parts.append(np.zeros(task.n_unlabeled))
    return np.concatenate(parts) if parts else np.zeros(0)
