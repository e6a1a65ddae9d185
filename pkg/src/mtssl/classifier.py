"""Score solving and thresholded classification.

The score vector solves ``f = (I_n - Z^T A Z / (Tp))^{-1} y`` where ``Z``
stacks the per-task feature blocks block-diagonally and ``A`` couples tasks
through the (scaled) relatedness matrix. ``Z`` is never materialized: both
solver paths work on the per-task blocks, either assembling the n-by-n
system directly or going through the Tp-sized factorized form, whichever
is smaller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .data import Dataset, ModelConfig, SolverPath, materialize_labels
from .errors import (
    AlphaTooSmall,
    IndefiniteCoupling,
    NoConvergence,
    SingularSystem,
)

POWER_ITER_CAP = 20_000
POWER_ITER_TOL = 1e-9


@dataclass(frozen=True)
class ScoreVector:
    """Solved scores restricted to unlabeled samples.

    ``tasks`` gives the 1-based task of each entry, ``within`` the 0-based
    position among that task's unlabeled columns.
    """

    scores: np.ndarray
    tasks: np.ndarray
    within: np.ndarray

    def for_task(self, task: int) -> np.ndarray:
        return self.scores[self.tasks == task]


@dataclass(frozen=True)
class Prediction:
    """Classes in {1, 2} per unlabeled sample plus the thresholds used."""

    classes: np.ndarray
    tasks: np.ndarray
    within: np.ndarray
    thresholds: np.ndarray

    def for_task(self, task: int) -> np.ndarray:
        return self.classes[self.tasks == task]


def _block_matvec(blocks: list[np.ndarray], lam: np.ndarray, v: np.ndarray, Tp: float):
    """Apply the coupled weight operator to v through the p-dimensional
    factorization: v -> blocks^T (lam x I) blocks v / (Tp)."""
    T = len(blocks)
    splits = np.cumsum([b.shape[1] for b in blocks])[:-1]
    parts = np.split(v, splits)
    proj = [blocks[t] @ parts[t] for t in range(T)]
    out = []
    for t in range(T):
        w = sum(lam[t, s] * proj[s] for s in range(T))
        out.append(blocks[t].T @ w / Tp)
    return np.concatenate(out)


def spectral_norm_wtilde(dataset: Dataset, lam: np.ndarray, *, seed: int = 0) -> float:
    """Spectral norm of the coupled weight operator with blocks
    ``lam[t, t'] X_t^T X_t' / (Tp)``.

    Power iteration on the squared operator (the operator is symmetric, so
    its norm is the square root of the largest eigenvalue of its square);
    each application goes through the p-dimensional factors so the n-by-n
    matrix is never formed.
    """
    lam = np.asarray(lam, dtype=np.float64)
    blocks = [t.block() for t in dataset.tasks]
    T = len(blocks)
    Tp = T * dataset.p
    n = sum(b.shape[1] for b in blocks)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    prev = np.inf
    for _ in range(POWER_ITER_CAP):
        w = _block_matvec(blocks, lam, v, Tp)
        w = _block_matvec(blocks, lam, w, Tp)
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            return 0.0
        lam_sq = float(v @ w)
        v = w / norm_w
        if prev != np.inf and abs(lam_sq - prev) <= POWER_ITER_TOL * max(abs(lam_sq), 1e-300):
            return float(np.sqrt(max(lam_sq, 0.0)))
        prev = lam_sq
    raise NoConvergence("power iteration did not stabilize within the iteration cap")


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; eigenvalues in [-1e-12, 0] clamp to 0,
    anything more negative is an error."""
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() < -1e-12:
        raise IndefiniteCoupling(
            f"coupling matrix has negative eigenvalue {vals.min():.3e}"
        )
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _solve_direct_n(blocks, lam_tilde, y, Tp):
    """Assemble the n-by-n system with blocks lam_tilde[t,t'] X_t^T X_t'/(Tp)
    and solve by Cholesky (the matrix is symmetric PD for valid alpha)."""
    T = len(blocks)
    sizes = [b.shape[1] for b in blocks]
    n = sum(sizes)
    offs = np.concatenate([[0], np.cumsum(sizes)])
    K = np.zeros((n, n))
    for t in range(T):
        for s in range(t, T):
            blk = lam_tilde[t, s] * (blocks[t].T @ blocks[s]) / Tp
            K[offs[t] : offs[t + 1], offs[s] : offs[s + 1]] = blk
            if s != t:
                K[offs[s] : offs[s + 1], offs[t] : offs[t + 1]] = blk.T
    M = np.eye(n) - K
    try:
        cf = scipy.linalg.cho_factor(M, check_finite=False)
        return scipy.linalg.cho_solve(cf, y, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise SingularSystem(f"dense score system is not positive definite: {exc}")


def _solve_woodbury_tp(blocks, labeled_sizes, lam_tilde, y, Tp, p):
    """Solve through the Tp-sized form:
    f_u = Z_u^T A^{1/2} (I - A^{1/2} Z Z^T A^{1/2}/(Tp))^{-1} A^{1/2} Z_l y_l / (Tp),
    exploiting that Z Z^T is block-diagonal with blocks X_t X_t^T.
    """
    T = len(blocks)
    root = _sqrt_psd(lam_tilde)
    grams = [b @ b.T for b in blocks]

    G = np.zeros((T * p, T * p))
    for t in range(T):
        coeff = np.outer(root[:, t], root[:, t])
        for a in range(T):
            for b in range(a, T):
                if coeff[a, b] != 0.0:
                    G[a * p : (a + 1) * p, b * p : (b + 1) * p] += coeff[a, b] * grams[t]
    for a in range(T):
        for b in range(a):
            G[a * p : (a + 1) * p, b * p : (b + 1) * p] = G[
                b * p : (b + 1) * p, a * p : (a + 1) * p
            ].T

    sizes = [b.shape[1] for b in blocks]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    zl_y = np.zeros((T, p))
    for t in range(T):
        y_t = y[offs[t] : offs[t] + labeled_sizes[t]]
        zl_y[t] = blocks[t][:, : labeled_sizes[t]] @ y_t
    rhs = (root @ zl_y).reshape(T * p)

    M = np.eye(T * p) - G / Tp
    try:
        cf = scipy.linalg.cho_factor(M, check_finite=False)
        w = scipy.linalg.cho_solve(cf, rhs, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise SingularSystem(f"factorized score system is not positive definite: {exc}")

    w_blocks = (root @ w.reshape(T, p)).reshape(T, p)
    out = []
    for t in range(T):
        unlab = blocks[t][:, labeled_sizes[t] :]
        out.append(unlab.T @ w_blocks[t] / Tp)
    return out


def solve_scores(
    dataset: Dataset,
    config: ModelConfig,
    *,
    wtilde_norm: float | None = None,
) -> ScoreVector:
    """Solve the regularized propagation system and return unlabeled scores.

    The dataset must already be centered task-wise. ``wtilde_norm`` may pass
    a precomputed spectral norm to skip the power iteration; either way
    ``alpha`` must strictly exceed it or :class:`AlphaTooSmall` is raised.
    """
    if config.num_tasks != dataset.num_tasks:
        raise ValueError("config task count does not match dataset")
    if wtilde_norm is None:
        wtilde_norm = spectral_norm_wtilde(dataset, config.lam)
    if not config.alpha > wtilde_norm:
        raise AlphaTooSmall(
            f"alpha={config.alpha:.6g} must exceed the coupled weight norm "
            f"{wtilde_norm:.6g}"
        )

    blocks = [t.block() for t in dataset.tasks]
    labeled_sizes = [t.n_labeled for t in dataset.tasks]
    T = dataset.num_tasks
    p = dataset.p
    Tp = float(T * p)
    n = dataset.n_total
    lam_tilde = config.lam / config.alpha
    y = materialize_labels(dataset, config.tilde_y)

    path = config.solver_path
    if path is SolverPath.AUTO:
        path = SolverPath.DIRECT_N if n <= T * p else SolverPath.WOODBURY_TP

    if path is SolverPath.DIRECT_N:
        f = _solve_direct_n(blocks, lam_tilde, y, Tp)
        sizes = [b.shape[1] for b in blocks]
        offs = np.concatenate([[0], np.cumsum(sizes)])
        per_task = [
            f[offs[t] + labeled_sizes[t] : offs[t + 1]] for t in range(T)
        ]
    else:
        per_task = _solve_woodbury_tp(blocks, labeled_sizes, lam_tilde, y, Tp, p)

    scores = np.concatenate(per_task) if per_task else np.zeros(0)
    tasks = np.concatenate(
        [np.full(len(s), t + 1, dtype=np.int64) for t, s in enumerate(per_task)]
    ) if per_task else np.zeros(0, dtype=np.int64)
    within = np.concatenate(
        [np.arange(len(s), dtype=np.int64) for s in per_task]
    ) if per_task else np.zeros(0, dtype=np.int64)
    return ScoreVector(scores=scores, tasks=tasks, within=within)


def classify(scores: ScoreVector, thresholds) -> Prediction:
    """Threshold scores per task: class 1 below the task's cut, class 2 at
    or above it (ties go to class 2)."""
    th = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))
    cuts = th[scores.tasks - 1]
    classes = np.where(scores.scores >= cuts, 2, 1).astype(np.int64)
    return Prediction(
        classes=classes,
        tasks=scores.tasks.copy(),
        within=scores.within.copy(),
        thresholds=th,
    )
