"""V-fold cross-validated stacking with a simplex-constrained NNLS meta-learner.

The level-one matrix holds each base learner's held-out predictions; weights
minimize squared error over the nonnegative cone (Lawson-Hanson active set)
and are normalized onto the probability simplex.  When normalization would do
worse than the best single learner on the training criterion, the ensemble
falls back to that discrete choice.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from targetcause.core import Dataset
from targetcause.learners import (
    PROB_CLIP,
    FittedLearner,
    LearnerSpec,
    cv_and_refit,
    fit_learner,
    predict,
)


class BadFoldCount(ValueError):
    """Fold count outside 2..n."""


class EmptyMatrix(ValueError):
    """Level-one matrix has no rows or no columns."""


class AllLearnersFailed(RuntimeError):
    """Every base learner errored during cross-validation."""


@dataclass(frozen=True)
class FoldAssignment:
    """Validation-fold index per observation."""

    v: int
    fold_of: np.ndarray

    def __post_init__(self):
        counts = np.bincount(self.fold_of, minlength=self.v)
        if counts.min() == 0:
            raise BadFoldCount("every fold must be non-empty")


@dataclass(frozen=True)
class SuperLearnerModel:
    """Full-data base refits plus simplex weights from the level-one fit."""

    base_models: tuple
    weights: np.ndarray
    cv_risks: np.ndarray
    family: str
    specs: tuple
    dropped: tuple = ()


def make_folds(
    n: int,
    v: int,
    stratify_on: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> FoldAssignment:
    """Assign observations to ``v`` folds of near-equal size.

    With ``stratify_on`` (a binary vector), each class is spread evenly: per
    fold class counts differ by at most one, hence fold proportions differ
    from the global one by at most one observation's worth.
    """
    if not 2 <= v <= n:
        raise BadFoldCount(f"need 2 <= v <= n, got v={v}, n={n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    if stratify_on is None:
        order = rng.permutation(n)
    else:
        s = np.asarray(stratify_on).ravel()
        if s.shape[0] != n:
            raise BadFoldCount("stratify_on length must equal n")
        zeros = rng.permutation(np.flatnonzero(s == 0))
        ones = rng.permutation(np.flatnonzero(s != 0))
        order = np.concatenate([zeros, ones])
    fold_of = np.empty(n, dtype=np.int64)
    fold_perm = rng.permutation(v)
    fold_of[order] = fold_perm[np.arange(n) % v]
    return FoldAssignment(v=v, fold_of=fold_of)


def _design(d: Dataset, target) -> tuple[np.ndarray, np.ndarray]:
    """Resolve a named or custom prediction target to ``(x, y)``."""
    if isinstance(target, str):
        if target == "outcome_given_aw":
            return np.column_stack([d.a, d.w]), d.y
        if target == "propensity":
            return d.w, d.a
        raise ValueError(f"unknown target {target!r}")
    kind, x, y = target
    if kind != "custom":
        raise ValueError(f"unknown target {kind!r}")
    return np.asarray(x, dtype=float), np.asarray(y, dtype=float).ravel()


def _cross_validate(x, y, specs, folds: FoldAssignment, rng):
    """Per-learner out-of-fold predictions and full refits.

    Each learner draws from its own substream, so a dropped learner does not
    shift its neighbours' randomness.  Returns ``(z, models, kept, dropped)``.
    """
    if len(specs) < 1:
        raise EmptyMatrix("need at least one learner spec")
    n = y.shape[0]
    rngs = rng.spawn(len(specs))
    columns, models, kept, dropped = [], [], [], []
    for m, spec in enumerate(specs):
        try:
            oof, model = cv_and_refit(spec, x, y, folds.fold_of, folds.v, rngs[m])
            if not np.all(np.isfinite(oof)):
                raise ValueError("non-finite held-out predictions")
            columns.append(oof)
            models.append(model)
            kept.append(m)
        except Exception as exc:    # drop rule: any fold failure loses the learner
            dropped.append(f"{spec.label()}: {exc}")
    for msg in dropped:
        warnings.warn(f"dropping base learner ({msg})", RuntimeWarning)
    if not kept:
        raise AllLearnersFailed("; ".join(dropped))
    return np.column_stack(columns), models, kept, tuple(dropped)


def level_one_matrix(
    d: Optional[Dataset],
    target,
    specs: Sequence[LearnerSpec],
    folds: FoldAssignment,
    rng: np.random.Generator,
):
    """Cross-validated prediction matrix Z (n rows, one column per survivor).

    Each entry is the prediction for row i from the learner trained on all
    folds except fold(i).  A learner failing on any fold is dropped with a
    warning.  Returns ``(z, kept_indices, dropped)``.
    """
    x, y = _design(d, target)
    z, _, kept, dropped = _cross_validate(x, y, specs, folds, rng)
    return z, kept, dropped


def nnls_lawson_hanson(a: np.ndarray, b: np.ndarray, max_iter: Optional[int] = None):
    """Minimize ||a @ x - b|| subject to x >= 0 by the active-set method.

    Returns ``(x, rnorm)``.  Deterministic: ties are broken by the first
    maximal dual coordinate.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    m, n = a.shape
    if max_iter is None:
        max_iter = 3 * n
    tol = 10.0 * np.finfo(float).eps * max(m, n) * max(1.0, float(np.max(np.abs(b), initial=1.0)))

    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    w = a.T @ b
    it = 0
    outer = 0
    while (~passive).any() and np.max(w[~passive], initial=-np.inf) > tol:
        outer += 1
        if outer > max_iter + n:
            break
        j = int(np.argmax(np.where(passive, -np.inf, w)))
        passive[j] = True
        s = np.zeros(n)
        while True:
            cols = np.flatnonzero(passive)
            if cols.size == 0:
                s = np.zeros(n)
                break
            s_sub, *_ = np.linalg.lstsq(a[:, cols], b, rcond=None)
            s = np.zeros(n)
            s[cols] = s_sub
            if np.min(s_sub) > 0:
                break
            it += 1
            if it > max_iter:
                break
            mask = passive & (s <= 0)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(mask, x / (x - s), np.inf)
            alpha = float(np.min(ratios))
            x = x + alpha * (s - x)
            passive = passive & (x > tol)
        x = s
        w = a.T @ (b - a @ x)
        if it > max_iter:
            break
    rnorm = float(np.linalg.norm(b - a @ x))
    return x, rnorm


def solve_simplex_nnls(
    z: np.ndarray, y: np.ndarray, cv_risks: Optional[np.ndarray] = None
) -> np.ndarray:
    """Simplex weights for combining level-one columns.

    Nonnegative least squares followed by normalization to sum one; when the
    NNLS solution is all-zero, or normalization loses to the best single
    column on the squared-error criterion, fall back to weight one on that
    column (discrete Super Learner).
    """
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if z.ndim != 2 or z.size == 0 or y.size == 0:
        raise EmptyMatrix("level-one matrix must be non-empty")
    if np.isnan(z).any() or np.isnan(y).any():
        raise ValueError("NaN in level-one data")
    m = z.shape[1]
    if cv_risks is None:
        cv_risks = np.mean((z - y[:, None]) ** 2, axis=0)
    best_single = int(np.argmin(cv_risks))
    raw, _ = nnls_lawson_hanson(z, y)
    total = raw.sum()
    if total <= 0:
        weights = np.zeros(m)
        weights[best_single] = 1.0
        return weights
    weights = raw / total
    sse_w = float(np.sum((y - z @ weights) ** 2))
    sse_best = float(np.sum((y - z[:, best_single]) ** 2))
    if sse_w > sse_best:
        weights = np.zeros(m)
        weights[best_single] = 1.0
    return weights


def fit_super_learner(
    d: Optional[Dataset],
    target,
    specs: Sequence[LearnerSpec],
    v: int = 10,
    rng: Optional[np.random.Generator] = None,
    folds: Optional[FoldAssignment] = None,
) -> SuperLearnerModel:
    """Cross-validate the library, weight it, and refit survivors on all data."""
    rng = rng if rng is not None else np.random.default_rng(0)
    x, y = _design(d, target)
    n = y.shape[0]
    if folds is None:
        folds = make_folds(n, v, rng=rng)
    z, models, kept, dropped = _cross_validate(x, y, specs, folds, rng)
    kept_specs = tuple(specs[m] for m in kept)
    family = kept_specs[0].family

    if family == "binomial":
        zc = np.clip(z, PROB_CLIP, 1 - PROB_CLIP)
        cv_risks = -np.mean(y[:, None] * np.log(zc) + (1 - y[:, None]) * np.log(1 - zc), axis=0)
    else:
        cv_risks = np.mean((z - y[:, None]) ** 2, axis=0)

    weights = solve_simplex_nnls(z, y, cv_risks=cv_risks)
    return SuperLearnerModel(
        base_models=tuple(models),
        weights=weights,
        cv_risks=cv_risks,
        family=family,
        specs=kept_specs,
        dropped=dropped,
    )


def predict_sl(model: SuperLearnerModel, x: np.ndarray) -> np.ndarray:
    """Weighted combination of base predictions; binomial output clipped."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.zeros(x.shape[0])
    for w, base in zip(model.weights, model.base_models):
        if w != 0.0:
            out += w * predict(base, x)
    if model.family == "binomial":
        out = np.clip(out, PROB_CLIP, 1 - PROB_CLIP)
    return out
