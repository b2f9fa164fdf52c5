"""Base prediction algorithms for the Super Learner library.

Every learner follows the same contract: ``fit_learner(spec, x, y, rng)``
returns an immutable :class:`FittedLearner` and ``predict(model, x)`` maps a
matrix with the training column count to finite predictions.  Binomial-family
predictions are probabilities clipped to [1e-6, 1 - 1e-6].  The GLM accepts
fractional responses in [0, 1] for the binomial family, which is what the
targeting steps need for min-max-scaled outcomes, plus an additive offset.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from targetcause import _trees

PROB_CLIP = 1e-6

VALID_KINDS = ("mean", "glm", "glm_interaction", "poly_glm", "forest", "boost")


class SingularDesign(ValueError):
    """Design matrix is rank-deficient even after the ridge fallback."""


class InsufficientData(ValueError):
    """Too few rows to satisfy the learner's leaf-size requirement."""


class ColumnMismatch(ValueError):
    """Prediction matrix has a different column count than the training data."""


class TooManyColumns(ValueError):
    """Feature expansion would produce at least as many columns as rows."""


@dataclass(frozen=True)
class LearnerSpec:
    """Configuration of one base learner.

    ``kind`` is one of ``mean``, ``glm``, ``glm_interaction``, ``poly_glm``,
    ``forest`` or ``boost``.  ``max_depth`` defaults to 8 for forests and 2
    for boosting when left as None.
    """

    kind: str
    family: str = "gaussian"
    degree: int = 3
    n_trees: int = 200
    max_depth: Optional[int] = None
    min_leaf: int = 5
    mtry: Optional[int] = None
    n_rounds: int = 200
    learning_rate: float = 0.1

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.family not in ("gaussian", "binomial"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")

    @property
    def depth(self) -> int:
        if self.max_depth is not None:
            return self.max_depth
        return 8 if self.kind == "forest" else 2

    def label(self) -> str:
        return self.kind


@dataclass(frozen=True)
class FittedLearner:
    """A trained base learner: spec, training column labels, fitted state."""

    spec: LearnerSpec
    training_columns: tuple
    params: dict
    converged: bool = True


# ---------------------------------------------------------------------------
# Feature expansion
# ---------------------------------------------------------------------------

def _expand(x: np.ndarray, kind: str, degree: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        x = np.atleast_2d(x)
    p = x.shape[1]
    cols = [x]
    if kind == "interactions":
        for j in range(p):
            for k in range(j + 1, p):
                cols.append((x[:, j] * x[:, k])[:, None])
    elif kind == "polynomial":
        for j in range(p):
            for power in range(2, degree + 1):
                cols.append((x[:, j] ** power)[:, None])
    else:
        raise ValueError(f"unknown expansion kind {kind!r}")
    return np.hstack(cols)


def expand_features(x: np.ndarray, kind: str, degree: int = 2) -> np.ndarray:
    """Append pairwise products or per-column powers to ``x``.

    Original columns come first, generated columns follow in lexicographic
    index order.  Raises :class:`TooManyColumns` when the expansion would
    reach the number of rows.
    """
    if kind == "polynomial" and degree > 4:
        raise ValueError("polynomial degree is capped at 4")
    out = _expand(x, kind, degree)
    if out.shape[1] >= out.shape[0]:
        raise TooManyColumns(
            f"expansion yields {out.shape[1]} columns for {out.shape[0]} rows"
        )
    return out


# ---------------------------------------------------------------------------
# Generalized linear models
# ---------------------------------------------------------------------------

def _expit(eta: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(eta, -30.0, 30.0)))


def _solve_wls(xmat: np.ndarray, z: np.ndarray, w: Optional[np.ndarray]) -> np.ndarray:
    """Weighted least squares with a small-ridge fallback on rank deficiency."""
    if w is not None:
        sw = np.sqrt(w)
        xw = xmat * sw[:, None]
        zw = z * sw
    else:
        xw, zw = xmat, z
    coef, _, rank, _ = np.linalg.lstsq(xw, zw, rcond=None)
    if rank < xmat.shape[1]:
        xtx = xw.T @ xw + 1e-8 * np.eye(xmat.shape[1])
        try:
            coef = np.linalg.solve(xtx, xw.T @ zw)
        except np.linalg.LinAlgError:
            raise SingularDesign("normal equations singular after ridge fallback") from None
    if not np.all(np.isfinite(coef)):
        raise SingularDesign("non-finite coefficients")
    return coef


def _irls(xmat, y, offset, weights, tol=1e-8, max_iter=100):
    """Bernoulli IRLS with offset; accepts fractional responses in [0, 1]."""
    n, p = xmat.shape
    coef = np.zeros(p)
    converged = False
    wt = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    for _ in range(max_iter):
        eta = off + xmat @ coef
        mu = _expit(eta)
        v = np.maximum(mu * (1.0 - mu), 1e-10)
        w = wt * v
        z = (eta - off) + (y - mu) / v
        new = _solve_wls(xmat, z, w)
        if np.max(np.abs(new - coef)) < tol:
            coef = new
            converged = True
            break
        coef = new
    if not converged:
        warnings.warn("IRLS did not converge within 100 iterations", RuntimeWarning)
    return coef, converged


def fit_glm(
    x: np.ndarray,
    y: np.ndarray,
    family: str = "gaussian",
    offset: Optional[np.ndarray] = None,
    weights: Optional[np.ndarray] = None,
    expand: Optional[str] = None,
    degree: int = 3,
    column_names=None,
) -> FittedLearner:
    """Fit a (possibly feature-expanded) GLM with intercept.

    Gaussian: weighted least squares on ``y - offset``.  Binomial: logit-link
    IRLS maximizing the Bernoulli likelihood, fractional responses allowed.
    Non-convergence is flagged on the returned learner, not raised.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] == 1 and np.asarray(y).size != 1:
        x = x.T
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] != y.shape[0]:
        raise ColumnMismatch(f"{x.shape[0]} rows vs {y.shape[0]} responses")
    if family == "binomial" and (np.min(y) < 0 or np.max(y) > 1):
        raise ValueError("binomial responses must lie in [0, 1]")

    design = expand_features(x, expand, degree) if expand else x
    xmat = np.hstack([np.ones((design.shape[0], 1)), design])
    converged = True
    if family == "gaussian":
        target = y if offset is None else y - np.asarray(offset, dtype=float)
        coef = _solve_wls(xmat, target, weights)
    else:
        coef, converged = _irls(xmat, y, offset, weights)

    names = tuple(column_names) if column_names else tuple(f"x{j}" for j in range(x.shape[1]))
    spec_kind = {"interactions": "glm_interaction", "polynomial": "poly_glm"}.get(expand, "glm")
    spec = LearnerSpec(kind=spec_kind, family=family, degree=degree)
    return FittedLearner(
        spec=spec,
        training_columns=names,
        params={"coef": coef, "expand": expand, "degree": degree},
        converged=converged,
    )


def fit_mean(y: np.ndarray, family: str = "gaussian") -> FittedLearner:
    """Constant predictor (the sample mean)."""
    y = np.asarray(y, dtype=float)
    spec = LearnerSpec(kind="mean", family=family)
    return FittedLearner(spec=spec, training_columns=(), params={"mean": float(np.mean(y))})


# ---------------------------------------------------------------------------
# Trees
# ---------------------------------------------------------------------------

def fit_forest(x, y, spec: LearnerSpec, rng: np.random.Generator) -> FittedLearner:
    """Bagged regression trees with per-node random feature subsets."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, p = x.shape
    if n < 2 * spec.min_leaf:
        raise InsufficientData(f"need at least {2 * spec.min_leaf} rows, got {n}")
    codes, edges = _trees.bin_columns(x)
    mtry = spec.mtry if spec.mtry is not None else max(1, math.ceil(p / 3))
    mtry = min(mtry, p)
    ens = _trees.grow_forest(codes, y, spec.n_trees, spec.depth, spec.min_leaf, mtry, rng)
    return FittedLearner(
        spec=spec,
        training_columns=tuple(f"x{j}" for j in range(p)),
        params={"edges": edges, "ensemble": ens, "y_min": float(np.min(y)), "y_max": float(np.max(y))},
    )


def fit_boost(x, y, family: str, spec: LearnerSpec, rng=None) -> FittedLearner:
    """Gradient boosting with Newton leaf values and shrinkage."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, p = x.shape
    if n < 2:
        raise InsufficientData("need at least 2 rows")
    if family == "binomial" and (np.min(y) < 0 or np.max(y) > 1):
        raise ValueError("binomial responses must lie in [0, 1]")
    codes, edges = _trees.bin_columns(x)
    f0, ens = _trees.grow_boost(
        codes, y, family, spec.n_rounds, spec.learning_rate, spec.depth, spec.min_leaf
    )
    spec = replace(spec, family=family)
    return FittedLearner(
        spec=spec,
        training_columns=tuple(f"x{j}" for j in range(p)),
        params={
            "edges": edges,
            "ensemble": ens,
            "f0": f0,
            "y_min": float(np.min(y)),
            "y_max": float(np.max(y)),
        },
    )


# ---------------------------------------------------------------------------
# Batched cross-validation fits
# ---------------------------------------------------------------------------

def _forest_cv_batch(x, y, spec: LearnerSpec, fold_of: np.ndarray, v: int, rng):
    """All fold forests plus the full-data forest in one synchronized pass.

    Held-out rows enter each fold's trees with zero weight (mask hessians),
    so the batched fit is a plain bagged forest per model.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, p = x.shape
    codes, edges = _trees.bin_columns(x)
    mtry = spec.mtry if spec.mtry is not None else max(1, math.ceil(p / 3))
    mtry = min(mtry, p)
    n_models = v + 1
    rngs = rng.spawn(n_models + 1)

    rows = np.zeros((n_models * spec.n_trees, n), dtype=np.int64)
    mask = np.zeros((n_models * spec.n_trees, n))
    for m in range(n_models):
        train = np.flatnonzero(fold_of != m) if m < v else np.arange(n)
        nm = train.size
        if nm < 2 * spec.min_leaf:
            raise InsufficientData(f"fold leaves {nm} rows; need {2 * spec.min_leaf}")
        block = slice(m * spec.n_trees, (m + 1) * spec.n_trees)
        rows[block, :nm] = train[rngs[m].integers(0, nm, size=(spec.n_trees, nm))]
        mask[block, :nm] = 1.0

    code_list = [np.ascontiguousarray(codes[:, j])[rows] for j in range(p)]
    grad = y[rows] * mask
    ens, _ = _trees.grow_trees(
        code_list, grad, mask, spec.depth, float(spec.min_leaf), mtry, rngs[n_models]
    )

    oof = np.full(n, np.nan)
    for m in range(v):
        val = np.flatnonzero(fold_of == m)
        block = slice(m * spec.n_trees, (m + 1) * spec.n_trees)
        sub = _trees.TreeEnsemble(ens.feat[block], ens.split[block], ens.value[block], ens.n_levels)
        oof[val] = sub.predict_mean(codes[val])
    block = slice(v * spec.n_trees, (v + 1) * spec.n_trees)
    full_ens = _trees.TreeEnsemble(ens.feat[block], ens.split[block], ens.value[block], ens.n_levels)
    model = FittedLearner(
        spec=spec,
        training_columns=tuple(f"x{j}" for j in range(p)),
        params={"edges": edges, "ensemble": full_ens, "y_min": float(np.min(y)), "y_max": float(np.max(y))},
    )
    if spec.family == "binomial":
        oof = np.clip(oof, PROB_CLIP, 1 - PROB_CLIP)
    return oof, model


def _boost_cv_batch(x, y, spec: LearnerSpec, fold_of: np.ndarray, v: int):
    """All fold boosters plus the full-data booster, one tree batch per round.

    Masked gradients/hessians make each batched model identical to the
    booster fit on its training rows alone; the running score vector directly
    yields every model's held-out predictions.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, p = x.shape
    codes, edges = _trees.bin_columns(x)
    code_list = [np.ascontiguousarray(codes[:, j]).reshape(1, n) for j in range(p)]
    n_models = v + 1
    mask = np.ones((n_models, n))
    for m in range(v):
        mask[m] = fold_of != m
    train_count = mask.sum(axis=1)
    ybar_m = (mask * y).sum(axis=1) / train_count

    binom = spec.family == "binomial"
    if binom:
        p0 = np.clip(ybar_m, PROB_CLIP, 1 - PROB_CLIP)
        f0 = np.log(p0 / (1.0 - p0))
    else:
        f0 = ybar_m
    f = np.repeat(f0[:, None], n, axis=1)

    full_feats, full_splits, full_values = [], [], []
    rlast = n_models - 1
    for _ in range(spec.n_rounds):
        if binom:
            prob = 1.0 / (1.0 + np.exp(-np.clip(f, -30.0, 30.0)))
            grad = (y - prob) * mask
            hess = np.maximum(prob * (1.0 - prob), 1e-9) * mask
            floor = spec.min_leaf * hess.sum(axis=1) / train_count
        else:
            grad = (y - f) * mask
            hess = mask
            floor = np.full(n_models, float(spec.min_leaf))
        ens, pos = _trees.grow_trees(code_list, grad, hess, spec.depth, floor, None, None)
        f = f + spec.learning_rate * ens.value[np.arange(n_models)[:, None], pos]
        full_feats.append(ens.feat[rlast])
        full_splits.append(ens.split[rlast])
        full_values.append(ens.value[rlast])

    y_min, y_max = float(np.min(y)), float(np.max(y))
    oof = f[fold_of, np.arange(n)]
    if binom:
        oof = np.clip(1.0 / (1.0 + np.exp(-np.clip(oof, -30.0, 30.0))), PROB_CLIP, 1 - PROB_CLIP)
    else:
        oof = np.clip(oof, y_min, y_max)

    full_ens = _trees.TreeEnsemble(
        np.asarray(full_feats), np.asarray(full_splits), np.asarray(full_values), spec.depth + 1
    )
    model = FittedLearner(
        spec=spec,
        training_columns=tuple(f"x{j}" for j in range(p)),
        params={"edges": edges, "ensemble": full_ens, "f0": float(f0[rlast]), "y_min": y_min, "y_max": y_max},
    )
    return oof, model


def cv_and_refit(spec: LearnerSpec, x, y, fold_of: np.ndarray, v: int, rng):
    """Out-of-fold predictions and the full-data refit for one learner.

    Forest and boost run as synchronized batches across folds; other kinds
    loop.  Raises on any fold failure (the ensemble drops the learner).
    """
    if spec.kind == "forest":
        return _forest_cv_batch(x, y, spec, fold_of, v, rng)
    if spec.kind == "boost":
        return _boost_cv_batch(x, y, spec, fold_of, v)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    oof = np.full(y.shape[0], np.nan)
    for m in range(v):
        val = fold_of == m
        model = fit_learner(spec, x[~val], y[~val], rng)
        oof[val] = predict(model, x[val])
    return oof, fit_learner(spec, x, y, rng)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def fit_learner(spec: LearnerSpec, x, y, rng: np.random.Generator) -> FittedLearner:
    """Fit any learner kind under the uniform contract."""
    if spec.kind == "mean":
        return fit_mean(y, spec.family)
    if spec.kind == "glm":
        return fit_glm(x, y, family=spec.family)
    if spec.kind == "glm_interaction":
        return fit_glm(x, y, family=spec.family, expand="interactions")
    if spec.kind == "poly_glm":
        return fit_glm(x, y, family=spec.family, expand="polynomial", degree=spec.degree)
    if spec.kind == "forest":
        return fit_forest(x, y, spec, rng)
    if spec.kind == "boost":
        return fit_boost(x, y, spec.family, spec)
    raise ValueError(f"unknown learner kind {spec.kind!r}")


def predict(model: FittedLearner, x) -> np.ndarray:
    """Predict on new rows; binomial output is clipped inside (0, 1)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    kind = model.spec.kind
    if kind == "mean":
        n = x.shape[0]
        out = np.full(n, model.params["mean"])
        if model.spec.family == "binomial":
            out = np.clip(out, PROB_CLIP, 1 - PROB_CLIP)
        return out
    if x.shape[1] != len(model.training_columns):
        raise ColumnMismatch(
            f"model trained on {len(model.training_columns)} columns, got {x.shape[1]}"
        )
    if kind in ("glm", "glm_interaction", "poly_glm"):
        expand = model.params["expand"]
        design = _expand(x, expand, model.params["degree"]) if expand else x
        eta = model.params["coef"][0] + design @ model.params["coef"][1:]
        if model.spec.family == "binomial":
            return np.clip(_expit(eta), PROB_CLIP, 1 - PROB_CLIP)
        return eta
    if kind == "forest":
        codes = _trees.apply_bins(x, model.params["edges"])
        out = model.params["ensemble"].predict_mean(codes)
        if model.spec.family == "binomial":
            out = np.clip(out, PROB_CLIP, 1 - PROB_CLIP)
        return out
    if kind == "boost":
        codes = _trees.apply_bins(x, model.params["edges"])
        raw = model.params["f0"] + model.spec.learning_rate * model.params["ensemble"].predict_sum(codes)
        if model.spec.family == "binomial":
            return np.clip(_expit(raw), PROB_CLIP, 1 - PROB_CLIP)
        return np.clip(raw, model.params["y_min"], model.params["y_max"])
    raise ValueError(f"unknown learner kind {kind!r}")
