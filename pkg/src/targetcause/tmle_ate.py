"""Targeted maximum likelihood estimation of ATE and stratified CATE.

The estimator follows the standard recipe for a binary treatment: scale the
outcome to [0, 1], fit the outcome regression and the propensity score with
the Super Learner, fluctuate the outcome fit along the clever covariate until
the efficient influence function's empirical mean is (numerically) zero, and
read the effect off the updated counterfactual predictions.  Inference comes
from the influence function's sample variance.

An ordinary least squares comparator (``regression_ate``) mirrors the
parametric analysis the targeted estimator is benchmarked against.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from targetcause.core import (
    Dataset,
    PositivityWarning,
    ScaleMap,
    TmleReport,
    Z_975,
    is_binary,
    scale_outcome,
    validate_dataset,
)
from targetcause.learners import LearnerSpec, SingularDesign
from targetcause.super_learner import fit_super_learner, make_folds, predict_sl

Q_CLIP = 1e-6


class StratumTooSmall(ValueError):
    """Stratum has fewer rows than the estimator requires."""


def default_q_library(family: str = "gaussian") -> tuple[LearnerSpec, ...]:
    """Outcome-regression library: GLM variants plus forest and boosting."""
    return (
        LearnerSpec(kind="glm", family=family),
        LearnerSpec(kind="glm_interaction", family=family),
        LearnerSpec(kind="poly_glm", family=family, degree=3),
        LearnerSpec(kind="forest", family=family),
        LearnerSpec(kind="boost", family=family),
    )


def default_g_library() -> tuple[LearnerSpec, ...]:
    return default_q_library(family="binomial")


@dataclass(frozen=True)
class AteNuisance:
    """Initial nuisance fits on the scaled outcome scale."""

    q0_a: np.ndarray
    q0_1: np.ndarray
    q0_0: np.ndarray
    g1: np.ndarray
    scale: Optional[ScaleMap]
    g_truncation_count: int = 0


@dataclass(frozen=True)
class AteOptions:
    """Tuning knobs for :func:`estimate_ate`.

    ``known_g`` short-circuits the propensity fit with a supplied value
    (scalar or per-row vector), e.g. the randomization probability in an
    experiment.  One targeting pass solves the score equation exactly;
    ``max_target_iters`` is kept for generality.
    """

    g_min: float = 0.025
    v_folds: int = 10
    q_library: tuple = field(default_factory=default_q_library)
    g_library: tuple = field(default_factory=default_g_library)
    max_target_iters: int = 1
    known_g: Optional[object] = None
    ci_z: float = Z_975

    def __post_init__(self):
        if not 0 < self.g_min < 0.5:
            raise ValueError("g_min must be in (0, 0.5)")
        if self.v_folds < 2:
            raise ValueError("v_folds must be >= 2")
        if self.max_target_iters < 1:
            raise ValueError("max_target_iters must be >= 1")


def clever_covariate_ate(a, g1):
    """H(g, A, W) = A / g(1|W) - (1 - A) / g(0|W)."""
    a = np.asarray(a, dtype=float)
    g1 = np.asarray(g1, dtype=float)
    return a / g1 - (1.0 - a) / (1.0 - g1)


def _logit(p):
    p = np.clip(p, Q_CLIP, 1 - Q_CLIP)
    return np.log(p / (1.0 - p))


def _expit(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -30.0, 30.0)))


def fit_fluctuation(
    y_scaled: np.ndarray,
    offset_logit_q: np.ndarray,
    h: np.ndarray,
    weights: Optional[np.ndarray] = None,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> tuple[float, bool]:
    """One-dimensional Bernoulli MLE of the fluctuation coefficient.

    Solves sum_i w_i h_i (y_i - expit(offset_i + eps * h_i)) = 0 by Newton
    steps with a bisection safeguard (the score is strictly decreasing, so a
    sign-bracketing interval always pins the root).  Returns ``(epsilon,
    converged)``; non-convergence yields the last iterate, flagged.
    """
    y = np.asarray(y_scaled, dtype=float)
    off = np.asarray(offset_logit_q, dtype=float)
    h = np.asarray(h, dtype=float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)

    def score(eps):
        return float(np.sum(w * h * (y - _expit(off + eps * h))))

    if not np.any(h != 0):
        return 0.0, True

    eps = 0.0
    converged = False
    for _ in range(max_iter):
        mu = _expit(off + eps * h)
        s = np.sum(w * h * (y - mu))
        info = np.sum(w * h * h * mu * (1.0 - mu))
        if info <= 0:
            break
        step = s / info
        eps += step
        if abs(step) < tol:
            converged = True
            break

    # Safeguard: home in by bisection if Newton stalled away from the root.
    if not converged or abs(score(eps)) > 1e-9 * max(1.0, np.sum(np.abs(w * h))):
        lo, hi = -1.0, 1.0
        expand = 0
        while score(lo) < 0 and expand < 60:
            lo *= 2.0
            expand += 1
        while score(hi) > 0 and expand < 120:
            hi *= 2.0
            expand += 1
        if score(lo) >= 0 >= score(hi):
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if score(mid) > 0:
                    lo = mid
                else:
                    hi = mid
                if hi - lo < tol:
                    break
            eps = 0.5 * (lo + hi)
            converged = True
        else:
            warnings.warn("fluctuation fit did not converge", RuntimeWarning)
    return float(eps), converged


def _fit_nuisance(d: Dataset, opts: AteOptions, rng: np.random.Generator) -> AteNuisance:
    binary = is_binary(d.y)
    if binary:
        y_s, scale = d.y.astype(float), None
    else:
        y_s, scale = scale_outcome(d.y)

    folds = make_folds(d.n, opts.v_folds, rng=rng)
    scaled = Dataset(w=d.w, a=d.a, y=y_s, column_names=d.column_names)
    q_model = fit_super_learner(scaled, "outcome_given_aw", opts.q_library, rng=rng, folds=folds)
    xa = np.column_stack([d.a, d.w])
    q0_a = np.clip(predict_sl(q_model, xa), Q_CLIP, 1 - Q_CLIP)
    x1 = np.column_stack([np.ones(d.n), d.w])
    x0 = np.column_stack([np.zeros(d.n), d.w])
    q0_1 = np.clip(predict_sl(q_model, x1), Q_CLIP, 1 - Q_CLIP)
    q0_0 = np.clip(predict_sl(q_model, x0), Q_CLIP, 1 - Q_CLIP)

    if opts.known_g is not None:
        g_raw = np.broadcast_to(np.asarray(opts.known_g, dtype=float), (d.n,)).copy()
    else:
        g_model = fit_super_learner(scaled, "propensity", opts.g_library, rng=rng, folds=folds)
        g_raw = predict_sl(g_model, d.w)
    truncated = int(np.sum((g_raw < opts.g_min) | (g_raw > 1 - opts.g_min)))
    g1 = np.clip(g_raw, opts.g_min, 1 - opts.g_min)
    if truncated > 0.05 * d.n:
        warnings.warn(
            f"{truncated}/{d.n} propensity values truncated to [{opts.g_min}, {1 - opts.g_min}]",
            PositivityWarning,
        )
    return AteNuisance(q0_a, q0_1, q0_0, g1, scale, truncated)


def estimate_ate(
    d: Dataset,
    opts: Optional[AteOptions] = None,
    rng: Optional[np.random.Generator] = None,
) -> TmleReport:
    """Targeted estimate of E[Y(1) - Y(0)].

    Both nuisance fits share one fold assignment.  Binary outcomes skip the
    min-max scaling step (``report.scale`` is then None).
    """
    opts = opts if opts is not None else AteOptions()
    rng = rng if rng is not None else np.random.default_rng(0)
    validate_dataset(d)

    nuis = _fit_nuisance(d, opts, rng)
    y_s = d.y.astype(float) if nuis.scale is None else (d.y - nuis.scale.y_min) / nuis.scale.range
    a = d.a
    g1 = nuis.g1
    h_a = clever_covariate_ate(a, g1)
    h_1 = 1.0 / g1
    h_0 = -1.0 / (1.0 - g1)

    q_a, q_1, q_0 = nuis.q0_a, nuis.q0_1, nuis.q0_0
    epsilons = []
    for _ in range(opts.max_target_iters):
        eps, _ = fit_fluctuation(y_s, _logit(q_a), h_a)
        epsilons.append(eps)
        q_a = _expit(_logit(q_a) + eps * h_a)
        q_1 = _expit(_logit(q_1) + eps * h_1)
        q_0 = _expit(_logit(q_0) + eps * h_0)
        psi_s = float(np.mean(q_1 - q_0))
        eif_s = h_a * (y_s - q_a) + (q_1 - q_0) - psi_s
        if abs(float(np.mean(eif_s))) <= 1e-6:
            break

    se_s = float(np.sqrt(np.mean(eif_s**2) / d.n))
    rng_width = 1.0 if nuis.scale is None else nuis.scale.range
    psi = psi_s * rng_width
    se = se_s * rng_width
    eif = eif_s * rng_width
    return TmleReport.from_estimate(
        psi,
        se,
        eif,
        z=opts.ci_z,
        epsilon_hat=epsilons[0] if len(epsilons) == 1 else tuple(epsilons),
        g_truncation_count=nuis.g_truncation_count,
        scale=nuis.scale,
        n=d.n,
    )


def estimate_cate_stratified(
    d: Dataset,
    stratum,
    opts: Optional[AteOptions] = None,
    rng: Optional[np.random.Generator] = None,
    min_rows: int = 50,
) -> TmleReport:
    """ATE within a covariate stratum.

    ``stratum`` is a boolean mask over rows or a predicate applied to each
    covariate row.  The report's ``n`` is the stratum size.
    """
    if callable(stratum):
        mask = np.fromiter((bool(stratum(row)) for row in d.w), dtype=bool, count=d.n)
    else:
        mask = np.asarray(stratum, dtype=bool).ravel()
        if mask.shape[0] != d.n:
            raise StratumTooSmall("stratum mask length must equal n")
    size = int(mask.sum())
    if size < min_rows:
        raise StratumTooSmall(f"stratum has {size} rows; need at least {min_rows}")
    return estimate_ate(d.subset(mask), opts=opts, rng=rng)


# ---------------------------------------------------------------------------
# Parametric comparator
# ---------------------------------------------------------------------------

def _interaction_column(d: Dataset, name: str) -> np.ndarray:
    if name == "A":
        return d.a
    try:
        j = d.column_names.index(name)
    except ValueError:
        raise SingularDesign(f"unknown column {name!r} in interaction") from None
    return d.w[:, j]


def regression_ate(
    d: Dataset,
    interactions: Sequence[tuple] = (),
    contrast_at: Optional[dict] = None,
    ci_z: float = Z_975,
) -> TmleReport:
    """OLS comparator: the treatment coefficient as the effect estimate.

    ``interactions`` lists column-name pairs (``"A"`` addresses the
    treatment) appended as product terms.  With ``contrast_at`` the reported
    effect is the coefficient of A plus ``x_k`` times each A-by-covariate
    interaction coefficient, i.e. the subgroup effect of a linear interaction
    model; the usual OLS covariance gives the Wald interval.
    """
    validate_dataset(d)
    cols = [np.ones(d.n), d.a] + [d.w[:, j] for j in range(d.p)]
    names = ["(intercept)", "A"] + list(d.column_names)
    for left, right in interactions:
        cols.append(_interaction_column(d, left) * _interaction_column(d, right))
        names.append(f"{left}:{right}")
    x = np.column_stack(cols)

    xtx = x.T @ x
    try:
        xtx_inv = np.linalg.inv(xtx)
    except np.linalg.LinAlgError:
        raise SingularDesign("regression design is singular") from None
    beta = xtx_inv @ (x.T @ d.y)
    resid = d.y - x @ beta
    dof = max(d.n - x.shape[1], 1)
    sigma2 = float(resid @ resid) / dof
    vcov = sigma2 * xtx_inv

    contrast = np.zeros(x.shape[1])
    contrast[1] = 1.0
    if contrast_at:
        for cov_name, value in contrast_at.items():
            term = f"A:{cov_name}"
            if term not in names:
                raise SingularDesign(f"no interaction term {term!r} in the model")
            contrast[names.index(term)] = float(value)
    psi = float(contrast @ beta)
    se = float(np.sqrt(contrast @ vcov @ contrast))

    # Empirical influence values for the reported contrast (mean-zero by the
    # normal equations); the Wald SE above is the homoskedastic OLS one.
    eif = d.n * (x @ (xtx_inv @ contrast)) * resid
    return TmleReport.from_estimate(psi, se, eif, z=ci_z, epsilon_hat=0.0, n=d.n)
