"""Maximum-likelihood path analysis for recursive linear models.

Observed variables only: the structural coefficient matrix is strictly
triangular in a topological order, disturbances are independent (diagonal
covariance), and the fit function is the Gaussian likelihood discrepancy
between model-implied and sample moments.  Estimation is quasi-Newton from
equation-wise least-squares starting values; for this model class the two
coincide, which the test suite exploits as an oracle.

Causal effects are read off the fitted coefficients: the treatment-outcome
edge is the (direct) effect, and the product of treatment-mediator and
mediator-outcome edges is the indirect effect.  Inference for products uses
the delta method or a case-resampling bootstrap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize

from targetcause.core import Z_975


class CyclicModel(ValueError):
    """Edge set contains a directed cycle."""


class MissingEdge(KeyError):
    """Requested effect refers to an edge absent from the model."""


class UnknownVariable(ValueError):
    """Model text references a variable with no defining equation."""


class TooManyFailures(RuntimeError):
    """More than 10% of bootstrap refits failed."""


class NegativeVariance(UserWarning):
    """Delta-method variance clipped at zero."""


def _topological_order(variables, edges):
    children = {v: [] for v in variables}
    indeg = {v: 0 for v in variables}
    for src, dst in edges:
        children[src].append(dst)
        indeg[dst] += 1
    queue = [v for v in variables if indeg[v] == 0]
    order = []
    while queue:
        v = queue.pop(0)
        order.append(v)
        for c in children[v]:
            indeg[c] -= 1
            if indeg[c] == 0:
                queue.append(c)
    if len(order) != len(variables):
        raise CyclicModel("path diagram contains a cycle")
    return order


@dataclass(frozen=True)
class PathModel:
    """Directed acyclic path specification.

    Every non-fixed edge carries a free coefficient; every variable carries a
    free intercept (mean, for exogenous variables) and a free disturbance
    variance.  ``fixed`` maps ``(src, dst)`` edges to pinned coefficients.
    """

    variables: tuple
    edges: tuple
    fixed: tuple = ()       # ((src, dst, value), ...)

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))
        object.__setattr__(self, "fixed", tuple(tuple(f) for f in self.fixed))
        seen = set()
        for e in self.edges:
            if e in seen:
                raise ValueError(f"duplicate edge {e}")
            seen.add(e)
        for src, dst, _ in self.fixed:
            if (src, dst) not in seen:
                raise ValueError(f"fixed value for absent edge {(src, dst)}")
        for src, dst in self.edges:
            if src not in self.variables or dst not in self.variables:
                raise UnknownVariable(f"edge {(src, dst)} uses unknown variable")
        _topological_order(self.variables, self.edges)

    @property
    def k(self) -> int:
        return len(self.variables)

    def free_edges(self) -> tuple:
        pinned = {(s, d) for s, d, _ in self.fixed}
        return tuple(e for e in self.edges if e not in pinned)

    def parameter_names(self) -> tuple:
        names = [f"{d}~{s}" for s, d in self.free_edges()]
        names += [f"{v}~1" for v in self.variables]
        names += [f"{v}~~{v}" for v in self.variables]
        return tuple(names)

    def n_free(self) -> int:
        return len(self.free_edges()) + 2 * self.k

    def parents(self, v) -> tuple:
        return tuple(s for s, d in self.edges if d == v)


@dataclass(frozen=True)
class PathFit:
    """ML parameter estimates with observed-information covariance."""

    model: PathModel
    theta: np.ndarray
    param_names: tuple
    vcov: Optional[np.ndarray]
    loglik: float
    fit_value: float
    converged: bool
    vcov_ok: bool
    n: int

    def __getitem__(self, name: str) -> float:
        return float(self.theta[self.param_names.index(name)])

    def coef(self, src: str, dst: str) -> float:
        name = f"{dst}~{src}"
        for s, d, value in self.model.fixed:
            if (s, d) == (src, dst):
                return float(value)
        if name not in self.param_names:
            raise MissingEdge(f"no edge {src} -> {dst}")
        return self[name]


# ---------------------------------------------------------------------------
# Implied moments and the ML fit function
# ---------------------------------------------------------------------------

def _split_theta(m: PathModel, theta):
    ne = len(m.free_edges())
    return theta[:ne], theta[ne : ne + m.k], theta[ne + m.k :]


def implied_moments(m: PathModel, theta: np.ndarray):
    """Model-implied mean vector and covariance matrix.

    With B = (I - beta)^-1: mean = B @ intercepts, covariance = B Psi B'.
    """
    theta = np.asarray(theta, dtype=float)
    coefs, mu, psi = _split_theta(m, theta)
    k = m.k
    idx = {v: i for i, v in enumerate(m.variables)}
    beta = np.zeros((k, k))
    for (src, dst), c in zip(m.free_edges(), coefs):
        beta[idx[dst], idx[src]] = c
    for src, dst, value in m.fixed:
        beta[idx[dst], idx[src]] = value
    eye = np.eye(k)
    b = np.linalg.solve(eye - beta, eye)
    mean = b @ mu
    sigma = b @ np.diag(psi) @ b.T
    return mean, 0.5 * (sigma + sigma.T)


def fml_objective(m: PathModel, theta, s: np.ndarray, ybar: np.ndarray) -> float:
    """log|Sigma| + tr(Sigma^-1 S) + (ybar - mu)' Sigma^-1 (ybar - mu).

    Returns +inf when the implied covariance is not positive definite, which
    lets unconstrained optimizers back away on their own.
    """
    theta = np.asarray(theta, dtype=float)
    _, _, psi = _split_theta(m, theta)
    if np.any(psi <= 0) or not np.all(np.isfinite(theta)):
        return np.inf
    mean, sigma = implied_moments(m, theta)
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        return np.inf
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    sinv_s = np.linalg.solve(sigma, s)
    diff = ybar - mean
    quad = float(diff @ np.linalg.solve(sigma, diff))
    return logdet + float(np.trace(sinv_s)) + quad


def _sample_moments(data: np.ndarray):
    ybar = data.mean(axis=0)
    centered = data - ybar
    s = centered.T @ centered / data.shape[0]
    return s, ybar


def _align(m: PathModel, data, columns):
    data = np.asarray(data, dtype=float)
    if columns is None:
        if data.shape[1] != m.k:
            raise UnknownVariable(
                f"data has {data.shape[1]} columns; model expects {m.k}"
            )
        return data
    columns = list(columns)
    try:
        order = [columns.index(v) for v in m.variables]
    except ValueError as exc:
        raise UnknownVariable(str(exc)) from None
    return data[:, order]


def _ols_start(m: PathModel, data: np.ndarray) -> np.ndarray:
    """Equation-wise least squares: exact ML for this model class."""
    idx = {v: i for i, v in enumerate(m.variables)}
    fixed_map = {(s, d): val for s, d, val in m.fixed}
    coefs = []
    intercepts = np.zeros(m.k)
    variances = np.zeros(m.k)
    n = data.shape[0]
    coef_map = {}
    for v in m.variables:
        pa = m.parents(v)
        yv = data[:, idx[v]].copy()
        free_pa = [s for s in pa if (s, v) not in fixed_map]
        for s in pa:
            if (s, v) in fixed_map:
                yv -= fixed_map[(s, v)] * data[:, idx[s]]
        if free_pa:
            xmat = np.column_stack([np.ones(n)] + [data[:, idx[s]] for s in free_pa])
            beta, *_ = np.linalg.lstsq(xmat, yv, rcond=None)
            resid = yv - xmat @ beta
            intercepts[idx[v]] = beta[0]
            variances[idx[v]] = float(resid @ resid) / n
            for s, b in zip(free_pa, beta[1:]):
                coef_map[(s, v)] = float(b)
        else:
            intercepts[idx[v]] = float(np.mean(yv))
            variances[idx[v]] = float(np.var(yv))
    for s, d in m.free_edges():
        coefs.append(coef_map[(s, d)])
    variances = np.maximum(variances, 1e-12)
    return np.concatenate([coefs, intercepts, variances])


def _numeric_gradient(fun, theta, rel_h=1e-6):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        h = rel_h * (1.0 + abs(theta[i]))
        up = theta.copy(); up[i] += h
        dn = theta.copy(); dn[i] -= h
        g[i] = (fun(up) - fun(dn)) / (2 * h)
    return g


def _numeric_hessian(fun, theta, rel_h=1e-4):
    q = theta.size
    hessian = np.zeros((q, q))
    hs = rel_h * (1.0 + np.abs(theta))
    f0 = fun(theta)
    for i in range(q):
        for j in range(i, q):
            tpp = theta.copy(); tpp[i] += hs[i]; tpp[j] += hs[j]
            tpm = theta.copy(); tpm[i] += hs[i]; tpm[j] -= hs[j]
            tmp = theta.copy(); tmp[i] -= hs[i]; tmp[j] += hs[j]
            tmm = theta.copy(); tmm[i] -= hs[i]; tmm[j] -= hs[j]
            hessian[i, j] = hessian[j, i] = (
                fun(tpp) - fun(tpm) - fun(tmp) + fun(tmm)
            ) / (4 * hs[i] * hs[j])
    return hessian


def fit_path_model(
    m: PathModel,
    data,
    columns=None,
    method: str = "bfgs",
    start: Optional[np.ndarray] = None,
    compute_vcov: bool = True,
) -> PathFit:
    """Fit the path model by minimizing the ML discrepancy.

    ``method="bfgs"`` runs quasi-Newton with a central-difference gradient
    from least-squares starting values (variances optimized on the log scale
    to stay positive).  ``method="ols"`` returns the closed-form optimum
    directly; for recursive models with independent disturbances the two are
    identical, and the fast path is what the bootstrap uses.
    """
    data = _align(m, data, columns)
    n = data.shape[0]
    if n <= m.n_free():
        raise ValueError(f"need n > {m.n_free()} free parameters, got n={n}")
    s, ybar = _sample_moments(data)
    ne = len(m.free_edges())
    k = m.k

    theta0 = _ols_start(m, data) if start is None else np.asarray(start, dtype=float)
    converged = True
    if method == "ols" and start is None:
        theta = theta0
    else:
        def pack(th):
            z = th.copy()
            z[ne + k :] = np.log(th[ne + k :])
            return z

        def unpack(z):
            th = z.copy()
            th[ne + k :] = np.exp(z[ne + k :])
            return th

        def obj(z):
            return fml_objective(m, unpack(z), s, ybar)

        res = optimize.minimize(
            obj,
            pack(theta0),
            method="BFGS",
            jac=lambda z: _numeric_gradient(obj, z),
            options={"gtol": 1e-6, "maxiter": 500},
        )
        theta = unpack(res.x)
        converged = bool(np.max(np.abs(res.jac)) < 1e-4) or res.success

    fit_value = fml_objective(m, theta, s, ybar)
    loglik = -0.5 * n * (fit_value + k * math.log(2 * math.pi))

    vcov = None
    vcov_ok = False
    if compute_vcov:
        hess = _numeric_hessian(lambda th: fml_objective(m, th, s, ybar), theta)
        try:
            vcov = np.linalg.inv(0.5 * n * hess)
            vcov_ok = bool(np.all(np.isfinite(vcov)) and np.all(np.diag(vcov) > 0))
        except np.linalg.LinAlgError:
            vcov, vcov_ok = None, False
        if not vcov_ok:
            vcov = None
    return PathFit(
        model=m,
        theta=theta,
        param_names=m.parameter_names(),
        vcov=vcov,
        loglik=loglik,
        fit_value=fit_value,
        converged=converged,
        vcov_ok=vcov_ok,
        n=n,
    )


# ---------------------------------------------------------------------------
# Effects and inference
# ---------------------------------------------------------------------------

def effects_from_paths(
    fit: PathFit, treatment: str, outcome: str, mediator: Optional[str] = None
) -> dict:
    """Point effects from fitted edges.

    Without a mediator: ``{"ate": gamma}``.  With one: the direct effect is
    the treatment-outcome edge, the indirect effect the product of the two
    mediated edges, and they sum to the total effect.
    """
    gamma = fit.coef(treatment, outcome)
    if mediator is None:
        return {"ate": gamma}
    alpha = fit.coef(treatment, mediator)
    beta = fit.coef(mediator, outcome)
    return {"nde": gamma, "nie": alpha * beta, "te": gamma + alpha * beta}


def delta_se_product(a: float, b: float, vcov2x2: np.ndarray) -> float:
    """Delta-method SE of a product: sqrt(b^2 v_aa + a^2 v_bb + 2ab v_ab)."""
    v = np.asarray(vcov2x2, dtype=float)
    var = b * b * v[0, 0] + a * a * v[1, 1] + 2.0 * a * b * v[0, 1]
    if var < 0:
        import warnings

        warnings.warn("delta-method variance clipped at zero", NegativeVariance)
        var = 0.0
    return float(np.sqrt(var))


def _param_subcov(fit: PathFit, names) -> np.ndarray:
    if fit.vcov is None:
        raise ValueError("fit has no covariance matrix")
    ii = [fit.param_names.index(nm) for nm in names]
    return fit.vcov[np.ix_(ii, ii)]


def mediation_inference(fit: PathFit, treatment: str, mediator: str, outcome: str, z: float = Z_975) -> dict:
    """Wald/delta intervals for direct, indirect and total effects."""
    gamma_id = f"{outcome}~{treatment}"
    alpha_id = f"{mediator}~{treatment}"
    beta_id = f"{outcome}~{mediator}"
    eff = effects_from_paths(fit, treatment, outcome, mediator)
    v3 = _param_subcov(fit, (gamma_id, alpha_id, beta_id))
    alpha, beta = fit[alpha_id], fit[beta_id]
    se = {
        "nde": float(np.sqrt(max(v3[0, 0], 0.0))),
        "nie": delta_se_product(alpha, beta, v3[1:, 1:]),
    }
    grad = np.array([1.0, beta, alpha])
    se["te"] = float(np.sqrt(max(grad @ v3 @ grad, 0.0)))
    out = {}
    for name, value in eff.items():
        out[name] = {
            "estimate": value,
            "se": se[name],
            "ci_lower": value - z * se[name],
            "ci_upper": value + z * se[name],
        }
    return out


def bootstrap_effects(
    m: PathModel,
    data,
    selectors: dict,
    b_reps: int = 1000,
    rng: Optional[np.random.Generator] = None,
    columns=None,
    levels=(0.025, 0.975),
) -> dict:
    """Case-resampling percentile intervals for several effect selectors.

    Each selector maps a :class:`PathFit` (fit without a covariance matrix,
    for speed) to a scalar.  Failed refits are dropped; more than 10% of them
    raises :class:`TooManyFailures`.
    """
    if b_reps < 100:
        raise ValueError("b_reps must be >= 100")
    rng = rng if rng is not None else np.random.default_rng(0)
    data = _align(m, data, columns)
    n = data.shape[0]
    draws = {key: [] for key in selectors}
    failures = 0
    for _ in range(b_reps):
        idx = rng.integers(0, n, size=n)
        try:
            refit = fit_path_model(m, data[idx], method="ols", compute_vcov=False)
            for key, sel in selectors.items():
                draws[key].append(sel(refit))
        except Exception:
            failures += 1
    if failures > 0.10 * b_reps:
        raise TooManyFailures(f"{failures}/{b_reps} bootstrap refits failed")
    out = {}
    for key, values in draws.items():
        arr = np.asarray(values)
        lo, hi = np.quantile(arr, levels)
        out[key] = {
            "ci_lower": float(lo),
            "ci_upper": float(hi),
            "se": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
            "n_failed": failures,
        }
    return out


def bootstrap_ci(
    m: PathModel,
    data,
    selector: Callable[[PathFit], float],
    b_reps: int = 1000,
    rng: Optional[np.random.Generator] = None,
    columns=None,
) -> tuple[float, float]:
    """Percentile bootstrap interval for one effect selector."""
    res = bootstrap_effects(m, data, {"effect": selector}, b_reps=b_reps, rng=rng, columns=columns)
    return res["effect"]["ci_lower"], res["effect"]["ci_upper"]


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------

def parse_path_model(text: str) -> PathModel:
    """Parse the one-equation-per-line model format.

    ``Y ~ A + M`` adds edges A->Y and M->Y; ``Y ~~ Y`` declares the (always
    free) disturbance variance; ``A -> Y = 0.5`` pins an edge coefficient.
    Variables exist once mentioned in a ``~`` or ``~~`` line; a ``->`` line
    may not introduce new names.
    """
    variables = []
    edges = []
    fixed = []

    def touch(name):
        if name not in variables:
            variables.append(name)

    known_lines = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            known_lines.append(line)

    for line in known_lines:
        if "~~" in line:
            left, right = (part.strip() for part in line.split("~~", 1))
            if not left or not right:
                raise UnknownVariable(f"malformed variance line {line!r}")
            if left != right:
                raise ValueError("correlated disturbances are not supported")
            touch(left)
        elif "->" in line:
            continue
        elif "~" in line:
            dst, rhs = (part.strip() for part in line.split("~", 1))
            if not dst or not rhs:
                raise UnknownVariable(f"malformed equation {line!r}")
            touch(dst)
            for src in (p.strip() for p in rhs.split("+")):
                if not src:
                    raise UnknownVariable(f"malformed equation {line!r}")
                touch(src)
                edges.append((src, dst))
        else:
            raise UnknownVariable(f"unrecognized line {line!r}")

    for line in known_lines:
        if "->" in line and "~" not in line:
            lhs, _, rest = line.partition("->")
            dst_part, _, value_part = rest.partition("=")
            src, dst = lhs.strip(), dst_part.strip()
            if not value_part.strip():
                raise UnknownVariable(f"fixed edge needs a value: {line!r}")
            if src not in variables or dst not in variables:
                raise UnknownVariable(f"fixed edge {src}->{dst} uses unknown variable")
            if (src, dst) not in edges:
                edges.append((src, dst))
            fixed.append((src, dst, float(value_part)))

    if not variables:
        raise UnknownVariable("empty model text")
    return PathModel(variables=tuple(variables), edges=tuple(edges), fixed=tuple(fixed))
