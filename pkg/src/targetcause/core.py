"""Shared data model: dataset container, outcome scaling, seed streams.

Everything downstream (learners, targeted estimators, the simulation grid)
works with the :class:`Dataset` container and reports results through
:class:`TmleReport`.  Randomness is always routed through substreams derived
from a single master seed so that Monte Carlo replications are reproducible
regardless of execution order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

# 95% normal quantile used for all default confidence intervals.
Z_975 = 1.959964


# ---------------------------------------------------------------------------
# Errors and warnings
# ---------------------------------------------------------------------------

class NonBinaryTreatment(ValueError):
    """Treatment vector contains values other than 0 and 1."""


class LengthMismatch(ValueError):
    """Dataset vectors do not share a common length."""


class MissingValues(ValueError):
    """Dataset contains NaN or non-finite entries."""


class MediatorRequired(ValueError):
    """A mediation analysis was requested but the dataset has no mediator."""


class DegenerateOutcome(ValueError):
    """Outcome is constant, so min-max scaling is undefined."""


class PositivityWarning(UserWarning):
    """More than 5% of propensity scores required truncation."""


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScaleMap:
    """Min-max transformation of the outcome onto [0, 1]."""

    y_min: float
    y_max: float

    def __post_init__(self):
        if not self.y_max > self.y_min:
            raise DegenerateOutcome(
                f"scale range must be positive, got [{self.y_min}, {self.y_max}]"
            )

    @property
    def range(self) -> float:
        return self.y_max - self.y_min


@dataclass(frozen=True)
class Dataset:
    """Columnar sample of covariates, binary treatment, outcome and optional mediator.

    Parameters
    ----------
    w : ndarray, shape (n, p)
        Real-valued covariate matrix.
    a : ndarray, shape (n,)
        Treatment indicators, expected in {0, 1}.
    y : ndarray, shape (n,)
        Outcome values.
    m : ndarray, shape (n,), optional
        Mediator values when a mediation analysis is intended.
    column_names : tuple of str
        Labels for the covariate columns; generated as W1..Wp when omitted.
    """

    w: np.ndarray
    a: np.ndarray
    y: np.ndarray
    m: Optional[np.ndarray] = None
    column_names: tuple = ()

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.w, dtype=float))
        if w.shape[0] == 1 and np.asarray(self.a).size != 1:
            w = w.T
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float).ravel())
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float).ravel())
        if self.m is not None:
            object.__setattr__(self, "m", np.asarray(self.m, dtype=float).ravel())
        if not self.column_names:
            names = tuple(f"W{j + 1}" for j in range(self.w.shape[1]))
            object.__setattr__(self, "column_names", names)
        else:
            object.__setattr__(self, "column_names", tuple(self.column_names))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.w.shape[1]

    def subset(self, idx) -> "Dataset":
        """Row-subset the dataset (boolean mask or index array)."""
        idx = np.asarray(idx)
        return Dataset(
            w=self.w[idx],
            a=self.a[idx],
            y=self.y[idx],
            m=None if self.m is None else self.m[idx],
            column_names=self.column_names,
        )


@dataclass(frozen=True)
class TmleReport:
    """Point estimate with influence-function-based uncertainty.

    ``psi_hat`` and ``se`` are on the original outcome scale; ``eif`` holds
    the estimated efficient influence function values (original scale, mean
    approximately zero after targeting); ``epsilon_hat`` is the fluctuation
    coefficient (a pair for the two-stage mediation targeting).
    """

    psi_hat: float
    se: float
    ci_lower: float
    ci_upper: float
    eif: np.ndarray
    epsilon_hat: object = 0.0
    g_truncation_count: int = 0
    scale: Optional[ScaleMap] = None
    n: int = 0

    def __post_init__(self):
        if self.se < 0:
            raise ValueError("standard error must be nonnegative")

    @classmethod
    def from_estimate(cls, psi_hat, se, eif, z=Z_975, **kw) -> "TmleReport":
        return cls(
            psi_hat=float(psi_hat),
            se=float(se),
            ci_lower=float(psi_hat - z * se),
            ci_upper=float(psi_hat + z * se),
            eif=np.asarray(eif, dtype=float),
            n=kw.pop("n", np.asarray(eif).shape[0]),
            **kw,
        )


@dataclass(frozen=True)
class SeedStream:
    """Address of one deterministic random substream.

    Distinct ``stream_index`` values under the same master seed yield
    statistically independent generators; the derivation is a pure function
    of the pair, so replications can run in any order or in parallel.
    """

    master_seed: int
    stream_index: int = 0

    def __post_init__(self):
        if self.master_seed < 0 or self.stream_index < 0:
            raise ValueError("seeds and stream indices must be nonnegative")


def derive_substream(s: SeedStream) -> np.random.Generator:
    """Return the generator addressed by ``s`` (pure, order-independent)."""
    return substream(s.master_seed, s.stream_index)


def substream(master_seed: int, *key: int) -> np.random.Generator:
    """Generator for an arbitrary integer key path under ``master_seed``.

    Each key component must fit in an unsigned 32-bit integer.
    """
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(seq)


# ---------------------------------------------------------------------------
# Validation and scaling
# ---------------------------------------------------------------------------

def validate_dataset(d: Dataset, require_mediator: bool = False) -> Dataset:
    """Check the dataset invariants, returning ``d`` unchanged when valid.

    Raises
    ------
    LengthMismatch, NonBinaryTreatment, MissingValues, MediatorRequired
    """
    n = d.y.shape[0]
    if n < 2:
        raise LengthMismatch(f"need at least 2 observations, got {n}")
    if d.a.shape[0] != n or d.w.shape[0] != n:
        raise LengthMismatch(
            f"lengths differ: y={n}, a={d.a.shape[0]}, w={d.w.shape[0]}"
        )
    if d.m is not None and d.m.shape[0] != n:
        raise LengthMismatch(f"lengths differ: y={n}, m={d.m.shape[0]}")
    if len(d.column_names) != d.p:
        raise LengthMismatch(
            f"{len(d.column_names)} column names for {d.p} covariate columns"
        )
    arrays = [d.w, d.a, d.y] + ([] if d.m is None else [d.m])
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise MissingValues("dataset contains NaN or non-finite entries")
    if not np.all((d.a == 0) | (d.a == 1)):
        bad = np.unique(d.a[(d.a != 0) & (d.a != 1)])
        raise NonBinaryTreatment(f"treatment must be 0/1, found {bad[:5]}")
    if require_mediator and d.m is None:
        raise MediatorRequired("mediation analysis requested but no mediator column")
    return d


def scale_outcome(y: np.ndarray) -> tuple[np.ndarray, ScaleMap]:
    """Min-max transform ``y`` onto [0, 1].

    Returns the scaled vector and the map needed to invert the transform.
    Raises :class:`DegenerateOutcome` when the outcome is constant.
    """
    y = np.asarray(y, dtype=float)
    y_min, y_max = float(np.min(y)), float(np.max(y))
    if y_max == y_min:
        raise DegenerateOutcome("outcome is constant; min-max scaling undefined")
    m = ScaleMap(y_min, y_max)
    return (y - y_min) / m.range, m


def unscale_difference(psi_scaled: float, se_scaled: float, m: ScaleMap) -> tuple[float, float]:
    """Map a difference-type estimate and its SE back to the original scale.

    Differences are shift-invariant, so only the range enters.
    """
    return float(psi_scaled) * m.range, float(se_scaled) * m.range


def is_binary(y: np.ndarray) -> bool:
    """True when ``y`` takes no values outside {0, 1}."""
    y = np.asarray(y)
    return bool(np.all((y == 0) | (y == 1)))


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def read_dataset_csv(path) -> Dataset:
    """Read a dataset from CSV.

    The header must contain one column named ``A`` (treatment) and one named
    ``Y`` (outcome); an optional ``M`` column is taken as the mediator and
    every remaining column becomes a covariate, in file order.
    """
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingValues(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]

    for required in ("A", "Y"):
        if required not in header:
            raise LengthMismatch(f"{path}: required column {required!r} missing")
    if len(set(header)) != len(header):
        raise LengthMismatch(f"{path}: duplicate column names in header")

    data = np.empty((len(rows), len(header)), dtype=float)
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise LengthMismatch(
                f"{path}: row {i + 2} has {len(row)} fields, expected {len(header)}"
            )
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell == "" or cell.lower() in ("na", "nan"):
                raise MissingValues(f"{path}: missing value at row {i + 2}, column {header[j]!r}")
            try:
                data[i, j] = float(cell)
            except ValueError:
                raise MissingValues(
                    f"{path}: non-numeric value {cell!r} at row {i + 2}, column {header[j]!r}"
                ) from None

    cols = {name: data[:, j] for j, name in enumerate(header)}
    w_names = [name for name in header if name not in ("A", "Y", "M")]
    w = (
        np.column_stack([cols[name] for name in w_names])
        if w_names
        else np.empty((len(rows), 0))
    )
    d = Dataset(
        w=w,
        a=cols["A"],
        y=cols["Y"],
        m=cols.get("M"),
        column_names=tuple(w_names),
    )
    return validate_dataset(d)
