"""Common-index model: index values, power-link means and the local Tweedie risk."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Optional, Sequence, Union

import numpy as np

from fedindex.tweedie import TweedieParams, scaled_deviance

DEFAULT_FLOOR = 1e-6


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class IndexCoefficients:
    """Shared index sensitivities ``a`` with an optional intercept."""

    a: np.ndarray
    intercept: Optional[float] = None

    def __post_init__(self):
        a = _frozen(self.a).reshape(-1)
        if a.size < 1:
            raise ValueError("index coefficients need at least one entry")
        if not np.all(np.isfinite(a)):
            raise ValueError("index coefficients must be finite")
        if self.intercept is not None:
            if not math.isfinite(self.intercept):
                raise ValueError("intercept must be finite")
            object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "a", a)

    @property
    def n_covariates(self) -> int:
        return self.a.size

    @property
    def has_intercept(self) -> bool:
        return self.intercept is not None

    def to_vector(self) -> np.ndarray:
        """Flat parameter vector, intercept last when present."""
        if self.intercept is None:
            return self.a.copy()
        return np.append(self.a, self.intercept)

    @classmethod
    def from_vector(cls, vector, intercept: bool = False) -> "IndexCoefficients":
        vector = np.asarray(vector, dtype=float).reshape(-1)
        if intercept:
            return cls(vector[:-1], float(vector[-1]))
        return cls(vector)

    @classmethod
    def constant(cls, j: int, value: float = 0.1, intercept: bool = False) -> "IndexCoefficients":
        return cls(np.full(j, float(value)), 0.0 if intercept else None)

    def __eq__(self, other):
        if not isinstance(other, IndexCoefficients):
            return NotImplemented
        return self.intercept == other.intercept and np.array_equal(self.a, other.a)

    def __repr__(self):
        body = ", ".join(repr(float(v)) for v in self.a)
        if self.intercept is None:
            return f"IndexCoefficients(a=[{body}])"
        return f"IndexCoefficients(a=[{body}], intercept={self.intercept!r})"


class Observation(NamedTuple):
    """One day of data: nonnegative loss ``x`` and covariate vector ``y``."""

    x: float
    y: np.ndarray


@dataclass(frozen=True)
class ProducerTruth:
    """Generating structural parameters, kept alongside synthetic data."""

    a: np.ndarray
    intercept: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "a", _frozen(self.a).reshape(-1))
        object.__setattr__(self, "intercept", float(self.intercept))


@dataclass(frozen=True, eq=False)
class ProducerDataset:
    """Private data held by one producer (client).

    ``y`` is an ``(n, J)`` covariate matrix and ``x`` the ``n`` losses.
    """

    id: str
    y: np.ndarray
    x: np.ndarray
    params: TweedieParams
    weight: float = 1.0
    truth: Optional[ProducerTruth] = field(default=None, compare=False)

    def __post_init__(self):
        y = _frozen(self.y)
        if y.ndim == 1:
            y = _frozen(y.reshape(-1, 1))
        x = _frozen(self.x).reshape(-1)
        if y.ndim != 2:
            raise ValueError("covariates must be a 2-d array (n_obs, J)")
        if x.shape[0] < 1:
            raise ValueError(f"producer {self.id!r} has no observations")
        if y.shape[0] != x.shape[0]:
            raise ValueError(
                f"producer {self.id!r}: {y.shape[0]} covariate rows for {x.shape[0]} losses"
            )
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
            raise ValueError(f"producer {self.id!r} has non-finite data")
        if np.any(x < 0):
            raise ValueError(f"producer {self.id!r} has negative losses")
        if not (self.weight > 0 and math.isfinite(self.weight)):
            raise ValueError(f"producer {self.id!r} weight must be positive, got {self.weight!r}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "weight", float(self.weight))

    @property
    def n_obs(self) -> int:
        return self.x.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.y.shape[1]

    @property
    def observations(self) -> list[Observation]:
        return [Observation(float(xd), yd) for xd, yd in zip(self.x, self.y)]

    def __iter__(self) -> Iterator[Observation]:
        return iter(self.observations)

    def __len__(self) -> int:
        return self.n_obs

    @classmethod
    def from_observations(
        cls,
        id: str,
        observations: Iterable[Observation],
        params: TweedieParams,
        weight: float = 1.0,
        truth: Optional[ProducerTruth] = None,
    ) -> "ProducerDataset":
        observations = list(observations)
        if not observations:
            raise ValueError(f"producer {id!r} has no observations")
        dims = {np.size(o.y) for o in observations}
        if len(dims) != 1:
            raise ValueError(f"producer {id!r}: observations have mixed dimensions {sorted(dims)}")
        y = np.array([np.asarray(o.y, dtype=float).reshape(-1) for o in observations])
        x = np.array([o.x for o in observations], dtype=float)
        return cls(id, y, x, params, weight, truth)

    def __eq__(self, other):
        if not isinstance(other, ProducerDataset):
            return NotImplemented
        return (
            self.id == other.id
            and self.params == other.params
            and self.weight == other.weight
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.x, other.x)
        )


Batch = Union[ProducerDataset, Sequence[Observation], tuple]


def _batch_arrays(batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, ProducerDataset):
        return batch.y, batch.x
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        y, x = batch
        return np.atleast_2d(y), np.asarray(x, dtype=float).reshape(-1)
    batch = list(batch)
    if not batch:
        raise ValueError("batch must be nonempty")
    y = np.array([np.asarray(o.y, dtype=float).reshape(-1) for o in batch])
    x = np.array([o.x for o in batch], dtype=float)
    return y, x


def _check_dim(coeffs: IndexCoefficients, y: np.ndarray) -> None:
    if y.shape[-1] != coeffs.n_covariates:
        raise ValueError(
            f"dimension mismatch: {coeffs.n_covariates} coefficients, {y.shape[-1]} covariates"
        )


def _raw_index(coeffs: IndexCoefficients, y: np.ndarray) -> np.ndarray:
    _check_dim(coeffs, y)
    z = y @ coeffs.a
    if coeffs.intercept is not None:
        z = z + coeffs.intercept
    return z


def index_value(coeffs: IndexCoefficients, y) -> Union[float, np.ndarray]:
    """Index ``Z = a^T y`` (plus intercept). Accepts one vector or an ``(n, J)`` matrix."""
    y = np.asarray(y, dtype=float)
    z = _raw_index(coeffs, y)
    return float(z) if np.ndim(z) == 0 else z


def mean_response(
    coeffs: IndexCoefficients, y, p: float, floor: float = DEFAULT_FLOOR
) -> Union[float, np.ndarray]:
    """Power-link mean ``max(Z, floor) ** p``; always strictly positive."""
    if not floor > 0:
        raise ValueError(f"floor must be positive, got {floor!r}")
    z = np.maximum(_raw_index(coeffs, np.asarray(y, dtype=float)), floor)
    mu = np.power(z, p)
    return float(mu) if np.ndim(mu) == 0 else mu


def local_risk(
    coeffs: IndexCoefficients, data: ProducerDataset, floor: float = DEFAULT_FLOOR
) -> float:
    """Mean scaled Tweedie deviance of one producer at ``coeffs``."""
    mu = mean_response(coeffs, data.y, data.params.p, floor)
    return float(np.mean(scaled_deviance(data.x, mu, data.params)))


def local_risk_gradient(
    coeffs: IndexCoefficients,
    batch: Batch,
    params: TweedieParams,
    floor: float = DEFAULT_FLOOR,
) -> np.ndarray:
    """Gradient of the batch-mean scaled deviance with respect to the coefficients.

    Observations whose raw index sits at or below ``floor`` contribute nothing,
    the clamped mean is flat there. With an intercept the last entry is its
    partial derivative.
    """
    y, x = _batch_arrays(batch)
    if x.size == 0:
        raise ValueError("batch must be nonempty")
    _check_dim(coeffs, y)
    return risk_gradient_vector(coeffs.to_vector(), coeffs.has_intercept, y, x, params, floor)


def risk_gradient_vector(
    w: np.ndarray,
    intercept: bool,
    y: np.ndarray,
    x: np.ndarray,
    params: TweedieParams,
    floor: float = DEFAULT_FLOOR,
) -> np.ndarray:
    """Array-level kernel behind :func:`local_risk_gradient`.

    ``w`` is the flat parameter vector (intercept last when ``intercept``).
    """
    if intercept:
        raw = y @ w[:-1] + w[-1]
    else:
        raw = y @ w
    active = raw > floor
    z = np.where(active, raw, floor)
    p = params.p
    mu = np.power(z, p)
    dmu = (2.0 / params.phi) * np.power(mu, -params.q) * (mu - x) * p * np.power(z, p - 1.0)
    dmu = np.where(active, dmu, 0.0)
    n = x.size
    grad = dmu @ y / n
    if intercept:
        grad = np.append(grad, dmu.sum() / n)
    return grad


def prox_local_risk_gradient(
    coeffs: IndexCoefficients,
    batch: Batch,
    params: TweedieParams,
    anchor: IndexCoefficients,
    beta: float,
    floor: float = DEFAULT_FLOOR,
) -> np.ndarray:
    """Gradient of the local risk plus ``beta/2 * ||coeffs - anchor||^2``."""
    if beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta!r}")
    if anchor.n_covariates != coeffs.n_covariates or anchor.has_intercept != coeffs.has_intercept:
        raise ValueError("dimension mismatch between coefficients and proximal anchor")
    grad = local_risk_gradient(coeffs, batch, params, floor)
    if beta == 0:
        return grad
    return grad + beta * (coeffs.to_vector() - anchor.to_vector())
