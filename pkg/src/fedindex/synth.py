"""Synthetic heterogeneous producer populations drawn from the local Tweedie GLMs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from fedindex.index_model import DEFAULT_FLOOR, ProducerDataset, ProducerTruth
from fedindex.tweedie import TweedieParams, tweedie_sample

POPULATION_STREAM = 1

Range = tuple[float, float]


def _as_range(value, name: str) -> Range:
    lo, hi = (float(v) for v in value)
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
        raise ValueError(f"{name} must be a finite interval [lo, hi] with lo <= hi, got {list(value)!r}")
    return lo, hi


@dataclass(frozen=True, eq=False)
class CovariateModel:
    """Gaussian covariates ``mean + N(0, cov)`` shifted by a constant ``shift``."""

    mean: np.ndarray
    cov: np.ndarray
    shift: float = 3.0

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.cov, dtype=float)
        j = mean.size
        if cov.shape != (j, j):
            raise ValueError(f"covariance must be {j}x{j}, got shape {cov.shape}")
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance matrix must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-10 * max(1.0, np.abs(cov).max()):
            raise ValueError("covariance matrix must be positive semi-definite")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "shift", float(self.shift))

    @classmethod
    def standard(cls, j: int, shift: float = 3.0, correlation: float = 0.0) -> "CovariateModel":
        cov = np.full((j, j), float(correlation))
        np.fill_diagonal(cov, 1.0)
        return cls(np.zeros(j), cov, shift)


@dataclass(frozen=True, eq=False)
class PopulationSpec:
    """Heterogeneity dials for a synthetic population.

    Every per-producer quantity is drawn uniformly from its range; a degenerate
    range ``(v, v)`` pins it to ``v``.
    """

    n_producers: int = 50
    n_obs_per_producer: int = 1000
    base_coeffs: Sequence[float] = (0.5, 0.3)
    coeff_jitter: float = 0.05
    intercept_range: Range = (0.0, 0.0)
    p_range: Range = (0.8, 1.2)
    q_range: Range = (1.3, 1.7)
    phi_range: Range = (0.5, 2.0)
    weight_range: Range = (20.0, 150.0)
    covariates: Optional[CovariateModel] = None
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        base = np.array(self.base_coeffs, dtype=float).reshape(-1)
        if base.size < 1 or not np.all(np.isfinite(base)):
            raise ValueError("base_coeffs must be a nonempty finite vector")
        base.setflags(write=False)
        object.__setattr__(self, "base_coeffs", base)
        if int(self.n_producers) != self.n_producers or self.n_producers < 1:
            raise ValueError(f"n_producers must be a positive integer, got {self.n_producers!r}")
        if int(self.n_obs_per_producer) != self.n_obs_per_producer or self.n_obs_per_producer < 1:
            raise ValueError(
                f"n_obs_per_producer must be a positive integer, got {self.n_obs_per_producer!r}"
            )
        if not (self.coeff_jitter >= 0 and math.isfinite(self.coeff_jitter)):
            raise ValueError(f"coeff_jitter must be nonnegative, got {self.coeff_jitter!r}")
        for name in ("intercept_range", "p_range", "q_range", "phi_range", "weight_range"):
            object.__setattr__(self, name, _as_range(getattr(self, name), name))
        if not (1.0 < self.q_range[0] and self.q_range[1] < 2.0):
            raise ValueError("q_range must be inside open interval (1,2)")
        for name in ("p_range", "phi_range", "weight_range"):
            if getattr(self, name)[0] <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if not self.floor > 0:
            raise ValueError(f"floor must be positive, got {self.floor!r}")
        covariates = self.covariates
        if covariates is None:
            covariates = CovariateModel.standard(base.size)
        if covariates.mean.size != base.size:
            raise ValueError(
                f"covariate model has dimension {covariates.mean.size}, base_coeffs has {base.size}"
            )
        object.__setattr__(self, "covariates", covariates)

    @property
    def j_covariates(self) -> int:
        return self.base_coeffs.size

    @classmethod
    def homogeneous(
        cls,
        base_coeffs=(0.5, 0.3),
        n_producers: int = 10,
        n_obs_per_producer: int = 2000,
        p: float = 1.0,
        q: float = 1.5,
        phi: float = 1.0,
        weight: float = 1.0,
        **kwargs,
    ) -> "PopulationSpec":
        """Identical structural parameters for every producer, no intercept."""
        return cls(
            n_producers=n_producers,
            n_obs_per_producer=n_obs_per_producer,
            base_coeffs=base_coeffs,
            coeff_jitter=0.0,
            intercept_range=(0.0, 0.0),
            p_range=(p, p),
            q_range=(q, q),
            phi_range=(phi, phi),
            weight_range=(weight, weight),
            **kwargs,
        )


def _uniform(rng: np.random.Generator, bounds: Range) -> float:
    lo, hi = bounds
    draw = rng.uniform(lo, hi)
    return lo if lo == hi else float(draw)


def sample_covariates(spec: PopulationSpec, rng: np.random.Generator, size: Optional[int] = None):
    """One covariate vector, or a ``(size, J)`` matrix of them."""
    model = spec.covariates
    draws = rng.multivariate_normal(model.mean, model.cov, size=size, method="svd")
    return draws + model.shift


def producer_id(index: int) -> str:
    return f"producer-{index:03d}"


def generate_producer(spec: PopulationSpec, producer_index: int, rng: np.random.Generator) -> ProducerDataset:
    """Draw one producer's structural parameters and its observation history.

    Draw order is fixed (sensitivities, intercept, p, q, phi, weight, covariates,
    losses) so a given stream always yields the same producer.
    """
    j = spec.j_covariates
    a_i = spec.base_coeffs + spec.coeff_jitter * rng.standard_normal(j)
    intercept = _uniform(rng, spec.intercept_range)
    params = TweedieParams(
        p=_uniform(rng, spec.p_range),
        q=_uniform(rng, spec.q_range),
        phi=_uniform(rng, spec.phi_range),
    )
    weight = _uniform(rng, spec.weight_range)
    y = sample_covariates(spec, rng, size=spec.n_obs_per_producer)
    mu = generating_mean(y, a_i, intercept, params.p, spec.floor)
    x = tweedie_sample(mu, params, rng)
    return ProducerDataset(
        producer_id(producer_index), y, x, params, weight, ProducerTruth(a_i, intercept)
    )


def generating_mean(y, a, intercept: float, p: float, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Structural mean ``max(a0 + a^T y, floor) ** p``."""
    return np.power(np.maximum(intercept + np.asarray(y) @ np.asarray(a), floor), p)


def producer_rng(master_seed: int, producer_index: int) -> np.random.Generator:
    seq = np.random.SeedSequence(master_seed, spawn_key=(POPULATION_STREAM, producer_index))
    return np.random.default_rng(seq)


def generate_population(spec: PopulationSpec, master_seed: int) -> list[ProducerDataset]:
    """Deterministic population; each producer has its own derived stream."""
    return [generate_producer(spec, i, producer_rng(master_seed, i)) for i in range(spec.n_producers)]
