"""Centralized oracle, basis-risk analysis and the Monte Carlo protocol."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import stats

from fedindex.federated import (
    DEFAULT_INIT_VALUE,
    AggregatorConfig,
    DivergenceError,
    LocalUpdateConfig,
    RoundTrace,
    global_loss,
    initial_coeffs,
    run_training,
)
from fedindex.index_model import (
    DEFAULT_FLOOR,
    IndexCoefficients,
    ProducerDataset,
    index_value,
    risk_gradient_vector,
    local_risk,
)

DEFAULT_BINS = 20
DEFAULT_QUANTILES = (0.05, 0.95)
SUMMARY_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
_NOISE_GRAD = 1e-5

logger = logging.getLogger(__name__)


class IterationCapReached(RuntimeError):
    """The centralized solver stopped at its iteration cap before converging."""

    def __init__(self, coeffs: IndexCoefficients, grad_norm: float, iterations: int):
        self.coeffs = coeffs
        self.grad_norm = grad_norm
        self.iterations = iterations
        super().__init__(
            f"gradient norm {grad_norm:.3e} after {iterations} iterations (cap reached)"
        )


class EmptySelectionError(ValueError):
    """No observation has an index value above the trigger threshold."""


# ---------------------------------------------------------------------------
# centralized oracle


def _pooled_objective(w, intercept, clients, weights, floor):
    coeffs = IndexCoefficients.from_vector(w, intercept)
    return math.fsum(wt * local_risk(coeffs, c, floor) for wt, c in zip(weights, clients))


def _pooled_gradient(w, intercept, clients, weights, floor):
    total = np.zeros_like(w)
    for wt, c in zip(weights, clients):
        total += wt * risk_gradient_vector(w, intercept, c.y, c.x, c.params, floor)
    return total


def centralized_fit(
    clients: Sequence[ProducerDataset],
    floor: float = DEFAULT_FLOOR,
    tol: float = 1e-8,
    max_iter: int = 20000,
    init: Optional[IndexCoefficients] = None,
    intercept: bool = False,
) -> IndexCoefficients:
    """Minimize the pooled weighted objective by full-batch gradient descent.

    Steps start from a Barzilai-Borwein guess and are backtracked until the
    Armijo condition holds. Once the gradient is small enough that objective
    differences drown in rounding, a step is accepted when it shrinks the
    gradient instead.

    The floor clamp makes the objective non-smooth where an observation's
    index crosses zero, and a local minimum can sit on such a kink. When the
    line search cannot make progress there, the current iterate is returned
    and a warning is logged.

    Raises
    ------
    DivergenceError
        Non-finite objective or gradient.
    IterationCapReached
        ``max_iter`` iterations without reaching ``||grad|| < tol``.
    """
    clients = sorted(clients, key=lambda c: c.id)
    if not clients:
        raise ValueError("need at least one client")
    total = math.fsum(c.weight for c in clients)
    weights = [c.weight / total for c in clients]
    if init is None:
        init = initial_coeffs(clients[0].n_covariates, DEFAULT_INIT_VALUE, intercept)
    w = init.to_vector()
    intercept = init.has_intercept

    f = _pooled_objective(w, intercept, clients, weights, floor)
    g = _pooled_gradient(w, intercept, clients, weights, floor)
    step = 1.0
    prev_w = prev_g = None
    for it in range(max_iter):
        gnorm = float(np.linalg.norm(g))
        if not (math.isfinite(f) and math.isfinite(gnorm)):
            raise DivergenceError(f"centralized fit produced a non-finite value at iteration {it}")
        if gnorm < tol:
            return IndexCoefficients.from_vector(w, intercept)
        if prev_w is not None:
            s, r = w - prev_w, g - prev_g
            sr = float(s @ r)
            if sr > 0:
                step = min(max(sr / float(r @ r), 1e-10), 1e10)
        t = step
        while True:
            cand = w - t * g
            f_new = _pooled_objective(cand, intercept, clients, weights, floor)
            g_new = _pooled_gradient(cand, intercept, clients, weights, floor)
            if f_new < f and f_new <= f - 1e-4 * t * gnorm**2:
                break
            if (
                gnorm < _NOISE_GRAD
                and abs(f_new - f) <= 1e-13 * max(1.0, abs(f))
                and np.linalg.norm(g_new) < gnorm
            ):
                break
            t *= 0.5
            if t < 1e-16:
                logger.warning(
                    "centralized fit stalled at a non-smooth point after %d iterations "
                    "(gradient norm %.3e)", it, gnorm,
                )
                return IndexCoefficients.from_vector(w, intercept)
        prev_w, prev_g = w, g
        w, f, g = cand, f_new, g_new
    raise IterationCapReached(IndexCoefficients.from_vector(w, intercept), float(np.linalg.norm(g)), max_iter)


# ---------------------------------------------------------------------------
# basis risk


class BinnedConditionalMean:
    """Piecewise-constant estimate of ``E[X | Z = z]`` on equal-count bins.

    Follows the scikit-learn ``fit``/``predict`` convention with 1-d inputs.
    Ties in ``z`` never straddle a bin edge, so the number of fitted bins can
    be lower than ``n_bins``. Predictions outside the fitted range use the
    nearest bin.
    """

    def __init__(self, n_bins: int = DEFAULT_BINS):
        self.n_bins = n_bins

    def fit(self, z, x):
        z = np.asarray(z, dtype=float).reshape(-1)
        x = np.asarray(x, dtype=float).reshape(-1)
        if z.shape != x.shape:
            raise ValueError("z and x must have the same length")
        if int(self.n_bins) != self.n_bins or self.n_bins < 1:
            raise ValueError(f"n_bins must be a positive integer, got {self.n_bins!r}")
        if z.size < self.n_bins:
            raise ValueError(f"need at least n_bins={self.n_bins} observations, got {z.size}")
        order = np.argsort(z, kind="stable")
        zs, xs = z[order], x[order]
        cuts = [len(part) for part in np.array_split(np.arange(zs.size), self.n_bins)]
        ends = np.cumsum(cuts)[:-1]
        # shift each cut forward past runs of equal z
        bounds = []
        for end in ends:
            while end < zs.size and zs[end] == zs[end - 1]:
                end += 1
            if end < zs.size and (not bounds or end > bounds[-1]):
                bounds.append(int(end))
        starts = np.array([0] + bounds)
        stops = np.array(bounds + [zs.size])
        self.upper_edges_ = np.array([zs[e - 1] for e in stops])
        self.lower_edges_ = np.array([zs[s] for s in starts])
        self.bin_means_ = np.array([xs[s:e].mean() for s, e in zip(starts, stops)])
        self.bin_counts_ = stops - starts
        self.n_bins_ = self.bin_means_.size
        return self

    def bin_index(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        idx = np.searchsorted(self.upper_edges_, z, side="left")
        return np.clip(idx, 0, self.n_bins_ - 1)

    def predict(self, z):
        if not hasattr(self, "bin_means_"):
            raise RuntimeError("BinnedConditionalMean is not fitted yet")
        out = self.bin_means_[self.bin_index(z)]
        return float(out) if np.ndim(out) == 0 else out

    __call__ = predict


@dataclass(frozen=True, eq=False)
class ConditionalMeanModel:
    """A fitted binned estimator tied to the coefficients that produced its ``z``."""

    coeffs: IndexCoefficients
    estimator: BinnedConditionalMean

    def __call__(self, z):
        return self.estimator.predict(z)


def conditional_mean_estimator(
    producer: ProducerDataset, coeffs: IndexCoefficients, n_bins: int = DEFAULT_BINS
) -> ConditionalMeanModel:
    """Fit ``z -> m(z)`` on one producer's data under the index ``coeffs``."""
    z = index_value(coeffs, producer.y)
    return ConditionalMeanModel(coeffs, BinnedConditionalMean(n_bins).fit(z, producer.x))


@dataclass(frozen=True, eq=False)
class BasisRiskReport:
    producer_id: str
    z0: float
    residuals: np.ndarray
    n_obs: int
    mean: float
    std: float
    quantiles: dict[float, float] = field(default_factory=dict)

    @property
    def n_selected(self) -> int:
        return self.residuals.size

    def to_dict(self, include_residuals: bool = False) -> dict:
        out = {
            "producer_id": self.producer_id,
            "z0": self.z0,
            "n_obs": self.n_obs,
            "n_selected": self.n_selected,
            "mean": self.mean,
            "std": self.std,
            "quantiles": {f"{q:g}": v for q, v in self.quantiles.items()},
        }
        if include_residuals:
            out["residuals"] = self.residuals.tolist()
        return out


def basis_risk(
    producer: ProducerDataset,
    coeffs: IndexCoefficients,
    estimator: ConditionalMeanModel,
    z0: Optional[float] = None,
) -> BasisRiskReport:
    """Residuals ``x - m(z)`` over the triggered region ``z > z0``.

    ``z0`` defaults to the in-sample median of the index.
    """
    if estimator.coeffs != coeffs:
        raise ValueError("estimator was fitted under different index coefficients")
    z = index_value(coeffs, producer.y)
    if z0 is None:
        z0 = float(np.median(z))
    mask = z > z0
    if not np.any(mask):
        raise EmptySelectionError(f"{producer.id}: no index value above z0={z0!r}")
    resid = producer.x[mask] - estimator(z[mask])
    resid = np.atleast_1d(resid)
    qs = np.quantile(resid, SUMMARY_QUANTILES)
    return BasisRiskReport(
        producer_id=producer.id,
        z0=float(z0),
        residuals=resid,
        n_obs=producer.n_obs,
        mean=float(resid.mean()),
        std=float(resid.std(ddof=1)) if resid.size > 1 else 0.0,
        quantiles={q: float(v) for q, v in zip(SUMMARY_QUANTILES, qs)},
    )


def ks_distance(first: BasisRiskReport, second: BasisRiskReport) -> float:
    """Two-sample Kolmogorov-Smirnov statistic between residual samples."""
    return float(stats.ks_2samp(first.residuals, second.residuals, method="asymp").statistic)


def recovery_error(fitted: Union[IndexCoefficients, Sequence[float]], truth) -> float:
    """Euclidean distance between fitted and true sensitivities."""
    f = fitted.a if isinstance(fitted, IndexCoefficients) else np.asarray(fitted, dtype=float)
    t = truth.a if isinstance(truth, IndexCoefficients) else np.asarray(truth, dtype=float)
    if f.shape != t.shape:
        raise ValueError(f"dimension mismatch: {f.shape} vs {t.shape}")
    return float(np.linalg.norm(f - t))


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass(frozen=True, eq=False)
class MonteCarloSummary:
    """Across-run means and quantile bands per round.

    Coefficient arrays have shape ``(rounds, K)`` where K counts the intercept
    when one is fitted. Bands are widened to include the mean when a skewed
    sample puts the mean outside the raw quantiles.
    """

    rounds: np.ndarray
    loss_mean: np.ndarray
    loss_lower: np.ndarray
    loss_upper: np.ndarray
    coeff_mean: np.ndarray
    coeff_lower: np.ndarray
    coeff_upper: np.ndarray
    n_runs: int
    quantiles: tuple[float, float]
    runs: list[list[RoundTrace]] = field(repr=False, default_factory=list)

    @property
    def final_coeffs(self) -> list[IndexCoefficients]:
        return [run[-1].coeffs_after for run in self.runs]

    def to_dict(self) -> dict:
        return {
            "n_runs": self.n_runs,
            "quantiles": list(self.quantiles),
            "rounds": self.rounds.tolist(),
            "global_loss": {
                "mean": self.loss_mean.tolist(),
                "lower": self.loss_lower.tolist(),
                "upper": self.loss_upper.tolist(),
            },
            "coefficients": {
                "mean": self.coeff_mean.tolist(),
                "lower": self.coeff_lower.tolist(),
                "upper": self.coeff_upper.tolist(),
            },
        }


def _band(values: np.ndarray, quantiles):
    mean = values.mean(axis=0)
    # the float mean of identical values can miss them by an ulp
    constant = np.ptp(values, axis=0) == 0
    mean = np.where(constant, values[0], mean)
    lo, hi = np.quantile(values, quantiles, axis=0)
    return mean, np.minimum(lo, mean), np.maximum(hi, mean)


def summarize_runs(runs: Sequence[Sequence[RoundTrace]], quantiles=DEFAULT_QUANTILES) -> MonteCarloSummary:
    if len(runs) < 2:
        raise ValueError("Monte Carlo bands need at least 2 runs")
    lengths = {len(r) for r in runs}
    if len(lengths) != 1:
        raise ValueError("all runs must have the same number of rounds")
    losses = np.array([[t.global_loss for t in run] for run in runs])
    coeffs = np.array([[t.coeffs_after.to_vector() for t in run] for run in runs])
    loss_mean, loss_lo, loss_hi = _band(losses, quantiles)
    coef_mean, coef_lo, coef_hi = _band(coeffs, quantiles)
    return MonteCarloSummary(
        rounds=np.array([t.round for t in runs[0]]),
        loss_mean=loss_mean,
        loss_lower=loss_lo,
        loss_upper=loss_hi,
        coeff_mean=coef_mean,
        coeff_lower=coef_lo,
        coeff_upper=coef_hi,
        n_runs=len(runs),
        quantiles=tuple(quantiles),
        runs=[list(r) for r in runs],
    )


def monte_carlo(
    clients: Sequence[ProducerDataset],
    agg: AggregatorConfig,
    local_cfg: LocalUpdateConfig,
    rounds: int,
    n_runs: int,
    master_seed: int,
    init_value: float = DEFAULT_INIT_VALUE,
    init_jitter: float = 0.0,
    intercept: bool = False,
    quantiles=DEFAULT_QUANTILES,
    identical_seeds: bool = False,
) -> MonteCarloSummary:
    """Repeat federated training ``n_runs`` times on one population.

    Run ``r`` draws its mini-batch streams (and optional initial jitter) from
    ``(master_seed, r)``; ``identical_seeds`` reuses run 0's streams
    everywhere, which collapses the bands.
    """
    if n_runs < 2:
        raise ValueError("n_runs must be at least 2")
    j = clients[0].n_covariates
    runs = []
    for r in range(n_runs):
        key = 0 if identical_seeds else r
        init = initial_coeffs(j, init_value, intercept, init_jitter, master_seed, key)
        _, traces = run_training(clients, agg, local_cfg, rounds, master_seed, init=init, run=key)
        runs.append(traces)
    return summarize_runs(runs, quantiles)


def objective(coeffs: IndexCoefficients, clients: Sequence[ProducerDataset], floor: float = DEFAULT_FLOOR) -> float:
    """Weight-normalized pooled objective at ``coeffs``."""
    return global_loss(coeffs, clients, floor)[0]
