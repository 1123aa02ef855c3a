"""Experiment configuration: TOML (or resolved JSON) files mapped onto validated dataclasses.

Every key and default is listed in ``docs/config-reference.md``.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from fedindex.federated import (
    DEFAULT_INIT_VALUE,
    Aggregator,
    AggregatorConfig,
    FedOptConfig,
    LocalUpdateConfig,
)
from fedindex.synth import CovariateModel, PopulationSpec


class ConfigError(ValueError):
    """Unreadable config or a violated field constraint."""


@dataclass(frozen=True)
class EvaluationConfig:
    n_bins: int = 20
    z0_quantile: float = 0.5
    band_quantiles: tuple[float, float] = (0.05, 0.95)
    centralized_tol: float = 1e-8
    centralized_max_iter: int = 20000
    ks_threshold: float = 0.1
    baselines: dict[str, tuple[float, ...]] = field(default_factory=dict)
    coefficients: dict[str, tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if int(self.n_bins) != self.n_bins or self.n_bins < 1:
            raise ValueError(f"n_bins must be a positive integer, got {self.n_bins!r}")
        if not 0.0 <= self.z0_quantile < 1.0:
            raise ValueError(f"z0_quantile must be in [0, 1), got {self.z0_quantile!r}")
        lo, hi = self.band_quantiles
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"band_quantiles must satisfy 0 <= lower <= upper <= 1, got {[lo, hi]!r}")
        if not self.centralized_tol > 0:
            raise ValueError("centralized_tol must be positive")
        if int(self.centralized_max_iter) != self.centralized_max_iter or self.centralized_max_iter < 1:
            raise ValueError("centralized_max_iter must be a positive integer")


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int
    population: Optional[PopulationSpec] = None
    population_file: Optional[Path] = None
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    local: LocalUpdateConfig = field(default_factory=LocalUpdateConfig)
    rounds: int = 100
    n_runs: int = 10
    output_dir: Path = Path("runs/experiment")
    init_value: float = DEFAULT_INIT_VALUE
    init_jitter: float = 0.0
    fit_intercept: bool = False
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def to_dict(self) -> dict:
        """Fully resolved config; loading it back yields an equal experiment."""
        out: dict[str, Any] = {
            "master_seed": self.master_seed,
            "rounds": self.rounds,
            "n_runs": self.n_runs,
            "output_dir": str(self.output_dir),
            "init_value": self.init_value,
            "init_jitter": self.init_jitter,
            "fit_intercept": self.fit_intercept,
            "aggregator": {"kind": self.aggregator.kind.value},
            "local": {
                "epochs": self.local.epochs,
                "batch_size": self.local.batch_size,
                "learning_rate": self.local.learning_rate,
                "prox_beta": self.local.prox_beta,
                "floor": self.local.floor,
            },
            "evaluation": {
                "n_bins": self.evaluation.n_bins,
                "z0_quantile": self.evaluation.z0_quantile,
                "band_quantiles": list(self.evaluation.band_quantiles),
                "centralized_tol": self.evaluation.centralized_tol,
                "centralized_max_iter": self.evaluation.centralized_max_iter,
                "ks_threshold": self.evaluation.ks_threshold,
                "baselines": {k: list(v) for k, v in self.evaluation.baselines.items()},
                "coefficients": {k: list(v) for k, v in self.evaluation.coefficients.items()},
            },
        }
        if self.aggregator.fedopt is not None:
            f = self.aggregator.fedopt
            out["aggregator"]["fedopt"] = {
                "server_lr": f.server_lr,
                "beta1": f.beta1,
                "beta2": f.beta2,
                "epsilon": f.epsilon,
            }
        if self.population_file is not None:
            out["population_file"] = str(self.population_file)
        if self.population is not None:
            p = self.population
            out["population"] = {
                "n_producers": p.n_producers,
                "n_obs_per_producer": p.n_obs_per_producer,
                "base_coeffs": p.base_coeffs.tolist(),
                "coeff_jitter": p.coeff_jitter,
                "intercept_range": list(p.intercept_range),
                "p_range": list(p.p_range),
                "q_range": list(p.q_range),
                "phi_range": list(p.phi_range),
                "weight_range": list(p.weight_range),
                "floor": p.floor,
                "covariates": {
                    "mean": p.covariates.mean.tolist(),
                    "cov": p.covariates.cov.tolist(),
                    "shift": p.covariates.shift,
                },
            }
        return out


_TOP_KEYS = {
    "master_seed", "rounds", "n_runs", "output_dir", "population_file", "init_value",
    "init_jitter", "fit_intercept", "population", "aggregator", "local", "evaluation",
}
_POP_KEYS = {
    "n_producers", "n_obs_per_producer", "base_coeffs", "coeff_jitter", "intercept_range",
    "p_range", "q_range", "phi_range", "weight_range", "floor", "covariates",
}


def _reject_unknown(section: str, table: dict, allowed: set) -> None:
    extra = sorted(set(table) - allowed)
    if extra:
        where = f"[{section}] " if section else ""
        raise ConfigError(f"{where}unknown key(s): {', '.join(extra)}")


def _build(section: str, factory, **kwargs):
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _vector_table(section: str, table: dict) -> dict[str, tuple[float, ...]]:
    out = {}
    for name, values in table.items():
        try:
            out[name] = tuple(float(v) for v in values)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{name} must be a list of numbers") from None
    return out


def _population(table: dict) -> PopulationSpec:
    _reject_unknown("population", table, _POP_KEYS)
    kwargs = {k: v for k, v in table.items() if k != "covariates"}
    cov_table = dict(table.get("covariates", {}))
    _reject_unknown("population.covariates", cov_table, {"mean", "cov", "shift", "correlation"})
    j = len(kwargs.get("base_coeffs", PopulationSpec.__dataclass_fields__["base_coeffs"].default))
    if cov_table:
        if "cov" in cov_table and "correlation" in cov_table:
            raise ConfigError("population.covariates: give either cov or correlation, not both")
        if "cov" in cov_table:
            cov = cov_table["cov"]
        else:
            cov = CovariateModel.standard(j, correlation=cov_table.get("correlation", 0.0)).cov
        kwargs["covariates"] = _build(
            "population.covariates",
            CovariateModel,
            mean=cov_table.get("mean", [0.0] * j),
            cov=cov,
            shift=cov_table.get("shift", CovariateModel.__dataclass_fields__["shift"].default),
        )
    return _build("population", PopulationSpec, **kwargs)


def _aggregator(table: dict, local: LocalUpdateConfig) -> AggregatorConfig:
    _reject_unknown("aggregator", table, {"kind", "fedopt"})
    kind = str(table.get("kind", "fedavg")).lower()
    if kind not in {a.value for a in Aggregator}:
        raise ConfigError(f"aggregator.kind must be one of fedavg, fedprox, fedopt; got {kind!r}")
    fedopt = None
    if "fedopt" in table:
        if kind != "fedopt":
            raise ConfigError("aggregator.fedopt is only allowed when kind = 'fedopt'")
        sub = dict(table["fedopt"])
        _reject_unknown("aggregator.fedopt", sub, {"server_lr", "beta1", "beta2", "epsilon"})
        fedopt = _build("aggregator.fedopt", FedOptConfig, **sub)
    if local.prox_beta > 0 and kind != "fedprox":
        raise ConfigError("local.prox_beta > 0 requires aggregator.kind = 'fedprox'")
    return _build("aggregator", AggregatorConfig, kind=kind, fedopt=fedopt)


def parse_config(raw: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    """Validate a decoded config mapping.

    ``population_file`` resolves against ``base_dir``; ``output_dir`` stays
    relative to the working directory.
    """
    _reject_unknown("", raw, _TOP_KEYS)
    if "master_seed" not in raw:
        raise ConfigError("master_seed is required")
    seed = raw["master_seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigError(f"master_seed must be an unsigned 64-bit integer, got {seed!r}")

    local_table = dict(raw.get("local", {}))
    _reject_unknown("local", local_table, {"epochs", "batch_size", "learning_rate", "prox_beta", "floor"})
    local = _build("local", LocalUpdateConfig, **local_table)
    aggregator = _aggregator(dict(raw.get("aggregator", {})), local)

    population_file = raw.get("population_file")
    population = None
    if population_file is not None:
        if "population" in raw:
            raise ConfigError("give either population_file or [population], not both")
        population_file = Path(population_file)
        if not population_file.is_absolute():
            population_file = base_dir / population_file
        if not population_file.is_file():
            raise ConfigError(f"population_file not found: {population_file}")
    else:
        population = _population(dict(raw.get("population", {})))

    eval_table = dict(raw.get("evaluation", {}))
    _reject_unknown("evaluation", eval_table, set(EvaluationConfig.__dataclass_fields__))
    if "band_quantiles" in eval_table:
        eval_table["band_quantiles"] = tuple(eval_table["band_quantiles"])
        if len(eval_table["band_quantiles"]) != 2:
            raise ConfigError("evaluation.band_quantiles must have two entries")
    for key in ("baselines", "coefficients"):
        if key in eval_table:
            eval_table[key] = _vector_table(f"evaluation.{key}", dict(eval_table[key]))
    evaluation = _build("evaluation", EvaluationConfig, **eval_table)

    rounds = raw.get("rounds", 100)
    n_runs = raw.get("n_runs", 10)
    if not isinstance(rounds, int) or rounds < 1:
        raise ConfigError(f"rounds must be a positive integer, got {rounds!r}")
    if not isinstance(n_runs, int) or n_runs < 2:
        raise ConfigError(f"n_runs must be an integer >= 2, got {n_runs!r}")
    init_jitter = float(raw.get("init_jitter", 0.0))
    if init_jitter < 0:
        raise ConfigError("init_jitter must be nonnegative")
    fit_intercept = raw.get("fit_intercept", False)
    if not isinstance(fit_intercept, bool):
        raise ConfigError("fit_intercept must be true or false")
    output_dir = Path(raw.get("output_dir", "runs/experiment"))

    return ExperimentConfig(
        master_seed=seed,
        population=population,
        population_file=population_file,
        aggregator=aggregator,
        local=local,
        rounds=rounds,
        n_runs=n_runs,
        output_dir=output_dir,
        init_value=float(raw.get("init_value", DEFAULT_INIT_VALUE)),
        init_jitter=init_jitter,
        fit_intercept=fit_intercept,
        evaluation=evaluation,
    )


def load_config(path) -> ExperimentConfig:
    """Read and validate a ``.toml`` config or a resolved ``.json`` echo."""
    path = Path(path)
    # OSError propagates: a missing file is an I/O failure, not a bad config
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix == ".json":
            raw = json.loads(text)
        else:
            raw = tomllib.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from None
    return parse_config(raw, path.parent)
