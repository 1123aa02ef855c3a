"""Command-line harness: ``generate``, ``train``, ``evaluate`` and ``report``.

Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 divergence (or oracle iteration cap), 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from fedindex import io as fio
from fedindex.config import ConfigError, ExperimentConfig, load_config
from fedindex.evaluation import (
    EmptySelectionError,
    IterationCapReached,
    MonteCarloSummary,
    basis_risk,
    centralized_fit,
    conditional_mean_estimator,
    ks_distance,
    monte_carlo,
    objective,
    recovery_error,
)
from fedindex.federated import DivergenceError, initial_coeffs
from fedindex.index_model import IndexCoefficients, ProducerDataset, index_value
from fedindex.synth import generate_population

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4

POPULATION_FILE = "population.csv"
TRACES_FILE = "traces.csv"
SUMMARY_FILE = "summary.json"
COEFFICIENTS_FILE = "coefficients.json"
BASIS_RISK_FILE = "basis_risk.json"
REPORT_FILE = "report.json"
RESOLVED_CONFIG_FILE = "config.resolved.json"
RUN_LOG_FILE = "run.log"
LOG_ENV = "FEDINDEX_LOG_LEVEL"

logger = logging.getLogger("fedindex")


def load_population(cfg: ExperimentConfig) -> list[ProducerDataset]:
    if cfg.population_file is not None:
        logger.info("loading population from %s", cfg.population_file)
        clients = fio.read_population(cfg.population_file)
    else:
        logger.info("generating %d producers (seed %d)", cfg.population.n_producers, cfg.master_seed)
        clients = generate_population(cfg.population, cfg.master_seed)
    dims = {c.n_covariates for c in clients}
    if len(dims) != 1:
        raise ConfigError(f"population has mixed covariate dimensions {sorted(dims)}")
    return clients


def _prepare_output(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    fio.write_json(out / RESOLVED_CONFIG_FILE, cfg.to_dict())
    return out


def _train(cfg: ExperimentConfig, clients) -> MonteCarloSummary:
    logger.info(
        "training %s for %d rounds x %d runs", cfg.aggregator.kind.value, cfg.rounds, cfg.n_runs
    )
    return monte_carlo(
        clients,
        cfg.aggregator,
        cfg.local,
        cfg.rounds,
        cfg.n_runs,
        cfg.master_seed,
        init_value=cfg.init_value,
        init_jitter=cfg.init_jitter,
        intercept=cfg.fit_intercept,
        quantiles=cfg.evaluation.band_quantiles,
    )


def _write_training(out: Path, cfg: ExperimentConfig, summary: MonteCarloSummary) -> IndexCoefficients:
    fio.write_traces(out / TRACES_FILE, summary.runs)
    fio.write_json(out / SUMMARY_FILE, {"aggregator": cfg.aggregator.kind.value, **summary.to_dict()})
    mean_final = IndexCoefficients.from_vector(summary.coeff_mean[-1], cfg.fit_intercept)
    fio.write_json(
        out / COEFFICIENTS_FILE,
        {
            "aggregator": cfg.aggregator.kind.value,
            "mean_final": mean_final.to_vector(),
            "per_run_final": [c.to_vector() for c in summary.final_coeffs],
        },
    )
    return mean_final


def basis_risk_reports(clients, named: dict[str, IndexCoefficients], cfg: ExperimentConfig):
    """Per-producer residual summaries for every named coefficient set.

    Returns the JSON-ready reports and the raw :class:`BasisRiskReport` objects.
    """
    reports: dict[str, dict] = {}
    raw: dict[str, dict] = {}
    for name, coeffs in named.items():
        rows = []
        raw[name] = {}
        for client in sorted(clients, key=lambda c: c.id):
            z = index_value(coeffs, client.y)
            z0 = float(np.quantile(z, cfg.evaluation.z0_quantile))
            model = conditional_mean_estimator(client, coeffs, cfg.evaluation.n_bins)
            try:
                rep = basis_risk(client, coeffs, model, z0)
            except EmptySelectionError as exc:
                rows.append({"producer_id": client.id, "z0": z0, "error": str(exc)})
                continue
            raw[name][client.id] = rep
            rows.append(rep.to_dict())
        reports[name] = {"coefficients": coeffs.to_vector(), "producers": rows}
    return reports, raw


def _ks_diagnostics(raw: dict, reference: str, threshold: float) -> dict:
    out = {}
    ref = raw.get(reference, {})
    for name, per in raw.items():
        if name == reference:
            continue
        dists = {pid: ks_distance(rep, ref[pid]) for pid, rep in per.items() if pid in ref}
        out[name] = {
            "reference": reference,
            "threshold": threshold,
            "max": max(dists.values()) if dists else None,
            "below_threshold": all(d < threshold for d in dists.values()),
            "per_producer": dists,
        }
    return out


def _named_coefficients(cfg: ExperimentConfig, j: int) -> dict[str, IndexCoefficients]:
    named = {}
    for source in (cfg.evaluation.coefficients, cfg.evaluation.baselines):
        for name, values in source.items():
            if len(values) != j + int(cfg.fit_intercept):
                raise ConfigError(
                    f"coefficients {name!r} have {len(values)} entries, "
                    f"expected {j + int(cfg.fit_intercept)}"
                )
            named[name] = IndexCoefficients.from_vector(values, cfg.fit_intercept)
    return named


def cmd_generate(cfg: ExperimentConfig) -> int:
    clients = load_population(cfg)
    out = _prepare_output(cfg)
    fio.write_population(out / POPULATION_FILE, clients)
    logger.info("wrote %s", out / POPULATION_FILE)
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig) -> int:
    clients = load_population(cfg)
    out = _prepare_output(cfg)
    summary = _train(cfg, clients)
    _write_training(out, cfg, summary)
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig) -> int:
    clients = load_population(cfg)
    j = clients[0].n_covariates
    named = _named_coefficients(cfg, j)
    previous = Path(cfg.output_dir) / COEFFICIENTS_FILE
    if previous.is_file():
        mean_final = fio.read_json(previous)["mean_final"]
        named.setdefault("fitted", IndexCoefficients.from_vector(mean_final, cfg.fit_intercept))
    if not named:
        raise ConfigError(
            "evaluate needs [evaluation.coefficients], [evaluation.baselines] or a prior coefficients.json"
        )
    out = _prepare_output(cfg)
    reports, _ = basis_risk_reports(clients, named, cfg)
    fio.write_json(out / BASIS_RISK_FILE, reports)
    return EXIT_OK


def run_experiment(cfg: ExperimentConfig) -> int:
    """Full pipeline: population, Monte Carlo training, oracle, basis risk, report."""
    clients = load_population(cfg)
    out = _prepare_output(cfg)
    if cfg.population_file is None:
        fio.write_population(out / POPULATION_FILE, clients)
    summary = _train(cfg, clients)
    fitted = _write_training(out, cfg, summary)

    j = clients[0].n_covariates
    init = initial_coeffs(j, cfg.init_value, cfg.fit_intercept)
    oracle = centralized_fit(
        clients,
        cfg.local.floor,
        cfg.evaluation.centralized_tol,
        cfg.evaluation.centralized_max_iter,
        init=init,
    )
    named = {"fitted": fitted, "centralized": oracle, **_named_coefficients(cfg, j)}
    reports, raw = basis_risk_reports(clients, named, cfg)
    fio.write_json(out / BASIS_RISK_FILE, reports)

    f_fit = objective(fitted, clients, cfg.local.floor)
    f_oracle = objective(oracle, clients, cfg.local.floor)
    report = {
        "aggregator": cfg.aggregator.kind.value,
        "n_runs": cfg.n_runs,
        "rounds": cfg.rounds,
        "fitted": fitted.to_vector(),
        "centralized": oracle.to_vector(),
        "distance_to_centralized": recovery_error(fitted, oracle),
        "global_loss": {
            "fitted": f_fit,
            "centralized": f_oracle,
            "relative_gap": (f_fit - f_oracle) / f_oracle,
            "round_1_mean": summary.loss_mean[0],
            "final_mean": summary.loss_mean[-1],
        },
        "ks_diagnostics": _ks_diagnostics(raw, "centralized", cfg.evaluation.ks_threshold),
    }
    truths = [c.truth for c in clients if c.truth is not None]
    if truths and len(truths) == len(clients):
        weights = np.array([c.weight for c in clients])
        population_a = np.average([t.a for t in truths], axis=0, weights=weights)
        report["truth_weighted_mean"] = population_a
        report["recovery_error"] = recovery_error(fitted, population_a)
    fio.write_json(out / REPORT_FILE, report)
    return EXIT_OK


COMMANDS = {
    "generate": (cmd_generate, "write a synthetic population file"),
    "train": (cmd_train, "run Monte Carlo federated training and write traces"),
    "evaluate": (cmd_evaluate, "basis-risk reports for given coefficient vectors"),
    "report": (run_experiment, "full experiment: train, centralized oracle, basis risk"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedindex", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path, help="experiment config (.toml or .json)")
        p.add_argument("--out", type=Path, default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    return parser


def _configure_logging(out: Optional[Path]) -> list[logging.Handler]:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logger.setLevel(logging.DEBUG)
    handlers: list[logging.Handler] = []
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(getattr(logging, level, logging.WARNING))
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handlers.append(console)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logfile = logging.FileHandler(out / RUN_LOG_FILE, mode="a", encoding="utf-8")
        logfile.setLevel(logging.INFO)
        logfile.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        handlers.append(logfile)
    for h in handlers:
        logger.addHandler(h)
    return handlers


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handlers: list[logging.Handler] = []
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
            cfg = replace(cfg, master_seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, output_dir=args.out)
        handlers = _configure_logging(Path(cfg.output_dir))
        logger.info("fedindex %s --config %s", args.command, args.config)
        command, _ = COMMANDS[args.command]
        status = command(cfg)
        logger.info("done")
        return status
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except fio.PopulationFormatError as exc:
        print(f"population file error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, IterationCapReached) as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - last-resort structured diagnostic
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        for h in handlers:
            logger.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
