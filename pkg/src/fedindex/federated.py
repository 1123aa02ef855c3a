"""Synchronous federated optimization of the common index (FedAvg, FedProx, FedOpt)."""

from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from fedindex.index_model import (
    DEFAULT_FLOOR,
    IndexCoefficients,
    ProducerDataset,
    local_risk,
    risk_gradient_vector,
)

# spawn-key namespaces, keep disjoint from synth.POPULATION_STREAM
TRAIN_STREAM = 2
INIT_STREAM = 3

DEFAULT_INIT_VALUE = 0.1


class DivergenceError(RuntimeError):
    """Non-finite gradient, iterate or loss during training."""

    def __init__(self, message: str, round: Optional[int] = None, client: Optional[str] = None):
        self.detail = message
        self.round = round
        self.client = client
        where = []
        if round is not None:
            where.append(f"round {round}")
        if client is not None:
            where.append(f"client {client!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class Aggregator(str, enum.Enum):
    FEDAVG = "fedavg"
    FEDPROX = "fedprox"
    FEDOPT = "fedopt"


@dataclass(frozen=True)
class LocalUpdateConfig:
    """Client-side optimizer settings.

    ``prox_beta > 0`` turns the local objective into the FedProx one.
    """

    epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.01
    prox_beta: float = 0.0
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ValueError(f"epochs must be a nonnegative integer, got {self.epochs!r}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ValueError(f"learning_rate must be finite and nonnegative, got {self.learning_rate!r}")
        if not (math.isfinite(self.prox_beta) and self.prox_beta >= 0):
            raise ValueError(f"prox_beta must be finite and nonnegative, got {self.prox_beta!r}")
        if not (math.isfinite(self.floor) and self.floor > 0):
            raise ValueError(f"floor must be positive, got {self.floor!r}")


@dataclass(frozen=True)
class FedOptConfig:
    server_lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.server_lr > 0:
            raise ValueError(f"server_lr must be positive, got {self.server_lr!r}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must be inside open interval (0,1), got {value!r}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon!r}")


@dataclass(frozen=True)
class AggregatorConfig:
    """Server aggregation rule; ``fedopt`` is set exactly when ``kind`` is FedOpt."""

    kind: Aggregator = Aggregator.FEDAVG
    fedopt: Optional[FedOptConfig] = None

    def __post_init__(self):
        kind = Aggregator(self.kind.lower() if isinstance(self.kind, str) else self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is Aggregator.FEDOPT and self.fedopt is None:
            object.__setattr__(self, "fedopt", FedOptConfig())
        if kind is not Aggregator.FEDOPT and self.fedopt is not None:
            raise ValueError(f"fedopt settings given for aggregator {kind.value!r}")

    @classmethod
    def fedavg(cls) -> "AggregatorConfig":
        return cls(Aggregator.FEDAVG)

    @classmethod
    def fedprox(cls) -> "AggregatorConfig":
        return cls(Aggregator.FEDPROX)

    @classmethod
    def fedopt_adam(cls, **kwargs) -> "AggregatorConfig":
        return cls(Aggregator.FEDOPT, FedOptConfig(**kwargs))


@dataclass(frozen=True, eq=False)
class ServerState:
    """Global iterate ``a^(t)``, completed-round counter and FedOpt moments."""

    coeffs: IndexCoefficients
    round: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def __post_init__(self):
        size = self.coeffs.to_vector().size
        m = np.zeros(size) if self.m is None else np.array(self.m, dtype=float)
        v = np.zeros(size) if self.v is None else np.array(self.v, dtype=float)
        if m.shape != (size,) or v.shape != (size,):
            raise ValueError("moment vectors must match the coefficient dimension")
        if np.any(v < 0):
            raise ValueError("second-moment estimates must be nonnegative")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "v", v)

    @classmethod
    def initial(cls, coeffs: IndexCoefficients) -> "ServerState":
        return cls(coeffs)


@dataclass(frozen=True)
class RoundTrace:
    """Diagnostics of one completed round; ``round`` counts from 1."""

    round: int
    global_loss: float
    coeffs_after: IndexCoefficients
    per_client_losses: Mapping[str, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# client side


def local_update(
    data: ProducerDataset,
    global_coeffs: IndexCoefficients,
    cfg: LocalUpdateConfig,
    rng: np.random.Generator,
) -> IndexCoefficients:
    """Run ``cfg.epochs`` shuffled mini-batch epochs of (proximal) SGD from ``global_coeffs``.

    Only ``data`` is touched. Raises :class:`DivergenceError` when a gradient
    or iterate stops being finite.
    """
    if data.n_covariates != global_coeffs.n_covariates:
        raise ValueError(
            f"dimension mismatch: {global_coeffs.n_covariates} coefficients, "
            f"{data.n_covariates} covariates for {data.id!r}"
        )
    intercept = global_coeffs.has_intercept
    anchor = global_coeffs.to_vector()
    w = anchor.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        w = _sgd_epochs(data, w, anchor, intercept, cfg, rng)
    return IndexCoefficients.from_vector(w, intercept)


def _sgd_epochs(data, w, anchor, intercept, cfg, rng):
    n, bs, lr, beta = data.n_obs, cfg.batch_size, cfg.learning_rate, cfg.prox_beta
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            grad = risk_gradient_vector(w, intercept, data.y[idx], data.x[idx], data.params, cfg.floor)
            if beta:
                grad = grad + beta * (w - anchor)
            if not np.all(np.isfinite(grad)):
                raise DivergenceError("non-finite local gradient", client=data.id)
            w = w - lr * grad
        if not np.all(np.isfinite(w)):
            raise DivergenceError("non-finite local iterate", client=data.id)
    return w


# ---------------------------------------------------------------------------
# server side


def _normalized(updates: Sequence[tuple[float, IndexCoefficients]]):
    if not updates:
        raise ValueError("no client updates to aggregate")
    weights = [float(w) for w, _ in updates]
    if any(not (w > 0 and math.isfinite(w)) for w in weights):
        raise ValueError("aggregation weights must be positive and finite")
    total = math.fsum(weights)
    vectors = [c.to_vector() for _, c in updates]
    shape = vectors[0].shape
    if any(v.shape != shape for v in vectors):
        raise ValueError("dimension mismatch between client updates")
    flags = {c.has_intercept for _, c in updates}
    if len(flags) != 1:
        raise ValueError("client updates disagree on the intercept")
    return [w / total for w in weights], vectors, flags.pop()


def _weighted_sum(weights, vectors) -> np.ndarray:
    # fsum is exactly rounded, so the result does not depend on client order
    stacked = np.array(vectors)
    return np.array([math.fsum(w * x for w, x in zip(weights, col)) for col in stacked.T])


def aggregate_fedavg(updates: Sequence[tuple[float, IndexCoefficients]]) -> IndexCoefficients:
    """Weighted average of client iterates, weights normalized to sum to one."""
    weights, vectors, intercept = _normalized(updates)
    stacked = np.array(vectors)
    # normalized weights may sum to 1 +- ulp; keep the result inside the hull
    avg = np.clip(_weighted_sum(weights, vectors), stacked.min(axis=0), stacked.max(axis=0))
    return IndexCoefficients.from_vector(avg, intercept)


def pseudo_gradient(
    global_coeffs: IndexCoefficients, updates: Sequence[tuple[float, IndexCoefficients]]
) -> np.ndarray:
    """Weighted mean displacement ``sum_i w_i (a^(t) - a_i^(t+1))`` with normalized weights."""
    weights, vectors, intercept = _normalized(updates)
    anchor = global_coeffs.to_vector()
    if anchor.shape != vectors[0].shape or intercept != global_coeffs.has_intercept:
        raise ValueError("dimension mismatch between global coefficients and client updates")
    return _weighted_sum(weights, [anchor - v for v in vectors])


def fedopt_step(state: ServerState, g, cfg: FedOptConfig) -> ServerState:
    """One Adam step on the server with pseudo-gradient ``g``.

    The bias-correction clock is ``state.round + 1``, so the first call uses t = 1.
    """
    g = np.asarray(g, dtype=float).reshape(-1)
    w = state.coeffs.to_vector()
    if g.shape != w.shape:
        raise ValueError(f"dimension mismatch: gradient {g.shape}, coefficients {w.shape}")
    t = state.round + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    w = w - cfg.server_lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    coeffs = IndexCoefficients.from_vector(w, state.coeffs.has_intercept)
    return ServerState(coeffs, t, m, v)


def global_loss(
    coeffs: IndexCoefficients, clients: Sequence[ProducerDataset], floor: float = DEFAULT_FLOOR
) -> tuple[float, dict[str, float]]:
    """Weight-normalized federated objective and the per-client risks behind it."""
    ordered = sorted(clients, key=lambda c: c.id)
    losses = {c.id: local_risk(coeffs, c, floor) for c in ordered}
    total = math.fsum(c.weight for c in ordered)
    value = math.fsum(c.weight / total * losses[c.id] for c in ordered)
    return value, losses


def client_rng(master_seed: int, round_index: int, client_id: str, run: int = 0) -> np.random.Generator:
    """Independent stream keyed by (seed, run, round, client id), not by client position."""
    key = zlib.crc32(client_id.encode("utf-8"))
    seq = np.random.SeedSequence(master_seed, spawn_key=(TRAIN_STREAM, run, round_index, key))
    return np.random.default_rng(seq)


def _check_clients(clients: Sequence[ProducerDataset]) -> list[ProducerDataset]:
    if not clients:
        raise ValueError("need at least one client")
    ids = [c.id for c in clients]
    if len(set(ids)) != len(ids):
        raise ValueError("client ids must be unique")
    dims = {c.n_covariates for c in clients}
    if len(dims) != 1:
        raise ValueError(f"clients disagree on covariate dimension: {sorted(dims)}")
    return sorted(clients, key=lambda c: c.id)


def run_round(
    server: ServerState,
    clients: Sequence[ProducerDataset],
    agg: AggregatorConfig,
    local_cfg: LocalUpdateConfig,
    rngs: Mapping[str, np.random.Generator],
) -> tuple[ServerState, RoundTrace]:
    """Broadcast, local updates for every client, aggregate, evaluate.

    ``rngs`` maps client id to that client's generator for this round.
    """
    ordered = _check_clients(clients)
    label = server.round + 1
    updates = []
    for client in ordered:
        try:
            new = local_update(client, server.coeffs, local_cfg, rngs[client.id])
        except DivergenceError as exc:
            raise DivergenceError(exc.detail, round=label, client=client.id) from exc
        updates.append((client.weight, new))

    if agg.kind is Aggregator.FEDOPT:
        g = pseudo_gradient(server.coeffs, updates)
        try:
            new_state = fedopt_step(server, g, agg.fedopt)
        except ValueError as exc:
            raise DivergenceError(f"server step failed: {exc}", round=label) from exc
    else:
        try:
            coeffs = aggregate_fedavg(updates)
        except ValueError as exc:
            raise DivergenceError(f"aggregation failed: {exc}", round=label) from exc
        new_state = replace(server, coeffs=coeffs, round=label)

    loss, per_client = global_loss(new_state.coeffs, ordered, local_cfg.floor)
    if not math.isfinite(loss):
        raise DivergenceError("non-finite global loss", round=label)
    return new_state, RoundTrace(label, loss, new_state.coeffs, per_client)


def run_rounds(
    server: ServerState,
    clients: Sequence[ProducerDataset],
    agg: AggregatorConfig,
    local_cfg: LocalUpdateConfig,
    rounds: int,
    master_seed: int,
    run: int = 0,
) -> tuple[ServerState, list[RoundTrace]]:
    """Continue training from ``server`` for ``rounds`` more rounds (zero allowed)."""
    if rounds < 0:
        raise ValueError("rounds must be nonnegative")
    traces = []
    for _ in range(rounds):
        t = server.round
        rngs = {c.id: client_rng(master_seed, t, c.id, run) for c in clients}
        server, trace = run_round(server, clients, agg, local_cfg, rngs)
        traces.append(trace)
    return server, traces


def initial_coeffs(
    j: int,
    value: float = DEFAULT_INIT_VALUE,
    intercept: bool = False,
    jitter: float = 0.0,
    master_seed: int = 0,
    run: int = 0,
) -> IndexCoefficients:
    """Constant start ``(value, ..., value)``, optionally perturbed per run."""
    w = np.full(j + int(intercept), float(value))
    if intercept:
        w[-1] = 0.0
    if jitter > 0:
        rng = np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(INIT_STREAM, run)))
        w = w + jitter * rng.standard_normal(w.size)
    return IndexCoefficients.from_vector(w, intercept)


def run_training(
    clients: Sequence[ProducerDataset],
    agg: AggregatorConfig,
    local_cfg: LocalUpdateConfig,
    rounds: int,
    master_seed: int,
    init: Optional[IndexCoefficients] = None,
    run: int = 0,
) -> tuple[IndexCoefficients, list[RoundTrace]]:
    """Algorithm driver: initialize, then ``rounds`` synchronous rounds.

    Bit-reproducible for fixed inputs and ``master_seed``.
    """
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    ordered = _check_clients(clients)
    if init is None:
        init = initial_coeffs(ordered[0].n_covariates)
    elif init.n_covariates != ordered[0].n_covariates:
        raise ValueError("initial coefficients do not match the covariate dimension")
    state, traces = run_rounds(ServerState.initial(init), ordered, agg, local_cfg, rounds, master_seed, run)
    return state.coeffs, traces
