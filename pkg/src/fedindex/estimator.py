"""scikit-learn style wrappers around federated and centralized index calibration."""

from __future__ import annotations

from typing import Mapping, Optional, Union

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from fedindex.evaluation import centralized_fit
from fedindex.federated import (
    AggregatorConfig,
    FedOptConfig,
    LocalUpdateConfig,
    global_loss,
    initial_coeffs,
    run_training,
)
from fedindex.index_model import DEFAULT_FLOOR, IndexCoefficients, ProducerDataset
from fedindex.tweedie import TweedieParams

ParamsArg = Union[TweedieParams, Mapping[object, TweedieParams]]


def check_losses(y) -> np.ndarray:
    """Validate a loss vector: finite and nonnegative."""
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise ValueError("losses must be nonnegative")
    return y


def build_clients(
    X,
    y,
    groups=None,
    tweedie_params: Optional[ParamsArg] = None,
    client_weights: Optional[Mapping[object, float]] = None,
) -> list[ProducerDataset]:
    """Split a stacked ``(X, y)`` sample into one dataset per ``groups`` label.

    ``tweedie_params`` is either one :class:`TweedieParams` shared by all
    groups or a mapping from group label to parameters.
    """
    X, y = check_X_y(X, y, dtype=float)
    y = check_losses(y)
    if tweedie_params is None:
        raise ValueError("tweedie_params is required")
    groups = np.zeros(y.shape[0], dtype=int) if groups is None else np.asarray(groups)
    if groups.shape != y.shape:
        raise ValueError("groups must have one label per sample")
    clients = []
    for label in sorted(set(groups.tolist()), key=str):
        mask = groups == label
        if isinstance(tweedie_params, TweedieParams):
            params = tweedie_params
        else:
            try:
                params = tweedie_params[label]
            except KeyError:
                raise ValueError(f"no Tweedie parameters for group {label!r}") from None
        weight = 1.0 if client_weights is None else float(client_weights[label])
        clients.append(ProducerDataset(str(label), X[mask], y[mask], params, weight))
    return clients


class _IndexMixin(TransformerMixin):
    """Shared prediction surface: the fitted index is the model output."""

    def _coefficients(self) -> IndexCoefficients:
        check_is_fitted(self, "coefficients_")
        return self.coefficients_

    def _check_X(self, X) -> np.ndarray:
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict(self, X) -> np.ndarray:
        """Index value ``Z`` for each row of ``X``."""
        coeffs = self._coefficients()
        X = self._check_X(X)
        z = X @ coeffs.a
        if coeffs.intercept is not None:
            z = z + coeffs.intercept
        return z

    def transform(self, X) -> np.ndarray:
        return self.predict(X).reshape(-1, 1)

    def predict_mean(self, X, p: float = 1.0) -> np.ndarray:
        """Producer mean ``max(Z, floor) ** p`` under link exponent ``p``."""
        return np.power(np.maximum(self.predict(X), self.floor), p)

    def score(self, X, y, groups=None, tweedie_params: Optional[ParamsArg] = None, client_weights=None):
        """Negative weight-normalized mean deviance; higher is better."""
        clients = build_clients(X, y, groups, tweedie_params, client_weights)
        return -global_loss(self._coefficients(), clients, self.floor)[0]

    def _store(self, coeffs: IndexCoefficients, n_features: int):
        self.coefficients_ = coeffs
        self.coef_ = coeffs.a.copy()
        self.intercept_ = 0.0 if coeffs.intercept is None else coeffs.intercept
        self.n_features_in_ = n_features


class FederatedIndexRegressor(_IndexMixin, RegressorMixin, BaseEstimator):
    """Calibrate the common index by simulated federated training.

    Parameters
    ----------
    aggregator : {"fedavg", "fedprox", "fedopt"}
    rounds : int
        Communication rounds.
    epochs, batch_size, learning_rate : local SGD settings.
    prox_beta : float
        Proximal strength; only meaningful with ``aggregator="fedprox"``.
    server_lr, beta1, beta2, epsilon : FedOpt (Adam) server settings.
    floor : float
        Lower clamp on the index inside the power link.
    init_value : float
        Constant initial coefficient.
    fit_intercept : bool
    random_state : int
        Master seed for all mini-batch streams.

    Examples
    --------
    >>> from fedindex import FederatedIndexRegressor, TweedieParams
    >>> reg = FederatedIndexRegressor(rounds=5)
    >>> reg.fit(X, y, groups=producer, tweedie_params=TweedieParams(1.0, 1.5, 1.0))  # doctest: +SKIP
    """

    def __init__(
        self,
        aggregator: str = "fedavg",
        rounds: int = 100,
        epochs: int = 1,
        batch_size: int = 32,
        learning_rate: float = 0.01,
        prox_beta: float = 0.0,
        server_lr: float = 0.1,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
        floor: float = DEFAULT_FLOOR,
        init_value: float = 0.1,
        fit_intercept: bool = False,
        random_state: int = 0,
    ):
        self.aggregator = aggregator
        self.rounds = rounds
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.prox_beta = prox_beta
        self.server_lr = server_lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.floor = floor
        self.init_value = init_value
        self.fit_intercept = fit_intercept
        self.random_state = random_state

    def _configs(self) -> tuple[AggregatorConfig, LocalUpdateConfig]:
        kind = str(self.aggregator).lower()
        fedopt = None
        if kind == "fedopt":
            fedopt = FedOptConfig(self.server_lr, self.beta1, self.beta2, self.epsilon)
        agg = AggregatorConfig(kind, fedopt)
        local = LocalUpdateConfig(self.epochs, self.batch_size, self.learning_rate, self.prox_beta, self.floor)
        return agg, local

    def fit(self, X, y, groups=None, tweedie_params: Optional[ParamsArg] = None, client_weights=None):
        """Fit on a stacked sample; ``groups`` assigns each row to a producer."""
        return self.fit_clients(build_clients(X, y, groups, tweedie_params, client_weights))

    def fit_clients(self, clients):
        """Fit directly on a list of :class:`ProducerDataset`."""
        agg, local = self._configs()
        j = clients[0].n_covariates
        init = initial_coeffs(j, self.init_value, self.fit_intercept)
        coeffs, traces = run_training(clients, agg, local, self.rounds, self.random_state, init=init)
        self.history_ = traces
        self._store(coeffs, j)
        return self


class CentralizedIndexRegressor(_IndexMixin, RegressorMixin, BaseEstimator):
    """Pooled-data oracle: full-batch gradient descent on the global objective."""

    def __init__(
        self,
        tol: float = 1e-8,
        max_iter: int = 20000,
        floor: float = DEFAULT_FLOOR,
        init_value: float = 0.1,
        fit_intercept: bool = False,
    ):
        self.tol = tol
        self.max_iter = max_iter
        self.floor = floor
        self.init_value = init_value
        self.fit_intercept = fit_intercept

    def fit(self, X, y, groups=None, tweedie_params: Optional[ParamsArg] = None, client_weights=None):
        return self.fit_clients(build_clients(X, y, groups, tweedie_params, client_weights))

    def fit_clients(self, clients):
        j = clients[0].n_covariates
        init = initial_coeffs(j, self.init_value, self.fit_intercept)
        coeffs = centralized_fit(clients, self.floor, self.tol, self.max_iter, init=init)
        self._store(coeffs, j)
        return self
