"""Tweedie deviance and compound Poisson-gamma sampling for variance powers in (1, 2)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class TweedieParams:
    """Producer-level Tweedie parameters.

    Attributes
    ----------
    p : float
        Link exponent, the mean is ``Z ** p``.
    q : float
        Variance power, restricted to the open interval (1, 2).
    phi : float
        Dispersion, ``Var[X | Y] = phi * mu ** q``.
    """

    p: float
    q: float
    phi: float

    def __post_init__(self):
        for name in ("p", "q", "phi"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
        if self.p <= 0:
            raise ValueError(f"p must be positive, got {self.p!r}")
        if not 1.0 < self.q < 2.0:
            raise ValueError(f"q must be inside open interval (1,2), got {self.q!r}")
        if self.phi <= 0:
            raise ValueError(f"phi must be positive, got {self.phi!r}")


def _check_q(q: float) -> None:
    if not 1.0 < q < 2.0:
        raise ValueError(f"q must be inside open interval (1,2), got {q!r}")


def _check_x_mu(x: np.ndarray, mu: np.ndarray) -> None:
    if np.any(~(mu > 0)):
        raise ValueError("mu must be strictly positive")
    if np.any(~(x >= 0)):
        raise ValueError("x must be nonnegative")


def _unwrap(value: np.ndarray) -> ArrayLike:
    return float(value) if value.ndim == 0 else value


def unit_deviance(x: ArrayLike, mu: ArrayLike, q: float) -> ArrayLike:
    """Tweedie unit deviance for ``1 < q < 2``.

    Computes ``2 * [x^(2-q)/((1-q)(2-q)) - x mu^(1-q)/(1-q) + mu^(2-q)/(2-q)]``,
    which is zero exactly when ``x == mu`` and positive otherwise. Broadcasts
    over array inputs.
    """
    _check_q(q)
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    _check_x_mu(x, mu)
    a = 1.0 - q
    b = 2.0 - q
    dev = 2.0 * (
        np.power(x, b) / (a * b) - x * np.power(mu, a) / a + np.power(mu, b) / b
    )
    # cancellation near x == mu can leave tiny negatives
    return _unwrap(np.maximum(dev, 0.0))


def scaled_deviance(x: ArrayLike, mu: ArrayLike, params: TweedieParams) -> ArrayLike:
    """Unit deviance divided by the dispersion ``phi``."""
    return unit_deviance(x, mu, params.q) / params.phi


def deviance_dmu(x: ArrayLike, mu: ArrayLike, params: TweedieParams) -> ArrayLike:
    """Derivative of :func:`scaled_deviance` with respect to ``mu``."""
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    _check_x_mu(x, mu)
    return _unwrap((2.0 / params.phi) * np.power(mu, -params.q) * (mu - x))


def compound_poisson_gamma_params(
    mu: ArrayLike, params: TweedieParams
) -> tuple[ArrayLike, float, ArrayLike]:
    """Return ``(poisson_rate, gamma_shape, gamma_scale)`` for a Tweedie mean.

    The Poisson rate is ``mu^(2-q) / (phi (2-q))``, the gamma shape is
    ``(2-q)/(q-1)`` and the gamma scale is ``phi (q-1) mu^(q-1)``.
    """
    q, phi = params.q, params.phi
    mu = np.asarray(mu, dtype=float)
    if np.any(~(mu > 0)):
        raise ValueError("mu must be strictly positive")
    rate = np.power(mu, 2.0 - q) / (phi * (2.0 - q))
    shape = (2.0 - q) / (q - 1.0)
    scale = phi * (q - 1.0) * np.power(mu, q - 1.0)
    return _unwrap(rate), shape, _unwrap(scale)


def tweedie_sample(
    mu: ArrayLike,
    params: TweedieParams,
    rng: np.random.Generator,
    size: int | tuple[int, ...] | None = None,
) -> ArrayLike:
    """Draw Tweedie variates as a Poisson number of i.i.d. gamma jumps.

    A sum of ``N`` independent Gamma(shape, scale) jumps is drawn in one call
    as Gamma(N * shape, scale); draws with ``N == 0`` are exactly zero.

    Parameters
    ----------
    mu : float or ndarray
        Strictly positive means.
    params : TweedieParams
    rng : numpy.random.Generator
    size : int or tuple, optional
        Output shape; defaults to the shape of ``mu``.
    """
    rate, shape, scale = compound_poisson_gamma_params(mu, params)
    rate = np.asarray(rate)
    scale = np.asarray(scale)
    out_shape = rate.shape if size is None else size
    rate = np.broadcast_to(rate, out_shape)
    scale = np.broadcast_to(scale, out_shape)
    counts = np.asarray(rng.poisson(rate))
    out = np.zeros(out_shape, dtype=float)
    hit = counts > 0
    if np.any(hit):
        out[hit] = rng.gamma(shape * counts[hit], scale[hit])
    return _unwrap(out)
