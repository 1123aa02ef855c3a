import numpy as np
import pytest
from scipy import integrate

from fedindex import PopulationSpec, TweedieParams, generate_population


def deviance_by_quadrature(x, mu, q):
    """Independent oracle: 2 * integral from mu to x of (x - t) t^-q dt."""
    value, _ = integrate.quad(lambda t: (x - t) * t ** (-q), mu, x, epsabs=1e-13, epsrel=1e-12, limit=200)
    return 2.0 * value


def central_difference(f, w, h=1e-6):
    w = np.asarray(w, dtype=float)
    grad = np.empty_like(w)
    for k in range(w.size):
        e = np.zeros_like(w)
        e[k] = h
        grad[k] = (f(w + e) - f(w - e)) / (2 * h)
    return grad


@pytest.fixture
def unit_params():
    return TweedieParams(p=1.0, q=1.5, phi=1.0)


@pytest.fixture(scope="session")
def small_population():
    spec = PopulationSpec(n_producers=4, n_obs_per_producer=120)
    return generate_population(spec, 123)


@pytest.fixture(scope="session")
def homogeneous_small():
    spec = PopulationSpec.homogeneous(n_producers=3, n_obs_per_producer=300)
    return generate_population(spec, 5)


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(module.RESULTS):
        passed, detail = module.RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
