"""Shared fixtures and statistical helpers for the test suite."""

import numpy as np
import pytest

from mimo_resample.mimo_model import SimConfig, make_constellation, problem_for_trial

# one-sided 99% normal quantile, used for Monte Carlo comparisons
Z99 = 2.3263478740408408


def paired_no_worse(errors_better, errors_worse, z: float = Z99) -> bool:
    """True when `better` is not worse than `worse` beyond Monte Carlo noise.

    Inputs are per-trial error counts on shared realizations.
    """
    d = np.asarray(errors_worse, dtype=float) - np.asarray(errors_better, dtype=float)
    se = d.std(ddof=1) / np.sqrt(len(d))
    return d.mean() >= -z * se


def paired_strictly_better(errors_better, errors_worse, z: float = Z99) -> bool:
    """True when `better` beats `worse` at one-sided confidence z."""
    d = np.asarray(errors_worse, dtype=float) - np.asarray(errors_better, dtype=float)
    se = d.std(ddof=1) / np.sqrt(len(d))
    return se > 0 and d.mean() > z * se


def random_psd(rng: np.random.Generator, m: int) -> np.ndarray:
    g = rng.standard_normal((m, 2 * m))
    return g @ g.T / (2 * m)


def enumerate_posterior(problem):
    """Brute-force posterior marginals by direct enumeration (test oracle)."""
    from itertools import product

    const = problem.constellation
    order, n = const.order, problem.n_tx
    marg = np.zeros((n, order))
    for cand in product(range(order), repeat=n):
        s = problem.symbol_values(np.asarray(cand))
        d = float(np.abs(problem.y - problem.h @ s) ** 2 @ np.ones(problem.n_rx))
        w = np.exp(-d / problem.metric_scale)
        for layer, sym in enumerate(cand):
            marg[layer, sym] += w
    return marg / marg.sum(axis=1, keepdims=True)


@pytest.fixture(scope="session")
def qpsk22_config():
    return SimConfig(n_rx=2, n_tx=2, order=4, snr_db=15.0, master_seed=20240101, n_trials=100)


@pytest.fixture(scope="session")
def qam16_44_config():
    return SimConfig(n_rx=4, n_tx=4, order=16, snr_db=18.0, master_seed=20240202, n_trials=100)


@pytest.fixture(scope="session")
def qam16(qam16_44_config):
    return make_constellation("qam", 16)


def problems_from(config, count, snr_db=None, start=0):
    return [problem_for_trial(config, start + i, snr_db=snr_db) for i in range(count)]
