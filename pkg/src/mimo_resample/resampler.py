"""Multi-sample inference: error statistics, optimal combining, uncertainty.

One input is detected several times through distribution-preserving
transforms; the back-mapped outputs are correlated estimators of the same
transmit vector.  Their minimum-variance linear combination has weights
``R^{-1} 1 / (1^T R^{-1} 1)`` and achieves variance ``1 / (1^T R^{-1} 1)``,
which for equicorrelated errors reduces to ``(rho + (1 - rho) / M) sigma^2``.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .detectors import SoftOutput, llrs_to_marginals, marginals_to_llrs, soft_output_from_symbols
from .mimo_model import MimoProblem, SimConfig, problem_for_trial, stream_rng
from .transforms import (
    apply_transform,
    backmap_marginals,
    backmap_soft_values,
    realize_transform_set,
)

__all__ = [
    "CombinerWeights",
    "ErrorStats",
    "collect_channel_marginals",
    "collect_channel_soft",
    "combine_scalar",
    "epistemic_variance",
    "estimate_error_covariance",
    "optimal_weights",
    "problems_and_transform_sets",
    "resample_detect",
    "sample_equicorrelated",
    "variance_curve",
]


@dataclass(frozen=True)
class CombinerWeights:
    """Combining weights (summing to one) and the variance they predict."""

    beta: np.ndarray
    predicted_var: float
    regularized: bool = False


@dataclass(frozen=True)
class ErrorStats:
    """Sample covariance of the per-channel estimation errors.

    ``r`` is the unbiased M x M covariance of the pooled scalar error
    observations (real and imaginary parts of every layer, every problem),
    ``sigma2`` the mean channel variance, ``n_obs`` the pooled scalar count
    per channel.  ``degenerate`` flags constant channels whose pairwise
    correlation is reported as 1.
    """

    m: int
    r: np.ndarray
    sigma2: float
    rho: np.ndarray
    mean_error: np.ndarray
    n_obs: int
    degenerate: bool = False

    def save(self, path) -> None:
        payload = {
            "m": int(self.m),
            "r": np.asarray(self.r).tolist(),
            "sigma2": float(self.sigma2),
            "rho": np.asarray(self.rho).tolist(),
            "mean_error": np.asarray(self.mean_error).tolist(),
            "n_obs": int(self.n_obs),
            "degenerate": bool(self.degenerate),
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ErrorStats":
        d = json.loads(Path(path).read_text())
        return cls(
            m=int(d["m"]),
            r=np.asarray(d["r"], dtype=float),
            sigma2=float(d["sigma2"]),
            rho=np.asarray(d["rho"], dtype=float),
            mean_error=np.asarray(d["mean_error"], dtype=float),
            n_obs=int(d["n_obs"]),
            degenerate=bool(d["degenerate"]),
        )


def optimal_weights(r) -> CombinerWeights:
    """Minimum-variance weights over the sum-to-one constraint.

    Solved symmetrically (Cholesky), never by explicit inversion.  A
    singular covariance falls back to ``r + eps I`` with
    ``eps = 1e-9 trace(r) / M`` and sets the ``regularized`` flag.
    """
    r = np.atleast_2d(np.asarray(r, dtype=float))
    m = r.shape[0]
    if r.shape != (m, m):
        raise ValueError("covariance must be square")
    if np.abs(r - r.T).max() > 1e-8 * max(1.0, np.abs(r).max()):
        raise ValueError("covariance must be symmetric")
    sym = 0.5 * (r + r.T)
    ones = np.ones(m)
    regularized = False
    try:
        factor = scipy.linalg.cho_factor(sym)
        x = scipy.linalg.cho_solve(factor, ones)
    except np.linalg.LinAlgError:
        eps = 1e-9 * np.trace(sym) / m
        if eps <= 0:
            eps = 1e-15
        factor = scipy.linalg.cho_factor(sym + eps * np.eye(m))
        x = scipy.linalg.cho_solve(factor, ones)
        regularized = True
    denom = float(x.sum())
    if not np.isfinite(denom) or denom <= 0:
        raise ValueError("covariance is not positive definite enough to combine")
    return CombinerWeights(beta=x / denom, predicted_var=1.0 / denom, regularized=regularized)


def combine_scalar(estimates, beta) -> float:
    """Linear combination of scalar estimates with the given weights."""
    estimates = np.asarray(estimates, dtype=float)
    beta = beta.beta if isinstance(beta, CombinerWeights) else np.asarray(beta, dtype=float)
    if estimates.shape != beta.shape:
        raise ValueError("estimates and weights must have the same length")
    return float(beta @ estimates)


def variance_curve(rho: float, sigma2: float, m_values) -> np.ndarray:
    """Predicted combined variance ``(rho + (1 - rho)/M) sigma2`` per M."""
    if rho > 1.0 + 1e-12:
        raise ValueError("rho must be <= 1")
    out = []
    for m in m_values:
        m = int(m)
        if m < 1:
            raise ValueError("sample counts must be >= 1")
        if m > 1 and rho <= -1.0 / (m - 1):
            raise ValueError(f"rho={rho} is outside the PSD range for M={m}")
        out.append((rho + (1.0 - rho) / m) * sigma2)
    return np.asarray(out)


def sample_equicorrelated(
    m: int, rho: float, sigma2: float, n_draws: int, rng: np.random.Generator
) -> np.ndarray:
    """(m, n_draws) Gaussian error channels with equicorrelated covariance."""
    variance_curve(rho, sigma2, [m])  # validates the PSD range
    r = sigma2 * ((1.0 - rho) * np.eye(m) + rho * np.ones((m, m)))
    eigvals, eigvecs = np.linalg.eigh(r)
    root = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))
    return root @ rng.standard_normal((m, n_draws))


def _detector_marginals(detector, problems) -> np.ndarray:
    many = getattr(detector, "marginals_many", None)
    if many is not None:
        return np.asarray(many(problems))
    return np.stack([np.asarray(detector(p).marginals) for p in problems])


def _detector_soft(detector, problems) -> np.ndarray:
    many = getattr(detector, "marginals_many", None)
    if many is not None:
        pts = problems[0].constellation.points
        return np.asarray(many(problems)) @ pts
    return np.stack([detector(p).soft_symbols for p in problems])


def collect_channel_marginals(detector, problems, transform_sets) -> np.ndarray:
    """Back-mapped marginals, shape (M, n_problems, n_layers, order).

    ``transform_sets[i]`` lists the M transforms applied to ``problems[i]``.
    """
    n_problems = len(problems)
    n_channels = len(transform_sets[0])
    const = problems[0].constellation
    out = np.empty((n_channels, n_problems, problems[0].n_tx, const.order))
    for ch in range(n_channels):
        transformed = [
            apply_transform(transform_sets[i][ch], problems[i]).problem for i in range(n_problems)
        ]
        marg = _detector_marginals(detector, transformed)
        first = transform_sets[0][ch]
        if all(ts[ch] is first for ts in transform_sets):
            out[ch] = backmap_marginals(first, marg, const)
        else:
            for i in range(n_problems):
                out[ch, i] = backmap_marginals(transform_sets[i][ch], marg[i], const)
    return out


def collect_channel_soft(detector, problems, transform_sets) -> np.ndarray:
    """Back-mapped soft symbol estimates, shape (M, n_problems, n_layers)."""
    n_problems = len(problems)
    n_channels = len(transform_sets[0])
    n_layers = problems[0].n_tx
    out = np.empty((n_channels, n_problems, n_layers), dtype=complex)
    for ch in range(n_channels):
        transformed = [
            apply_transform(transform_sets[i][ch], problems[i]).problem for i in range(n_problems)
        ]
        soft = _detector_soft(detector, transformed)
        first = transform_sets[0][ch]
        if all(ts[ch] is first for ts in transform_sets):
            out[ch] = backmap_soft_values(first, soft, n_layers)
        else:
            for i in range(n_problems):
                out[ch, i] = backmap_soft_values(transform_sets[i][ch], soft[i], n_layers)
    return out


def problems_and_transform_sets(
    sim_config: SimConfig,
    transform_tags,
    n_problems: int,
    seed: int | None = None,
    snr_db: float | None = None,
    start_trial: int = 0,
):
    """Problem stream plus per-problem realized transform sets.

    Random transform parameters come from the (seed, "transform", trial)
    stream, so the realization per trial is shared by every consumer.
    """
    seed = sim_config.master_seed if seed is None else seed
    problems, tsets = [], []
    for i in range(n_problems):
        trial = start_trial + i
        p = problem_for_trial(sim_config, trial, snr_db=snr_db)
        problems.append(p)
        tsets.append(realize_transform_set(transform_tags, p, stream_rng(seed, "transform", trial)))
    return problems, tsets


def pooled_errors(soft: np.ndarray, problems) -> np.ndarray:
    """Scalar error observations per channel, shape (M, K).

    Real and imaginary parts of every layer error are pooled as separate
    observations (imaginary only for complex models).
    """
    truth = np.stack([p.true_values() for p in problems])
    z = soft - truth[None, :, :]
    n_channels = z.shape[0]
    parts = [z.real.reshape(n_channels, -1)]
    if problems[0].is_complex:
        parts.append(z.imag.reshape(n_channels, -1))
    return np.concatenate(parts, axis=1)


def error_stats_from_samples(zz: np.ndarray) -> ErrorStats:
    """Unbiased covariance/correlation summary of pooled error samples."""
    zz = np.atleast_2d(np.asarray(zz, dtype=float))
    m = zz.shape[0]
    r = np.atleast_2d(np.cov(zz, ddof=1))
    diag = np.diag(r).copy()
    degenerate = bool((diag <= 0).any())
    std = np.sqrt(np.where(diag > 0, diag, 1.0))
    rho = r / np.outer(std, std)
    if degenerate:
        bad = diag <= 0
        rho[bad, :] = 1.0
        rho[:, bad] = 1.0
    np.fill_diagonal(rho, 1.0)
    return ErrorStats(
        m=m,
        r=r,
        sigma2=float(diag.mean()),
        rho=rho,
        mean_error=zz.mean(axis=1),
        n_obs=zz.shape[1],
        degenerate=degenerate,
    )


def estimate_error_covariance(
    detector,
    transform_tags,
    sim_config: SimConfig,
    n_obs: int,
    seed: int | None = None,
) -> ErrorStats:
    """Measure the cross-channel error covariance on labeled problems."""
    if n_obs < 100:
        raise ValueError("need n_obs >= 100 problems for a usable covariance")
    problems, tsets = problems_and_transform_sets(sim_config, transform_tags, n_obs, seed=seed)
    soft = collect_channel_soft(detector, problems, tsets)
    return error_stats_from_samples(pooled_errors(soft, problems))


def _resolve_weights(weights, n_channels: int) -> np.ndarray:
    if weights is None:
        return np.full(n_channels, 1.0 / n_channels)
    if isinstance(weights, ErrorStats):
        weights = optimal_weights(weights.r)
    if isinstance(weights, CombinerWeights):
        beta = np.asarray(weights.beta, dtype=float)
    else:
        beta = np.asarray(weights, dtype=float)
    if beta.shape != (n_channels,):
        raise ValueError("weights must have one entry per transform channel")
    if abs(beta.sum() - 1.0) > 1e-9:
        raise ValueError("weights must sum to 1")
    return beta


def resample_detect(
    detector,
    problem: MimoProblem,
    transforms,
    weights=None,
    domain: str = "marginal",
    rng: np.random.Generator | None = None,
) -> SoftOutput:
    """Detect through every transform channel and combine the outputs.

    ``weights`` may be None (uniform), an ErrorStats (optimal weights are
    derived from its covariance), a CombinerWeights, or a plain vector.
    Combining domains: "marginal" averages marginal matrices, "llr" sums
    weighted LLRs and rebuilds product marginals, "soft_symbol" combines
    the soft estimates and quantizes to the nearest point.
    """
    transforms = list(transforms)
    if not transforms:
        raise ValueError("the transform set must be non-empty")
    tset = realize_transform_set(transforms, problem, rng)
    beta = _resolve_weights(weights, len(tset))
    const = problem.constellation
    if domain == "marginal":
        marg = collect_channel_marginals(detector, [problem], [tset])[:, 0]
        combined = np.tensordot(beta, marg, axes=1)
        return SoftOutput(combined, const)
    if domain == "llr":
        marg = collect_channel_marginals(detector, [problem], [tset])[:, 0]
        llrs = np.stack([marginals_to_llrs(m, const.bit_labels) for m in marg])
        combined = np.tensordot(beta, llrs, axes=1)
        return SoftOutput(llrs_to_marginals(combined, const.bit_labels), const)
    if domain == "soft_symbol":
        soft = collect_channel_soft(detector, [problem], [tset])[:, 0]
        combined = np.tensordot(beta, soft, axes=1)
        return soft_output_from_symbols(combined, const, keep_values=False)
    raise ValueError(f"unknown combining domain {domain!r}")


def epistemic_variance(
    detector,
    problem: MimoProblem,
    transforms,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-layer spread of the back-mapped soft estimates across channels.

    Zero for an exactly equivariant detector; strictly positive spread is
    the signature of imperfect learning that combining can average out.
    """
    transforms = list(transforms)
    if len(transforms) < 2:
        raise ValueError("need at least two transform channels")
    tset = realize_transform_set(transforms, problem, rng)
    soft = collect_channel_soft(detector, [problem], [tset])[:, 0]
    centered = soft - soft.mean(axis=0, keepdims=True)
    return np.mean(np.abs(centered) ** 2, axis=0)
