"""Reference detectors: exhaustive ML/MAP, LMMSE, and QRM K-best.

Every detector returns a :class:`SoftOutput` whose ground truth is the
per-layer marginal matrix; hard decisions, soft symbol estimates and
per-bit LLRs are derived views, so the documented consistency relations
hold by construction.
"""

import hashlib
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy.special import logsumexp

from .mimo_model import Constellation, MimoProblem, stream_rng

__all__ = [
    "ErrorCounts",
    "ExhaustiveBudgetError",
    "LLR_CLAMP",
    "SoftOutput",
    "SyntheticCorrelatedDetector",
    "count_errors",
    "detect_lmmse",
    "detect_ml",
    "detect_qrm",
    "get_detector",
    "llrs_to_marginals",
    "marginals_to_llrs",
    "soft_output_from_symbols",
]

LLR_CLAMP = 40.0
DEFAULT_ML_BUDGET = 2**20

_LOG_FLOOR = 1e-300


class ExhaustiveBudgetError(ValueError):
    """The exhaustive search space exceeds the configured budget."""


def marginals_to_llrs(marginals: np.ndarray, bit_labels: np.ndarray, clamp: float = LLR_CLAMP):
    """Per-bit LLRs ``log p(bit=0) - log p(bit=1)`` from symbol marginals."""
    logm = np.log(np.maximum(marginals, _LOG_FLOOR))
    n_bits = bit_labels.shape[1]
    llrs = np.empty(marginals.shape[:-1] + (n_bits,))
    for k in range(n_bits):
        mask0 = bit_labels[:, k] == 0
        llrs[..., k] = logsumexp(logm[..., mask0], axis=-1) - logsumexp(
            logm[..., ~mask0], axis=-1
        )
    return np.clip(llrs, -clamp, clamp)


def llrs_to_marginals(llrs: np.ndarray, bit_labels: np.ndarray) -> np.ndarray:
    """Product-form symbol marginals from per-bit LLRs.

    Assumes per-bit independence, which is exact when the LLRs came from
    product-form marginals (and in particular round-trips them).
    """
    llrs = np.asarray(llrs, dtype=float)
    logp0 = -np.logaddexp(0.0, -llrs)
    logp1 = -np.logaddexp(0.0, llrs)
    labels = bit_labels.astype(float)
    logm = logp0 @ (1.0 - labels.T) + logp1 @ labels.T
    logm -= logsumexp(logm, axis=-1, keepdims=True)
    return np.exp(logm)


@dataclass(eq=False)
class SoftOutput:
    """Per-layer posterior marginals with derived hard/soft/LLR views.

    ``soft_values`` is normally None and the soft symbols are the marginal
    expectations.  Synthetic error channels may pin explicit estimates that
    a valid marginal matrix cannot represent (outside the point hull).
    """

    marginals: np.ndarray
    constellation: Constellation
    soft_values: np.ndarray | None = None

    def __post_init__(self):
        m = np.asarray(self.marginals, dtype=float)
        if m.ndim != 2 or m.shape[1] != self.constellation.order:
            raise ValueError("marginals must be (n_layers, order)")
        if not np.isfinite(m).all() or (m < -1e-9).any():
            raise ValueError("marginals must be finite and nonnegative")
        m = np.clip(m, 0.0, None)
        sums = m.sum(axis=1, keepdims=True)
        if (sums <= 0).any():
            raise ValueError("each marginal row needs positive mass")
        self.marginals = m / sums

    @property
    def n_layers(self) -> int:
        return self.marginals.shape[0]

    @cached_property
    def hard(self) -> np.ndarray:
        return self.marginals.argmax(axis=1)

    @cached_property
    def soft_symbols(self) -> np.ndarray:
        if self.soft_values is not None:
            return self.soft_values
        return self.marginals @ self.constellation.points

    @cached_property
    def llrs(self) -> np.ndarray:
        return marginals_to_llrs(self.marginals, self.constellation.bit_labels)


def _one_hot_rows(indices: np.ndarray, order: int) -> np.ndarray:
    rows = np.zeros((len(indices), order))
    rows[np.arange(len(indices)), indices] = 1.0
    return rows


def soft_output_from_symbols(values, constellation: Constellation, keep_values: bool = True):
    """SoftOutput whose marginal expectation matches ``values``.

    Each axis value is written as a two-point mixture of its bracketing
    amplitude levels (clipped to the hull).  With ``keep_values`` the exact
    estimates, clipped or not, stay available through ``soft_symbols``.
    """
    values = np.asarray(values, dtype=complex)
    if constellation.kind == "qam":
        axis = constellation.axis
        rows_i = _axis_mixture(values.real, axis.points.real)
        rows_q = _axis_mixture(values.imag, axis.points.real)
        marg = (rows_i[:, :, None] * rows_q[:, None, :]).reshape(len(values), -1)
    else:
        marg = _axis_mixture(values.real, constellation.points.real)
    return SoftOutput(marg, constellation, soft_values=values if keep_values else None)


def _axis_mixture(x: np.ndarray, levels: np.ndarray) -> np.ndarray:
    x = np.clip(x, levels[0], levels[-1])
    hi = np.clip(np.searchsorted(levels, x), 1, len(levels) - 1)
    lo = hi - 1
    w_hi = (x - levels[lo]) / (levels[hi] - levels[lo])
    rows = np.zeros((len(x), len(levels)))
    rows[np.arange(len(x)), lo] = 1.0 - w_hi
    rows[np.arange(len(x)), hi] += w_hi
    return rows


@lru_cache(maxsize=8)
def _candidate_indices(order: int, n_tx: int) -> np.ndarray:
    """All index tuples, row c = (j_0 .. j_{n-1}) with j_0 varying slowest."""
    grids = np.indices((order,) * n_tx)
    out = grids.reshape(n_tx, -1).T.copy()
    out.setflags(write=False)
    return out


def detect_ml(problem: MimoProblem, mode: str = "full_posterior", budget: int = DEFAULT_ML_BUDGET):
    """Exhaustive detection over the full symbol lattice.

    ``full_posterior`` sums ``exp(-||y - H s||^2 / noise_var)`` over all
    candidates into exact marginals (flat prior, so MAP = ML);  ``max_log``
    keeps per-symbol minimum metrics instead of sums.
    """
    const = problem.constellation
    order, n = const.order, problem.n_tx
    if order**n > budget:
        raise ExhaustiveBudgetError(
            f"{order}^{n} candidates exceed the exhaustive budget {budget}"
        )
    if mode not in ("full_posterior", "max_log"):
        raise ValueError(f"unknown mode {mode!r}")
    idx = _candidate_indices(order, n)
    vals = problem.symbol_values(idx)
    resid = problem.y[None, :] - vals @ problem.h.T
    metrics = np.abs(resid) ** 2 @ np.ones(problem.n_rx)
    scale = problem.metric_scale
    if scale == 0.0:
        return SoftOutput(_one_hot_rows(idx[int(metrics.argmin())], order), const)
    tensor = (-metrics / scale).reshape((order,) * n)
    rows = np.empty((n, order))
    for m in range(n):
        axes = tuple(a for a in range(n) if a != m)
        if not axes:
            rows[m] = tensor
        elif mode == "full_posterior":
            rows[m] = logsumexp(tensor, axis=axes)
        else:
            rows[m] = tensor.max(axis=axes)
    rows -= logsumexp(rows, axis=1, keepdims=True)
    return SoftOutput(np.exp(rows), const)


def detect_lmmse(problem: MimoProblem) -> SoftOutput:
    """Linear MMSE equalization followed by per-layer Gaussian demapping."""
    const = problem.constellation
    h, y = problem.h, problem.y
    es = const.avg_energy
    gram = h.conj().T @ h + (problem.noise_var / es) * np.eye(problem.n_tx)
    try:
        filt = np.linalg.solve(gram, h.conj().T)
    except np.linalg.LinAlgError as exc:
        raise ValueError("LMMSE needs noise_var > 0 or a full-rank channel") from exc
    s_lin = filt @ y
    bias = filt @ h
    mu = np.diag(bias).copy()
    interf = es * (np.abs(bias) ** 2).sum(axis=1) - es * np.abs(mu) ** 2
    nu = interf + problem.noise_var * (np.abs(filt) ** 2).sum(axis=1)
    pts = problem.symbol_values(np.arange(const.order))
    sq_err = np.abs(s_lin[:, None] - mu[:, None] * pts[None, :]) ** 2
    divisor = nu if problem.is_complex else 2.0 * nu
    if (divisor <= 0).any():
        hard = const.nearest_index(s_lin / np.where(mu == 0, 1.0, mu))
        return SoftOutput(_one_hot_rows(hard, const.order), const)
    rows = -sq_err / divisor[:, None]
    rows -= logsumexp(rows, axis=1, keepdims=True)
    return SoftOutput(np.exp(rows), const)


def detect_qrm(problem: MimoProblem, k_best: int) -> SoftOutput:
    """Breadth-first K-best search on the QR-triangularized system.

    Columns are sorted by ascending norm before the QR step; survivor
    metrics give max-log marginals, with missing counter-hypotheses backed
    off to the worst survivor plus the LLR clamp margin.
    """
    if k_best < 1:
        raise ValueError("k_best must be >= 1")
    if problem.n_rx < problem.n_tx:
        raise ValueError("K-best needs n_rx >= n_tx")
    const = problem.constellation
    order, n = const.order, problem.n_tx
    col_order = np.argsort(np.linalg.norm(problem.h, axis=0), kind="stable")
    q, r = np.linalg.qr(problem.h[:, col_order])
    z = q.conj().T @ problem.y
    pts = problem.symbol_values(np.arange(order))

    surv_idx = np.empty((1, 0), dtype=np.intp)
    surv_metric = np.zeros(1)
    for layer in range(n - 1, -1, -1):
        if surv_idx.shape[1]:
            coeff = r[layer, layer + 1 :][::-1]  # survivor columns hold layers n-1 .. layer+1
            pred = z[layer] - pts[surv_idx] @ coeff
        else:
            pred = np.full(1, z[layer])
        cand = surv_metric[:, None] + np.abs(pred[:, None] - r[layer, layer] * pts[None, :]) ** 2
        flat = cand.ravel()
        keep = flat.argsort(kind="stable")[:k_best]
        surv_metric = flat[keep]
        parent, sym = np.divmod(keep, order)
        surv_idx = np.concatenate([surv_idx[parent], sym[:, None]], axis=1)

    leaf_idx = surv_idx[:, ::-1]  # column i now holds sorted layer i
    scale = problem.metric_scale
    inv_order = np.argsort(col_order)
    if scale == 0.0:
        best_leaf = leaf_idx[int(surv_metric.argmin())]
        return SoftOutput(_one_hot_rows(best_leaf, order)[inv_order], const)
    best = np.full((n, order), np.inf)
    for layer in range(n):
        np.minimum.at(best[layer], leaf_idx[:, layer], surv_metric)
    fallback = surv_metric.max() + LLR_CLAMP * scale
    best = np.where(np.isfinite(best), best, fallback)
    rows = -(best - best.min(axis=1, keepdims=True)) / scale
    rows -= logsumexp(rows, axis=1, keepdims=True)
    return SoftOutput(np.exp(rows)[inv_order], const)


@dataclass(frozen=True)
class ErrorCounts:
    symbol_errors: int = 0
    bit_errors: int = 0
    n_symbols: int = 0
    n_bits: int = 0

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(
            self.symbol_errors + other.symbol_errors,
            self.bit_errors + other.bit_errors,
            self.n_symbols + other.n_symbols,
            self.n_bits + other.n_bits,
        )

    @property
    def ser(self) -> float:
        return self.symbol_errors / self.n_symbols if self.n_symbols else 0.0

    @property
    def ber(self) -> float:
        return self.bit_errors / self.n_bits if self.n_bits else 0.0


def count_errors(output, s_true, bit_labels: np.ndarray) -> ErrorCounts:
    """Symbol and bit error counts of a hard decision against the labels."""
    hard = output.hard if isinstance(output, SoftOutput) else np.asarray(output)
    s_true = np.asarray(s_true)
    if hard.shape != s_true.shape:
        raise ValueError("decision and label shapes differ")
    sym = int(np.count_nonzero(hard != s_true))
    bits = int(np.count_nonzero(bit_labels[hard] != bit_labels[s_true]))
    return ErrorCounts(sym, bits, s_true.size, s_true.size * bit_labels.shape[1])


class _FunctionDetector:
    """Callable detector with a stable name for result rows."""

    def __init__(self, name, fn):
        self.name = name
        self._fn = fn

    def __call__(self, problem: MimoProblem) -> SoftOutput:
        return self._fn(problem)

    def __repr__(self):
        return f"<detector {self.name}>"


class SyntheticCorrelatedDetector:
    """Truth plus Gaussian error split into a shared and a per-input part.

    The shared component is keyed on |y|, which coincides for an input and
    its negation, so over the {identity, neg} transform pair the emitted
    error channels have correlation ``rho`` and per-part variance
    ``sigma2``.  A self-check tool, not a receiver.
    """

    def __init__(self, rho: float, sigma2: float, seed: int = 0):
        if not 0.0 <= rho <= 1.0:
            raise ValueError("rho must be in [0, 1]")
        self.rho = float(rho)
        self.sigma2 = float(sigma2)
        self.seed = int(seed)
        self.name = f"synthetic:rho={rho:g},sigma2={sigma2:g}"

    def _rng(self, payload: bytes) -> np.random.Generator:
        digest = hashlib.blake2s(payload + self.seed.to_bytes(8, "little")).digest()
        return np.random.Generator(
            np.random.Philox(np.random.SeedSequence(int.from_bytes(digest[:16], "little")))
        )

    def _noise(self, rng, n):
        scale = np.sqrt(self.sigma2)
        return scale * (rng.standard_normal(n) + 1j * rng.standard_normal(n))

    def __call__(self, problem: MimoProblem) -> SoftOutput:
        truth = problem.true_values()
        n = problem.n_tx
        shared = self._noise(self._rng(np.abs(problem.y).tobytes()), n)
        own = self._noise(self._rng(np.ascontiguousarray(problem.y).tobytes()), n)
        eps = np.sqrt(self.rho) * shared + np.sqrt(1.0 - self.rho) * own
        return soft_output_from_symbols(truth + eps, problem.constellation)


def get_detector(tag: str, budget: int = DEFAULT_ML_BUDGET):
    """Detector factory for config tags.

    Supported: "ml", "lmmse", "qrm:<k>", "neural:<model-path>", and
    "synthetic:rho=<r>,sigma2=<v>[,seed=<s>]" for combining self-checks.
    """
    if tag == "ml":
        return _FunctionDetector("ml", lambda p: detect_ml(p, budget=budget))
    if tag == "lmmse":
        return _FunctionDetector("lmmse", detect_lmmse)
    if tag.startswith("qrm:"):
        k = int(tag.split(":", 1)[1])
        return _FunctionDetector(f"qrm:{k}", lambda p: detect_qrm(p, k))
    if tag.startswith("neural:"):
        from .neural_detector import NeuralDetector, load_model

        return NeuralDetector(load_model(tag.split(":", 1)[1]))
    if tag.startswith("synthetic:"):
        params = dict(kv.split("=") for kv in tag.split(":", 1)[1].split(","))
        return SyntheticCorrelatedDetector(
            rho=float(params["rho"]),
            sigma2=float(params["sigma2"]),
            seed=int(params.get("seed", 0)),
        )
    raise ValueError(f"unknown detector tag {tag!r}")
