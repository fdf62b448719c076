"""Linear MIMO link model: constellations, channels, noise, real embedding.

The complex baseband model is ``y = H s + n`` with ``H`` of shape
(n_rx, n_tx), i.i.d. unit-variance Rayleigh fading entries and circular
complex Gaussian noise of variance ``noise_var`` per entry.
"""

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "ClosureError",
    "Constellation",
    "MimoProblem",
    "SimConfig",
    "complex_to_real",
    "make_constellation",
    "problem_for_trial",
    "sample_channel",
    "snr_to_noise_var",
    "stream_rng",
    "transmit",
]

_SEED_MASK = (1 << 64) - 1


class ClosureError(ValueError):
    """A symbol map does not send the constellation onto itself."""


def _stream_key(tag: str) -> int:
    digest = hashlib.blake2s(tag.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream_rng(master_seed: int, tag: str, trial: int = 0) -> np.random.Generator:
    """Counter-based generator for one (master_seed, stream tag, trial) triple.

    Distinct tags give independent streams; identical triples reproduce
    bit-identical draws, which is what makes every simulation replayable.
    """
    entropy = (int(master_seed) & _SEED_MASK, _stream_key(tag), int(trial) & _SEED_MASK)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


@dataclass(frozen=True, eq=False)
class Constellation:
    """Symbol alphabet with Gray bit labels.

    ``points`` and ``bit_labels`` are aligned by symbol index.  For QAM,
    ``axis`` holds the PAM alphabet of one I/Q axis; the QAM index of the
    point ``pam[i] + 1j*pam[q]`` is ``i * side + q`` and its label is the
    I-axis bits followed by the Q-axis bits.
    """

    kind: str
    order: int
    points: np.ndarray
    bit_labels: np.ndarray
    avg_energy: float
    normalized: bool
    axis: "Constellation | None" = None

    @property
    def bits_per_symbol(self) -> int:
        return self.bit_labels.shape[1]

    @property
    def min_spacing(self) -> float:
        d = np.abs(self.points[:, None] - self.points[None, :])
        return float(d[d > 0].min())

    def nearest_index(self, values) -> np.ndarray:
        """Index of the closest point, ties broken toward the lowest index."""
        v = np.asarray(values)
        return np.argmin(np.abs(v[..., None] - self.points), axis=-1)

    def closed_index_map(self, mapped_points) -> np.ndarray:
        """Permutation ``pi`` with ``points[pi[k]] == mapped_points[k]``.

        Raises ClosureError unless ``mapped_points`` is exactly the point set
        (up to 1e-9 relative to the RMS point magnitude).
        """
        dist = np.abs(np.asarray(mapped_points)[:, None] - self.points[None, :])
        pi = dist.argmin(axis=1)
        tol = 1e-9 * max(math.sqrt(self.avg_energy), 1.0)
        hit = dist[np.arange(self.order), pi]
        if hit.max() > tol or len(np.unique(pi)) != self.order:
            raise ClosureError(
                f"symbol map does not preserve the {self.kind}{self.order} point set"
            )
        return pi


def _gray_bits(n_levels: int) -> np.ndarray:
    """Binary-reflected Gray labels for amplitude levels 0..n_levels-1."""
    n_bits = n_levels.bit_length() - 1
    codes = np.arange(n_levels)
    gray = codes ^ (codes >> 1)
    shifts = np.arange(n_bits - 1, -1, -1)
    return ((gray[:, None] >> shifts) & 1).astype(np.uint8)


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


@lru_cache(maxsize=None)
def make_constellation(kind: str, order: int, normalized: bool = False) -> Constellation:
    """Build a Gray-labeled PAM or square-QAM alphabet.

    Raw PAM levels are the odd integers +-1 .. +-(order-1); ``normalized``
    rescales the point set to unit average energy.
    """
    if order < 2 or order & (order - 1):
        raise ValueError(f"constellation order must be a power of two, got {order}")
    if kind == "pam":
        levels = 2.0 * np.arange(order) - (order - 1)
        scale = 1.0 / math.sqrt(float(np.mean(levels**2))) if normalized else 1.0
        points = (levels * scale).astype(np.complex128)
        labels = _gray_bits(order)
        axis = None
    elif kind == "qam":
        side = math.isqrt(order)
        if side * side != order or side < 2:
            raise ValueError(f"qam order must be a perfect square >= 4, got {order}")
        pam_levels = 2.0 * np.arange(side) - (side - 1)
        ii, qq = np.divmod(np.arange(order), side)
        raw = pam_levels[ii] + 1j * pam_levels[qq]
        scale = 1.0 / math.sqrt(float(np.mean(np.abs(raw) ** 2))) if normalized else 1.0
        points = raw * scale
        pam_bits = _gray_bits(side)
        labels = np.concatenate([pam_bits[ii], pam_bits[qq]], axis=1)
        axis_points = (pam_levels * scale).astype(np.complex128)
        _freeze(axis_points, pam_bits)
        axis = Constellation(
            kind="pam",
            order=side,
            points=axis_points,
            bit_labels=pam_bits,
            avg_energy=float(np.mean(np.abs(axis_points) ** 2)),
            normalized=normalized,
        )
    else:
        raise ValueError(f"unknown constellation kind {kind!r}")
    _freeze(points, labels)
    return Constellation(
        kind=kind,
        order=order,
        points=points,
        bit_labels=labels,
        avg_energy=float(np.mean(np.abs(points) ** 2)),
        normalized=normalized,
        axis=axis,
    )


@dataclass(frozen=True)
class MimoProblem:
    """One realization of ``y = H s + n``.

    ``noise_var`` is the variance per observation entry: per complex entry
    for complex models, per real entry for the real-embedded ones produced
    by :func:`complex_to_real`.
    """

    h: np.ndarray
    y: np.ndarray
    noise_var: float
    constellation: Constellation
    s_true: np.ndarray | None = None

    def __post_init__(self):
        if self.h.ndim != 2 or self.y.shape != (self.h.shape[0],):
            raise ValueError("y must be a vector matching the rows of h")
        if self.s_true is not None and self.s_true.shape != (self.h.shape[1],):
            raise ValueError("s_true must match the columns of h")
        if self.noise_var < 0:
            raise ValueError("noise_var must be nonnegative")

    @property
    def n_rx(self) -> int:
        return self.h.shape[0]

    @property
    def n_tx(self) -> int:
        return self.h.shape[1]

    @property
    def is_complex(self) -> bool:
        return bool(np.iscomplexobj(self.h))

    @property
    def metric_scale(self) -> float:
        """Divisor turning ``||y - H s||^2`` into a negative log-likelihood."""
        return self.noise_var if self.is_complex else 2.0 * self.noise_var

    def symbol_values(self, indices) -> np.ndarray:
        vals = self.constellation.points[np.asarray(indices)]
        return vals if self.is_complex else vals.real

    def true_values(self) -> np.ndarray:
        if self.s_true is None:
            raise ValueError("problem carries no symbol labels")
        return self.symbol_values(self.s_true)


def sample_channel(n_rx: int, n_tx: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. circular complex Gaussian entries, zero mean, unit variance."""
    if n_rx < 1 or n_tx < 1:
        raise ValueError("channel dimensions must be >= 1")
    re = rng.standard_normal((n_rx, n_tx))
    im = rng.standard_normal((n_rx, n_tx))
    return (re + 1j * im) / math.sqrt(2.0)


def snr_to_noise_var(snr_db: float, constellation: Constellation, n_tx: int) -> float:
    """Per-entry noise variance for a given SNR in dB.

    Convention: SNR = total received signal power per receive antenna over
    noise power per receive antenna, so ``noise_var = n_tx * Es / 10^(SNR/10)``.
    """
    if not math.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    return n_tx * constellation.avg_energy / 10.0 ** (snr_db / 10.0)


def transmit(
    h: np.ndarray,
    s_indices,
    constellation: Constellation,
    noise_var: float,
    rng: np.random.Generator,
) -> MimoProblem:
    """Map symbol indices through the channel and add Gaussian noise."""
    s_idx = np.asarray(s_indices, dtype=np.intp)
    if s_idx.size and (s_idx.min() < 0 or s_idx.max() >= constellation.order):
        raise ValueError("symbol index out of range for the constellation")
    if noise_var < 0:
        raise ValueError("noise_var must be nonnegative")
    vals = constellation.points[s_idx]
    if np.iscomplexobj(h):
        clean = h @ vals
        re = rng.standard_normal(h.shape[0])
        im = rng.standard_normal(h.shape[0])
        noise = (re + 1j * im) * math.sqrt(noise_var / 2.0)
    else:
        clean = h @ vals.real
        noise = rng.standard_normal(h.shape[0]) * math.sqrt(noise_var)
    return MimoProblem(
        h=h, y=clean + noise, noise_var=noise_var, constellation=constellation, s_true=s_idx
    )


def complex_to_real(problem: MimoProblem) -> MimoProblem:
    """Real embedding with doubled dimensions.

    ``H' = [[Re H, -Im H], [Im H, Re H]]``, ``y' = [Re y; Im y]`` and each
    real noise entry carries half the complex per-entry variance.  Symbol
    labels carry over only for QAM (the real alphabet is the PAM axis);
    for other constellations the embedded problem is unlabeled.
    """
    if not problem.is_complex:
        raise ValueError("problem is already real-valued")
    h, y = problem.h, problem.y
    h_real = np.block([[h.real, -h.imag], [h.imag, h.real]])
    y_real = np.concatenate([y.real, y.imag])
    const = problem.constellation
    if const.kind == "qam":
        axis = const.axis
        s_real = None
        if problem.s_true is not None:
            side = axis.order
            s_real = np.concatenate([problem.s_true // side, problem.s_true % side])
    else:
        axis = const
        s_real = None
    return MimoProblem(
        h=h_real,
        y=y_real,
        noise_var=problem.noise_var / 2.0,
        constellation=axis,
        s_true=s_real,
    )


@dataclass(frozen=True)
class SimConfig:
    """Monte Carlo setup for one stream of problems."""

    n_rx: int
    n_tx: int
    order: int
    snr_db: float
    master_seed: int
    n_trials: int
    kind: str = "qam"
    normalized: bool = False

    def __post_init__(self):
        if not (self.n_rx >= self.n_tx >= 1):
            raise ValueError("need n_rx >= n_tx >= 1")
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")

    def constellation(self) -> Constellation:
        return make_constellation(self.kind, self.order, self.normalized)


def problem_for_trial(config: SimConfig, trial: int, snr_db: float | None = None) -> MimoProblem:
    """Deterministic problem for one trial index.

    Channel, symbols and noise come from disjoint RNG streams keyed on
    (master_seed, tag, trial), so the same trial sees the same realization
    at every SNR point and for every detector variant.
    """
    const = config.constellation()
    h = sample_channel(config.n_rx, config.n_tx, stream_rng(config.master_seed, "channel", trial))
    s_idx = stream_rng(config.master_seed, "symbols", trial).integers(0, const.order, config.n_tx)
    noise_var = snr_to_noise_var(config.snr_db if snr_db is None else snr_db, const, config.n_tx)
    return transmit(h, s_idx, const, noise_var, stream_rng(config.master_seed, "noise", trial))
