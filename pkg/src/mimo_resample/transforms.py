"""Distribution-preserving problem transformations with exact estimate back-maps.

Each transform rewrites ``(y, H)`` into an equivalent detection problem and
induces a symbol map ``q`` on the transmit vector.  The map factors into an
elementwise point map ``v`` and a layer reorder ``p``: ``q(s) = v(s)[p]``.
Back-maps invert both parts exactly, so outputs computed on a transformed
problem can be compared, or combined, in the original coordinates.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .mimo_model import (
    ClosureError,
    Constellation,
    MimoProblem,
    SimConfig,
    problem_for_trial,
    stream_rng,
)

__all__ = [
    "ComposedTransform",
    "ConjugateRotatedTransform",
    "ConjugateTransform",
    "IdentityTransform",
    "InvariantTransform",
    "InvarianceReport",
    "NegationTransform",
    "PermutationTransform",
    "ScalingTransform",
    "TransformError",
    "TransformedProblem",
    "UnitaryTransform",
    "apply_transform",
    "backmap_estimate",
    "backmap_llrs",
    "backmap_marginals",
    "compose",
    "induced_llr_map",
    "random_unitary",
    "realize_transform",
    "realize_transform_set",
    "verify_invariance",
]

TRANSFORM_TAGS = ("identity", "neg", "conj", "conj_rot", "perm", "unitary")


class TransformError(ValueError):
    """Transform incompatible with the problem it is applied to."""


class InvariantTransform:
    """Base transform: identity on everything."""

    name = "identity"

    def map_problem(self, h: np.ndarray, y: np.ndarray):
        return h, y

    def map_points(self, values):
        """Elementwise symbol value map ``v``."""
        return np.asarray(values)

    def unmap_points(self, values):
        """Inverse of :meth:`map_points`."""
        return np.asarray(values)

    def layer_perm(self, n_layers: int) -> np.ndarray:
        """Index array ``p``: transformed layer ``i`` estimates original layer ``p[i]``."""
        return np.arange(n_layers)

    def index_table(self, constellation: Constellation) -> np.ndarray:
        """Point-index permutation ``pi`` with ``points[pi[k]] = v(points[k])``."""
        cache = self.__dict__.setdefault("_index_tables", {})
        key = id(constellation)
        if key not in cache:
            cache[key] = constellation.closed_index_map(self.map_points(constellation.points))
        return cache[key]

    def __repr__(self):
        return f"<transform {self.name}>"


class IdentityTransform(InvariantTransform):
    pass


class NegationTransform(InvariantTransform):
    """(-y, -H); the induced symbol map is the identity."""

    name = "neg"

    def map_problem(self, h, y):
        return -h, -y


class ConjugateTransform(InvariantTransform):
    """(y*, H*) with symbol map s -> s*."""

    name = "conj"

    def map_problem(self, h, y):
        return h.conj(), y.conj()

    def map_points(self, values):
        return np.conj(values)

    def unmap_points(self, values):
        return np.conj(values)


class ConjugateRotatedTransform(InvariantTransform):
    """(y*, phase * H*) with symbol map s -> s* / phase.

    With the default phase ``1j`` this maps any square QAM onto itself.
    """

    name = "conj_rot"

    def __init__(self, phase: complex = 1j):
        if abs(abs(phase) - 1.0) > 1e-12:
            raise TransformError("phase must have unit modulus")
        self.phase = complex(phase)

    def map_problem(self, h, y):
        return self.phase * h.conj(), y.conj()

    def map_points(self, values):
        return np.conj(values) / self.phase

    def unmap_points(self, values):
        return np.conj(np.asarray(values) * self.phase)


class PermutationTransform(InvariantTransform):
    """(y, H P^T) relabeling transmit layers: new layer i carries old layer perm[i]."""

    name = "perm"

    def __init__(self, perm):
        perm = np.asarray(perm, dtype=np.intp)
        if sorted(perm.tolist()) != list(range(perm.size)):
            raise TransformError("perm must be a bijection on the layer indices")
        self.perm = perm
        self._inverse = np.argsort(perm)

    def map_problem(self, h, y):
        if h.shape[1] != self.perm.size:
            raise TransformError("permutation length does not match n_tx")
        return h[:, self.perm], y

    def layer_perm(self, n_layers):
        if n_layers != self.perm.size:
            raise TransformError("permutation length does not match the layer count")
        return self.perm


class UnitaryTransform(InvariantTransform):
    """(Q y, Q H) for a unitary Q; the symbol map is the identity."""

    name = "unitary"

    def __init__(self, q):
        q = np.asarray(q)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise TransformError("q must be square")
        if np.abs(q.conj().T @ q - np.eye(q.shape[0])).max() > 1e-10:
            raise TransformError("q is not unitary")
        self.q = q

    def map_problem(self, h, y):
        if h.shape[0] != self.q.shape[0]:
            raise TransformError("unitary size does not match n_rx")
        return self.q @ h, self.q @ y


class ScalingTransform(InvariantTransform):
    """(c y, c H): equivariant but NOT invariant; negative control for checks."""

    def __init__(self, factor: float = 2.0):
        self.factor = float(factor)
        self.name = f"scale:{self.factor:g}"

    def map_problem(self, h, y):
        return self.factor * h, self.factor * y


class ComposedTransform(InvariantTransform):
    """Apply ``inner`` first, then ``outer``."""

    def __init__(self, outer: InvariantTransform, inner: InvariantTransform):
        self.outer = outer
        self.inner = inner
        self.name = f"{outer.name}*{inner.name}"

    def map_problem(self, h, y):
        return self.outer.map_problem(*self.inner.map_problem(h, y))

    def map_points(self, values):
        return self.outer.map_points(self.inner.map_points(values))

    def unmap_points(self, values):
        return self.inner.unmap_points(self.outer.unmap_points(values))

    def layer_perm(self, n_layers):
        return self.inner.layer_perm(n_layers)[self.outer.layer_perm(n_layers)]


def compose(outer: InvariantTransform, inner: InvariantTransform) -> ComposedTransform:
    return ComposedTransform(outer, inner)


# Stateless transforms are shared so batched code can detect identical channels.
_SINGLETONS = {
    "identity": IdentityTransform(),
    "neg": NegationTransform(),
    "conj": ConjugateTransform(),
    "conj_rot": ConjugateRotatedTransform(1j),
}


def realize_transform(tag, problem: MimoProblem | None = None, rng=None) -> InvariantTransform:
    """Turn a config tag into a concrete transform.

    "perm" and "unitary" draw their random parameter from ``rng`` and need
    the problem for its dimensions; the other tags are fixed singletons.
    """
    if isinstance(tag, InvariantTransform):
        return tag
    if tag in _SINGLETONS:
        return _SINGLETONS[tag]
    if tag == "perm":
        if problem is None or rng is None:
            raise TransformError("perm needs a problem and an rng to draw from")
        return PermutationTransform(rng.permutation(problem.n_tx))
    if tag == "unitary":
        if problem is None or rng is None:
            raise TransformError("unitary needs a problem and an rng to draw from")
        return UnitaryTransform(random_unitary(problem.n_rx, rng))
    if isinstance(tag, str) and tag.startswith("scale:"):
        return ScalingTransform(float(tag.split(":", 1)[1]))
    raise TransformError(f"unknown transform tag {tag!r}")


def realize_transform_set(tags, problem: MimoProblem | None = None, rng=None):
    return [realize_transform(t, problem, rng) for t in tags]


@dataclass(frozen=True)
class TransformedProblem:
    problem: MimoProblem
    source: InvariantTransform


def apply_transform(transform: InvariantTransform, problem: MimoProblem) -> TransformedProblem:
    """Transformed problem; labels are mapped so it stays self-consistent."""
    h2, y2 = transform.map_problem(problem.h, problem.y)
    s2 = None
    if problem.s_true is not None:
        pi = transform.index_table(problem.constellation)
        p = transform.layer_perm(problem.n_tx)
        s2 = pi[problem.s_true][p]
    inner = MimoProblem(
        h=h2, y=y2, noise_var=problem.noise_var, constellation=problem.constellation, s_true=s2
    )
    return TransformedProblem(problem=inner, source=transform)


def backmap_marginals(
    transform: InvariantTransform, marginals: np.ndarray, constellation: Constellation
) -> np.ndarray:
    """Marginals of a transformed-problem output, in original coordinates.

    Works on a single (n_layers, order) matrix or any batch stacked in
    leading dimensions.
    """
    pi = transform.index_table(constellation)
    n_layers = marginals.shape[-2]
    inv = np.argsort(transform.layer_perm(n_layers))
    return np.ascontiguousarray(marginals[..., pi][..., inv, :])


def backmap_soft_values(
    transform: InvariantTransform, values: np.ndarray, n_layers: int | None = None
) -> np.ndarray:
    """Soft symbol estimates mapped back through ``q^{-1}`` and layer reorder."""
    values = np.asarray(values)
    n = values.shape[-1] if n_layers is None else n_layers
    inv = np.argsort(transform.layer_perm(n))
    return transform.unmap_points(values)[..., inv]


def backmap_estimate(transform: InvariantTransform, output, constellation=None):
    """Back-map a transformed-problem output into original coordinates.

    Accepts a SoftOutput (marginal permutation), an integer hard-index
    vector (needs ``constellation``), or a vector of soft symbol values.
    """
    from .detectors import SoftOutput  # local import, detectors depends on us

    if isinstance(output, SoftOutput):
        marg = backmap_marginals(transform, output.marginals, output.constellation)
        soft = None
        if output.soft_values is not None:
            soft = backmap_soft_values(transform, output.soft_values)
        return SoftOutput(marg, output.constellation, soft_values=soft)
    arr = np.asarray(output)
    if np.issubdtype(arr.dtype, np.integer):
        if constellation is None:
            raise ValueError("hard-index back-map needs the constellation")
        pi_inv = np.argsort(transform.index_table(constellation))
        inv = np.argsort(transform.layer_perm(arr.shape[-1]))
        return pi_inv[arr][..., inv]
    return backmap_soft_values(transform, arr)


def induced_llr_map(transform: InvariantTransform, constellation: Constellation):
    """Per-bit LLR back-map derived from the point-index table.

    Returns ``(src, sign)`` such that original bit ``k`` has
    ``llr[:, k] = sign[k] * transformed_llr[:, src[k]]`` (before the layer
    reorder).  Raises ClosureError when the induced label map is not a bit
    permutation with optional flips.
    """
    labels = constellation.bit_labels
    mapped = labels[transform.index_table(constellation)]
    n_bits = labels.shape[1]
    src = np.empty(n_bits, dtype=np.intp)
    sign = np.empty(n_bits)
    for k in range(n_bits):
        for kp in range(n_bits):
            if np.array_equal(labels[:, k], mapped[:, kp]):
                src[k], sign[k] = kp, 1.0
                break
            if np.array_equal(labels[:, k], 1 - mapped[:, kp]):
                src[k], sign[k] = kp, -1.0
                break
        else:
            raise ClosureError("induced label map is not bitwise affine")
    return src, sign


def backmap_llrs(
    transform: InvariantTransform, llrs: np.ndarray, constellation: Constellation
) -> np.ndarray:
    """LLR matrix of a transformed-problem output, in original coordinates."""
    src, sign = induced_llr_map(transform, constellation)
    inv = np.argsort(transform.layer_perm(llrs.shape[-2]))
    return (sign * llrs[..., src])[..., inv, :]


def random_unitary(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed unitary: QR of a complex Ginibre matrix, phase-fixed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / np.sqrt(2.0)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


@dataclass(frozen=True)
class QuantityCheck:
    quantity: str
    statistic: float
    p_value: float
    passed: bool


@dataclass(frozen=True)
class InvarianceReport:
    transform: str
    n_samples: int
    alpha: float
    checks: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "transform": self.transform,
            "n_samples": self.n_samples,
            "alpha": self.alpha,
            "passed": self.passed,
            "checks": [
                {
                    "quantity": c.quantity,
                    "statistic": c.statistic,
                    "p_value": c.p_value,
                    "passed": c.passed,
                }
                for c in self.checks
            ],
        }


def _problem_pools(problem: MimoProblem):
    noise = problem.y - problem.h @ problem.symbol_values(problem.s_true)
    symbols = problem.symbol_values(problem.s_true)
    return problem.h, symbols, noise


def verify_invariance(
    tag,
    sim_config: SimConfig,
    n_samples: int,
    alpha: float = 0.01,
    seed: int | None = None,
) -> InvarianceReport:
    """Two-sample KS checks of transformed H entries, symbols and noise.

    The transformed group uses trials ``0..n-1``, the untransformed
    reference group the independent trials ``n..2n-1``.
    """
    if n_samples < 1000:
        raise ValueError("need n_samples >= 1000 for a meaningful KS check")
    seed = sim_config.master_seed if seed is None else seed
    name = tag.name if isinstance(tag, InvariantTransform) else str(tag)

    pools = {k: ([], []) for k in ("h", "symbols", "noise")}
    for i in range(n_samples):
        prob = problem_for_trial(sim_config, i)
        t = realize_transform(tag, prob, stream_rng(seed, "transform", i))
        tp = apply_transform(t, prob).problem
        for key, arr in zip(pools, _problem_pools(tp)):
            pools[key][0].append(np.asarray(arr).ravel())
        ref = problem_for_trial(sim_config, n_samples + i)
        for key, arr in zip(pools, _problem_pools(ref)):
            pools[key][1].append(np.asarray(arr).ravel())

    checks = []
    for key, (got, want) in pools.items():
        a = np.concatenate(got)
        b = np.concatenate(want)
        for part, pick in (("real", np.real), ("imag", np.imag)):
            res = stats.ks_2samp(pick(a), pick(b))
            checks.append(
                QuantityCheck(
                    quantity=f"{key}_{part}",
                    statistic=float(res.statistic),
                    p_value=float(res.pvalue),
                    passed=bool(res.pvalue >= alpha),
                )
            )
    return InvarianceReport(transform=name, n_samples=n_samples, alpha=alpha, checks=tuple(checks))
