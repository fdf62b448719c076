"""Trainable feed-forward detector operating on the real-embedded model.

The network consumes the free real parameters of ``(y, H)`` and emits one
probability row per real layer over the PAM axis alphabet, which is exactly
the per-layer marginal structure the classical detectors expose (a QAM
layer is the product of its I and Q axes).  Deliberately small: its
residual imperfection is the epistemic error that resampling exploits.
"""

import base64
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .detectors import SoftOutput
from .mimo_model import (
    Constellation,
    MimoProblem,
    SimConfig,
    make_constellation,
    snr_to_noise_var,
    stream_rng,
)

__all__ = [
    "MODEL_FORMAT",
    "NeuralDetector",
    "NeuralModel",
    "TrainConfig",
    "TrainingDivergenceError",
    "generate_dataset",
    "infer",
    "load_model",
    "loss_and_gradients",
    "model_marginals",
    "problem_features",
    "save_model",
    "train",
]

MODEL_FORMAT = "mlp-detector-v1"

_ACTIVATIONS = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda a: (a > 0.0).astype(float)),
    "tanh": (np.tanh, lambda a: 1.0 - a**2),
}


class TrainingDivergenceError(RuntimeError):
    """Training loss left the finite range."""


@dataclass(frozen=True)
class TrainConfig:
    """System and optimizer settings for one training run."""

    n_rx: int
    n_tx: int
    order: int
    snr_db: float
    n_train: int
    batch_size: int
    epochs: int
    learning_rate: float
    seed: int
    hidden: tuple = (128, 128)
    momentum: float = 0.9
    activation: str = "relu"
    kind: str = "qam"
    normalized: bool = False
    include_noise_feature: bool = False

    def __post_init__(self):
        if min(self.n_train, self.batch_size, self.epochs) < 1:
            raise ValueError("n_train, batch_size and epochs must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.n_train < self.batch_size:
            raise ValueError("n_train must be at least one batch")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind != "qam":
            raise ValueError("the neural detector needs a QAM constellation")


@dataclass
class NeuralModel:
    """Feed-forward detector weights plus everything needed to reuse them.

    ``input_spec`` is the real-embedded shape (real rows, real layers, axis
    order); the output width is input_spec[1] * input_spec[2].
    """

    widths: list
    weights: list
    biases: list
    activation: str
    input_spec: tuple
    feature_energy: float
    include_noise_feature: bool
    train_meta: dict

    @property
    def complex_spec(self) -> tuple:
        rows, layers, side = self.input_spec
        return rows // 2, layers // 2, side * side


def problem_features(problem: MimoProblem, include_noise_feature: bool = False) -> np.ndarray:
    """Flattened real features Re(y), Im(y), Re(H), Im(H) over sqrt(Es * n_tx)."""
    scale = math.sqrt(problem.constellation.avg_energy * problem.n_tx)
    parts = [
        problem.y.real,
        problem.y.imag,
        problem.h.real.ravel(),
        problem.h.imag.ravel(),
    ]
    x = np.concatenate(parts) / scale
    if include_noise_feature:
        x = np.append(x, problem.noise_var)
    return x


def feature_length(n_rx: int, n_tx: int, include_noise_feature: bool = False) -> int:
    return 2 * n_rx + 2 * n_rx * n_tx + int(include_noise_feature)


def generate_dataset(
    sim_config: SimConfig,
    n_samples: int,
    seed: int | None = None,
    include_noise_feature: bool = False,
):
    """Bulk-sampled (features, axis label indices) pairs.

    Labels are the PAM axis indices of the real-embedded transmit vector:
    the I-axis block followed by the Q-axis block.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    seed = sim_config.master_seed if seed is None else seed
    const = sim_config.constellation()
    if const.kind != "qam":
        raise ValueError("dataset generation needs a QAM constellation")
    n_rx, n_tx = sim_config.n_rx, sim_config.n_tx
    side = const.axis.order
    noise_var = snr_to_noise_var(sim_config.snr_db, const, n_tx)

    rng_h = stream_rng(seed, "dataset.channel")
    rng_s = stream_rng(seed, "dataset.symbols")
    rng_n = stream_rng(seed, "dataset.noise")
    h = (
        rng_h.standard_normal((n_samples, n_rx, n_tx))
        + 1j * rng_h.standard_normal((n_samples, n_rx, n_tx))
    ) / math.sqrt(2.0)
    s_idx = rng_s.integers(0, const.order, (n_samples, n_tx))
    noise = (
        rng_n.standard_normal((n_samples, n_rx)) + 1j * rng_n.standard_normal((n_samples, n_rx))
    ) * math.sqrt(noise_var / 2.0)
    y = np.einsum("nij,nj->ni", h, const.points[s_idx]) + noise

    scale = math.sqrt(const.avg_energy * n_tx)
    feats = [y.real, y.imag, h.real.reshape(n_samples, -1), h.imag.reshape(n_samples, -1)]
    x = np.concatenate(feats, axis=1) / scale
    if include_noise_feature:
        x = np.concatenate([x, np.full((n_samples, 1), noise_var)], axis=1)
    labels = np.concatenate([s_idx // side, s_idx % side], axis=1)
    return x, labels


def _forward(weights, biases, x, activation: str = "relu"):
    act, _ = _ACTIVATIONS[activation]
    acts = [x]
    for w, b in zip(weights[:-1], biases[:-1]):
        acts.append(act(acts[-1] @ w + b))
    logits = acts[-1] @ weights[-1] + biases[-1]
    return acts, logits


def _row_log_softmax(logits: np.ndarray, n_layers: int, side: int) -> np.ndarray:
    z = logits.reshape(logits.shape[0], n_layers, side)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loss_and_gradients(weights, biases, x, labels, side: int, activation: str = "relu"):
    """Mean per-layer cross-entropy and its analytic weight gradients."""
    _, dact = _ACTIVATIONS[activation]
    n, n_layers = labels.shape
    acts, logits = _forward(weights, biases, x, activation)
    logp = _row_log_softmax(logits, n_layers, side)
    rows = np.arange(n)[:, None], np.arange(n_layers)[None, :]
    loss = float(-logp[rows[0], rows[1], labels].mean())

    grad = np.exp(logp)
    grad[rows[0], rows[1], labels] -= 1.0
    grad = grad.reshape(n, n_layers * side) / (n * n_layers)

    grads_w, grads_b = [], []
    for layer in range(len(weights) - 1, -1, -1):
        grads_w.append(acts[layer].T @ grad)
        grads_b.append(grad.sum(axis=0))
        if layer:
            grad = (grad @ weights[layer].T) * dact(acts[layer])
    return loss, (grads_w[::-1], grads_b[::-1])


def _dataset_loss(weights, biases, x, labels, side, activation, chunk=65536):
    total, count = 0.0, 0
    for lo in range(0, len(x), chunk):
        xb, lb = x[lo : lo + chunk], labels[lo : lo + chunk]
        _, logits = _forward(weights, biases, xb, activation)
        logp = _row_log_softmax(logits, lb.shape[1], side)
        total += float(-logp[np.arange(len(lb))[:, None], np.arange(lb.shape[1])[None, :], lb].sum())
        count += lb.size
    return total / count


def train(config: TrainConfig) -> NeuralModel:
    """Mini-batch gradient descent with momentum; deterministic given the seed."""
    const = make_constellation(config.kind, config.order, config.normalized)
    side = const.axis.order
    n_layers = 2 * config.n_tx
    sim = SimConfig(
        n_rx=config.n_rx,
        n_tx=config.n_tx,
        order=config.order,
        snr_db=config.snr_db,
        master_seed=config.seed,
        n_trials=config.n_train,
        kind=config.kind,
        normalized=config.normalized,
    )
    x, labels = generate_dataset(
        sim, config.n_train, seed=config.seed, include_noise_feature=config.include_noise_feature
    )

    widths = [x.shape[1], *config.hidden, n_layers * side]
    gain = 2.0 if config.activation == "relu" else 1.0
    rng = stream_rng(config.seed, "init")
    weights = [
        rng.standard_normal((a, b)) * math.sqrt(gain / a)
        for a, b in zip(widths[:-1], widths[1:])
    ]
    biases = [np.zeros(b) for b in widths[1:]]
    velocity_w = [np.zeros_like(w) for w in weights]
    velocity_b = [np.zeros_like(b) for b in biases]

    initial_loss = _dataset_loss(weights, biases, x, labels, side, config.activation)
    for epoch in range(config.epochs):
        order_ = stream_rng(config.seed, "shuffle", epoch).permutation(config.n_train)
        for lo in range(0, config.n_train - config.batch_size + 1, config.batch_size):
            batch = order_[lo : lo + config.batch_size]
            loss, (gw, gb) = loss_and_gradients(
                weights, biases, x[batch], labels[batch], side, config.activation
            )
            if not math.isfinite(loss):
                raise TrainingDivergenceError(
                    f"non-finite loss at epoch {epoch}, sample {lo}; lower the learning rate"
                )
            for i in range(len(weights)):
                velocity_w[i] = config.momentum * velocity_w[i] - config.learning_rate * gw[i]
                velocity_b[i] = config.momentum * velocity_b[i] - config.learning_rate * gb[i]
                weights[i] = weights[i] + velocity_w[i]
                biases[i] = biases[i] + velocity_b[i]
    final_loss = _dataset_loss(weights, biases, x, labels, side, config.activation)

    meta = asdict(config)
    meta["hidden"] = list(config.hidden)
    meta.update(initial_loss=initial_loss, final_loss=final_loss, feature_dim=x.shape[1])
    return NeuralModel(
        widths=widths,
        weights=weights,
        biases=biases,
        activation=config.activation,
        input_spec=(2 * config.n_rx, n_layers, side),
        feature_energy=const.avg_energy,
        include_noise_feature=config.include_noise_feature,
        train_meta=meta,
    )


def _check_problem(model: NeuralModel, problem: MimoProblem):
    const = problem.constellation
    if not problem.is_complex or const.kind != "qam":
        raise ValueError("the neural detector expects complex QAM problems")
    spec = (2 * problem.n_rx, 2 * problem.n_tx, const.axis.order)
    if tuple(model.input_spec) != spec:
        raise ValueError(f"problem shape {spec} does not match model spec {tuple(model.input_spec)}")
    if abs(const.avg_energy - model.feature_energy) > 1e-9 * max(model.feature_energy, 1.0):
        raise ValueError("constellation energy differs from the training constellation")


def model_marginals(model: NeuralModel, problems) -> np.ndarray:
    """Batched QAM marginals (n_problems, n_tx, order) for complex problems."""
    problems = list(problems)
    for p in problems:
        _check_problem(model, p)
    x = np.stack([problem_features(p, model.include_noise_feature) for p in problems])
    _, logits = _forward(model.weights, model.biases, x, model.activation)
    rows, layers, side = model.input_spec
    probs = np.exp(_row_log_softmax(logits, layers, side))
    n_tx = layers // 2
    p_i, p_q = probs[:, :n_tx], probs[:, n_tx:]
    joint = p_i[:, :, :, None] * p_q[:, :, None, :]
    return joint.reshape(len(problems), n_tx, side * side)


def infer(model: NeuralModel, problem: MimoProblem) -> SoftOutput:
    """Marginal output for one problem, derived views per SoftOutput."""
    marg = model_marginals(model, [problem])[0]
    return SoftOutput(marg, problem.constellation)


class NeuralDetector:
    """Detector adapter with a batched marginal path."""

    def __init__(self, model: NeuralModel, name: str = "neural"):
        self.model = model
        self.name = name

    def __call__(self, problem: MimoProblem) -> SoftOutput:
        return infer(self.model, problem)

    def marginals_many(self, problems) -> np.ndarray:
        return model_marginals(self.model, problems)


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(d["data"]), dtype=np.float64)
    return raw.reshape(d["shape"]).copy()


def save_model(model: NeuralModel, path) -> None:
    """Write the documented JSON container; the round-trip is bit-exact."""
    payload = {
        "format": MODEL_FORMAT,
        "widths": list(model.widths),
        "activation": model.activation,
        "input_spec": list(model.input_spec),
        "feature_energy": model.feature_energy,
        "include_noise_feature": model.include_noise_feature,
        "weights": [_encode_array(w) for w in model.weights],
        "biases": [_encode_array(b) for b in model.biases],
        "train_meta": model.train_meta,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def load_model(path) -> NeuralModel:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != MODEL_FORMAT:
        raise ValueError(f"unsupported model format {payload.get('format')!r}")
    if payload.get("activation") not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {payload.get('activation')!r}")
    return NeuralModel(
        widths=list(payload["widths"]),
        weights=[_decode_array(d) for d in payload["weights"]],
        biases=[_decode_array(d) for d in payload["biases"]],
        activation=payload["activation"],
        input_spec=tuple(payload["input_spec"]),
        feature_energy=float(payload["feature_energy"]),
        include_noise_feature=bool(payload["include_noise_feature"]),
        train_meta=dict(payload["train_meta"]),
    )
