"""MIMO detection with invariant-transform resampling.

A detector is run on several distribution-preserving transformations of one
input; the back-mapped outputs are combined with minimum-variance weights
derived from their error covariance.  See the README for the CLI.
"""

__version__ = "0.1.0"

from .detectors import (
    SoftOutput,
    count_errors,
    detect_lmmse,
    detect_ml,
    detect_qrm,
    get_detector,
)
from .mimo_model import (
    Constellation,
    MimoProblem,
    SimConfig,
    complex_to_real,
    make_constellation,
    problem_for_trial,
    sample_channel,
    snr_to_noise_var,
    stream_rng,
    transmit,
)
from .neural_detector import NeuralDetector, NeuralModel, TrainConfig, infer, load_model, save_model
from .resampler import (
    CombinerWeights,
    ErrorStats,
    combine_scalar,
    epistemic_variance,
    estimate_error_covariance,
    optimal_weights,
    resample_detect,
    variance_curve,
)
from .transforms import (
    InvariantTransform,
    apply_transform,
    backmap_estimate,
    random_unitary,
    verify_invariance,
)

__all__ = [
    "Constellation",
    "CombinerWeights",
    "ErrorStats",
    "InvariantTransform",
    "MimoProblem",
    "NeuralDetector",
    "NeuralModel",
    "SimConfig",
    "SoftOutput",
    "TrainConfig",
    "apply_transform",
    "backmap_estimate",
    "combine_scalar",
    "complex_to_real",
    "count_errors",
    "detect_lmmse",
    "detect_ml",
    "detect_qrm",
    "epistemic_variance",
    "estimate_error_covariance",
    "get_detector",
    "infer",
    "load_model",
    "make_constellation",
    "optimal_weights",
    "problem_for_trial",
    "random_unitary",
    "resample_detect",
    "sample_channel",
    "save_model",
    "snr_to_noise_var",
    "stream_rng",
    "transmit",
    "variance_curve",
    "verify_invariance",
]
