"""Experiment orchestration and the command line interface.

Subcommands: ``sweep`` (Monte Carlo SER/BER over an SNR grid), ``train``
(fit the neural detector), ``analyze`` (cross-channel error statistics),
``theorem1-check`` (synthetic self-check of the combining formula), and
``verify-invariance`` (distribution checks of the transform set).

All data outputs are reproducible byte-for-byte from (config, seed);
only the ``elapsed_s`` column of ``results.csv`` carries timing.
"""

import argparse
import csv
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from .detectors import ErrorCounts, count_errors, get_detector
from .mimo_model import SimConfig, problem_for_trial, stream_rng
from .neural_detector import TrainConfig, save_model, train
from .resampler import (
    ErrorStats,
    collect_channel_soft,
    error_stats_from_samples,
    optimal_weights,
    pooled_errors,
    problems_and_transform_sets,
    resample_detect,
    sample_equicorrelated,
    variance_curve,
)
from .transforms import verify_invariance

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RESULT_COLUMNS",
    "RESULT_SCHEMA_VERSION",
    "ResultRow",
    "VariantSpec",
    "load_experiment_config",
    "main",
    "run_error_analysis",
    "run_sweep",
    "run_theorem1_check",
]

RESULT_COLUMNS = (
    "snr_db",
    "detector",
    "m",
    "trials",
    "symbol_errors",
    "bit_errors",
    "ser",
    "ber",
    "elapsed_s",
    "seed",
)
RESULT_SCHEMA_VERSION = 1
SNR_CONVENTION = "noise_var = n_tx * avg_energy / 10^(snr_db/10)"


class ConfigError(ValueError):
    """Missing or malformed configuration input."""


@dataclass(frozen=True)
class VariantSpec:
    """One detector/resampling variant of a sweep."""

    detector: str
    transforms: tuple = ("identity",)
    weights: str = "uniform"
    stats_path: str | None = None
    model_path: str | None = None
    domain: str = "marginal"

    def __post_init__(self):
        if not self.transforms:
            raise ConfigError("a variant needs a non-empty transform set")
        if self.weights not in ("uniform", "optimal"):
            raise ConfigError(f"unknown weight mode {self.weights!r}")
        if self.weights == "optimal" and not self.stats_path:
            raise ConfigError("optimal weights need a 'stats' file path")
        if self.detector == "neural" and not self.model_path:
            raise ConfigError("the neural detector needs a 'model' file path")

    @property
    def full_tag(self) -> str:
        if self.detector == "neural":
            return f"neural:{self.model_path}"
        return self.detector

    @property
    def label(self) -> str:
        if tuple(self.transforms) == ("identity",):
            return self.detector
        return f"{self.detector}+rs{len(self.transforms)}({self.weights};{self.domain})"


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimConfig
    snr_grid: tuple
    variants: tuple
    out_dir: str
    threads: int = 1

    def __post_init__(self):
        if not self.snr_grid:
            raise ConfigError("snr_grid must be non-empty")
        if any(b <= a for a, b in zip(self.snr_grid, self.snr_grid[1:])):
            raise ConfigError("snr_grid must be strictly increasing")
        if not self.variants:
            raise ConfigError("need at least one detector variant")


@dataclass(frozen=True)
class ResultRow:
    snr_db: float
    detector: str
    m: int
    trials: int
    symbol_errors: int
    bit_errors: int
    ser: float
    ber: float
    elapsed_s: float
    seed: int

    def as_csv(self) -> list:
        return [str(getattr(self, c)) for c in RESULT_COLUMNS]


def _parse_variant(raw: dict) -> VariantSpec:
    if "detector" not in raw:
        raise ConfigError("every variant needs a 'detector' tag")
    known = {"detector", "transforms", "weights", "stats", "model", "domain"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown variant keys: {sorted(unknown)}")
    return VariantSpec(
        detector=raw["detector"],
        transforms=tuple(raw.get("transforms") or ("identity",)),
        weights=raw.get("weights", "uniform"),
        stats_path=raw.get("stats"),
        model_path=raw.get("model"),
        domain=raw.get("domain", "marginal"),
    )


def load_experiment_config(
    data: dict,
    seed: int | None = None,
    trials: int | None = None,
    out: str | None = None,
    threads: int | None = None,
) -> ExperimentConfig:
    """Build a validated config from parsed JSON plus CLI overrides."""
    if "sim" not in data:
        raise ConfigError("config needs a 'sim' section")
    simd = dict(data["sim"])
    if seed is not None:
        simd["master_seed"] = seed
    if trials is not None:
        simd["n_trials"] = trials
    try:
        sim = SimConfig(**simd)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad 'sim' section: {exc}") from exc
    raw_variants = data.get("variants")
    if raw_variants is None and "detector" in data:
        raw_variants = [{k: data[k] for k in ("detector", "transforms", "weights", "stats", "model", "domain") if k in data}]
    if not raw_variants:
        raise ConfigError("config needs a 'variants' list (or top-level 'detector')")
    variants = tuple(_parse_variant(v) for v in raw_variants)
    snr_grid = tuple(float(s) for s in data.get("snr_grid") or [sim.snr_db])
    return ExperimentConfig(
        sim=sim,
        snr_grid=snr_grid,
        variants=variants,
        out_dir=str(out or data.get("out") or "out"),
        threads=int(threads or data.get("threads") or 1),
    )


@lru_cache(maxsize=16)
def _cached_detector(tag: str):
    return get_detector(tag)


@lru_cache(maxsize=16)
def _cached_optimal_beta(stats_path: str) -> tuple:
    stats = ErrorStats.load(stats_path)
    return tuple(optimal_weights(stats.r).beta)


def _variant_weights(variant: VariantSpec):
    if variant.weights == "optimal":
        return np.asarray(_cached_optimal_beta(variant.stats_path))
    return None


def _sweep_chunk(args) -> list:
    """Error counts per variant over one contiguous trial range."""
    config, snr_db, lo, hi = args
    detectors = [_cached_detector(v.full_tag) for v in config.variants]
    weights = [_variant_weights(v) for v in config.variants]
    bit_labels = config.sim.constellation().bit_labels
    counts = [ErrorCounts() for _ in config.variants]
    elapsed = [0.0 for _ in config.variants]
    for trial in range(lo, hi):
        problem = problem_for_trial(config.sim, trial, snr_db=snr_db)
        for vi, (variant, det) in enumerate(zip(config.variants, detectors)):
            t0 = time.perf_counter()
            if tuple(variant.transforms) == ("identity",):
                output = det(problem)
            else:
                rng = stream_rng(config.sim.master_seed, f"transform.v{vi}", trial)
                output = resample_detect(
                    det,
                    problem,
                    variant.transforms,
                    weights=weights[vi],
                    domain=variant.domain,
                    rng=rng,
                )
            elapsed[vi] += time.perf_counter() - t0
            counts[vi] = counts[vi] + count_errors(output, problem.s_true, bit_labels)
    return [(c, e) for c, e in zip(counts, elapsed)]


def _run_snr_point(config: ExperimentConfig, snr_db: float) -> list:
    n = config.sim.n_trials
    if config.threads <= 1:
        return _sweep_chunk((config, snr_db, 0, n))
    n_chunks = min(config.threads, n)
    bounds = np.linspace(0, n, n_chunks + 1, dtype=int)
    jobs = [(config, snr_db, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:])]
    with ProcessPoolExecutor(max_workers=config.threads) as pool:
        parts = list(pool.map(_sweep_chunk, jobs))
    merged = parts[0]
    for part in parts[1:]:
        merged = [(c0 + c1, e0 + e1) for (c0, e0), (c1, e1) in zip(merged, part)]
    return merged


def _echo_config(config: ExperimentConfig, out_dir: Path, command: str) -> None:
    payload = {
        "command": command,
        "package_version": __version__,
        "csv_schema_version": RESULT_SCHEMA_VERSION,
        "snr_convention": SNR_CONVENTION,
        "sim": asdict(config.sim),
        "snr_grid": list(config.snr_grid),
        "variants": [asdict(v) for v in config.variants],
        "out": config.out_dir,
        "threads": config.threads,
    }
    (out_dir / "config.echo.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _write_results(rows, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        writer.writerows(row.as_csv() for row in rows)


def run_sweep(config: ExperimentConfig) -> Path:
    """Monte Carlo sweep; all variants share each trial's realization."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(config, out_dir, "sweep")
    sim = config.sim
    rows = []
    for snr_db in config.snr_grid:
        for variant, (counts, elapsed) in zip(config.variants, _run_snr_point(config, snr_db)):
            rows.append(
                ResultRow(
                    snr_db=snr_db,
                    detector=variant.label,
                    m=len(variant.transforms),
                    trials=sim.n_trials,
                    symbol_errors=counts.symbol_errors,
                    bit_errors=counts.bit_errors,
                    ser=counts.symbol_errors / (sim.n_trials * sim.n_tx),
                    ber=counts.bit_errors / counts.n_bits if counts.n_bits else 0.0,
                    elapsed_s=round(elapsed, 6),
                    seed=sim.master_seed,
                )
            )
    path = out_dir / "results.csv"
    _write_results(rows, path)
    return path


def run_error_analysis(config: ExperimentConfig, n_bins: int = 60) -> dict:
    """Cross-channel error histograms and combining statistics (first variant).

    The histogram window is +-1.5 half-spacings of the per-axis alphabet,
    the range within which a soft error stays decodable.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(config, out_dir, "analyze")
    variant = config.variants[0]
    detector = _cached_detector(variant.full_tag)
    sim = config.sim
    problems, tsets = problems_and_transform_sets(sim, variant.transforms, sim.n_trials)
    soft = collect_channel_soft(detector, problems, tsets)
    zz = pooled_errors(soft, problems)
    stats = error_stats_from_samples(zz)
    stats.save(out_dir / "error_stats.json")

    const = sim.constellation()
    spacing = const.axis.min_spacing if const.kind == "qam" else const.min_spacing
    lim = 1.5 * spacing / 2.0
    edges = np.linspace(-lim, lim, n_bins + 1)
    histograms = [np.histogram(zz[ch], bins=edges)[0].tolist() for ch in range(stats.m)]

    n_ch = stats.m
    beta_uniform = np.full(n_ch, 1.0 / n_ch)
    combined_uniform = beta_uniform @ zz
    ow = optimal_weights(stats.r)
    combined_opt = ow.beta @ zz
    analysis = {
        "detector": variant.label,
        "transforms": list(variant.transforms),
        "m": n_ch,
        "n_problems": sim.n_trials,
        "n_scalar_obs": stats.n_obs,
        "snr_db": sim.snr_db,
        "seed": sim.master_seed,
        "interval": [-lim, lim],
        "bin_edges": edges.tolist(),
        "histograms": histograms,
        "mean_error": stats.mean_error.tolist(),
        "sigma2_per_channel": np.diag(stats.r).tolist(),
        "sigma2_pooled": stats.sigma2,
        "rho": stats.rho.tolist(),
        "combined": {
            "uniform": {
                "measured_var": float(np.var(combined_uniform, ddof=1)),
                "predicted_var": float(beta_uniform @ stats.r @ beta_uniform),
            },
            "optimal": {
                "measured_var": float(np.var(combined_opt, ddof=1)),
                "predicted_var": float(ow.predicted_var),
                "beta": ow.beta.tolist(),
                "regularized": ow.regularized,
            },
        },
    }
    (out_dir / "analysis.json").write_text(json.dumps(analysis, sort_keys=True, indent=2) + "\n")
    return analysis


def run_theorem1_check(
    m_values,
    rho_grid,
    sigma2: float = 1.0,
    n_draws: int = 200_000,
    seed: int = 0,
    out_dir=None,
) -> dict:
    """Synthetic equicorrelated channels vs the predicted variance curve."""
    if isinstance(m_values, int):
        m_values = [m_values]
    entries = []
    for rho in rho_grid:
        for m in m_values:
            predicted = float(variance_curve(rho, sigma2, [m])[0])
            rng = stream_rng(seed, f"theorem1/rho={rho:.10g}/m={m}")
            z = sample_equicorrelated(m, rho, sigma2, n_draws, rng)
            empirical = float(np.var(z.mean(axis=0), ddof=1))
            r_true = sigma2 * ((1.0 - rho) * np.eye(m) + rho * np.ones((m, m)))
            ow = optimal_weights(r_true)
            empirical_opt = float(np.var(ow.beta @ z, ddof=1))
            entries.append(
                {
                    "rho": float(rho),
                    "m": int(m),
                    "predicted": predicted,
                    "empirical": empirical,
                    "stderr": predicted * math.sqrt(2.0 / (n_draws - 1)),
                    "empirical_optimal": empirical_opt,
                    "beta": ow.beta.tolist(),
                    "regularized": ow.regularized,
                }
            )
    report = {"sigma2": sigma2, "n_draws": n_draws, "seed": seed, "entries": entries}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "theorem1.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("rho", "m", "predicted", "empirical", "stderr"))
            for e in entries:
                writer.writerow(
                    [str(e["rho"]), str(e["m"]), str(e["predicted"]), str(e["empirical"]), str(e["stderr"])]
                )
        (out / "theorem1.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return report


def _load_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {p}: {exc}") from exc


def _parse_float_list(text: str) -> list:
    try:
        return [float(part) for part in text.split(",") if part]
    except ValueError as exc:
        raise ConfigError(f"bad numeric list {text!r}") from exc


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mimo-resample",
        description="MIMO detection with invariant-transform resampling",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sweep = sub.add_parser("sweep", help="Monte Carlo SER/BER sweep over an SNR grid")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--seed", type=int)
    sweep.add_argument("--trials", type=int)
    sweep.add_argument("--out")
    sweep.add_argument("--threads", type=int)

    tr = sub.add_parser("train", help="train the neural detector")
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", required=True, help="model file to write")
    tr.add_argument("--seed", type=int)

    an = sub.add_parser("analyze", help="cross-channel error statistics")
    an.add_argument("--config", required=True)
    an.add_argument("--bins", type=int, default=60)
    an.add_argument("--seed", type=int)
    an.add_argument("--trials", type=int)
    an.add_argument("--out")

    th = sub.add_parser("theorem1-check", help="synthetic check of the combining formula")
    th.add_argument("--m", default="2", help="comma-separated sample counts")
    th.add_argument("--rho", default="0.0,0.2,0.5,0.71,0.9,1.0", help="comma-separated correlations")
    th.add_argument("--sigma2", type=float, default=1.0)
    th.add_argument("--draws", type=int, default=200_000)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--out", default="out")

    vi = sub.add_parser("verify-invariance", help="KS checks of transform invariance")
    vi.add_argument("--transform", action="append", required=True, help="repeatable transform tag")
    vi.add_argument("--samples", type=int, default=10_000)
    vi.add_argument("--alpha", type=float, default=0.01)
    vi.add_argument("--n-rx", type=int, default=4)
    vi.add_argument("--n-tx", type=int, default=4)
    vi.add_argument("--order", type=int, default=16)
    vi.add_argument("--snr", type=float, default=18.0)
    vi.add_argument("--seed", type=int, default=0)
    vi.add_argument("--out", default="out")
    return parser


def _cmd_sweep(args) -> int:
    config = load_experiment_config(
        _load_json(args.config),
        seed=args.seed,
        trials=args.trials,
        out=args.out,
        threads=args.threads,
    )
    path = run_sweep(config)
    print(f"wrote {path}")
    return 0


def _cmd_train(args) -> int:
    data = _load_json(args.config)
    raw = dict(data.get("train", data))
    if args.seed is not None:
        raw["seed"] = args.seed
    if "hidden" in raw:
        raw["hidden"] = tuple(raw["hidden"])
    try:
        config = TrainConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train config: {exc}") from exc
    model = train(config)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    print(
        f"wrote {out} (loss {model.train_meta['initial_loss']:.4f} -> "
        f"{model.train_meta['final_loss']:.4f})"
    )
    return 0


def _cmd_analyze(args) -> int:
    config = load_experiment_config(
        _load_json(args.config), seed=args.seed, trials=args.trials, out=args.out
    )
    analysis = run_error_analysis(config, n_bins=args.bins)
    combined = analysis["combined"]["uniform"]
    print(
        f"wrote {Path(config.out_dir) / 'analysis.json'} "
        f"(sigma2 {analysis['sigma2_pooled']:.4g}, combined {combined['measured_var']:.4g}, "
        f"predicted {combined['predicted_var']:.4g})"
    )
    return 0


def _cmd_theorem1(args) -> int:
    m_values = [int(v) for v in _parse_float_list(args.m)]
    rho_grid = _parse_float_list(args.rho)
    report = run_theorem1_check(
        m_values, rho_grid, sigma2=args.sigma2, n_draws=args.draws, seed=args.seed, out_dir=args.out
    )
    for entry in report["entries"]:
        print(
            f"rho={entry['rho']:g} m={entry['m']}: predicted {entry['predicted']:.6g}, "
            f"empirical {entry['empirical']:.6g} (stderr {entry['stderr']:.2g})"
        )
    print(f"wrote {Path(args.out) / 'theorem1.csv'}")
    return 0


def _cmd_verify_invariance(args) -> int:
    try:
        sim = SimConfig(
            n_rx=args.n_rx,
            n_tx=args.n_tx,
            order=args.order,
            snr_db=args.snr,
            master_seed=args.seed,
            n_trials=args.samples,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    reports = [
        verify_invariance(tag, sim, args.samples, alpha=args.alpha, seed=args.seed)
        for tag in args.transform
    ]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"alpha": args.alpha, "n_samples": args.samples, "reports": [r.to_dict() for r in reports]}
    (out / "invariance.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    for rep in reports:
        print(f"{rep.transform}: {'pass' if rep.passed else 'FAIL'}")
    print(f"wrote {out / 'invariance.json'}")
    return 0


_COMMANDS = {
    "sweep": _cmd_sweep,
    "train": _cmd_train,
    "analyze": _cmd_analyze,
    "theorem1-check": _cmd_theorem1,
    "verify-invariance": _cmd_verify_invariance,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
