"""Error-ambiguity decomposition, benchmark metrics, efficiency and convergence comparison."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from memtl.dataset import Dataset, generate_dataset, shift_split
from memtl.errors import InvalidParameterError
from memtl.features import SamplingRanges
from memtl.mec import OffloadStrategy
from memtl.model import (
    ArchSpec,
    MemtlModel,
    TrainConfig,
    fit,
    head_order_rng,
    predict_batch,
    train_backbone,
    train_memtl,
    train_mtfnn,
)


def sample_mse(prediction: OffloadStrategy, truth: OffloadStrategy) -> float:
    """Mean squared difference of the concatenated ``(d, r)`` vectors (g = 2N)."""
    if prediction.n != truth.n:
        raise InvalidParameterError("strategies have different lengths")
    diff = prediction.as_vector() - truth.as_vector()
    return float(np.dot(diff, diff) / diff.size)


def ambiguity(errors: np.ndarray) -> np.ndarray:
    """Per-sample excess error of each head over the best head on that sample.

    ``errors`` is ``(M, S)``; the result has the same shape and is
    non-negative, zero for the per-sample best head.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if errors.ndim != 2 or not np.all(np.isfinite(errors)):
        raise InvalidParameterError("head errors must be a finite (M, S) matrix")
    return errors - errors.min(axis=0, keepdims=True)


def head_errors(model: MemtlModel, ds: Dataset):
    """Per-head, per-sample MSE of the post-processed strategies; also returns the batch prediction."""
    truth = ds.targets
    pred = predict_batch(model, [s.raw_env for s in ds.samples], ds.X, "cost")
    vec = np.concatenate([pred.head_d.astype(np.float64), pred.head_r], axis=-1)
    return np.mean((vec - truth[None]) ** 2, axis=-1), pred


@dataclass
class DecompositionReport:
    per_head_zeta: list[float]
    per_head_chi_bar: list[float]
    zeta_bar: float
    chi_bar: float
    ensemble_zeta: float
    residual: float
    cost_selected_zeta: float
    n_samples: int

    def as_dict(self) -> dict:
        return asdict(self)


def decompose(model: MemtlModel, eval_ds: Dataset) -> DecompositionReport:
    """Split the ensemble error into mean head error minus mean ambiguity.

    The ensemble error here selects the per-sample min-MSE head, which is the
    selection under which the split is an identity; the error of the serving
    (min-cost) selection is reported alongside as ``cost_selected_zeta``.
    """
    if len(eval_ds) == 0:
        raise InvalidParameterError("evaluation set is empty")
    xi, pred = head_errors(model, eval_ds)
    chi = ambiguity(xi)
    zeta = xi.mean(axis=1)
    chi_per_head = chi.mean(axis=1)
    zeta_bar = float(zeta.mean())
    chi_bar = float(chi_per_head.mean())
    ensemble = float(xi.min(axis=0).mean())
    cost_sel = float(xi[pred.choice, np.arange(xi.shape[1])].mean())
    return DecompositionReport(
        per_head_zeta=zeta.tolist(),
        per_head_chi_bar=chi_per_head.tolist(),
        zeta_bar=zeta_bar,
        chi_bar=chi_bar,
        ensemble_zeta=ensemble,
        residual=ensemble - (zeta_bar - chi_bar),
        cost_selected_zeta=cost_sel,
        n_samples=len(eval_ds),
    )


def score_predictions(d: np.ndarray, r: np.ndarray, ds: Dataset) -> tuple[float, float, float]:
    """``(mse, exact-match accuracy, per-MT accuracy)`` of ``(B, N)`` predictions against ``ds``."""
    D = ds.D
    vec = np.hstack([np.asarray(d, dtype=np.float64), np.asarray(r, dtype=np.float64)])
    mse = float(np.mean((vec - ds.targets) ** 2))
    exact = float(np.mean(np.all(d == D, axis=1)))
    per_mt = float(np.mean(d == D))
    return mse, exact, per_mt


@dataclass
class BenchmarkRow:
    model: str
    n_mts: int
    m_heads: int
    mse: float
    accuracy: float
    per_mt_accuracy: float
    inference_time_ms: float
    model_size: int

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0 or self.mse < 0:
            raise InvalidParameterError("accuracy must lie in [0, 1] and mse must be non-negative")


def time_inference(model: MemtlModel, ds: Dataset, passes: int = 5, min_samples: int = 1000) -> float:
    """Median wall-clock milliseconds per sample of the full prediction path (warm)."""
    reps = max(1, math.ceil(min_samples / len(ds)))
    envs = [s.raw_env for s in ds.samples] * reps
    X = np.tile(ds.X, (reps, 1))
    predict_batch(model, envs, X)
    times = []
    for _ in range(max(5, passes)):
        start = time.perf_counter()
        predict_batch(model, envs, X)
        times.append(time.perf_counter() - start)
    return float(np.median(times) / len(envs) * 1e3)


def evaluate(model: MemtlModel, eval_ds: Dataset, selection_mode: str = "cost", timing: bool = True) -> BenchmarkRow:
    pred = predict_batch(model, [s.raw_env for s in eval_ds.samples], eval_ds.X, selection_mode, eval_ds.targets)
    mse, acc, per_mt = score_predictions(pred.d, pred.r, eval_ds)
    return BenchmarkRow(
        model=model.kind,
        n_mts=model.n,
        m_heads=model.m,
        mse=mse,
        accuracy=acc,
        per_mt_accuracy=per_mt,
        inference_time_ms=time_inference(model, eval_ds) if timing else float("nan"),
        model_size=model.bundle_size(),
    )


def efficiency(delta_mse: float, delta_accuracy: float, t_ms: float) -> float:
    """Improvement per millisecond of inference: ``(delta_mse + delta_accuracy) / t_ms``."""
    if not t_ms > 0:
        raise InvalidParameterError(f"inference time must be positive, got {t_ms}")
    return (delta_mse + delta_accuracy) / t_ms


# -- convergence --------------------------------------------------------------


def epochs_to(log: list[float], threshold: float) -> int | None:
    """First 1-based epoch whose loss is at or below ``threshold``."""
    for i, v in enumerate(log, start=1):
        if v <= threshold:
            return i
    return None


@dataclass
class ConvergenceResult:
    head_only: list[float]
    from_scratch: list[float]
    threshold: float
    head_epochs: int | None
    scratch_epochs: int | None
    ratio: float
    censored: bool = False
    meta: dict = field(default_factory=dict)


def convergence_compare(train_ds: Dataset, arch: ArchSpec | None = None, cfg: TrainConfig | None = None,
                        seed: int = 0, threshold_factor: float = 1.5) -> ConvergenceResult:
    """Loss curves of a fresh head on a frozen backbone versus the baseline trained from scratch.

    The threshold is ``threshold_factor`` times the head-only final loss and
    is shared by both curves.  A scratch run that never reaches it counts as
    ``epochs + 1`` and the result is marked censored.
    """
    arch = arch or ArchSpec()
    cfg = cfg or TrainConfig()
    backbone, head, _ = train_backbone(arch, train_ds, cfg, seed)
    head_log = fit(head, backbone.predict(train_ds.X), train_ds.D, train_ds.R, cfg,
                   head_order_rng(seed, 0), "head-only")
    _, logs = train_mtfnn(train_ds, arch, cfg, seed)
    scratch_log = logs["mtfnn"]
    threshold = threshold_factor * head_log[-1]
    e_head = epochs_to(head_log, threshold)
    e_scratch = epochs_to(scratch_log, threshold)
    censored = e_scratch is None
    ratio = e_head / (cfg.epochs + 1 if censored else e_scratch)
    return ConvergenceResult(head_log, scratch_log, threshold, e_head, e_scratch, ratio, censored,
                             {"seed": seed, "threshold_factor": threshold_factor})


# -- benchmark grid -------------------------------------------------------------


@dataclass
class BenchCell:
    n_mts: int
    mtfnn: BenchmarkRow
    memtl: list[BenchmarkRow]


def benchmark(ranges: SamplingRanges, ns, ms, count: int, test_fraction: float = 0.25,
              arch: ArchSpec | None = None, cfg: TrainConfig | None = None, seed: int = 0,
              timing: bool = True) -> list[BenchCell]:
    """Train both models per N on a drift split and evaluate MEMTL for every head count in ``ms``.

    One MEMTL with ``max(ms)`` heads is trained per N; smaller ensembles are
    its head prefixes, which is exactly what training with fewer heads yields.
    """
    cells = []
    for n in ns:
        ds = generate_dataset(ranges.with_n(n), count, seed)
        train, test = shift_split(ds, test_fraction)
        mtfnn, _ = train_mtfnn(train, arch, cfg, seed)
        memtl, _ = train_memtl(train, max(ms), arch, cfg, seed)
        rows = [evaluate(memtl.with_heads(m), test, timing=timing) for m in ms]
        cells.append(BenchCell(n, evaluate(mtfnn, test, timing=timing), rows))
    return cells


def efficiency_table(cells: list[BenchCell]) -> list[dict]:
    out = []
    for cell in cells:
        for row in cell.memtl:
            d_mse = cell.mtfnn.mse - row.mse
            d_acc = row.accuracy - cell.mtfnn.accuracy
            psi = efficiency(d_mse, d_acc, row.inference_time_ms) if row.inference_time_ms > 0 else float("nan")
            out.append({"n_mts": cell.n_mts, "m_heads": row.m_heads, "delta_mse": d_mse,
                        "delta_accuracy": d_acc, "inference_time_ms": row.inference_time_ms, "psi": psi})
    return out
