"""Sampling ranges, feature encoding and the labelled-sample record."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from memtl.errors import InvalidParameterError
from memtl.mec import MT_FIELDS, Environment, MtParams, OffloadStrategy

#: Per-MT parameters fed to the network; powers and deadlines are held fixed per dataset.
FEATURE_FIELDS = ("c", "r_local", "p", "q", "u", "d")
_MUST_BE_POSITIVE = ("c", "r_local", "u", "d", "theta")

DEFAULT_INTERVALS = {
    "c": (1.0, 10.0),
    "r_local": (1.0, 4.0),
    "p": (0.5, 8.0),
    "q": (0.1, 2.0),
    "u": (1.0, 8.0),
    "d": (2.0, 10.0),
    "P_u": (1.0, 1.0),
    "P_e": (0.5, 0.5),
    "P_d": (0.5, 0.5),
    "theta": (12.0, 12.0),
}


@dataclass(frozen=True)
class SamplingRanges:
    """Closed sampling interval for every per-MT parameter plus the fixed cell constants."""

    n: int = 2
    alpha: float = 0.5
    kappa: float = 0.05
    f_mes: float = 12.0
    seed: int = 0
    intervals: dict = field(default_factory=lambda: dict(DEFAULT_INTERVALS))

    def __post_init__(self):
        if self.n < 1:
            raise InvalidParameterError(f"n must be >= 1, got {self.n}")
        missing = set(MT_FIELDS) - set(self.intervals)
        if missing:
            raise InvalidParameterError(f"missing sampling intervals for {sorted(missing)}")
        clean = {}
        for name in MT_FIELDS:
            lo, hi = (float(v) for v in self.intervals[name])
            if lo > hi:
                raise InvalidParameterError(f"interval for {name} has low > high: [{lo}, {hi}]")
            if name in _MUST_BE_POSITIVE and lo <= 0:
                raise InvalidParameterError(f"interval for {name} must be strictly positive")
            if lo < 0:
                raise InvalidParameterError(f"interval for {name} must be non-negative")
            clean[name] = (lo, hi)
        object.__setattr__(self, "intervals", clean)
        if not 0.0 <= self.alpha <= 1.0 or not self.kappa > 0 or not self.f_mes > 0:
            raise InvalidParameterError("alpha must lie in [0, 1]; kappa and f_mes must be positive")

    @property
    def feature_dim(self) -> int:
        return len(FEATURE_FIELDS) * self.n

    def with_n(self, n: int) -> "SamplingRanges":
        return replace(self, n=n)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "alpha": self.alpha,
            "kappa": self.kappa,
            "f_mes": self.f_mes,
            "seed": self.seed,
            "intervals": {k: list(v) for k, v in self.intervals.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SamplingRanges":
        intervals = dict(DEFAULT_INTERVALS)
        intervals.update({k: tuple(v) for k, v in data.get("intervals", {}).items()})
        return cls(
            n=int(data.get("n", 2)),
            alpha=float(data.get("alpha", 0.5)),
            kappa=float(data.get("kappa", 0.05)),
            f_mes=float(data.get("f_mes", 12.0)),
            seed=int(data.get("seed", 0)),
            intervals=intervals,
        )


def raw_features(env: Environment) -> np.ndarray:
    """Un-normalised feature vector, MT-major: ``[c_1, r_local_1, ..., d_1, c_2, ...]``."""
    a = env.arrays
    return np.stack([a[k] for k in FEATURE_FIELDS], axis=1).reshape(-1)


def featurize(env: Environment, ranges: SamplingRanges) -> np.ndarray:
    """Min-max normalise the per-MT features into [0, 1] using ``ranges``.

    Degenerate intervals map to 0.  Raises if any per-MT parameter lies
    outside its declared interval.
    """
    if env.n != ranges.n:
        raise InvalidParameterError(f"environment has {env.n} MTs, ranges expect {ranges.n}")
    a = env.arrays
    for name in MT_FIELDS:
        lo, hi = ranges.intervals[name]
        v = a[name]
        if np.any(v < lo) or np.any(v > hi):
            raise InvalidParameterError(f"{name} outside its sampling interval [{lo}, {hi}]: {v.tolist()}")
    lo = np.array([ranges.intervals[k][0] for k in FEATURE_FIELDS])
    span = np.array([ranges.intervals[k][1] - ranges.intervals[k][0] for k in FEATURE_FIELDS])
    raw = raw_features(env).reshape(env.n, -1)
    safe = np.where(span > 0, span, 1.0)
    x = np.where(span > 0, (raw - lo) / safe, 0.0)
    return x.reshape(-1)


def unfeaturize(x: np.ndarray, ranges: SamplingRanges) -> np.ndarray:
    """Inverse of the normalisation in :func:`featurize`; returns raw feature values."""
    x = np.asarray(x, dtype=np.float64).reshape(ranges.n, len(FEATURE_FIELDS))
    lo = np.array([ranges.intervals[k][0] for k in FEATURE_FIELDS])
    span = np.array([ranges.intervals[k][1] - ranges.intervals[k][0] for k in FEATURE_FIELDS])
    return (lo + x * span).reshape(-1)


@dataclass
class LabeledSample:
    x: np.ndarray
    d_star: np.ndarray
    r_star: np.ndarray
    cost_star: float
    raw_env: Environment

    @property
    def strategy(self) -> OffloadStrategy:
        return OffloadStrategy(self.d_star, self.r_star)

    @property
    def n(self) -> int:
        return int(self.d_star.size)

    def to_dict(self, version: int) -> dict:
        return {
            "version": version,
            "n": self.n,
            "x": self.x.tolist(),
            "d_star": self.d_star.tolist(),
            "r_star": self.r_star.tolist(),
            "cost_star": self.cost_star,
            "raw_env": self.raw_env.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LabeledSample":
        return cls(
            x=np.asarray(data["x"], dtype=np.float64),
            d_star=np.asarray(data["d_star"], dtype=np.int64),
            r_star=np.asarray(data["r_star"], dtype=np.float64),
            cost_star=float(data["cost_star"]),
            raw_env=Environment.from_dict(data["raw_env"]),
        )


def env_from_arrays(values: dict[str, np.ndarray], ranges: SamplingRanges) -> Environment:
    mts = tuple(
        MtParams(**{k: float(values[k][i]) for k in MT_FIELDS}) for i in range(ranges.n)
    )
    return Environment(mts, ranges.alpha, ranges.kappa, ranges.f_mes)
