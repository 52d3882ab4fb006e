"""Experiment configuration file (JSON).

Layout::

    {
      "version": 1,
      "seed": 0,
      "m_heads": 3,
      "sampling": {"n": 2, "alpha": 0.5, "kappa": 0.05, "f_mes": 12.0, "seed": 0,
                   "intervals": {"c": [1.0, 10.0], ...}},
      "arch": {"backbone_hidden": [64, 64], "head_hidden": [32], "activation": "relu"},
      "train": {"lr": 0.001, "beta1": 0.9, "beta2": 0.999, "eps": 1e-08,
                "batch_size": 64, "epochs": 30, "lambda_reg": 1.0},
      "data": {"count": 6667, "test_fraction": 0.25},
      "bench": {"ns": [2, 3, 4, 5], "ms": [2, 3, 4, 5, 6]},
      "converge": {"seeds": [0, 1, 2, 3, 4], "threshold_factor": 1.5},
      "paths": {"dataset": null, "model": null, "out": null}
    }

Every key is optional except ``version``; missing keys take the defaults above.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from memtl.errors import InvalidParameterError
from memtl.features import SamplingRanges
from memtl.model import ArchSpec, TrainConfig

CONFIG_VERSION = 1


@dataclass
class RunConfig:
    seed: int = 0
    m_heads: int = 3
    sampling: SamplingRanges = field(default_factory=SamplingRanges)
    arch: ArchSpec = field(default_factory=ArchSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    count: int = 6667
    test_fraction: float = 0.25
    bench_ns: tuple[int, ...] = (2, 3, 4, 5)
    bench_ms: tuple[int, ...] = (2, 3, 4, 5, 6)
    converge_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    threshold_factor: float = 1.5
    paths: dict = field(default_factory=lambda: {"dataset": None, "model": None, "out": None})

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "seed": self.seed,
            "m_heads": self.m_heads,
            "sampling": self.sampling.to_dict(),
            "arch": self.arch.to_dict(),
            "train": self.train.to_dict(),
            "data": {"count": self.count, "test_fraction": self.test_fraction},
            "bench": {"ns": list(self.bench_ns), "ms": list(self.bench_ms)},
            "converge": {"seeds": list(self.converge_seeds), "threshold_factor": self.threshold_factor},
            "paths": dict(self.paths),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if data.get("version") != CONFIG_VERSION:
            raise InvalidParameterError(f"unsupported config version {data.get('version')!r}")
        default = cls()
        data_sec = data.get("data", {})
        bench = data.get("bench", {})
        conv = data.get("converge", {})
        try:
            return cls(
                seed=int(data.get("seed", default.seed)),
                m_heads=int(data.get("m_heads", default.m_heads)),
                sampling=SamplingRanges.from_dict(data["sampling"]) if "sampling" in data else default.sampling,
                arch=ArchSpec.from_dict(data["arch"]) if "arch" in data else default.arch,
                train=TrainConfig.from_dict({**default.train.to_dict(), **data.get("train", {})}),
                count=int(data_sec.get("count", default.count)),
                test_fraction=float(data_sec.get("test_fraction", default.test_fraction)),
                bench_ns=tuple(bench.get("ns", default.bench_ns)),
                bench_ms=tuple(bench.get("ms", default.bench_ms)),
                converge_seeds=tuple(conv.get("seeds", default.converge_seeds)),
                threshold_factor=float(conv.get("threshold_factor", default.threshold_factor)),
                paths={**default.paths, **data.get("paths", {})},
            )
        except (TypeError, KeyError) as exc:
            raise InvalidParameterError(f"malformed config: {exc}") from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidParameterError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)
