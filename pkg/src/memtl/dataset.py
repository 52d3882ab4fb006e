"""Random environment sampling, oracle labelling, drift split and bootstrap replicas."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from memtl.errors import InvalidParameterError, UnlabelableError
from memtl.features import LabeledSample, SamplingRanges, env_from_arrays, raw_features
from memtl.mec import MT_FIELDS, Environment
from memtl.oracle import label_sample

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAX_REJECTION_RATE = 0.9
# rejection rate is only judged once this many environments have been drawn
_MIN_ATTEMPTS_FOR_ABORT = 100


@dataclass
class Dataset:
    samples: list[LabeledSample]
    ranges: SamplingRanges
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.samples:
            n = self.samples[0].n
            dim = self.samples[0].x.size
            for s in self.samples:
                if s.n != n or s.x.size != dim:
                    raise InvalidParameterError("all samples in a dataset must share N and feature size")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n(self) -> int:
        return self.ranges.n

    @property
    def X(self) -> np.ndarray:
        return np.stack([s.x for s in self.samples])

    @property
    def D(self) -> np.ndarray:
        return np.stack([s.d_star for s in self.samples])

    @property
    def R(self) -> np.ndarray:
        return np.stack([s.r_star for s in self.samples])

    @property
    def targets(self) -> np.ndarray:
        """``(T, 2N)`` matrix of concatenated decision and allocation labels."""
        return np.hstack([self.D.astype(np.float64), self.R])

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.ranges, dict(self.meta))

    def to_jsonl(self) -> str:
        header = {"meta": {**self.meta, "format_version": FORMAT_VERSION, "ranges": self.ranges.to_dict()}}
        lines = [json.dumps(header)]
        lines.extend(json.dumps(s.to_dict(FORMAT_VERSION)) for s in self.samples)
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path) as fh:
            header = json.loads(fh.readline())["meta"]
            if header.get("format_version") != FORMAT_VERSION:
                raise InvalidParameterError(f"unsupported dataset format {header.get('format_version')!r}")
            samples = [LabeledSample.from_dict(json.loads(line)) for line in fh if line.strip()]
        ranges = SamplingRanges.from_dict(header.pop("ranges"))
        header.pop("format_version")
        return cls(samples, ranges, header)


def sample_environment(ranges: SamplingRanges, rng: np.random.Generator) -> Environment:
    """Draw each per-MT parameter independently and uniformly from its interval."""
    values = {}
    for name in MT_FIELDS:
        lo, hi = ranges.intervals[name]
        values[name] = rng.uniform(lo, hi, size=ranges.n) if hi > lo else np.full(ranges.n, lo)
    return env_from_arrays(values, ranges)


def slot_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sample slot ``index``; lets workers label slots in any order."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _label_slot(args) -> tuple[LabeledSample | None, int]:
    ranges, seed, index, max_tries = args
    rng = slot_rng(seed, index)
    for attempt in range(1, max_tries + 1):
        env = sample_environment(ranges, rng)
        try:
            return label_sample(env, ranges), attempt - 1
        except UnlabelableError:
            continue
    return None, max_tries


def generate_dataset(ranges: SamplingRanges, count: int, seed: int | None = None, workers: int = 1) -> Dataset:
    """Label ``count`` random environments; unlabelable draws are redrawn.

    Output is a pure function of ``(ranges, count, seed)`` regardless of
    ``workers``.  Raises :class:`UnlabelableError` once more than 90% of the
    drawn environments turn out unlabelable.
    """
    if count < 1:
        raise InvalidParameterError(f"count must be >= 1, got {count}")
    seed = ranges.seed if seed is None else seed
    # per-slot cap: far above the expected ~10 draws at the abort threshold
    max_tries = 200
    jobs = [(ranges, seed, i, max_tries) for i in range(count)]

    samples, rejected, attempts = [], 0, 0

    def account(result):
        nonlocal rejected, attempts
        sample, rej = result
        rejected += rej
        attempts += rej + (sample is not None)
        if sample is None or (attempts >= _MIN_ATTEMPTS_FOR_ABORT and rejected / attempts > MAX_REJECTION_RATE):
            raise UnlabelableError(
                f"sampling ranges are mostly unlabelable: {rejected} of {attempts} draws rejected"
            )
        samples.append(sample)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for result in pool.map(_label_slot, jobs, chunksize=max(1, count // (4 * workers))):
                account(result)
    else:
        for job in jobs:
            account(_label_slot(job))

    if rejected:
        logger.info("resampled %d unlabelable environments out of %d draws", rejected, attempts)
    meta = {
        "count": count,
        "seed": seed,
        "resampled": rejected,
        "attempts": attempts,
        "created": _creation_stamp(),
    }
    return Dataset(samples, ranges, meta)


def _creation_stamp() -> str | None:
    # Only a caller-pinned epoch is recorded so that files stay reproducible.
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is None:
        return None
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).isoformat()


def drift_scores(ds: Dataset) -> np.ndarray:
    """Mean of squared raw (un-normalised) features of each sample."""
    return np.array([np.mean(raw_features(s.raw_env) ** 2) for s in ds.samples])


def shift_split(ds: Dataset, test_fraction: float = 0.25) -> tuple[Dataset, Dataset]:
    """Hold out the samples with the largest drift score as a shifted test environment."""
    if not 0.0 < test_fraction < 1.0:
        raise InvalidParameterError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    scores = drift_scores(ds)
    order = np.lexsort((np.arange(len(ds)), scores))
    n_test = int(round(test_fraction * len(ds)))
    if len(ds) >= 2:
        n_test = min(max(n_test, 1), len(ds) - 1)
    cut = len(ds) - n_test
    train_idx, test_idx = sorted(order[:cut].tolist()), sorted(order[cut:].tolist())
    return ds.subset(train_idx), ds.subset(test_idx)


def bootstrap_indices(size: int, m: int, seed) -> list[np.ndarray]:
    """Index arrays of ``m`` with-replacement resamples, each of length ``size``.

    ``seed`` is an int or a sequence of ints.  Replica ``i`` depends only on
    ``(seed, i)``, so the first ``m`` replicas are shared by every larger
    ensemble.
    """
    if m < 1:
        raise InvalidParameterError(f"need at least one replica, got {m}")
    children = np.random.SeedSequence(seed).spawn(m)
    return [np.random.default_rng(c).integers(0, size, size=size) for c in children]


def bootstrap(ds: Dataset, m: int, seed) -> list[Dataset]:
    return [ds.subset(idx) for idx in bootstrap_indices(len(ds), m, seed)]
