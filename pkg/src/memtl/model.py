"""Shared-backbone multi-head ensemble, its two-stage training and cost-based inference.

Training happens in two stages.  First the backbone is fitted together with a
provisional head on the full dataset, then it is frozen and the provisional
head discarded.  After that each head is fitted, in index order, on its own
bootstrap replica while everything else stays fixed.  Inference runs every
head, maps the raw outputs to strategies and keeps the cheapest one.

The single-network baseline (MTFNN) is the same backbone + one head stack,
trained end to end.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from memtl.dataset import Dataset, bootstrap_indices
from memtl.errors import InvalidParameterError, TrainingDiverged
from memtl.features import SamplingRanges, featurize
from memtl.mec import Environment, OffloadStrategy, batch_evaluate, stack_environments
from memtl.nn import Adam, Network, combined_loss

logger = logging.getLogger(__name__)

BUNDLE_FORMAT_VERSION = 1

# seed stream tags; each (seed, tag, index) triple is an independent generator
_BACKBONE_INIT, _PROVISIONAL_HEAD, _BACKBONE_ORDER = 1, 2, 3
_BOOTSTRAP, _HEAD_INIT, _HEAD_ORDER = 4, 5, 6


def seeded_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def head_order_rng(seed: int, index: int) -> np.random.Generator:
    """Shuffling stream used when training head ``index``."""
    return seeded_rng(seed, _HEAD_ORDER, index)


@dataclass(frozen=True)
class ArchSpec:
    backbone_hidden: tuple[int, ...] = (64, 64)
    head_hidden: tuple[int, ...] = (32,)
    activation: str = "relu"

    def build_backbone(self, n_in: int, rng) -> Network:
        sizes = [n_in, *self.backbone_hidden]
        return Network.build(sizes, [self.activation] * len(self.backbone_hidden), rng)

    def build_head(self, n_in: int, n_mts: int, rng) -> Network:
        sizes = [n_in, *self.head_hidden, 2 * n_mts]
        return Network.build(sizes, [self.activation] * len(self.head_hidden) + ["identity"], rng)

    def to_dict(self) -> dict:
        return {"backbone_hidden": list(self.backbone_hidden), "head_hidden": list(self.head_hidden),
                "activation": self.activation}

    @classmethod
    def from_dict(cls, data: dict) -> "ArchSpec":
        return cls(tuple(data["backbone_hidden"]), tuple(data["head_hidden"]), data.get("activation", "relu"))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 30
    lambda_reg: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


def fit(net: Network, X: np.ndarray, D: np.ndarray, R: np.ndarray, cfg: TrainConfig,
        rng: np.random.Generator, label: str = "model") -> list[float]:
    """Mini-batch Adam on the trainable layers of ``net``.

    Returns the full-dataset loss after each epoch.  A non-finite loss raises
    :class:`TrainingDiverged` carrying the partial log as ``.log``.
    """
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    log: list[float] = []
    t = X.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(t)
        for start in range(0, t, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            out, cache = net.forward(X[idx])
            loss, grad = combined_loss(out, D[idx], R[idx], cfg.lambda_reg)
            if not np.isfinite(loss):
                err = TrainingDiverged(f"{label}: loss {loss} at epoch {epoch}, batch {start // cfg.batch_size}")
                err.log = log
                raise err
            grads, _ = net.backward(cache, grad)
            try:
                opt.step(net.layers, grads)
            except TrainingDiverged as exc:
                exc.args = (f"{label}: {exc.args[0]} at epoch {epoch}",)
                exc.log = log
                raise
        epoch_loss = combined_loss(net.predict(X), D, R, cfg.lambda_reg)[0]
        if not np.isfinite(epoch_loss):
            err = TrainingDiverged(f"{label}: epoch {epoch} loss is {epoch_loss}")
            err.log = log
            raise err
        log.append(epoch_loss)
        logger.debug("%s epoch %d loss %.6f", label, epoch, epoch_loss)
    return log


@dataclass
class MultiTaskOutput:
    class_logits: np.ndarray
    reg_values: np.ndarray


@dataclass
class HeadStrategy:
    strategy: OffloadStrategy
    raw: MultiTaskOutput
    head_index: int
    cost: float
    feasible: bool


@dataclass
class MemtlModel:
    """Backbone plus ``M`` heads.  The baseline is stored as ``kind='mtfnn'`` with one head."""

    backbone: Network
    heads: list[Network]
    ranges: SamplingRanges
    arch: ArchSpec = field(default_factory=ArchSpec)
    kind: str = "memtl"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for h in self.heads:
            if h.n_in != self.backbone.n_out:
                raise InvalidParameterError("every head must consume the backbone output")
            if h.n_out != 2 * self.ranges.n:
                raise InvalidParameterError(f"head output width {h.n_out} != 2N = {2 * self.ranges.n}")

    @property
    def n(self) -> int:
        return self.ranges.n

    @property
    def m(self) -> int:
        return len(self.heads)

    def head_outputs(self, X: np.ndarray) -> np.ndarray:
        """Raw outputs of every head, shape ``(M, B, 2N)``; the backbone runs once."""
        z = self.backbone.predict(X)
        return np.stack([h.predict(z) for h in self.heads])

    def with_heads(self, m: int) -> "MemtlModel":
        """View keeping only the first ``m`` heads (layers are shared, not copied)."""
        return MemtlModel(self.backbone, self.heads[:m], self.ranges, self.arch, self.kind, dict(self.meta))

    # -- bundle ----------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "format_version": BUNDLE_FORMAT_VERSION,
            "kind": self.kind,
            "n": self.n,
            "m": self.m,
            "arch": self.arch.to_dict(),
            "ranges": self.ranges.to_dict(),
            **self.meta,
            "backbone": "backbone.bin",
            "heads": [f"head_{i:02d}.bin" for i in range(self.m)],
        }

    def bundle_files(self) -> dict[str, bytes]:
        files = {"backbone.bin": self.backbone.to_bytes()}
        for i, h in enumerate(self.heads):
            files[f"head_{i:02d}.bin"] = h.to_bytes()
        files["manifest.json"] = (json.dumps(self.manifest(), sort_keys=True, indent=1) + "\n").encode()
        return files

    def bundle_size(self) -> int:
        return sum(len(b) for b in self.bundle_files().values())

    def save(self, directory) -> int:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = self.bundle_files()
        for stale in directory.glob("head_*.bin"):
            if stale.name not in files:
                stale.unlink()
        for name, blob in files.items():
            (directory / name).write_bytes(blob)
        return sum(len(b) for b in files.values())

    @classmethod
    def load(cls, directory) -> "MemtlModel":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        if manifest.get("format_version") != BUNDLE_FORMAT_VERSION:
            raise InvalidParameterError(f"unsupported bundle format {manifest.get('format_version')!r}")
        backbone = Network.load(directory / manifest["backbone"])
        heads = [Network.load(directory / name) for name in manifest["heads"]]
        meta = {k: v for k, v in manifest.items()
                if k not in {"format_version", "kind", "n", "m", "arch", "ranges", "backbone", "heads"}}
        return cls(backbone, heads, SamplingRanges.from_dict(manifest["ranges"]),
                   ArchSpec.from_dict(manifest["arch"]), manifest["kind"], meta)


# -- training ----------------------------------------------------------------


def train_backbone(arch: ArchSpec, ds: Dataset, cfg: TrainConfig, seed: int):
    """Fit backbone + provisional head on the full dataset, then freeze the backbone.

    Returns ``(backbone, reinitialised_head, log)``; the reinitialised head is
    drawn from a fresh stream and has never been trained.
    """
    if len(ds) == 0:
        raise InvalidParameterError("cannot train on an empty dataset")
    backbone = arch.build_backbone(ds.ranges.feature_dim, seeded_rng(seed, _BACKBONE_INIT))
    head = arch.build_head(backbone.n_out, ds.n, seeded_rng(seed, _PROVISIONAL_HEAD))
    log = fit(backbone + head, ds.X, ds.D, ds.R, cfg, seeded_rng(seed, _BACKBONE_ORDER), "backbone")
    backbone.set_trainable(False)
    fresh = arch.build_head(backbone.n_out, ds.n, seeded_rng(seed, _HEAD_INIT, 0))
    return backbone, fresh, log


def train_head(model: MemtlModel, index: int, X: np.ndarray, D: np.ndarray, R: np.ndarray,
               cfg: TrainConfig, rng: np.random.Generator) -> list[float]:
    """Fit head ``index`` alone.  Backbone features are computed once since it is frozen."""
    if any(layer.trainable for layer in model.backbone.layers):
        raise InvalidParameterError("backbone must be frozen before training heads")
    for i, h in enumerate(model.heads):
        h.set_trainable(i == index)
    features = model.backbone.predict(X)
    try:
        return fit(model.heads[index], features, D, R, cfg, rng, f"head {index}")
    finally:
        model.heads[index].set_trainable(False)


def train_heads(model: MemtlModel, replicas: list[Dataset], cfg: TrainConfig, seed: int) -> list[list[float]]:
    if len(replicas) != model.m:
        raise InvalidParameterError(f"{len(replicas)} replicas for {model.m} heads")
    logs = []
    for i, rep in enumerate(replicas):
        logs.append(train_head(model, i, rep.X, rep.D, rep.R, cfg, head_order_rng(seed, i)))
    return logs


def train_memtl(ds: Dataset, m: int = 3, arch: ArchSpec | None = None, cfg: TrainConfig | None = None,
                seed: int = 0) -> tuple[MemtlModel, dict]:
    """Full offline procedure: bootstrap, backbone stage, then each head on its replica."""
    arch = arch or ArchSpec()
    cfg = cfg or TrainConfig()
    if m < 1:
        raise InvalidParameterError(f"need at least one head, got {m}")
    replicas = [ds.subset(idx) for idx in bootstrap_indices(len(ds), m, [seed, _BOOTSTRAP])]
    backbone, first_head, backbone_log = train_backbone(arch, ds, cfg, seed)
    heads = [first_head] + [arch.build_head(backbone.n_out, ds.n, seeded_rng(seed, _HEAD_INIT, i))
                            for i in range(1, m)]
    for h in heads:
        h.set_trainable(False)
    model = MemtlModel(backbone, heads, ds.ranges, arch, "memtl",
                       {"seed": seed, "train_config": cfg.to_dict(), "dataset_digest": ds.digest()})
    head_logs = train_heads(model, replicas, cfg, seed)
    return model, {"backbone": backbone_log, "heads": head_logs}


def train_mtfnn(ds: Dataset, arch: ArchSpec | None = None, cfg: TrainConfig | None = None,
                seed: int = 0) -> tuple[MemtlModel, dict]:
    """Baseline: one backbone + head stack, every layer trainable, full dataset."""
    arch = arch or ArchSpec()
    cfg = cfg or TrainConfig()
    backbone = arch.build_backbone(ds.ranges.feature_dim, seeded_rng(seed, _BACKBONE_INIT))
    head = arch.build_head(backbone.n_out, ds.n, seeded_rng(seed, _PROVISIONAL_HEAD))
    log = fit(backbone + head, ds.X, ds.D, ds.R, cfg, seeded_rng(seed, _BACKBONE_ORDER), "mtfnn")
    model = MemtlModel(backbone, [head], ds.ranges, arch, "mtfnn",
                       {"seed": seed, "train_config": cfg.to_dict(), "dataset_digest": ds.digest()})
    return model, {"mtfnn": log}


# -- inference ---------------------------------------------------------------


def postprocess_batch(raw: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Map raw ``(..., 2N)`` outputs to canonical ``(d, r)`` arrays.

    ``d = 1`` where the logit is non-negative (sigmoid >= 0.5).  Offloader
    allocations are clipped at zero and rescaled to sum to one, falling back
    to an even split when all clip to zero.
    """
    logits, reg = raw[..., :n], raw[..., n:]
    d = (logits >= 0.0).astype(np.int64)
    r = np.where(d == 1, np.maximum(reg, 0.0), 0.0)
    total = r.sum(axis=-1, keepdims=True)
    k = d.sum(axis=-1, keepdims=True)
    even = np.where(d == 1, 1.0 / np.maximum(k, 1), 0.0)
    r = np.where(total > 0, r / np.where(total > 0, total, 1.0), even)
    return d, r


def postprocess(raw: MultiTaskOutput) -> OffloadStrategy:
    n = raw.class_logits.size
    d, r = postprocess_batch(np.concatenate([raw.class_logits, raw.reg_values]), n)
    return OffloadStrategy(d, r)


def select_heads(costs: np.ndarray, feasible: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample argmin of ``costs`` (``(M, B)``) over deadline-feasible heads.

    Falls back to all heads for samples where none is feasible; ties go to the
    lowest head index.  Returns ``(index, any_feasible)``.
    """
    masked = np.where(feasible, costs, np.inf)
    any_ok = feasible.any(axis=0)
    # nan-free inf-aware argmin; rows of all-inf resolve to index 0
    choice = np.where(any_ok, np.argmin(masked, axis=0), np.argmin(np.nan_to_num(costs, nan=np.inf), axis=0))
    return choice, any_ok


@dataclass
class BatchPrediction:
    d: np.ndarray  # (B, N) selected decisions
    r: np.ndarray  # (B, N) selected allocations
    choice: np.ndarray  # (B,) selected head index
    feasible: np.ndarray  # (B,) whether the selection meets every deadline
    head_d: np.ndarray  # (M, B, N)
    head_r: np.ndarray  # (M, B, N)
    head_costs: np.ndarray  # (M, B)
    head_feasible: np.ndarray  # (M, B)
    raw: np.ndarray  # (M, B, 2N)


def predict_batch(model: MemtlModel, envs, X: np.ndarray | None = None, mode: str = "cost",
                  truth: np.ndarray | None = None) -> BatchPrediction:
    """Ensemble prediction for many environments.

    ``mode='cost'`` keeps the cheapest deadline-feasible head per sample;
    ``mode='mse'`` keeps the head closest to ``truth`` (``(B, 2N)``) and is
    only meant for error analysis.
    """
    envs = list(envs)
    if X is None:
        X = np.stack([featurize(e, model.ranges) for e in envs])
    raw = model.head_outputs(X)
    head_d, head_r = postprocess_batch(raw, model.n)
    stack = stack_environments(envs)
    costs = np.empty(head_d.shape[:2])
    ok = np.empty(head_d.shape[:2], dtype=bool)
    for i in range(model.m):
        costs[i], ok[i] = batch_evaluate(stack, head_d[i], head_r[i])
    if mode == "cost":
        choice, _ = select_heads(costs, ok)
    elif mode == "mse":
        if truth is None:
            raise InvalidParameterError("mse selection needs ground-truth targets")
        vec = np.concatenate([head_d.astype(np.float64), head_r], axis=-1)
        err = np.mean((vec - truth[None]) ** 2, axis=-1)
        choice = np.argmin(err, axis=0)
    else:
        raise InvalidParameterError(f"unknown selection mode {mode!r}")
    cols = np.arange(len(envs))
    return BatchPrediction(
        d=head_d[choice, cols], r=head_r[choice, cols], choice=choice, feasible=ok[choice, cols],
        head_d=head_d, head_r=head_r, head_costs=costs, head_feasible=ok, raw=raw,
    )


def predict_ensemble(model: MemtlModel, env: Environment) -> tuple[HeadStrategy, list[HeadStrategy]]:
    """Run every head on one environment and return ``(best, all_heads)``.

    ``best.feasible`` is ``False`` only when no head meets every deadline; the
    cheapest violator is returned in that case.
    """
    pred = predict_batch(model, [env])
    n = model.n
    heads = [
        HeadStrategy(
            strategy=OffloadStrategy(pred.head_d[i, 0], pred.head_r[i, 0]),
            raw=MultiTaskOutput(pred.raw[i, 0, :n].copy(), pred.raw[i, 0, n:].copy()),
            head_index=i,
            cost=float(pred.head_costs[i, 0]),
            feasible=bool(pred.head_feasible[i, 0]),
        )
        for i in range(model.m)
    ]
    return heads[int(pred.choice[0])], heads
