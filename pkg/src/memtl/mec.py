"""System model of a single-server MEC cell: per-MT parameters, costs and constraints.

Costs follow the usual weighted delay/energy form.  With weight ``alpha`` on delay,

* local execution costs ``(1 - alpha) * kappa * r_local**2 * c + alpha * c / r_local``
* offloading costs ``(1 - alpha) * (P_u p/u + P_e c/r_off + P_d q/d) + alpha * (p/u + c/r_off + q/d)``

where ``r_off = R_n * f_mes`` is the MES compute granted to the MT.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from memtl.errors import InvalidParameterError, ZeroAllocationError

#: Per-MT parameter names, in serialization order.
MT_FIELDS = ("c", "r_local", "p", "q", "u", "d", "P_u", "P_e", "P_d", "theta")
_POSITIVE = ("c", "r_local", "u", "d", "theta")
_NON_NEGATIVE = ("p", "q", "P_u", "P_e", "P_d")

C4_SLACK = 1e-9
C2_SLACK = 1e-12


@dataclass(frozen=True)
class MtParams:
    """Job, link and power parameters of one mobile terminal."""

    c: float
    r_local: float
    p: float
    q: float
    u: float
    d: float
    P_u: float
    P_e: float
    P_d: float
    theta: float

    def __post_init__(self):
        for name in _POSITIVE:
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)) and not (name == "theta" and v == math.inf):
                raise InvalidParameterError(f"{name} must be positive and finite, got {v!r}")
        for name in _NON_NEGATIVE:
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise InvalidParameterError(f"{name} must be non-negative and finite, got {v!r}")

    @property
    def transfer_delay(self) -> float:
        return self.p / self.u + self.q / self.d

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in MT_FIELDS}

    @classmethod
    def from_dict(cls, data: dict) -> "MtParams":
        return cls(**{k: float(data[k]) for k in MT_FIELDS})


@dataclass(frozen=True)
class Environment:
    """One problem instance: N terminals plus the cell-wide constants."""

    mts: tuple[MtParams, ...]
    alpha: float
    kappa: float
    f_mes: float

    def __post_init__(self):
        object.__setattr__(self, "mts", tuple(self.mts))
        if len(self.mts) < 1:
            raise InvalidParameterError("an environment needs at least one MT")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidParameterError(f"alpha must lie in [0, 1], got {self.alpha!r}")
        if not self.kappa > 0:
            raise InvalidParameterError(f"kappa must be positive, got {self.kappa!r}")
        if not (self.f_mes > 0 and math.isfinite(self.f_mes)):
            raise InvalidParameterError(f"f_mes must be positive, got {self.f_mes!r}")

    @property
    def n(self) -> int:
        return len(self.mts)

    @cached_property
    def arrays(self) -> dict[str, np.ndarray]:
        """Column view of the per-MT parameters, one read-only array per field."""
        cols = {}
        for name in MT_FIELDS:
            a = np.array([getattr(mt, name) for mt in self.mts], dtype=np.float64)
            a.setflags(write=False)
            cols[name] = a
        return cols

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "kappa": self.kappa,
            "f_mes": self.f_mes,
            "mts": [mt.to_dict() for mt in self.mts],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Environment":
        return cls(
            mts=tuple(MtParams.from_dict(m) for m in data["mts"]),
            alpha=float(data["alpha"]),
            kappa=float(data["kappa"]),
            f_mes=float(data["f_mes"]),
        )


@dataclass
class OffloadStrategy:
    """Decision vector ``d`` (0/1) and MES allocation proportions ``r``.

    Construction only checks shapes; use :func:`check_feasible` for the
    constraint set.
    """

    d: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.int64).reshape(-1)
        self.r = np.asarray(self.r, dtype=np.float64).reshape(-1)
        if self.d.shape != self.r.shape:
            raise InvalidParameterError(
                f"decision and allocation lengths differ: {self.d.size} vs {self.r.size}"
            )

    @property
    def n(self) -> int:
        return self.d.size

    def canonical(self) -> "OffloadStrategy":
        """Copy with allocations of local MTs forced to zero."""
        return OffloadStrategy(self.d.copy(), np.where(self.d == 1, self.r, 0.0))

    def as_vector(self) -> np.ndarray:
        """Concatenated ``(d, r)`` target vector of length 2N."""
        return np.concatenate([self.d.astype(np.float64), self.r])

    def __eq__(self, other):
        if not isinstance(other, OffloadStrategy):
            return NotImplemented
        return np.array_equal(self.d, other.d) and np.array_equal(self.r, other.r)


def local_cost(mt: MtParams, alpha: float, kappa: float) -> float:
    energy = kappa * mt.r_local**2 * mt.c
    delay = mt.c / mt.r_local
    return (1.0 - alpha) * energy + alpha * delay


def offload_cost(mt: MtParams, alpha: float, r_offload: float) -> float:
    if not r_offload > 0:
        raise ZeroAllocationError(f"offloading MT has non-positive MES compute {r_offload!r}")
    up, exe, down = mt.p / mt.u, mt.c / r_offload, mt.q / mt.d
    energy = mt.P_u * up + mt.P_e * exe + mt.P_d * down
    return (1.0 - alpha) * energy + alpha * (up + exe + down)


def _local_costs(env: Environment) -> np.ndarray:
    a = env.arrays
    return (1.0 - env.alpha) * env.kappa * a["r_local"] ** 2 * a["c"] + env.alpha * a["c"] / a["r_local"]


def _offload_costs(env: Environment, r: np.ndarray) -> np.ndarray:
    """Per-MT offloading cost for allocations ``r`` (all must be positive)."""
    a = env.arrays
    up, down = a["p"] / a["u"], a["q"] / a["d"]
    exe = a["c"] / (r * env.f_mes)
    energy = a["P_u"] * up + a["P_e"] * exe + a["P_d"] * down
    return (1.0 - env.alpha) * energy + env.alpha * (up + exe + down)


def per_mt_costs(env: Environment, s: OffloadStrategy) -> np.ndarray:
    _check_length(env, s)
    off = s.d == 1
    if np.any(off & ~(s.r > 0)):
        bad = np.flatnonzero(off & ~(s.r > 0)).tolist()
        raise ZeroAllocationError(f"offloading MTs {bad} have zero MES allocation")
    costs = _local_costs(env)
    if off.any():
        r_safe = np.where(off, s.r, 1.0)
        costs = np.where(off, _offload_costs(env, r_safe), costs)
    return costs


def total_cost(env: Environment, s: OffloadStrategy) -> float:
    """Weighted sum cost; allocations of non-offloading MTs are ignored."""
    return float(math.fsum(per_mt_costs(env, s)))


def delays(env: Environment, s: OffloadStrategy) -> np.ndarray:
    """Per-MT completion delay under ``s`` (``inf`` for unfunded offloaders)."""
    _check_length(env, s)
    a = env.arrays
    local = a["c"] / a["r_local"]
    off = s.d == 1
    with np.errstate(divide="ignore"):
        r_off = np.where(off & (s.r > 0), s.r * env.f_mes, 0.0)
        exe = np.where(r_off > 0, a["c"] / np.where(r_off > 0, r_off, 1.0), np.inf)
    remote = a["p"] / a["u"] + exe + a["q"] / a["d"]
    return np.where(off, remote, local)


@dataclass
class FeasibilityReport:
    """Outcome of the four constraint checks.  Index lists are 0-based."""

    c1: bool
    c2: bool
    c3: bool
    c4: bool
    c1_violations: list[int] = field(default_factory=list)
    c2_violations: list[int] = field(default_factory=list)
    c3_violations: list[int] = field(default_factory=list)
    allocation_sum: float = 0.0

    @property
    def ok(self) -> bool:
        return self.c1 and self.c2 and self.c3 and self.c4


def check_feasible(env: Environment, s: OffloadStrategy) -> FeasibilityReport:
    _check_length(env, s)
    c1_bad = np.flatnonzero((s.d != 0) & (s.d != 1))
    c2_bad = np.flatnonzero(~(delays(env, s) <= env.arrays["theta"] + C2_SLACK))
    c3_bad = np.flatnonzero(~((s.r >= 0.0) & (s.r <= 1.0)))
    total = float(math.fsum(s.r))
    return FeasibilityReport(
        c1=c1_bad.size == 0,
        c2=c2_bad.size == 0,
        c3=c3_bad.size == 0,
        c4=total <= 1.0 + C4_SLACK,
        c1_violations=c1_bad.tolist(),
        c2_violations=c2_bad.tolist(),
        c3_violations=c3_bad.tolist(),
        allocation_sum=total,
    )


def _check_length(env: Environment, s: OffloadStrategy) -> None:
    if s.n != env.n:
        raise InvalidParameterError(f"strategy has length {s.n}, environment has {env.n} MTs")


def stack_environments(envs) -> dict[str, np.ndarray]:
    """``(B, N)`` parameter matrices for environments sharing the cell constants."""
    envs = list(envs)
    first = envs[0]
    for e in envs:
        if (e.alpha, e.kappa, e.f_mes, e.n) != (first.alpha, first.kappa, first.f_mes, first.n):
            raise InvalidParameterError("stacked environments must share N, alpha, kappa and f_mes")
    out = {k: np.stack([e.arrays[k] for e in envs]) for k in MT_FIELDS}
    out["alpha"], out["kappa"], out["f_mes"] = first.alpha, first.kappa, first.f_mes
    return out


def batch_evaluate(stack: dict, d: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Costs and deadline feasibility of one strategy per stacked environment.

    ``d`` and ``r`` are ``(B, N)``.  Offloaders with no allocation get cost
    ``inf`` and fail the deadline check.  Returns ``(cost, deadline_ok)``.
    """
    alpha, kappa, f_mes = stack["alpha"], stack["kappa"], stack["f_mes"]
    c, r_loc = stack["c"], stack["r_local"]
    off = d == 1
    funded = off & (r > 0)
    local = (1.0 - alpha) * kappa * r_loc**2 * c + alpha * c / r_loc
    up, down = stack["p"] / stack["u"], stack["q"] / stack["d"]
    exe = c / (np.where(funded, r, 1.0) * f_mes)
    remote = (1.0 - alpha) * (stack["P_u"] * up + stack["P_e"] * exe + stack["P_d"] * down) + alpha * (
        up + exe + down
    )
    per_mt = np.where(off, np.where(funded, remote, np.inf), local)
    delay = np.where(off, np.where(funded, up + exe + down, np.inf), c / r_loc)
    ok = np.all(delay <= stack["theta"] + C2_SLACK, axis=1)
    return per_mt.sum(axis=1), ok
