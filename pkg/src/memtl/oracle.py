"""Ground-truth solver for the joint offloading / allocation problem.

The outer problem enumerates every decision vector.  For a fixed decision the
remaining cost is ``const + sum_n w_n / R_n`` over the offloaders, with
``w_n = ((1 - alpha) * P_e + alpha) * c_n / f_mes``, minimised over the
allocation simplex subject to per-MT lower bounds from the delay deadline.
That inner problem is solved two independent ways: in closed form (square-root
rule with clamp-and-resolve for binding deadlines) and by a lattice search over
the simplex.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from memtl.errors import InvalidParameterError, UnlabelableError
from memtl.features import LabeledSample, SamplingRanges, featurize
from memtl.mec import C2_SLACK, Environment, OffloadStrategy, total_cost

InnerMethod = Literal["closed_form", "grid"]

MAX_ENUMERATED_MTS = 12
DEFAULT_GRID_RESOLUTION = 1e-3
# relative cost gap below which two decision vectors count as tied
_TIE_RTOL = 1e-12


@dataclass
class OracleSolution:
    strategy: OffloadStrategy
    cost: float
    feasible: bool
    method: str


def allocation_weights(env: Environment) -> np.ndarray:
    """Coefficient ``w_n`` of ``1/R_n`` in each MT's offloading cost."""
    a = env.arrays
    return ((1.0 - env.alpha) * a["P_e"] + env.alpha) * a["c"] / env.f_mes


def allocation_lower_bounds(env: Environment) -> np.ndarray:
    """Smallest allocation meeting each MT's deadline when offloading.

    ``inf`` marks MTs whose transfer time alone exceeds the deadline.
    """
    a = env.arrays
    slack = a["theta"] - (a["p"] / a["u"] + a["q"] / a["d"])
    with np.errstate(divide="ignore", invalid="ignore"):
        lower = np.where(slack > 0, a["c"] / (env.f_mes * slack), np.inf)
    return np.where(np.isinf(a["theta"]), 0.0, lower)


def local_deadline_ok(env: Environment) -> np.ndarray:
    a = env.arrays
    return a["c"] / a["r_local"] <= a["theta"] + C2_SLACK


def _check_decision(env: Environment, d) -> np.ndarray:
    d = np.asarray(d, dtype=np.int64).reshape(-1)
    if d.size != env.n or np.any((d != 0) & (d != 1)):
        raise InvalidParameterError(f"decision must be a 0/1 vector of length {env.n}, got {d.tolist()}")
    if not d.any():
        raise InvalidParameterError("inner allocation needs at least one offloading MT")
    return d


def sqrt_rule(w: np.ndarray, lower: np.ndarray, budget: float = 1.0) -> np.ndarray | None:
    """Minimise ``sum w/R`` s.t. ``sum R = budget`` and ``R >= lower``.

    Entries falling below their bound are pinned to it and the square-root
    split is recomputed on what is left.  The pinned set only grows, so this
    terminates in at most ``len(w)`` passes.  Returns ``None`` when the bounds
    alone exceed the budget.
    """
    w = np.asarray(w, dtype=np.float64)
    lower = np.asarray(lower, dtype=np.float64)
    if not np.all(np.isfinite(lower)) or math.fsum(lower) > budget:
        return None
    pinned = np.zeros(w.size, dtype=bool)
    r = np.zeros(w.size)
    while True:
        free = ~pinned
        left = budget - math.fsum(lower[pinned])
        root = np.sqrt(w[free])
        total = root.sum()
        r[free] = left * root / total if total > 0 else left / free.sum()
        low = free & (r < lower)
        if not low.any():
            return r
        pinned |= low
        r[low] = lower[low]
        if pinned.all():
            # only reachable when sum(lower) == budget up to rounding
            return r


def inner_allocation_closed_form(env: Environment, d) -> np.ndarray | None:
    """Optimal MES split for a fixed decision vector, or ``None`` if the deadlines cannot be met."""
    d = _check_decision(env, d)
    off = d == 1
    share = sqrt_rule(allocation_weights(env)[off], allocation_lower_bounds(env)[off])
    if share is None:
        return None
    r = np.zeros(env.n)
    r[off] = share
    return r


def _grid_steps(resolution: float) -> int:
    if not 0.0 < resolution < 1.0:
        raise InvalidParameterError(f"resolution must lie in (0, 1), got {resolution}")
    steps = round(1.0 / resolution)
    if abs(steps * resolution - 1.0) > 1e-9:
        raise InvalidParameterError(f"1/resolution must be an integer, got {1.0 / resolution}")
    return steps


def _lattice_costs(env: Environment, off: np.ndarray, steps: int) -> np.ndarray:
    """Offloading cost of each offloader at every lattice allocation ``i/steps``, i = 0..steps.

    Column 0 and deadline-violating cells are ``inf``.
    """
    a = env.arrays
    idx = np.flatnonzero(off)
    frac = np.arange(steps + 1) / steps
    costs = np.full((idx.size, steps + 1), np.inf)
    for row, n in enumerate(idx):
        exe = a["c"][n] / (frac[1:] * env.f_mes)
        up, down = a["p"][n] / a["u"][n], a["q"][n] / a["d"][n]
        energy = a["P_u"][n] * up + a["P_e"][n] * exe + a["P_d"][n] * down
        cost = (1.0 - env.alpha) * energy + env.alpha * (up + exe + down)
        ok = up + exe + down <= a["theta"][n] + C2_SLACK
        costs[row, 1:] = np.where(ok, cost, np.inf)
    return costs


def inner_allocation_grid(env: Environment, d, resolution: float = DEFAULT_GRID_RESOLUTION) -> np.ndarray | None:
    """Best allocation on the simplex lattice with spacing ``resolution``.

    The lattice points are the compositions of ``1/resolution`` cells among the
    offloaders (every offloader gets at least one cell).  The objective is
    separable, so the exact lattice minimum is found by a min-plus dynamic
    programme over the cell budget instead of listing every composition.
    """
    d = _check_decision(env, d)
    steps = _grid_steps(resolution)
    off = d == 1
    k = int(off.sum())
    if k > steps:
        return None
    g = _lattice_costs(env, off, steps)

    # best[t][j]: cheapest way to give j cells to the first t+1 offloaders
    best = g[0].copy()
    choices = []
    for t in range(1, k):
        new = np.full(steps + 1, np.inf)
        arg = np.zeros(steps + 1, dtype=np.int64)
        for i in range(1, steps + 1):
            cand = best[: steps + 1 - i] + g[t, i]
            tail = new[i:]
            better = cand < tail
            tail[better] = cand[better]
            arg[i:][better] = i
        best = new
        choices.append(arg)
    if not np.isfinite(best[steps]):
        return None

    cells = np.zeros(k, dtype=np.int64)
    left = steps
    for t in range(k - 1, 0, -1):
        cells[t] = choices[t - 1][left]
        left -= cells[t]
    cells[0] = left
    r = np.zeros(env.n)
    r[off] = cells / steps
    return r


def enumerate_lattice(env: Environment, d, resolution: float) -> np.ndarray | None:
    """Literal enumeration of every lattice composition; only for small instances and tests."""
    d = _check_decision(env, d)
    steps = _grid_steps(resolution)
    off = d == 1
    k = int(off.sum())
    g = _lattice_costs(env, off, steps)
    best, best_cells = np.inf, None
    for cut in itertools.combinations(range(1, steps), k - 1):
        cells = np.diff((0, *cut, steps))
        cost = math.fsum(g[np.arange(k), cells])
        if cost < best:
            best, best_cells = cost, cells
    if best_cells is None:
        return None
    r = np.zeros(env.n)
    r[off] = np.asarray(best_cells) / steps
    return r


def decision_order(n: int) -> list[tuple[int, ...]]:
    """All 0/1 vectors of length ``n``: fewest offloaders first, then lowest binary value (MT 1 most significant)."""
    return sorted(itertools.product((0, 1), repeat=n), key=lambda d: (sum(d), d))


def solve_exhaustive(
    env: Environment,
    inner: InnerMethod = "closed_form",
    resolution: float = DEFAULT_GRID_RESOLUTION,
    max_n: int = MAX_ENUMERATED_MTS,
) -> OracleSolution:
    """Enumerate every decision vector and solve each inner allocation.

    Ties within a relative ``1e-12`` go to the earlier vector in
    :func:`decision_order`.  Raises :class:`UnlabelableError` if no decision
    meets every deadline.
    """
    if env.n > max_n:
        raise InvalidParameterError(f"exhaustive search limited to {max_n} MTs, got {env.n}")
    if inner == "closed_form":
        solve_inner = inner_allocation_closed_form
    elif inner == "grid":
        def solve_inner(e, d):
            return inner_allocation_grid(e, d, resolution)
    else:
        raise InvalidParameterError(f"unknown inner solver {inner!r}")

    local_ok = local_deadline_ok(env)
    best_cost, best = math.inf, None
    for d in decision_order(env.n):
        d = np.array(d, dtype=np.int64)
        if not np.all(local_ok[d == 0]):
            continue
        r = solve_inner(env, d) if d.any() else np.zeros(env.n)
        if r is None:
            continue
        s = OffloadStrategy(d, r)
        cost = total_cost(env, s)
        if best is None or cost < best_cost - _TIE_RTOL * max(1.0, abs(best_cost)):
            best_cost, best = cost, s
    if best is None:
        raise UnlabelableError("no offloading decision satisfies every delay deadline")
    return OracleSolution(best, total_cost(env, best), True, inner)


def label_sample(env: Environment, ranges: SamplingRanges, inner: InnerMethod = "closed_form") -> LabeledSample:
    sol = solve_exhaustive(env, inner)
    return LabeledSample(
        x=featurize(env, ranges),
        d_star=sol.strategy.d.copy(),
        r_star=sol.strategy.r.copy(),
        cost_star=sol.cost,
        raw_env=env,
    )
