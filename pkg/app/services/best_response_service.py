# app/services/best_response_service.py
# Best responses on a power grid: conditional payoff table, dual bisection, vertex-enumeration oracle
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Literal, Sequence

import numpy as np

from app.core.errors import EnumerationCapExceeded, SpecValidationError
from app.services.channel_service import GainLadder, SystemSpec, UserSpec
from app.services.entropy_power import EntropyPowerLike
from app.services.interference import EvalSettings, InterferenceLaw, build_law, user_power_law
from app.services.policy_service import Policy, PolicyProfile, average_power, make_grid_policy
from app.services.power_grid import DEFAULT_GRID_POINTS, PowerGrid
from app.services.rate_service import expected_sum_rate
from app.utils.parallel import ordered_map

logger = logging.getLogger(__name__)

MAX_BISECTION_ITERS = 200
BUDGET_RESIDUAL_REL = 1e-10
VERTEX_CAP = 2_000_000
FEASIBILITY_EPS = 1e-12

DualSource = Literal["entropy_certificate", "rate_certificate", "bisection"]


@dataclass(frozen=True)
class DualParams:
    value: float  # lambda, rate per unit power
    source: DualSource

    def __post_init__(self) -> None:
        if self.value < 0:
            raise SpecValidationError(f"lambda must be nonnegative, got {self.value}", "lambda")

    def to_dict(self) -> dict[str, Any]:
        return {"lambda": self.value, "source": self.source}


@dataclass(frozen=True)
class PayoffTable:
    """C[k][m] = E over the other users of 1/2 ln(1 + N(h_k, g_m) / (1 + S))."""

    values: np.ndarray  # (K, M)
    stderr: np.ndarray  # (K, M)
    grid: PowerGrid
    method: str
    samples: int


@dataclass(frozen=True)
class BestResponseResult:
    policy: Policy
    value: float
    budget_used: float
    active: bool
    dual: DualParams | None
    method: str
    iterations: int = 0
    stderr: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "policy": self.policy.to_dict(),
            "value": self.value,
            "stderr": self.stderr,
            "budget_used": self.budget_used,
            "active": self.active,
            "dual": self.dual.to_dict() if self.dual else None,
            "method": self.method,
            "iterations": self.iterations,
        }


def _others_users(spec: SystemSpec, i: int) -> tuple[UserSpec, ...]:
    return spec.users[:i] + spec.users[i + 1 :]


def _user(spec: SystemSpec, i: int) -> UserSpec:
    if not 0 <= i < spec.n_users:
        raise SpecValidationError(f"user index {i} outside 0..{spec.n_users - 1}", "user")
    return spec.users[i]


def _grid_combos(m: int, n: int) -> np.ndarray:
    """All n-tuples of grid indices, shape (m**n, n)."""
    return np.array(list(itertools.product(range(m), repeat=n)), dtype=np.int64).reshape(m**n, n)


def _check_user(spec: SystemSpec, i: int, others: Sequence[Policy]) -> None:
    _user(spec, i)
    if len(others) != spec.n_users - 1:
        raise SpecValidationError(
            f"expected {spec.n_users - 1} opposing policies, got {len(others)}", "profile.policies"
        )


def default_grid(user: UserSpec, m: int = DEFAULT_GRID_POINTS) -> PowerGrid:
    return PowerGrid.uniform(user.g_max, m)


def others_law(i: int, others: Sequence[Policy], spec: SystemSpec, settings: EvalSettings, purpose: str) -> InterferenceLaw:
    laws = [user_power_law(p, u.pi, spec.model, spec.ladder.gains) for p, u in zip(others, _others_users(spec, i))]
    return build_law(laws, settings, purpose)


def conditional_payoff_table(
    i: int,
    others: Sequence[Policy],
    spec: SystemSpec,
    grid: PowerGrid | None = None,
    settings: EvalSettings | None = None,
) -> PayoffTable:
    """
    Own-state payoff table for user i against fixed opposing policies.
    Monte Carlo cells share the same draws of S (common random numbers).
    """
    _check_user(spec, i, others)
    user = spec.users[i]
    grid = grid or default_grid(user)
    if grid.g_max > user.g_max:
        raise SpecValidationError(f"grid reaches {grid.g_max} above g_max={user.g_max}", "grid")
    settings = settings or EvalSettings(method="auto")
    law = others_law(i, others, spec, settings, f"payoff:{i}")
    pts = grid.as_array()

    def _row(h: float) -> tuple[np.ndarray, np.ndarray]:
        a = np.asarray(spec.model.n(h, pts), dtype=float)
        if not np.any(a > 0):
            return np.zeros(pts.size), np.zeros(pts.size)
        return law.expect(lambda s: 0.5 * np.log1p(a[:, None] / (1.0 + s[None, :])))

    rows = ordered_map(_row, list(spec.ladder.gains))
    return PayoffTable(
        values=np.vstack([r[0] for r in rows]),
        stderr=np.vstack([r[1] for r in rows]),
        grid=grid,
        method=law.method,
        samples=law.samples,
    )


# ----------------------------- Dual bisection -----------------------------
def _choices(table: np.ndarray, pts: np.ndarray, lam: float, live: np.ndarray) -> np.ndarray:
    # np.argmax keeps the first maximizer, i.e. the smallest power
    idx = np.argmax(table - lam * pts[None, :], axis=1)
    return np.where(live, idx, 0)


def _budget(pi: np.ndarray, pts: np.ndarray, idx: np.ndarray) -> float:
    return math.fsum((pi * pts[idx]).tolist())


def _policy_value(policy: Policy, table: PayoffTable, pi: np.ndarray) -> tuple[float, float]:
    pts = table.grid.as_array()
    val = []
    var = 0.0
    for k, dist in enumerate(policy.per_level):
        if pi[k] <= 0:
            continue
        for g, p in dist.atoms:
            m = int(np.searchsorted(pts, g))
            val.append(pi[k] * p * table.values[k, m])
            var += (pi[k] * p * table.stderr[k, m]) ** 2
    # cells share draws, so the quadrature sum is only indicative
    return math.fsum(val), math.sqrt(var)


def solve_dual(pi: np.ndarray, pts: np.ndarray, table: np.ndarray, g_bar: float) -> tuple[list[list[tuple[float, float]]], float, int]:
    """
    Maximize sum_k pi_k E[C_k(G_k)] s.t. sum_k pi_k E[G_k] <= g_bar over grid-supported
    policies. Returns per-level atoms, lambda and the bisection iteration count.
    """
    live = pi > 0
    g_max = float(pts[-1])
    idx0 = _choices(table, pts, 0.0, live)
    if _budget(pi, pts, idx0) <= g_bar:
        return [[(float(pts[m]), 1.0)] for m in idx0], 0.0, 0

    lo, hi = 0.0, float(table.max()) / float(pts[1])
    idx_hi = _choices(table, pts, hi, live)
    iters = 0
    while iters < MAX_BISECTION_ITERS:
        if g_bar - _budget(pi, pts, idx_hi) <= BUDGET_RESIDUAL_REL * g_max:
            break
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        iters += 1
        idx_mid = _choices(table, pts, mid, live)
        if _budget(pi, pts, idx_mid) > g_bar:
            lo = mid
        else:
            hi, idx_hi = mid, idx_mid
    else:
        logger.warning("best_response: bisection hit %d iterations (bracket [%g, %g])", MAX_BISECTION_ITERS, lo, hi)
    idx_lo = _choices(table, pts, lo, live)

    # walk from the hi choice toward the lo choice; the level that would overshoot mixes
    levels: list[list[tuple[float, float]]] = [[(float(pts[m]), 1.0)] for m in idx_hi]
    used = _budget(pi, pts, idx_hi)
    for k in range(len(pi)):
        a, b = int(idx_hi[k]), int(idx_lo[k])
        if a == b or not live[k]:
            continue
        extra = pi[k] * (pts[b] - pts[a])
        if used + extra <= g_bar:
            levels[k] = [(float(pts[b]), 1.0)]
            used += extra
            continue
        theta = (g_bar - used) / extra
        levels[k] = [(float(pts[a]), 1.0 - theta), (float(pts[b]), theta)]
        break
    return levels, 0.5 * (lo + hi), iters


def best_response(
    i: int,
    others: Sequence[Policy],
    spec: SystemSpec,
    grid: PowerGrid | None = None,
    settings: EvalSettings | None = None,
    *,
    table: PayoffTable | None = None,
) -> BestResponseResult:
    """
    Best grid-supported policy of user i via Lagrangian bisection on lambda.
    At most one level carries two atoms; ties go to the smaller power.
    """
    user = _user(spec, i)
    table = table or conditional_payoff_table(i, others, spec, grid, settings)
    pi = user.pi_array
    pts = table.grid.as_array()

    levels, lam, iters = solve_dual(pi, pts, table.values, user.g_bar)
    policy = make_grid_policy(levels, user.g_max)
    value, se = _policy_value(policy, table, pi)
    used = average_power(policy, user)
    logger.debug("best_response: user=%d lambda=%.6g budget=%.12g value=%.12g", i, lam, used, value)
    return BestResponseResult(
        policy=policy,
        value=value,
        stderr=se,
        budget_used=used,
        active=lam > 0,
        dual=DualParams(value=lam, source="bisection"),
        method=table.method,
        iterations=iters,
    )


# ----------------------------- Vertex oracle -----------------------------
def vertex_count(levels: int, m: int) -> int:
    """Pure vertices plus single-level two-atom mixtures."""
    pairs = m * (m - 1) // 2
    return m**levels + levels * pairs * m ** max(levels - 1, 0)


def brute_force_best_response(
    i: int,
    others: Sequence[Policy],
    spec: SystemSpec,
    grid: PowerGrid | None = None,
    settings: EvalSettings | None = None,
    *,
    table: PayoffTable | None = None,
    cap: int = VERTEX_CAP,
) -> BestResponseResult:
    """
    Global optimum over grid policies by enumerating every basic feasible solution:
    one grid point per level, or one level split across two points with the budget tight.
    """
    user = _user(spec, i)
    table = table or conditional_payoff_table(i, others, spec, grid, settings)
    pi = user.pi_array
    pts = table.grid.as_array()
    live = np.flatnonzero(pi > 0)
    kl, m = live.size, pts.size
    count = vertex_count(kl, m)
    if count > cap:
        raise EnumerationCapExceeded(count, cap, "use a coarser grid")

    g_bar = user.g_bar
    best_val, best_levels = -np.inf, None

    # pure vertices
    combos = _grid_combos(m, kl)
    costs = (pi[live][None, :] * pts[combos]).sum(axis=1)
    vals = (pi[live][None, :] * table.values[live[None, :], combos]).sum(axis=1)
    ok = costs <= g_bar + FEASIBILITY_EPS
    if np.any(ok):
        j = int(np.flatnonzero(ok)[np.argmax(vals[ok])])
        best_val = float(vals[j])
        best_levels = {int(k): [(float(pts[combos[j, c]]), 1.0)] for c, k in enumerate(live)}

    # one mixed level with a tight budget
    m1, m2 = np.triu_indices(m, k=1)
    for c, k in enumerate(live):
        rest = [x for x in range(kl) if x != c]
        sub = _grid_combos(m, len(rest))
        rest_k = live[rest]
        r_cost = (pi[rest_k][None, :] * pts[sub]).sum(axis=1)
        r_val = (pi[rest_k][None, :] * table.values[rest_k[None, :], sub]).sum(axis=1)
        pk = pi[k]
        g1, g2 = pts[m1], pts[m2]
        theta = (g_bar - r_cost[:, None] - pk * g1[None, :]) / (pk * (g2 - g1))[None, :]
        inside = (theta > 0) & (theta < 1)
        if not np.any(inside):
            continue
        v = r_val[:, None] + pk * ((1 - theta) * table.values[k, m1][None, :] + theta * table.values[k, m2][None, :])
        v = np.where(inside, v, -np.inf)
        flat = int(np.argmax(v))
        if v.flat[flat] > best_val:
            r, q = divmod(flat, m1.size)
            best_val = float(v.flat[flat])
            t = float(theta[r, q])
            best_levels = {int(rest_k[x]): [(float(pts[sub[r, x]]), 1.0)] for x in range(len(rest))}
            best_levels[int(k)] = [(float(pts[m1[q]]), 1.0 - t), (float(pts[m2[q]]), t)]

    if best_levels is None:
        raise SpecValidationError("no feasible grid policy", "grid")
    levels = [best_levels.get(k, [(0.0, 1.0)]) for k in range(len(pi))]
    policy = make_grid_policy(levels, user.g_max)
    value, se = _policy_value(policy, table, pi)
    used = average_power(policy, user)
    return BestResponseResult(
        policy=policy,
        value=value,
        stderr=se,
        budget_used=used,
        active=used >= g_bar - BUDGET_RESIDUAL_REL * user.g_max,
        dual=None,
        method=table.method,
    )


# ----------------------------- Dynamics -----------------------------
@dataclass(frozen=True)
class RoundRecord:
    round: int
    profile: PolicyProfile
    sum_rate: float
    stderr: float
    changed: list[int] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "round": self.round,
            "sum_rate": self.sum_rate,
            "stderr": self.stderr,
            "changed": list(self.changed),
            "profile": self.profile.to_dict(),
        }


def iterated_best_response(
    initial: PolicyProfile,
    spec: SystemSpec,
    grid: PowerGrid | None = None,
    rounds: int = 1,
    settings: EvalSettings | None = None,
    *,
    atol: float = 1e-9,
) -> list[RoundRecord]:
    """Round-robin best responses; the sum rate is recorded after every round, nothing is asserted."""
    if rounds < 1:
        raise SpecValidationError("rounds must be at least 1", "rounds")
    settings = settings or EvalSettings(method="auto")
    profile = initial
    trajectory: list[RoundRecord] = []
    for r in range(1, int(rounds) + 1):
        changed: list[int] = []
        for i in range(spec.n_users):
            res = best_response(i, profile.others(i), spec, grid, settings)
            if not res.policy.close_to(profile.policies[i], atol):
                changed.append(i)
                profile = profile.replace(i, res.policy)
        t = expected_sum_rate(profile, spec, settings)
        trajectory.append(RoundRecord(round=r, profile=profile, sum_rate=t.value, stderr=t.stderr, changed=changed))
        logger.info("iterated_best_response: round %d sum_rate=%.12g changed=%s", r, t.value, changed)
        if not changed:
            break
    return trajectory


def expected_entropy_power(policy: Policy, user: UserSpec, model: EntropyPowerLike, ladder: GainLadder) -> float:
    """E[N(h, G)] under the user's stationary law and policy."""
    terms = []
    for h, pk, dist in zip(ladder.gains, user.pi, policy.per_level):
        vals = np.asarray(model.n(h, np.asarray(dist.powers, dtype=float)), dtype=float).reshape(-1)
        terms.extend((pk * np.asarray(dist.probs) * vals).tolist())
    return math.fsum(terms)
