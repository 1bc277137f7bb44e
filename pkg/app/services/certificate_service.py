# app/services/certificate_service.py
# Dual certificates for the invariant policy and the empirical invariance threshold N*
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Literal, Sequence

import numpy as np
from scipy.stats import norm

from app.core.errors import RegularityViolation, SpecValidationError
from app.services.best_response_service import DualParams, default_grid, others_law
from app.services.channel_service import SystemSpec, UserSpec, validate_spec
from app.services.entropy_power import require_strict_convexity
from app.services.interference import EvalSettings, InterferenceLaw
from app.services.policy_service import invariant_policy, invariant_profile
from app.services.power_grid import DEFAULT_GRID_POINTS, PowerGrid
from app.utils.parallel import ordered_map

logger = logging.getLogger(__name__)

CertificateKind = Literal["entropy", "m_dominating"]
Status = Literal["holds", "violated", "inconclusive"]

ENTROPY_TOLERANCE = 1e-12
CONFIDENCE = 0.999
CELL_CHUNK = 2048


@dataclass(frozen=True)
class MarginRow:
    n_users: int
    level: int  # 1-based ladder position
    g: float
    condition: str
    margin: float
    ci_low: float
    ci_high: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_users": self.n_users,
            "level": self.level,
            "g": self.g,
            "condition": self.condition,
            "margin": self.margin,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
        }


@dataclass(frozen=True)
class CertificateReport:
    kind: CertificateKind
    n_users: int
    rows: list[MarginRow]
    min_margin: float
    status: Status
    duals: list[DualParams]
    tolerance: float
    method: str = "exact"
    samples: int = 0
    required_samples: int | None = None
    equality_points: list[tuple[int, float]] = field(default_factory=list)

    @property
    def holds(self) -> bool:
        return self.status == "holds"

    @property
    def min_ci_low(self) -> float:
        return min(r.ci_low for r in self.rows) if self.rows else math.inf

    def to_dict(self, include_rows: bool = True) -> dict[str, Any]:
        out: dict[str, Any] = {
            "kind": self.kind,
            "n_users": self.n_users,
            "status": self.status,
            "holds": self.holds,
            "min_margin": self.min_margin,
            "min_ci_low": self.min_ci_low,
            "tolerance": self.tolerance,
            "method": self.method,
            "samples": self.samples,
            "required_samples": self.required_samples,
            "duals": [d.to_dict() for d in self.duals],
        }
        if self.equality_points:
            out["equality_points"] = [{"level": k, "g": g} for k, g in self.equality_points]
        if include_rows:
            out["rows"] = [r.to_dict() for r in self.rows]
        return out


def _user_grid(user: UserSpec, grid: PowerGrid | None, grid_points: int = DEFAULT_GRID_POINTS) -> PowerGrid:
    """An explicit grid is shared and must fit the user; otherwise a uniform grid up to the user's own g_max."""
    grid = grid or default_grid(user, grid_points)
    if grid.g_max != user.g_max:
        raise SpecValidationError(f"grid must end at g_max={user.g_max}, got {grid.g_max}", "grid")
    return grid


def _distinct_users(spec: SystemSpec) -> list[int]:
    """First index of each distinct UserSpec; equal users face the same opponents."""
    seen: dict[UserSpec, int] = {}
    for i, u in enumerate(spec.users):
        seen.setdefault(u, i)
    return list(seen.values())


# ----------------------------- Entropy certificate -----------------------------
def verify_entropy_dual_certificate(
    user: UserSpec,
    spec: SystemSpec,
    grid: PowerGrid | None = None,
    grid_points: int = DEFAULT_GRID_POINTS,
) -> CertificateReport:
    """
    With lambda = N(h_tau, g_max) / g_max, checks on the grid
        N(h_k, g) - lambda * g <= max(0, N(h_k, g_max) - N(h_tau, g_max))
    for every level k. margin = RHS - LHS.
    """
    grid = _user_grid(user, grid, grid_points)
    require_strict_convexity(spec.model, spec.ladder, grid)
    inv = invariant_policy(user, spec.ladder)
    pts = grid.as_array()
    g_max = user.g_max
    top_tau = float(spec.model.n(spec.ladder.gains[inv.tau_index], g_max))
    lam = top_tau / g_max

    rows: list[MarginRow] = []
    equality: list[tuple[int, float]] = []
    for k, h in enumerate(spec.ladder.gains):
        vals = np.asarray(spec.model.n(h, pts), dtype=float)
        rhs = max(0.0, float(spec.model.n(h, g_max)) - top_tau)
        margins = rhs - (vals - lam * pts)
        for g, mg in zip(pts, margins):
            rows.append(MarginRow(spec.n_users, k + 1, float(g), "entropy", float(mg), float(mg), float(mg)))
            if abs(mg) <= ENTROPY_TOLERANCE and h > 0 and g in (0.0, g_max):
                equality.append((k + 1, float(g)))

    min_margin = min(r.margin for r in rows)
    return CertificateReport(
        kind="entropy",
        n_users=spec.n_users,
        rows=rows,
        min_margin=min_margin,
        status="holds" if min_margin >= -ENTROPY_TOLERANCE else "violated",
        duals=[DualParams(value=lam, source="entropy_certificate")],
        tolerance=ENTROPY_TOLERANCE,
        equality_points=equality,
    )


# ----------------------------- Rate (m-dominating) certificate -----------------------------
@dataclass(frozen=True)
class _UserMargins:
    user: int
    tau_index: int
    lam: float
    margin: np.ndarray  # (K, M)
    stderr: np.ndarray
    widen: np.ndarray | float
    method: str
    samples: int


def _m_dominating_margins(i: int, spec: SystemSpec, grid: PowerGrid, settings: EvalSettings) -> _UserMargins:
    user = spec.users[i]
    profile = invariant_profile(spec)
    tau = invariant_policy(user, spec.ladder).tau_index
    law: InterferenceLaw = others_law(i, profile.others(i), spec, settings, f"m_dominating:{i}")
    pts = grid.as_array()
    g_max = user.g_max
    a = np.asarray(spec.model.n(np.asarray(spec.ladder.gains)[:, None], pts[None, :]), dtype=float)  # (K, M)
    a_tau = a[tau, -1]
    ratio = pts / g_max
    above = np.arange(spec.ladder.k) > tau

    def _combine(f: np.ndarray, f_tau: np.ndarray) -> np.ndarray:
        # f: (K, M, S), f_tau: (S,)
        lam_g = ratio[None, :, None] * f_tau[None, None, :]
        silence = lam_g - f
        full = (f[:, -1:, :] - f_tau[None, None, :]) - (f - lam_g)
        return np.where(above[:, None, None], full, silence)

    def _cells(s: np.ndarray) -> np.ndarray:
        inv = 1.0 / (1.0 + s)
        return _combine(0.5 * np.log1p(a[:, :, None] * inv[None, None, :]), 0.5 * np.log1p(a_tau * inv))

    def _curvature(s: np.ndarray) -> np.ndarray:
        # second derivative in s of 1/2 ln(1 + a / (1 + s))
        base = (1.0 + s) ** -2
        f2 = 0.5 * (base[None, None, :] - (1.0 + s[None, None, :] + a[:, :, None]) ** -2)
        return _combine(f2, 0.5 * (base - (1.0 + s + a_tau) ** -2))

    mean, se = law.expect(_cells, chunk=CELL_CHUNK)
    lam = float(law.expect(lambda s: 0.5 * np.log1p(a_tau / (1.0 + s)))[0]) / g_max

    widen: np.ndarray | float = 0.0
    if law.method == "convolve":
        # mean-preserving split adds at most w^2/4 variance per other user
        n_others = spec.n_users - 1
        widen = law.sup_abs(_curvature, chunk=CELL_CHUNK) * n_others * law.bin_width**2 / 8.0
    return _UserMargins(i, tau, lam, mean, se, widen, law.method, law.samples)


def _required_samples(mean: np.ndarray, se: np.ndarray, z: float, samples: int, tol: float) -> int | None:
    straddle = (np.abs(mean) > tol) & (se > 0)
    if not np.any(straddle) or samples <= 0:
        return None
    need = samples * (z * se[straddle] / np.abs(mean[straddle])) ** 2
    return int(math.ceil(float(need.max())))


def verify_m_dominating(
    spec: SystemSpec,
    grid: PowerGrid | None = None,
    settings: EvalSettings | None = None,
    grid_points: int = DEFAULT_GRID_POINTS,
) -> CertificateReport:
    """
    All users play their invariant policies. For each user and level k, with
    C_k(g) = E[1/2 ln(1 + N(h_k, g) / (1 + S_-i))] and lambda* = C_tau(g_max) / g_max:
      k <= tau: lambda* g - C_k(g) >= 0
      k >  tau: (C_k(g_max) - lambda* g_max) - (C_k(g) - lambda* g) >= 0
    Monte Carlo margins are paired per draw and carry Bonferroni intervals over all cells.
    """
    settings = settings or EvalSettings(method="auto")
    users = _distinct_users(spec)
    grids = {i: _user_grid(spec.users[i], grid, grid_points) for i in users}
    results = [_m_dominating_margins(i, spec, grids[i], settings) for i in users]

    cells = sum(r.margin.size for r in results)
    z = float(norm.ppf(1.0 - (1.0 - CONFIDENCE) / (2.0 * cells)))
    tol = settings.tolerance
    labelled = len(users) > 1

    rows: list[MarginRow] = []
    required: list[int] = []
    for r in results:
        pts = grids[r.user].as_array()
        half = z * r.stderr + r.widen
        lo, hi = r.margin - half, r.margin + half
        if r.method != "exact":
            need = _required_samples(r.margin, r.stderr, z, r.samples, tol)
            straddles = np.any((lo < -tol) & (hi >= -tol))
            if need is not None and straddles:
                required.append(need)
        for k in range(r.margin.shape[0]):
            cond = "full_power" if k > r.tau_index else "silence"
            if labelled:
                cond = f"{cond}@user{r.user}"
            for m, g in enumerate(pts):
                rows.append(
                    MarginRow(spec.n_users, k + 1, float(g), cond, float(r.margin[k, m]), float(lo[k, m]), float(hi[k, m]))
                )

    min_margin = min(row.margin for row in rows)
    if all(row.ci_low >= -tol for row in rows):
        status: Status = "holds"
    elif any(row.ci_high < -tol for row in rows):
        status = "violated"
    else:
        status = "inconclusive"
        logger.warning(
            "verify_m_dominating: N=%d inconclusive (min margin %.3e); more samples needed", spec.n_users, min_margin
        )

    return CertificateReport(
        kind="m_dominating",
        n_users=spec.n_users,
        rows=rows,
        min_margin=min_margin,
        status=status,
        duals=[DualParams(value=r.lam, source="rate_certificate") for r in results],
        tolerance=tol,
        method=results[0].method,
        samples=results[0].samples,
        required_samples=max(required) if (status == "inconclusive" and required) else None,
    )


# ----------------------------- N* search -----------------------------
@dataclass(frozen=True)
class NStarRow:
    n_users: int
    status: Status
    min_margin: float
    min_ci_low: float
    entropy_min_margin: float
    method: str
    samples: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_users": self.n_users,
            "status": self.status,
            "min_margin": self.min_margin,
            "min_ci_low": self.min_ci_low,
            "entropy_min_margin": self.entropy_min_margin,
            "method": self.method,
            "samples": self.samples,
        }


@dataclass(frozen=True)
class NStarReport:
    n_star: int | None
    tested_range: tuple[int, int]
    persistence: bool
    rows: list[NStarRow]
    certificates: list[CertificateReport] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_star": self.n_star,
            "tested_range": list(self.tested_range),
            "persistence": self.persistence,
            "trajectory": [r.to_dict() for r in self.rows],
        }


def require_regularity(spec: SystemSpec, grid: PowerGrid | None = None, grid_points: int = DEFAULT_GRID_POINTS) -> None:
    """Both regularity conditions, raising on the first failing family."""
    grid = grid or PowerGrid.uniform(spec.g_max, grid_points)
    require_strict_convexity(spec.model, spec.ladder, grid)
    report = validate_spec(spec, grid)
    if not report.passed:
        failing = [c.subject for c in report.failures]
        logger.warning("regularity: zero-gain probability too large for %s", failing)
        raise RegularityViolation(
            f"regularity condition (1) fails: pi(h1) >= 1 - eta for {failing}",
            details=report.to_dict(),
        )


def find_n_star(
    spec: SystemSpec,
    n_min: int,
    n_max: int,
    grid: PowerGrid | None = None,
    settings: EvalSettings | None = None,
    grid_points: int = DEFAULT_GRID_POINTS,
) -> NStarReport:
    """
    Sweep N over [n_min, n_max]. persistence means the rate certificate, once
    it holds, keeps holding at every larger tested N. n_star is the first
    holding N and is reported only with persistence.
    """
    if not 1 <= n_min <= n_max:
        raise SpecValidationError(f"need 1 <= n_min <= n_max, got [{n_min}, {n_max}]", "n_range")
    require_regularity(spec, grid, grid_points)
    settings = settings or EvalSettings(method="auto")

    entropy_min = min(
        verify_entropy_dual_certificate(spec.users[i], spec, grid, grid_points).min_margin for i in _distinct_users(spec)
    )

    def _one(n: int) -> CertificateReport:
        return verify_m_dominating(spec.with_user_count(n), grid, settings, grid_points)

    ns = list(range(int(n_min), int(n_max) + 1))
    certs = ordered_map(_one, ns)
    rows = [
        NStarRow(
            n_users=c.n_users,
            status=c.status,
            min_margin=c.min_margin,
            min_ci_low=c.min_ci_low,
            entropy_min_margin=entropy_min,
            method=c.method,
            samples=c.samples,
        )
        for c in certs
    ]

    first = next((c.n_users for c in certs if c.holds), None)
    lapses = [c.n_users for c in certs if first is not None and c.n_users > first and not c.holds]
    persistence = first is not None and not lapses
    if lapses:
        logger.warning("find_n_star: certificate holds at N=%d but fails again at N=%s", first, lapses)
    n_star = first if persistence else None
    logger.info("find_n_star: range [%d, %d] n_star=%s", n_min, n_max, n_star)
    return NStarReport(
        n_star=n_star,
        tested_range=(int(n_min), int(n_max)),
        persistence=persistence,
        rows=rows,
        certificates=certs,
    )


@dataclass(frozen=True)
class NStarSpread:
    entries: list[tuple[UserSpec, int | None]]

    @property
    def finite(self) -> list[int]:
        return [n for _, n in self.entries if n is not None]

    @property
    def spread(self) -> int | None:
        f = self.finite
        return (max(f) - min(f)) if f else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "entries": [
                {"pi": list(u.pi), "g_bar": u.g_bar, "g_max": u.g_max, "n_star": n} for u, n in self.entries
            ],
            "spread": self.spread,
        }


def n_star_spread(
    spec: SystemSpec,
    variants: Sequence[UserSpec],
    n_min: int,
    n_max: int,
    grid: PowerGrid | None = None,
    settings: EvalSettings | None = None,
    grid_points: int = DEFAULT_GRID_POINTS,
) -> NStarSpread:
    """n_star of homogeneous systems built from each variant with the same model and ladder."""
    entries = []
    for u in variants:
        variant = SystemSpec(ladder=spec.ladder, users=(u,), model=spec.model, eta=spec.eta)
        report = find_n_star(variant, n_min, n_max, grid, settings, grid_points)
        entries.append((u, report.n_star))
    return NStarSpread(entries=entries)
