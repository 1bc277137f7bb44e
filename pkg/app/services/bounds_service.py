# app/services/bounds_service.py
# Lower bound on expected entropy power, Paley-Zygmund check, interference-moment decay
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Literal, Sequence

import numpy as np

from app.core.errors import DomainError, SpecValidationError
from app.services.certificate_service import require_regularity
from app.services.channel_service import SystemSpec, UserSpec
from app.services.interference import EvalSettings
from app.services.policy_service import Policy, invariant_profile
from app.services.power_grid import PowerGrid
from app.services.rate_service import interference_moments
from app.utils.parallel import ordered_map

logger = logging.getLogger(__name__)

MuBranch = Literal["full_power", "half_budget"]


@dataclass(frozen=True)
class MuBound:
    value: float
    branch: MuBranch
    terms: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"value": self.value, "branch": self.branch, "terms": dict(self.terms)}


def mu_bound(user: UserSpec, spec: SystemSpec, grid: PowerGrid | None = None) -> MuBound:
    """
    min{N(h2, g_max) * eta, N(h2, g_bar/2) * g_bar^2 / (4 g_max^2)}, h2 the smallest
    positive gain. A budget covering full power keeps only the first term.
    """
    require_regularity(spec, grid)
    h2 = spec.ladder.gains[1]
    g_max, g_bar = user.g_max, user.g_bar
    full = float(spec.model.n(h2, g_max)) * spec.eta
    if g_bar >= user.full_power_budget:
        return MuBound(value=full, branch="full_power", terms={"full_power": full})
    half = float(spec.model.n(h2, g_bar / 2.0)) * g_bar**2 / (4.0 * g_max**2)
    if full <= half:
        return MuBound(value=full, branch="full_power", terms={"full_power": full, "half_budget": half})
    return MuBound(value=half, branch="half_budget", terms={"full_power": full, "half_budget": half})


def mu_lower_bound(user: UserSpec, spec: SystemSpec, grid: PowerGrid | None = None) -> float:
    return mu_bound(user, spec, grid).value


# ----------------------------- Paley-Zygmund -----------------------------
@dataclass(frozen=True)
class PaleyZygmundCheck:
    probability: float  # Pr_Q(G >= E_Q[G] / 2)
    bound: float  # E_Q[G]^2 / (4 E_Q[G^2])
    margin: float

    def to_dict(self) -> dict[str, float]:
        return {"probability": self.probability, "bound": self.bound, "margin": self.margin}


def pooled_power_law(policy: Policy, user: UserSpec) -> tuple[np.ndarray, np.ndarray]:
    """Q: law of the transmit power with the gain level marginalized out."""
    g = np.concatenate([np.asarray(d.powers) for d in policy.per_level])
    w = np.concatenate([pk * np.asarray(d.probs) for pk, d in zip(user.pi, policy.per_level)])
    uniq, inv = np.unique(g, return_inverse=True)
    merged = np.zeros(uniq.size)
    np.add.at(merged, inv, w)
    return uniq, merged


def paley_zygmund_margin(policy: Policy, user: UserSpec) -> PaleyZygmundCheck:
    g, w = pooled_power_law(policy, user)
    m1 = math.fsum((g * w).tolist())
    m2 = math.fsum((g * g * w).tolist())
    prob = math.fsum(w[g >= m1 / 2.0].tolist())
    bound = (m1 * m1) / (4.0 * m2) if m2 > 0 else 0.0
    return PaleyZygmundCheck(probability=prob, bound=bound, margin=prob - bound)


# ----------------------------- Moment decay -----------------------------
@dataclass(frozen=True)
class MomentRow:
    n_users: int
    k: int
    estimate: float
    stderr: float
    method: str
    samples: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_users": self.n_users,
            "k": self.k,
            "estimate": self.estimate,
            "stderr": self.stderr,
            "method": self.method,
            "samples": self.samples,
        }


@dataclass(frozen=True)
class MomentDecayReport:
    rows: list[MomentRow]
    slopes: dict[int, float]
    n0: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "n0": self.n0,
            "slopes": {str(k): v for k, v in sorted(self.slopes.items())},
            "rows": [r.to_dict() for r in self.rows],
        }


def fit_log_slope(ns: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of log(value) against log(N)."""
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(values, dtype=float))
    if x.size < 2:
        raise SpecValidationError("a slope fit needs at least two user counts", "n_values")
    return float(np.polyfit(x, y, 1)[0])


def moment_decay(
    spec: SystemSpec,
    n_values: Sequence[int],
    ks: Sequence[int] = (1, 2),
    *,
    n0: float = 1.0,
    settings: EvalSettings | None = None,
) -> MomentDecayReport:
    """E[(S + n0)^-k] on invariant profiles of spec.with_user_count(N), with a log-log slope per k."""
    if not n_values:
        raise SpecValidationError("n_values must not be empty", "n_values")
    if any(n < 1 for n in n_values):
        raise DomainError("user counts must be positive")
    settings = settings or EvalSettings(method="mc")

    def _one(n: int) -> list[MomentRow]:
        sized = spec.with_user_count(int(n))
        profile = invariant_profile(sized)
        out = []
        for k in ks:
            res = interference_moments(profile, sized, k=int(k), n0=n0, settings=settings)
            out.append(MomentRow(int(n), int(k), res.value, res.stderr, res.method, res.samples))
        return out

    rows = [r for chunk in ordered_map(_one, list(n_values)) for r in chunk]
    slopes: dict[int, float] = {}
    if len(n_values) >= 2:
        for k in ks:
            sel = [r for r in rows if r.k == k]
            slopes[int(k)] = fit_log_slope([r.n_users for r in sel], [r.estimate for r in sel])
    logger.info("moment_decay: slopes %s over N=%s", slopes, list(n_values))
    return MomentDecayReport(rows=rows, slopes=slopes, n0=float(n0))
