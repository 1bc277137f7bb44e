# app/services/rate_service.py
# EPI sum-rate lower bound: per state, expected over a profile, per-user objective, interference moments
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Literal, Sequence

import numpy as np

from app.core.errors import DomainError, SpecValidationError
from app.services.channel_service import GainLadder, SystemSpec
from app.services.entropy_power import EntropyPowerLike
from app.services.interference import (
    EvalSettings,
    InterferenceLaw,
    UserPowerLaw,
    build_law,
    exact_law,
    monte_carlo_law,
    user_power_law,
)
from app.services.policy_service import PolicyProfile

logger = logging.getLogger(__name__)

ResultMethod = Literal["exact", "monte_carlo", "convolve"]


@dataclass(frozen=True)
class StateVector:
    levels: tuple[int, ...]  # 0-based ladder indices
    powers: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.levels) != len(self.powers):
            raise SpecValidationError("levels and powers must have equal length", "state")
        if any(g < 0 for g in self.powers):
            raise SpecValidationError("powers must be nonnegative", "state.powers")

    @classmethod
    def of(cls, levels: Sequence[int], powers: Sequence[float]) -> "StateVector":
        return cls(levels=tuple(int(k) for k in levels), powers=tuple(float(g) for g in powers))


@dataclass(frozen=True)
class EvalResult:
    value: float
    stderr: float
    method: ResultMethod
    samples: int

    def to_dict(self) -> dict[str, Any]:
        return {"value": self.value, "stderr": self.stderr, "method": self.method, "samples": self.samples}


def _result(law: InterferenceLaw, value: float, stderr: float) -> EvalResult:
    return EvalResult(value=float(value), stderr=float(stderr), method=law.method, samples=law.samples)


def instantaneous_sum_rate(model: EntropyPowerLike, ladder: GainLadder, state: StateVector) -> float:
    """R = 1/2 ln(1 + sum_i N(h_i, g_i))."""
    for k in state.levels:
        if not 0 <= k < ladder.k:
            raise SpecValidationError(f"level {k} outside ladder", "state.levels")
    gains = ladder.as_array()[list(state.levels)]
    total = math.fsum(np.asarray(model.n(gains, np.asarray(state.powers, dtype=float))).reshape(-1).tolist())
    return 0.5 * math.log1p(total)


def profile_laws(profile: PolicyProfile, spec: SystemSpec) -> list[UserPowerLaw]:
    if profile.n_users != spec.n_users:
        raise SpecValidationError(
            f"profile has {profile.n_users} policies for {spec.n_users} users", "profile.policies"
        )
    gains = spec.ladder.gains
    return [user_power_law(pol, u.pi, spec.model, gains) for pol, u in zip(profile.policies, spec.users)]


def _sum_rate(s: np.ndarray) -> np.ndarray:
    return 0.5 * np.log1p(s)


def expected_sum_rate_exact(profile: PolicyProfile, spec: SystemSpec, *, cap: int | None = None) -> EvalResult:
    settings = EvalSettings(method="exact") if cap is None else EvalSettings(method="exact", cap=cap)
    law = exact_law(profile_laws(profile, spec), settings.cap)
    mean, _ = law.expect(_sum_rate)
    return _result(law, float(mean), 0.0)


def expected_sum_rate_mc(profile: PolicyProfile, spec: SystemSpec, samples: int, seed: int) -> EvalResult:
    law = monte_carlo_law(profile_laws(profile, spec), int(samples), int(seed), "sum_rate")
    mean, se = law.expect(_sum_rate)
    return _result(law, float(mean), float(se))


def expected_sum_rate(profile: PolicyProfile, spec: SystemSpec, settings: EvalSettings) -> EvalResult:
    law = build_law(profile_laws(profile, spec), settings, "sum_rate")
    mean, se = law.expect(_sum_rate)
    return _result(law, float(mean), float(se))


def own_payoff(own: UserPowerLaw, law: InterferenceLaw) -> tuple[float, float]:
    """E[1/2 ln(1 + a / (1 + S))] with a ~ own law (exact) and S ~ law."""
    a = own.values

    def _u(s: np.ndarray) -> np.ndarray:
        return own.weights @ (0.5 * np.log1p(a[:, None] / (1.0 + s[None, :])))

    mean, se = law.expect(_u)
    return float(mean), float(se)


def user_objective(i: int, profile: PolicyProfile, spec: SystemSpec, settings: EvalSettings | None = None) -> EvalResult:
    """T_i = E[1/2 ln(1 + N_i / (1 + sum_{j != i} N_j))]."""
    if not 0 <= i < spec.n_users:
        raise SpecValidationError(f"user index {i} outside 0..{spec.n_users - 1}", "user")
    settings = settings or EvalSettings()
    laws = profile_laws(profile, spec)
    others = laws[:i] + laws[i + 1 :]
    law = build_law(others, settings, f"user_objective:{i}")
    value, se = own_payoff(laws[i], law)
    return _result(law, value, se)


def interference_moments(
    profile: PolicyProfile,
    spec: SystemSpec,
    *,
    k: int,
    n0: float = 1.0,
    exclude: int | None = None,
    settings: EvalSettings | None = None,
) -> EvalResult:
    """E[(sum_j N(h_j, G_j) + n0)^(-k)], optionally leaving one user out."""
    if k not in (1, 2, 3):
        raise DomainError(f"k must be 1, 2 or 3, got {k}")
    if not n0 > 0:
        raise DomainError(f"n0 must be positive, got {n0}")
    settings = settings or EvalSettings(method="mc")
    laws = profile_laws(profile, spec)
    if exclude is not None:
        laws = laws[:exclude] + laws[exclude + 1 :]
    law = build_law(laws, settings, f"moments:{k}")
    mean, se = law.expect(lambda s: np.power(s + n0, -float(k)))
    return _result(law, float(mean), float(se))


def log_inequality_gap(x: Any) -> tuple[np.ndarray, np.ndarray]:
    """
    Margins of x - x^2/2 <= ln(1 + x) <= x for x >= 0: returns
    (ln(1+x) - (x - x^2/2), x - ln(1+x)), both zero only at x = 0.
    """
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0):
        raise DomainError("log sandwich margins need x >= 0")
    lg = np.log1p(arr)
    return lg - (arr - 0.5 * arr * arr), arr - lg
