# app/services/channel_service.py
# Fading environment: gain ladder, per-user stationary laws and budgets, i.i.d. state sampling
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Literal, Sequence

import numpy as np

from app.core.errors import SpecValidationError
from app.services.entropy_power import EntropyPowerLike, convexity_slack
from app.services.power_grid import DEFAULT_GRID_POINTS, PowerGrid
from app.utils.parallel import ordered_map
from app.utils.seeding import block_sizes, derive_generator

PI_SUM_TOL = 1e-12
DEFAULT_ETA = 0.5


@dataclass(frozen=True)
class GainLadder:
    gains: tuple[float, ...]

    def __post_init__(self) -> None:
        g = self.gains
        if len(g) < 2:
            raise SpecValidationError("a gain ladder needs at least 2 levels", "ladder.gains")
        if g[0] != 0.0:
            raise SpecValidationError("the lowest gain must be 0", "ladder.gains[0]")
        if any(not math.isfinite(x) for x in g):
            raise SpecValidationError("gains must be finite", "ladder.gains")
        if any(b <= a for a, b in zip(g, g[1:])):
            raise SpecValidationError("gains must increase strictly", "ladder.gains")

    @classmethod
    def of(cls, gains: Sequence[float]) -> "GainLadder":
        return cls(gains=tuple(float(x) for x in gains))

    @property
    def k(self) -> int:
        return len(self.gains)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.gains, dtype=float)


@dataclass(frozen=True)
class UserSpec:
    pi: tuple[float, ...]
    g_bar: float
    g_max: float
    g_min: float | None = None  # metadata; defaults to g_bar

    def __post_init__(self) -> None:
        pi = np.asarray(self.pi, dtype=float)
        if pi.ndim != 1 or pi.size < 2:
            raise SpecValidationError("pi must be a probability vector", "pi")
        if np.any(pi < 0) or not np.all(np.isfinite(pi)):
            raise SpecValidationError("pi entries must be nonnegative", "pi")
        total = math.fsum(self.pi)
        if abs(total - 1.0) > PI_SUM_TOL:
            raise SpecValidationError(f"pi must sum to 1 (got {total:.12g})", "pi")
        g_min = self.g_bar if self.g_min is None else self.g_min
        if not (0 < g_min <= self.g_bar <= self.g_max < math.inf):
            raise SpecValidationError(
                f"need 0 < g_min <= g_bar <= g_max < inf (got {g_min}, {self.g_bar}, {self.g_max})",
                "g_bar",
            )

    @classmethod
    def of(cls, pi: Sequence[float], g_bar: float, g_max: float, g_min: float | None = None) -> "UserSpec":
        return cls(pi=tuple(float(x) for x in pi), g_bar=float(g_bar), g_max=float(g_max), g_min=g_min)

    @property
    def pi_array(self) -> np.ndarray:
        return np.asarray(self.pi, dtype=float)

    @property
    def positive_gain_mass(self) -> float:
        return math.fsum(self.pi[1:])

    @property
    def full_power_budget(self) -> float:
        """(1 - pi(h1)) * g_max: average power of transmitting g_max at every positive gain."""
        return self.positive_gain_mass * self.g_max


@dataclass(frozen=True)
class SystemSpec:
    ladder: GainLadder
    users: tuple[UserSpec, ...]
    model: EntropyPowerLike
    eta: float = DEFAULT_ETA

    def __post_init__(self) -> None:
        if not self.users:
            raise SpecValidationError("at least one user is required", "users")
        if not 0 < self.eta < 1:
            raise SpecValidationError(f"eta must lie in (0, 1), got {self.eta}", "eta")
        for i, u in enumerate(self.users):
            if len(u.pi) != self.ladder.k:
                raise SpecValidationError(
                    f"pi has {len(u.pi)} entries for a ladder of {self.ladder.k}", f"users[{i}].pi"
                )

    @classmethod
    def homogeneous(cls, ladder: GainLadder, user: UserSpec, count: int, model: EntropyPowerLike, eta: float = DEFAULT_ETA) -> "SystemSpec":
        if count < 1:
            raise SpecValidationError("count must be at least 1", "homogeneous.count")
        return cls(ladder=ladder, users=(user,) * int(count), model=model, eta=eta)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def g_max(self) -> float:
        return max(u.g_max for u in self.users)

    def with_user_count(self, n: int) -> "SystemSpec":
        """Resize the user list; heterogeneous lists repeat cyclically."""
        if n < 1:
            raise SpecValidationError("user count must be at least 1", "n_users")
        users = tuple(self.users[j % len(self.users)] for j in range(int(n)))
        return replace(self, users=users)


# ----------------------------- Validation -----------------------------
@dataclass(frozen=True)
class RegularityCheck:
    condition: Literal["positive_gain_mass", "strict_convexity"]
    subject: str  # "user[i]" or "h=<gain>"
    passed: bool
    slack: float

    def to_dict(self) -> dict[str, Any]:
        return {"condition": self.condition, "subject": self.subject, "passed": self.passed, "slack": self.slack}


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[RegularityCheck, ...] = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def convexity_passed(self) -> bool:
        return all(c.passed for c in self.checks if c.condition == "strict_convexity")

    @property
    def failures(self) -> list[RegularityCheck]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict[str, Any]:
        return {"passed": self.passed, "checks": [c.to_dict() for c in self.checks]}


def validate_spec(spec: SystemSpec, grid: PowerGrid | None = None) -> ValidationReport:
    """
    Both regularity conditions, report style: pi(h1) < 1 - eta for every user,
    and strict convexity of N(h, .) at every positive gain.
    """
    grid = grid or PowerGrid.uniform(spec.g_max, DEFAULT_GRID_POINTS)
    checks: list[RegularityCheck] = []
    for i, u in enumerate(spec.users):
        slack = (1.0 - spec.eta) - u.pi[0]
        checks.append(RegularityCheck("positive_gain_mass", f"user[{i}]", slack > 0, slack))
    for h in spec.ladder.gains[1:]:
        slack = convexity_slack(spec.model, h, grid)
        checks.append(RegularityCheck("strict_convexity", f"h={h:.12g}", slack > 0, slack))
    return ValidationReport(checks=tuple(checks))


# ----------------------------- Sampling -----------------------------
def _sample_user(pi: np.ndarray, slots: int, seed: int, user: int) -> np.ndarray:
    cdf = np.cumsum(pi)
    cdf[-1] = 1.0
    parts = []
    for b, size in enumerate(block_sizes(slots)):
        rng = derive_generator(seed, "states", user, b)
        u = rng.random(size)
        idx = np.searchsorted(cdf, u, side="right")
        parts.append(idx)
    out = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    # cdf[-1] is pinned to 1 and u < 1, so this only guards float drift
    return np.minimum(out, len(pi) - 1).astype(np.int64)


def sample_states(spec: SystemSpec, slots: int, seed: int) -> np.ndarray:
    """
    i.i.d. draws of 0-based gain-level indices, shape (users, slots).
    Each (user, block) owns a Philox stream, so output is independent of thread count.
    """
    if slots < 1:
        raise SpecValidationError("slots must be at least 1", "slots")
    rows = ordered_map(
        lambda i: _sample_user(spec.users[i].pi_array, int(slots), int(seed), i),
        range(spec.n_users),
    )
    return np.vstack(rows)


def empirical_frequencies(states: np.ndarray, k: int) -> np.ndarray:
    """Per-user level frequencies of a state matrix, shape (users, k)."""
    return np.stack([np.bincount(row, minlength=k) / row.size for row in np.atleast_2d(states)])
