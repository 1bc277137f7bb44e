# app/services/policy_service.py
# Finite-support power policies, average power and the invariant threshold policy
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Iterable, Literal, Sequence

import numpy as np

from app.core.errors import DegenerateLevelError, SpecValidationError
from app.services.channel_service import GainLadder, SystemSpec, UserSpec

logger = logging.getLogger(__name__)

PROB_SUM_TOL = 1e-12
FEASIBILITY_TOL = 1e-10

Regime = Literal["threshold", "full_power"]


# ----------------------------- Atoms -----------------------------
@dataclass(frozen=True)
class AtomicDistribution:
    """Canonical atoms: powers strictly increasing, probabilities positive and summing to 1."""

    powers: tuple[float, ...]
    probs: tuple[float, ...]

    @classmethod
    def from_atoms(cls, atoms: Iterable[tuple[float, float]], g_max: float) -> "AtomicDistribution":
        pairs = [(float(g), float(p)) for g, p in atoms]
        if not pairs:
            raise SpecValidationError("a distribution needs at least one atom", "atoms")
        g = np.array([a for a, _ in pairs], dtype=float)
        p = np.array([b for _, b in pairs], dtype=float)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(p))):
            raise SpecValidationError("atoms must be finite", "atoms")
        if np.any(p < 0):
            raise SpecValidationError("atom probabilities must be nonnegative", "atoms.p")
        if np.any(g < 0) or np.any(g > g_max):
            bad = float(g[(g < 0) | (g > g_max)][0])
            raise SpecValidationError(f"power {bad} outside [0, {g_max}]", "atoms.g")
        total = math.fsum(p.tolist())
        if abs(total - 1.0) >= PROB_SUM_TOL:
            raise SpecValidationError(f"atom probabilities sum to {total:.15g}, not 1", "atoms.p")

        uniq, inv = np.unique(g, return_inverse=True)
        merged = np.zeros(uniq.size, dtype=float)
        np.add.at(merged, inv, p)
        keep = merged > 0
        uniq, merged = uniq[keep], merged[keep]
        merged = merged / math.fsum(merged.tolist())
        return cls(powers=tuple(float(x) for x in uniq), probs=tuple(float(x) for x in merged))

    @classmethod
    def point(cls, g: float) -> "AtomicDistribution":
        return cls(powers=(float(g),), probs=(1.0,))

    @classmethod
    def two_point(cls, g_max: float, p_max: float) -> "AtomicDistribution":
        """(0, 1 - p_max), (g_max, p_max); collapses to one atom at the ends."""
        return cls.from_atoms([(0.0, 1.0 - p_max), (g_max, p_max)], g_max)

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.powers, self.probs))

    def mean(self) -> float:
        return math.fsum(g * p for g, p in self.atoms)

    def second_moment(self) -> float:
        return math.fsum(g * g * p for g, p in self.atoms)

    def to_list(self) -> list[dict[str, float]]:
        return [{"g": g, "p": p} for g, p in self.atoms]


# ----------------------------- Policies -----------------------------
@dataclass(frozen=True)
class Policy:
    per_level: tuple[AtomicDistribution, ...]

    @property
    def k(self) -> int:
        return len(self.per_level)

    def level_means(self) -> np.ndarray:
        return np.array([d.mean() for d in self.per_level], dtype=float)

    def max_power(self) -> float:
        return max(d.powers[-1] for d in self.per_level)

    def mixed_levels(self) -> list[int]:
        return [k for k, d in enumerate(self.per_level) if len(d.powers) > 1]

    def to_dict(self) -> dict[str, Any]:
        return {"levels": [d.to_list() for d in self.per_level]}

    def close_to(self, other: "Policy", atol: float = 1e-9) -> bool:
        """Same support sizes per level with powers and probabilities within atol."""
        if self.k != other.k:
            return False
        for a, b in zip(self.per_level, other.per_level):
            if len(a.powers) != len(b.powers):
                return False
            if not (np.allclose(a.powers, b.powers, rtol=0, atol=atol) and np.allclose(a.probs, b.probs, rtol=0, atol=atol)):
                return False
        return True


def make_grid_policy(levels: Sequence[Any], g_max: float) -> Policy:
    """
    Canonical Policy from per-level atom lists (or AtomicDistribution objects).
    Atoms are sorted and merged; probabilities off by 1e-12 or more are rejected.
    """
    out: list[AtomicDistribution] = []
    for k, lv in enumerate(levels):
        try:
            if isinstance(lv, AtomicDistribution):
                lv = lv.atoms
            out.append(AtomicDistribution.from_atoms(lv, g_max))
        except SpecValidationError as exc:
            raise SpecValidationError(str(exc), f"levels[{k}]") from exc
    if not out:
        raise SpecValidationError("a policy needs at least one level", "levels")
    return Policy(per_level=tuple(out))


def policy_from_document(doc: dict[str, Any], g_max: float) -> Policy:
    levels = [[(a["g"], a["p"]) for a in lv] for lv in doc["levels"]]
    return make_grid_policy(levels, g_max)


def average_power(policy: Policy, user: UserSpec) -> float:
    """sum_k pi(h_k) * E[G | h_k]."""
    if policy.k != len(user.pi):
        raise SpecValidationError(f"policy has {policy.k} levels, user has {len(user.pi)}", "policy.levels")
    return math.fsum(p * m for p, m in zip(user.pi, policy.level_means()))


@dataclass(frozen=True)
class PolicyProfile:
    policies: tuple[Policy, ...]
    validated: bool = False

    @classmethod
    def checked(cls, policies: Sequence[Policy], spec: SystemSpec) -> "PolicyProfile":
        """Profile marked validated: one policy per user, each within its cap and budget."""
        if len(policies) != spec.n_users:
            raise SpecValidationError(
                f"profile has {len(policies)} policies for {spec.n_users} users", "profile.policies"
            )
        for i, (pol, user) in enumerate(zip(policies, spec.users)):
            if pol.k != spec.ladder.k:
                raise SpecValidationError(f"policy has {pol.k} levels, ladder has {spec.ladder.k}", f"profile.policies[{i}]")
            if pol.max_power() > user.g_max:
                raise SpecValidationError(f"power above g_max={user.g_max}", f"profile.policies[{i}]")
            used = average_power(pol, user)
            if used > user.g_bar + FEASIBILITY_TOL:
                raise SpecValidationError(
                    f"average power {used:.12g} exceeds budget {user.g_bar:.12g}", f"profile.policies[{i}]"
                )
        return cls(policies=tuple(policies), validated=True)

    @property
    def n_users(self) -> int:
        return len(self.policies)

    def others(self, i: int) -> tuple[Policy, ...]:
        """Every policy except user i's."""
        return self.policies[:i] + self.policies[i + 1 :]

    def replace(self, i: int, policy: Policy) -> "PolicyProfile":
        pols = list(self.policies)
        pols[i] = policy
        return PolicyProfile(policies=tuple(pols), validated=False)

    def to_dict(self) -> dict[str, Any]:
        return {"policies": [p.to_dict() for p in self.policies]}


# ----------------------------- Threshold policy -----------------------------
@dataclass(frozen=True)
class InvariantPolicy:
    tau: int  # 1-based ladder position
    mix_prob: float
    base: Policy
    regime: Regime = "threshold"

    @property
    def tau_index(self) -> int:
        return self.tau - 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "tau": self.tau,
            "mix_prob": self.mix_prob,
            "regime": self.regime,
            "policy": self.base.to_dict(),
        }


def full_power_policy(user: UserSpec, ladder: GainLadder) -> Policy:
    """Silent at zero gain, g_max at every positive gain."""
    levels = [AtomicDistribution.point(0.0)]
    levels += [AtomicDistribution.point(user.g_max) for _ in range(ladder.k - 1)]
    return Policy(per_level=tuple(levels))


def _threshold_policy(k: int, tau_index: int, mix_prob: float, g_max: float) -> Policy:
    levels = []
    for idx in range(k):
        if idx < tau_index:
            levels.append(AtomicDistribution.point(0.0))
        elif idx > tau_index:
            levels.append(AtomicDistribution.point(g_max))
        else:
            levels.append(AtomicDistribution.two_point(g_max, mix_prob))
    return Policy(per_level=tuple(levels))


def invariant_policy(user: UserSpec, ladder: GainLadder) -> InvariantPolicy:
    """
    Threshold policy: silence below tau, g_max above, g_max with probability
    mix_prob at tau, so the average power is exactly g_bar.

    tau is picked from the top of the ladder down, skipping zero-probability
    levels: cost(l > tau) <= g_bar < cost(l >= tau). A budget that covers full
    power at every positive gain returns the full-power policy (tau = 1, mix 0).
    """
    if len(user.pi) != ladder.k:
        raise SpecValidationError(f"pi has {len(user.pi)} entries for a ladder of {ladder.k}", "pi")
    g_max, g_bar = user.g_max, user.g_bar

    if g_bar >= user.full_power_budget:
        logger.info(
            "invariant_policy: budget %.12g covers full power %.12g; using the full-power policy",
            g_bar,
            user.full_power_budget,
        )
        return InvariantPolicy(tau=1, mix_prob=0.0, base=full_power_policy(user, ladder), regime="full_power")

    above: list[float] = []
    for idx in range(ladder.k - 1, -1, -1):
        pk = user.pi[idx]
        if pk <= 0:
            continue
        cost_above = math.fsum(above)
        cost_at = cost_above + g_max * pk
        if cost_above <= g_bar < cost_at:
            mix = (g_bar - cost_above) / (g_max * pk)
            mix = min(max(mix, 0.0), 1.0)
            base = _threshold_policy(ladder.k, idx, mix, g_max)
            return InvariantPolicy(tau=idx + 1, mix_prob=mix, base=base)
        above.append(g_max * pk)

    raise DegenerateLevelError(
        f"no positive-probability level brackets g_bar={g_bar} (pi={list(user.pi)}, g_max={g_max})"
    )


def invariant_profile(spec: SystemSpec) -> PolicyProfile:
    """Every user plays its own invariant policy."""
    return PolicyProfile.checked([invariant_policy(u, spec.ladder).base for u in spec.users], spec)
