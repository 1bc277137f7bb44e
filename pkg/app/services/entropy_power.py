# app/services/entropy_power.py
# Constraint families phi, maximum entropy under E[phi(|X|)], scaled entropy power N(h, g)
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Literal, Protocol, Sequence

import numpy as np
from scipy.special import gammaln

from app.core.errors import DomainError, RegularityViolation, SearchFailure, SpecValidationError
from app.services.power_grid import PowerGrid

logger = logging.getLogger(__name__)

ConvexityClass = Literal["strictly_convex", "not_strictly_convex"]

# Second differences must beat this fraction of the local |N|; keeps affine p=2 out.
CONVEXITY_REL_TOL = 1e-10
# Smallest epsilon a gap search may report.
GAP_SEARCH_TOL = 1e-8
SECANT_PROBE_STEP = 1e-6


# ----------------------------- Constraint / noise -----------------------------
@dataclass(frozen=True)
class PowerLawConstraint:
    """phi(s) = |s|^p."""

    p: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.p) and self.p > 0):
            raise SpecValidationError(f"exponent p must be positive, got {self.p}", "model.p")

    def phi(self, s: Any) -> np.ndarray:
        return np.abs(np.asarray(s, dtype=float)) ** self.p

    @property
    def log_kappa(self) -> float:
        """
        log of the constant in h(X) = (1/p) * log(kappa * E|X|^p) for the
        generalized Gaussian maximizer: kappa = p*e*(2*Gamma(1/p)/p)^p.
        """
        p = self.p
        return math.log(p) + 1.0 + p * (math.log(2.0) + float(gammaln(1.0 / p)) - math.log(p))


@dataclass(frozen=True)
class NoiseModel:
    noise_entropy: float  # h(W), nats

    def __post_init__(self) -> None:
        if not math.isfinite(self.noise_entropy):
            raise SpecValidationError("noise entropy must be finite", "model.noise.entropy")

    @classmethod
    def gaussian(cls, sigma2: float) -> "NoiseModel":
        if not (sigma2 > 0 and math.isfinite(sigma2)):
            raise SpecValidationError(f"sigma2 must be positive, got {sigma2}", "model.noise.sigma2")
        return cls(noise_entropy=0.5 * math.log(2.0 * math.pi * math.e * sigma2))

    @property
    def entropy_power(self) -> float:
        return math.exp(2.0 * self.noise_entropy)


class EntropyPowerLike(Protocol):
    def n(self, h: Any, g: Any) -> np.ndarray: ...


# ----------------------------- Models -----------------------------
@dataclass(frozen=True)
class EntropyPowerModel:
    constraint: PowerLawConstraint
    noise: NoiseModel

    @classmethod
    def power_law(cls, p: float, *, sigma2: float | None = None, noise_entropy: float | None = None) -> "EntropyPowerModel":
        if (sigma2 is None) == (noise_entropy is None):
            raise SpecValidationError("give exactly one of sigma2 / noise_entropy", "model.noise")
        noise = NoiseModel.gaussian(sigma2) if sigma2 is not None else NoiseModel(noise_entropy=float(noise_entropy))
        return cls(constraint=PowerLawConstraint(p=float(p)), noise=noise)

    @property
    def p(self) -> float:
        return self.constraint.p

    def n(self, h: Any, g: Any) -> np.ndarray:
        """Vectorized N(h, g) = (kappa * h^p * g)^(2/p) / e^(2 h(W)); zero when h or g is zero."""
        h_arr = np.asarray(h, dtype=float)
        g_arr = np.asarray(g, dtype=float)
        p = self.p
        kappa = math.exp(self.constraint.log_kappa)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.power(kappa * np.power(h_arr, p) * g_arr, 2.0 / p) / self.noise.entropy_power
        return np.where((h_arr > 0) & (g_arr > 0), out, 0.0)


@dataclass(frozen=True)
class TabulatedEntropyPowerModel:
    """
    N(h, g) given as a table per ladder gain, linear in g between power nodes.
    Used for constraint families whose maximum entropy has no closed form.
    """

    gains: tuple[float, ...]
    powers: tuple[float, ...]
    table: tuple[tuple[float, ...], ...]
    _rows: dict[float, np.ndarray] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        t = np.asarray(self.table, dtype=float)
        pw = np.asarray(self.powers, dtype=float)
        if t.shape != (len(self.gains), len(self.powers)):
            raise SpecValidationError("table must be gains x powers", "model.table")
        if pw.size < 2 or pw[0] != 0.0 or np.any(np.diff(pw) <= 0):
            raise SpecValidationError("powers must start at 0 and increase strictly", "model.powers")
        if np.any(np.diff(np.asarray(self.gains, dtype=float)) <= 0):
            raise SpecValidationError("gains must increase strictly", "model.gains")
        if np.any(t < 0) or np.any(t[:, 0] != 0.0):
            raise SpecValidationError("N must be nonnegative with N(h, 0) = 0", "model.table")
        if np.any(np.diff(t, axis=1) < 0):
            raise SpecValidationError("N must be nondecreasing in g", "model.table")
        if np.any(np.diff(t, axis=0) < 0):
            raise SpecValidationError("N must be nondecreasing in h", "model.table")
        if self.gains[0] == 0.0 and np.any(t[0] != 0.0):
            raise SpecValidationError("N(0, g) must be 0", "model.table[0]")
        object.__setattr__(self, "_rows", {float(h): t[i] for i, h in enumerate(self.gains)})

    def n(self, h: Any, g: Any) -> np.ndarray:
        h_arr, g_arr = np.broadcast_arrays(np.asarray(h, dtype=float), np.asarray(g, dtype=float))
        if np.any(g_arr > self.powers[-1]):
            raise DomainError(f"power beyond tabulated range {self.powers[-1]}")
        out = np.zeros(h_arr.shape, dtype=float)
        for hv in np.unique(h_arr):
            if hv == 0.0:
                continue
            row = self._rows.get(float(hv))
            if row is None:
                raise DomainError(f"gain {hv} is not tabulated")
            mask = h_arr == hv
            out[mask] = np.interp(g_arr[mask], self.powers, row)
        return out


# ----------------------------- Operations -----------------------------
def max_entropy(constraint: PowerLawConstraint, moment: float) -> float:
    """Maximum differential entropy (nats) of a scalar X with E|X|^p = moment."""
    if not moment > 0:
        raise DomainError(f"moment must be positive, got {moment}")
    return (constraint.log_kappa + math.log(moment)) / constraint.p


def scaled_entropy_power(model: EntropyPowerLike, h: float, g: float) -> float:
    if h < 0 or g < 0:
        raise DomainError(f"gain and power must be nonnegative, got h={h}, g={g}")
    return float(model.n(h, g))


def chord_gap(model: EntropyPowerLike, h: float, g: Any, g_max: float) -> np.ndarray:
    """N(h, g_max) * g / g_max - N(h, g): height of the chord from 0 above the curve."""
    g_arr = np.asarray(g, dtype=float)
    return float(model.n(h, g_max)) * g_arr / g_max - model.n(h, g_arr)


def _grid_array(grid: PowerGrid | Sequence[float]) -> np.ndarray:
    return grid.as_array() if isinstance(grid, PowerGrid) else np.asarray(grid, dtype=float)


def _second_differences(values: np.ndarray, pts: np.ndarray) -> np.ndarray:
    # 2 * (chord through neighbours - value); the plain second difference on uniform grids
    left, mid, right = pts[:-2], pts[1:-1], pts[2:]
    w = (mid - left) / (right - left)
    chord = (1.0 - w) * values[:-2] + w * values[2:]
    return 2.0 * (chord - values[1:-1])


def convexity_slack(model: EntropyPowerLike, h: float, grid: PowerGrid | Sequence[float]) -> float:
    """
    min over grid triples of (second difference - tolerance * local scale), the
    scale being the largest |N| in the triple. Flat starts like g^4 still count.
    """
    pts = _grid_array(grid)
    if pts.size < 3:
        raise SpecValidationError("convexity check needs at least 3 grid points", "grid")
    if not h > 0:
        raise DomainError("strict convexity is only defined for positive gains")
    vals = np.asarray(model.n(h, pts), dtype=float)
    scale = np.maximum(np.maximum(np.abs(vals[:-2]), np.abs(vals[1:-1])), np.abs(vals[2:]))
    return float(np.min(_second_differences(vals, pts) - CONVEXITY_REL_TOL * scale))


def classify_convexity(model: EntropyPowerLike, h: float, grid: PowerGrid | Sequence[float]) -> ConvexityClass:
    return "strictly_convex" if convexity_slack(model, h, grid) > 0 else "not_strictly_convex"


def _positive_gains(ladder: Any) -> list[float]:
    gains = getattr(ladder, "gains", ladder)
    return [float(h) for h in gains if float(h) > 0]


def require_strict_convexity(model: EntropyPowerLike, ladder: Any, grid: PowerGrid | Sequence[float]) -> None:
    """Raise RegularityViolation unless N(h, .) is strictly convex at every positive gain."""
    verdicts = {h: classify_convexity(model, h, grid) for h in _positive_gains(ladder)}
    failing = [h for h, v in verdicts.items() if v != "strictly_convex"]
    if failing:
        logger.warning("regularity: N(h, g) not strictly convex at gains %s", failing)
        raise RegularityViolation(
            "regularity condition (2) fails: N(h, g) is not strictly convex in g "
            f"at gains {failing}",
            details={"classifier": {str(h): v for h, v in verdicts.items()}},
        )


# ----------------------------- Gap witnesses -----------------------------
@dataclass(frozen=True)
class ConvexityGapReport:
    g1: float
    g2: float
    epsilon: float
    L: float  # secant-slope cap near g_max
    delta: float
    # per-family minimum slack found by the search
    margins: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "g1": self.g1,
            "g2": self.g2,
            "epsilon": self.epsilon,
            "L": self.L,
            "delta": self.delta,
            "margins": dict(self.margins),
        }


def _gap_margins(
    model: EntropyPowerLike,
    gains: list[float],
    tau_gain: float,
    g1: float,
    g2: float,
    delta: float,
    pts: np.ndarray,
) -> tuple[dict[str, float], float]:
    """Minimum slack of the three witness families on pts (plus the interval ends)."""
    g_max = float(pts[-1])
    # secant slopes into g_max, strictly above the chord slope for g in [g2, g_max)
    upper = np.unique(np.concatenate([[g2], pts[(pts > g2) & (pts < g_max)]]))
    near_top = np.inf
    slope_cap = 0.0
    for h in gains:
        top = float(model.n(h, g_max))
        secant = (top - model.n(h, upper)) / (g_max - upper)
        near_top = min(near_top, float(np.min(secant)) - top / g_max)
        slope_cap = max(slope_cap, float(np.max(secant)))

    # N(h_tau, g) / g strictly below the chord slope for g in (0, g1]
    lower = np.unique(np.concatenate([pts[(pts > 0) & (pts < g1)], [g1]]))
    top_tau = float(model.n(tau_gain, g_max))
    near_zero = float(np.min(top_tau / g_max - model.n(tau_gain, lower) / lower))

    # uniform chord gap on [delta, g_max - delta]
    inner = np.unique(np.concatenate([[delta], pts[(pts > delta) & (pts < g_max - delta)], [g_max - delta]]))
    chord = min(float(np.min(chord_gap(model, h, inner, g_max))) for h in gains)

    return {"secant_near_g_max": near_top, "ratio_near_zero": near_zero, "chord_gap": chord}, slope_cap


def probe_convexity_gaps(
    model: EntropyPowerLike,
    ladder: Any,
    tau_gain: float,
    delta: float,
    grid: PowerGrid | Sequence[float],
) -> ConvexityGapReport:
    """
    Find witnesses (g1, g2, epsilon, L) for the strict-convexity gap conditions:
    secant slopes near g_max beat the chord slope, N/g near 0 stays below it,
    and the chord gap is uniformly positive on [delta, g_max - delta].
    """
    pts = _grid_array(grid)
    g_max = float(pts[-1])
    if not 0 < delta < g_max / 2:
        raise DomainError(f"delta must lie in (0, g_max/2), got {delta}")
    if not tau_gain > 0:
        raise DomainError("the threshold gain must be positive")
    require_strict_convexity(model, ladder, pts)

    gains = _positive_gains(ladder)
    g1, g2 = float(delta), g_max - float(delta)
    margins, slope_cap = _gap_margins(model, gains, tau_gain, g1, g2, delta, pts)
    # secants grow toward g_max; cap with one taken just below it so finer grids stay under L
    g_near = g_max * (1.0 - SECANT_PROBE_STEP)
    for h in gains:
        secant = (float(model.n(h, g_max)) - float(model.n(h, g_near))) / (g_max - g_near)
        slope_cap = max(slope_cap, secant)
    best = min(margins.values())
    if not best > GAP_SEARCH_TOL:
        raise SearchFailure(
            f"no epsilon above {GAP_SEARCH_TOL} found (best {best:.3e})",
            diagnostics={"margins": margins, "delta": delta, "g1": g1, "g2": g2},
        )
    return ConvexityGapReport(
        g1=g1,
        g2=g2,
        epsilon=0.5 * best,
        L=slope_cap,
        delta=float(delta),
        margins=margins,
    )


def verify_convexity_gaps(
    model: EntropyPowerLike,
    ladder: Any,
    tau_gain: float,
    report: ConvexityGapReport,
    grid: PowerGrid | Sequence[float],
) -> float:
    """
    Re-check a report on *grid*; returns the smallest slack (positive = holds).
    Each family must clear report.epsilon, and the secants must stay under L + epsilon.
    """
    pts = _grid_array(grid)
    margins, slope_cap = _gap_margins(
        model, _positive_gains(ladder), tau_gain, report.g1, report.g2, report.delta, pts
    )
    slacks = [m - report.epsilon for m in margins.values()]
    slacks.append(report.L + report.epsilon - slope_cap)
    return min(slacks)
