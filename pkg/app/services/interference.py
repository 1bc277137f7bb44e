# app/services/interference.py
# Law of the summed entropy power S = sum_j N(h_j, G_j) over a set of users
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numpy as np

from app.core.errors import EnumerationCapExceeded, SpecValidationError
from app.services.entropy_power import EntropyPowerLike
from app.services.policy_service import Policy
from app.utils.parallel import ordered_map
from app.utils.seeding import BLOCK_SIZE, block_sizes, derive_generator

logger = logging.getLogger(__name__)

LawMethod = Literal["exact", "convolve", "monte_carlo"]
Method = Literal["exact", "mc", "convolve", "auto"]

DEFAULT_ENUMERATION_CAP = 10_000_000
DEFAULT_BUCKETS = 2**14
DEFAULT_SAMPLES = 100_000
MIN_MC_SAMPLES = 100


@dataclass(frozen=True)
class UserPowerLaw:
    """Finite law of N(h_j, G_j) for one user: distinct values with positive weights."""

    values: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def key(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        return tuple(self.values.tolist()), tuple(self.weights.tolist())

    def mean(self) -> float:
        return float(np.dot(self.values, self.weights))


def user_power_law(policy: Policy, pi: Sequence[float], model: EntropyPowerLike, gains: Sequence[float]) -> UserPowerLaw:
    vals: list[np.ndarray] = []
    wts: list[np.ndarray] = []
    for h, pk, dist in zip(gains, pi, policy.per_level):
        if pk <= 0:
            continue
        vals.append(np.asarray(model.n(h, np.asarray(dist.powers, dtype=float)), dtype=float).reshape(-1))
        wts.append(pk * np.asarray(dist.probs, dtype=float))
    v = np.concatenate(vals)
    w = np.concatenate(wts)
    uniq, inv = np.unique(v, return_inverse=True)
    merged = np.zeros(uniq.size, dtype=float)
    np.add.at(merged, inv, w)
    keep = merged > 0
    merged = merged[keep]
    return UserPowerLaw(values=uniq[keep], weights=merged / merged.sum())


@dataclass(frozen=True)
class EvalSettings:
    method: Method = "exact"
    samples: int = DEFAULT_SAMPLES
    seed: int = 0
    tolerance: float = 1e-9
    cap: int = DEFAULT_ENUMERATION_CAP
    buckets: int = DEFAULT_BUCKETS

    def __post_init__(self) -> None:
        if self.method not in ("exact", "mc", "convolve", "auto"):
            raise SpecValidationError(f"unknown method {self.method!r}", "eval.method")
        if self.method == "mc" and self.samples < MIN_MC_SAMPLES:
            raise SpecValidationError(f"Monte Carlo needs at least {MIN_MC_SAMPLES} samples", "eval.samples")


# ----------------------------- Law -----------------------------
@dataclass(frozen=True)
class InterferenceLaw:
    """
    Discrete law of S. For "monte_carlo" values are the raw draws (block order)
    with uniform weights; expectations then carry a standard error.
    """

    values: np.ndarray
    weights: np.ndarray
    method: LawMethod
    samples: int = 0
    bin_width: float = 0.0

    def expect(self, fn: Callable[[np.ndarray], np.ndarray], chunk: int = BLOCK_SIZE) -> tuple[np.ndarray, np.ndarray]:
        """
        E[fn(S)] and its standard error. fn maps a 1-D chunk of S values to an
        array whose last axis runs over that chunk; leading axes are kept.
        """
        if self.method == "monte_carlo":
            return self._expect_mc(fn, chunk)
        total = None
        for start in range(0, self.values.size, chunk):
            sl = slice(start, start + chunk)
            part = np.asarray(fn(self.values[sl]), dtype=float) @ self.weights[sl]
            total = part if total is None else total + part
        total = np.asarray(total, dtype=float)
        return total, np.zeros_like(total)

    def _expect_mc(self, fn: Callable[[np.ndarray], np.ndarray], chunk: int) -> tuple[np.ndarray, np.ndarray]:
        # pairwise mean/variance update, chunks merged in order
        n = 0
        mean = m2 = None
        for start in range(0, self.values.size, chunk):
            x = np.asarray(fn(self.values[start : start + chunk]), dtype=float)
            nb = x.shape[-1]
            mb = np.asarray(x.mean(axis=-1))
            m2b = ((x - np.expand_dims(mb, -1)) ** 2).sum(axis=-1)
            if mean is None:
                n, mean, m2 = nb, mb, m2b
                continue
            delta = mb - mean
            tot = n + nb
            mean = mean + delta * (nb / tot)
            m2 = m2 + m2b + delta**2 * (n * nb / tot)
            n = tot
        var = m2 / (n - 1) if n > 1 else np.zeros_like(m2)
        return np.asarray(mean), np.sqrt(np.maximum(var, 0.0) / n)

    def sup_abs(self, fn: Callable[[np.ndarray], np.ndarray], chunk: int = BLOCK_SIZE) -> np.ndarray:
        """max |fn(S)| over the support, same shape convention as expect."""
        out = None
        for start in range(0, self.values.size, chunk):
            part = np.max(np.abs(np.asarray(fn(self.values[start : start + chunk]), dtype=float)), axis=-1)
            out = part if out is None else np.maximum(out, part)
        return np.asarray(out)

    def mean(self) -> float:
        return float(self.expect(lambda s: s)[0])


def degenerate_law(method: LawMethod = "exact") -> InterferenceLaw:
    return InterferenceLaw(values=np.zeros(1), weights=np.ones(1), method=method)


def joint_state_count(laws: Sequence[UserPowerLaw]) -> int:
    return math.prod(law.size for law in laws)


def exact_law(laws: Sequence[UserPowerLaw], cap: int = DEFAULT_ENUMERATION_CAP) -> InterferenceLaw:
    """Sequential outer sums, merging equal totals after each user."""
    states = joint_state_count(laws)
    if states > cap:
        raise EnumerationCapExceeded(states, cap)
    values, weights = np.zeros(1), np.ones(1)
    for law in laws:
        v = (values[:, None] + law.values[None, :]).reshape(-1)
        w = (weights[:, None] * law.weights[None, :]).reshape(-1)
        values, inv = np.unique(v, return_inverse=True)
        weights = np.zeros(values.size)
        np.add.at(weights, inv, w)
    return InterferenceLaw(values=values, weights=weights, method="exact")


def convolved_law(laws: Sequence[UserPowerLaw], buckets: int = DEFAULT_BUCKETS) -> InterferenceLaw:
    """
    Histogram convolution on a uniform grid. Each value is split between its two
    neighbouring buckets so the mean is preserved exactly; every user adds at
    most one bucket of spread, hence the len(laws) slack buckets.
    """
    if not laws:
        return degenerate_law("convolve")
    s_max = math.fsum(float(law.values.max()) for law in laws)
    if s_max <= 0:
        return degenerate_law("convolve")
    width = s_max / (buckets - 1)
    size = buckets + len(laws)
    hist = np.zeros(size)
    hist[0] = 1.0
    for law in laws:
        nxt = np.zeros(size)
        for v, p in zip(law.values, law.weights):
            pos = v / width
            q = int(math.floor(pos))
            r = pos - q
            if q >= size:
                continue
            nxt[q:] += (1.0 - r) * p * hist[: size - q]
            if r > 0 and q + 1 < size:
                nxt[q + 1 :] += r * p * hist[: size - q - 1]
        hist = nxt
    grid = np.arange(size) * width
    keep = hist > 0
    return InterferenceLaw(
        values=grid[keep],
        weights=hist[keep] / hist[keep].sum(),
        method="convolve",
        bin_width=width,
    )


def _group_laws(laws: Sequence[UserPowerLaw]) -> list[tuple[UserPowerLaw, int]]:
    groups: dict[tuple, list] = {}
    for law in laws:
        slot = groups.setdefault(law.key, [law, 0])
        slot[1] += 1
    return [(law, count) for law, count in groups.values()]


def monte_carlo_law(laws: Sequence[UserPowerLaw], samples: int, seed: int, purpose: str) -> InterferenceLaw:
    """
    Draws of S. Identical users are pooled: a group of c users contributes
    counts @ values with counts ~ Multinomial(c, weights), one stream per (group, block).
    """
    if samples < MIN_MC_SAMPLES:
        raise SpecValidationError(f"Monte Carlo needs at least {MIN_MC_SAMPLES} samples", "eval.samples")
    groups = _group_laws(laws)
    sizes = block_sizes(samples)

    def _block(b: int) -> np.ndarray:
        out = np.zeros(sizes[b])
        for gi, (law, count) in enumerate(groups):
            rng = derive_generator(seed, purpose, gi, b)
            counts = rng.multinomial(count, law.weights, size=sizes[b])
            out += counts @ law.values
        return out

    draws = np.concatenate(ordered_map(_block, range(len(sizes))))
    return InterferenceLaw(
        values=draws,
        weights=np.full(draws.size, 1.0 / draws.size),
        method="monte_carlo",
        samples=int(draws.size),
    )


def build_law(laws: Sequence[UserPowerLaw], settings: EvalSettings, purpose: str = "interference") -> InterferenceLaw:
    method = settings.method
    if method == "mc":
        return monte_carlo_law(laws, settings.samples, settings.seed, purpose)
    if method == "convolve":
        return convolved_law(laws, settings.buckets)
    if method == "auto":
        states = joint_state_count(laws)
        if states > settings.cap:
            logger.info("build_law: %d joint states over cap %d; using convolution", states, settings.cap)
            return convolved_law(laws, settings.buckets)
    return exact_law(laws, settings.cap)
