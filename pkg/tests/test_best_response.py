# tests/test_best_response.py
from __future__ import annotations

import math

import numpy as np
import pytest

from app.core.errors import EnumerationCapExceeded, SpecValidationError
from app.services.best_response_service import (
    DualParams,
    best_response,
    brute_force_best_response,
    conditional_payoff_table,
    expected_entropy_power,
    iterated_best_response,
    vertex_count,
)
from app.services.channel_service import GainLadder, SystemSpec, UserSpec
from app.services.entropy_power import EntropyPowerModel
from app.services.interference import EvalSettings
from app.services.policy_service import invariant_policy, invariant_profile, make_grid_policy
from app.services.power_grid import PowerGrid

C_LAPLACE = 2 * math.e / math.pi
EXACT = EvalSettings(method="exact")


def _mk_single_user(model, g_bar) -> SystemSpec:
    ladder = GainLadder.of([0.0, 1.0])
    return SystemSpec(ladder=ladder, users=(UserSpec.of([0.5, 0.5], g_bar, 1.0),), model=model)


def _mk_random_instance(rng: np.random.Generator):
    k = int(rng.integers(2, 4))
    m = int(rng.integers(3, 10))
    n = int(rng.integers(1, 4))
    p = float(rng.choice([0.5, 1.0, 1.5, 2.0]))
    gains = np.concatenate([[0.0], np.sort(rng.uniform(0.2, 1.5, k - 1))])
    ladder = GainLadder.of(gains)
    users = []
    for _ in range(n):
        pi = rng.dirichlet(np.ones(k))
        pi[-1] = 1.0 - float(np.sum(pi[:-1]))
        users.append(UserSpec.of(pi, float(rng.uniform(0.05, 1.0)), 1.0))
    spec = SystemSpec(ladder=ladder, users=tuple(users), model=EntropyPowerModel.power_law(p, sigma2=1.0))
    grid = PowerGrid.uniform(1.0, m)
    pts = grid.as_array()
    others = [
        make_grid_policy([[(float(pts[rng.integers(0, m)]), 1.0)] for _ in range(k)], 1.0) for _ in range(n - 1)
    ]
    return spec, grid, others


# ---------- payoff table ----------
def test_payoff_table_cell_against_full_power_opponent(gaussian_model):
    ladder = GainLadder.of([0.0, 1.0])
    spec = SystemSpec.homogeneous(ladder, UserSpec.of([0.5, 0.5], 0.5, 1.0), 2, gaussian_model)
    others = invariant_profile(spec).others(0)
    table = conditional_payoff_table(0, others, spec, PowerGrid.uniform(1.0, 11), EXACT)
    expected = 0.25 * math.log(2) + 0.25 * math.log(1.5)
    assert table.values[1, -1] == pytest.approx(expected, abs=1e-12)
    assert table.values[1, -1] == pytest.approx(0.274653, abs=1e-6)
    assert np.all(table.values[0] == 0.0)
    assert table.method == "exact"


def test_payoff_table_checks_opponent_count(homogeneous_spec):
    others = invariant_profile(homogeneous_spec).others(0)
    with pytest.raises(SpecValidationError):
        conditional_payoff_table(0, others[:1], homogeneous_spec)


# ---------- regimes ----------
def test_convex_single_user_mixes_zero_and_full_power(laplace_model):
    spec = _mk_single_user(laplace_model, 0.25)
    res = best_response(0, (), spec, PowerGrid.uniform(1.0, 101), EXACT)
    assert res.policy.per_level[1].atoms == [(0.0, pytest.approx(0.5)), (1.0, pytest.approx(0.5))]
    mixture = 0.25 * 0.5 * math.log1p(C_LAPLACE)
    deterministic = 0.5 * 0.5 * math.log1p(C_LAPLACE * 0.25)
    assert res.value == pytest.approx(mixture, abs=1e-9)
    assert res.value > deterministic
    assert res.budget_used == pytest.approx(0.25, abs=1e-10)
    assert res.active
    assert res.dual is not None and res.dual.source == "bisection"


def test_best_response_value_grows_with_the_budget(fixture_ladder, laplace_model, fixture_user):
    grid = PowerGrid.uniform(1.0, 41)
    others = invariant_profile(SystemSpec.homogeneous(fixture_ladder, fixture_user, 3, laplace_model)).others(0)
    values = []
    for g_bar in np.linspace(0.05, 1.0, 20):
        users = (UserSpec.of([0.2, 0.3, 0.5], float(g_bar), 1.0), fixture_user, fixture_user)
        spec = SystemSpec(ladder=fixture_ladder, users=users, model=laplace_model)
        values.append(best_response(0, others, spec, grid, EXACT).value)
    assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))
    assert values[-1] > values[0]


def test_convex_single_user_matches_invariant_policy(laplace_model):
    spec = _mk_single_user(laplace_model, 0.25)
    res = best_response(0, (), spec, PowerGrid.uniform(1.0, 101), EXACT)
    assert res.policy.close_to(invariant_policy(spec.users[0], spec.ladder).base, atol=1e-9)


def test_affine_single_user_does_not_mix(gaussian_model):
    spec = _mk_single_user(gaussian_model, 0.5)
    res = best_response(0, (), spec, PowerGrid.uniform(1.0, 101), EXACT)
    assert res.policy.mixed_levels() == []
    assert res.policy.per_level[1].atoms == [(1.0, 1.0)]
    assert res.dual.value == 0.0
    assert res.value == pytest.approx(0.25 * math.log(2), abs=1e-12)


# ---------- oracle ----------
def test_best_response_matches_vertex_enumeration_on_random_instances():
    rng = np.random.default_rng(12345)
    for _ in range(200):
        spec, grid, others = _mk_random_instance(rng)
        table = conditional_payoff_table(0, others, spec, grid, EXACT)
        fast = best_response(0, others, spec, table=table)
        oracle = brute_force_best_response(0, others, spec, table=table)
        assert abs(fast.value - oracle.value) <= 1e-9
        assert fast.budget_used <= spec.users[0].g_bar + 1e-10
        assert len(fast.policy.mixed_levels()) <= 1


def test_vertex_count_and_cap(laplace_model):
    assert vertex_count(1, 3) == 3 + 1 * 3 * 1
    assert vertex_count(2, 3) == 9 + 2 * 3 * 3
    spec = _mk_single_user(laplace_model, 0.25)
    with pytest.raises(EnumerationCapExceeded) as exc:
        brute_force_best_response(0, (), spec, PowerGrid.uniform(1.0, 101), EXACT, cap=10)
    assert "use a coarser grid" in str(exc.value)


def test_oracle_has_no_dual(laplace_model):
    spec = _mk_single_user(laplace_model, 0.25)
    res = brute_force_best_response(0, (), spec, PowerGrid.uniform(1.0, 21), EXACT)
    assert res.dual is None
    assert res.value == pytest.approx(0.25 * 0.5 * math.log1p(C_LAPLACE), abs=1e-12)


def test_dual_params_reject_negative_lambda():
    with pytest.raises(SpecValidationError):
        DualParams(value=-0.1, source="bisection")


# ---------- dynamics ----------
def test_iterated_best_response_from_invariant_profile(homogeneous_spec):
    trajectory = iterated_best_response(
        invariant_profile(homogeneous_spec), homogeneous_spec, PowerGrid.uniform(1.0, 11), rounds=3, settings=EXACT
    )
    assert 1 <= len(trajectory) <= 3
    assert trajectory[0].round == 1
    assert all(math.isfinite(r.sum_rate) for r in trajectory)
    assert trajectory[-1].to_dict()["profile"]["policies"]


def test_iterated_best_response_needs_a_round(homogeneous_spec):
    with pytest.raises(SpecValidationError):
        iterated_best_response(invariant_profile(homogeneous_spec), homogeneous_spec, rounds=0)


def test_expected_entropy_power_of_threshold_policy(homogeneous_spec, fixture_user, fixture_ladder, laplace_model):
    base = invariant_policy(fixture_user, fixture_ladder).base
    expected = 0.3 * (1.0 / 3.0) * C_LAPLACE / 4 + 0.5 * C_LAPLACE
    assert expected_entropy_power(base, fixture_user, laplace_model, fixture_ladder) == pytest.approx(expected, rel=1e-12)
