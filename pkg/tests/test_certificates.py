# tests/test_certificates.py
from __future__ import annotations

import logging
import math
from types import SimpleNamespace

import numpy as np
import pytest

from app.core.errors import RegularityViolation, SpecValidationError
from app.services import certificate_service
from app.services.best_response_service import best_response, conditional_payoff_table
from app.services.certificate_service import (
    find_n_star,
    n_star_spread,
    require_regularity,
    verify_entropy_dual_certificate,
    verify_m_dominating,
)
from app.services.channel_service import GainLadder, SystemSpec, UserSpec
from app.services.entropy_power import EntropyPowerModel
from app.services.interference import EvalSettings
from app.services.policy_service import invariant_profile
from app.services.power_grid import PowerGrid
from app.services.rate_service import user_objective

C_LAPLACE = 2 * math.e / math.pi
EXACT = EvalSettings(method="exact")
SMALL_GRID = PowerGrid.uniform(1.0, 21)


def _mk_random_user(rng: np.random.Generator, k: int) -> UserSpec:
    pi = rng.dirichlet(np.ones(k))
    pi[-1] = 1.0 - float(np.sum(pi[:-1]))
    return UserSpec.of(pi, float(rng.uniform(0.05, 1.0)), 1.0)


# ---------- entropy certificate ----------
def test_entropy_certificate_fixture(homogeneous_spec, fixture_user):
    cert = verify_entropy_dual_certificate(fixture_user, homogeneous_spec, PowerGrid.uniform(1.0, 101))
    assert cert.kind == "entropy"
    assert cert.holds
    assert cert.min_margin >= -1e-12
    assert cert.duals[0].value == pytest.approx(C_LAPLACE / 4, rel=1e-12)
    assert set(cert.equality_points) == {(2, 0.0), (2, 1.0), (3, 1.0)}
    assert len(cert.rows) == 3 * 101


@pytest.mark.parametrize("p", [0.5, 1.0, 1.5])
def test_entropy_certificate_on_random_ladders(p):
    rng = np.random.default_rng(int(p * 100))
    model = EntropyPowerModel.power_law(p, sigma2=1.0)
    grid = PowerGrid.uniform(1.0, 1001)
    for _ in range(5):
        k = int(rng.integers(2, 5))
        ladder = GainLadder.of(np.concatenate([[0.0], np.sort(rng.uniform(0.1, 1.5, k - 1))]))
        user = _mk_random_user(rng, k)
        spec = SystemSpec(ladder=ladder, users=(user,), model=model)
        cert = verify_entropy_dual_certificate(user, spec, grid)
        assert cert.min_margin >= -1e-12
        assert cert.equality_points
        assert all(g in (0.0, 1.0) for _, g in cert.equality_points)


def test_entropy_certificate_refuses_affine_model(gaussian_model, fixture_ladder, fixture_user):
    spec = SystemSpec.homogeneous(fixture_ladder, fixture_user, 2, gaussian_model)
    with pytest.raises(RegularityViolation):
        verify_entropy_dual_certificate(fixture_user, spec)


def test_entropy_certificate_grid_must_end_at_cap(homogeneous_spec, fixture_user):
    with pytest.raises(SpecValidationError):
        verify_entropy_dual_certificate(fixture_user, homogeneous_spec, PowerGrid.uniform(2.0, 11))


# ---------- rate certificate ----------
def test_m_dominating_exact_fixture(homogeneous_spec):
    cert = verify_m_dominating(homogeneous_spec, SMALL_GRID, EXACT)
    assert cert.status == "holds"
    assert cert.method == "exact"
    assert len(cert.rows) == 3 * 21
    assert len(cert.duals) == 1 and cert.duals[0].value > 0
    assert {r.condition for r in cert.rows if r.level <= 2} == {"silence"}
    assert {r.condition for r in cert.rows if r.level == 3} == {"full_power"}
    top = [r for r in cert.rows if r.level == 3 and r.g == 1.0][0]
    assert abs(top.margin) <= 1e-15
    assert all(r.ci_low == r.margin for r in cert.rows)


def test_m_dominating_single_user(laplace_model):
    ladder = GainLadder.of([0.0, 1.0])
    spec = SystemSpec(ladder=ladder, users=(UserSpec.of([0.5, 0.5], 0.25, 1.0),), model=laplace_model)
    cert = verify_m_dominating(spec, PowerGrid.uniform(1.0, 101), EXACT)
    assert cert.n_users == 1
    assert cert.holds


def test_m_dominating_labels_heterogeneous_users(fixture_ladder, laplace_model):
    a = UserSpec.of([0.2, 0.3, 0.5], 0.6, 1.0)
    b = UserSpec.of([0.1, 0.4, 0.5], 0.3, 1.0)
    spec = SystemSpec(ladder=fixture_ladder, users=(a, b, a), model=laplace_model)
    cert = verify_m_dominating(spec, SMALL_GRID, EXACT)
    labels = {r.condition.split("@")[1] for r in cert.rows}
    assert labels == {"user0", "user1"}
    assert len(cert.duals) == 2


def test_m_dominating_monte_carlo_intervals(homogeneous_spec):
    settings = EvalSettings(method="mc", samples=20_000, seed=4)
    cert = verify_m_dominating(homogeneous_spec, SMALL_GRID, settings)
    again = verify_m_dominating(homogeneous_spec, SMALL_GRID, settings)
    assert cert.status in ("holds", "inconclusive")
    assert cert.method == "monte_carlo" and cert.samples == 20_000
    assert all(r.ci_low <= r.margin <= r.ci_high for r in cert.rows)
    assert [r.margin for r in cert.rows] == [r.margin for r in again.rows]
    if cert.status == "inconclusive":
        assert cert.required_samples and cert.required_samples > 20_000


def test_m_dominating_convolution_brackets_exact(homogeneous_spec):
    spec = homogeneous_spec.with_user_count(6)
    exact = verify_m_dominating(spec, SMALL_GRID, EXACT)
    conv = verify_m_dominating(spec, SMALL_GRID, EvalSettings(method="convolve", buckets=1025))
    assert conv.method == "convolve"
    for e, c in zip(exact.rows, conv.rows):
        assert c.ci_low - 1e-12 <= e.margin <= c.ci_high + 1e-12
    # structural zeros carry no widening
    top = [r for r in conv.rows if r.level == 3 and r.g == 1.0][0]
    assert top.ci_low == top.ci_high == top.margin


# ---------- N* ----------
def test_find_n_star_fixture(homogeneous_spec):
    report = find_n_star(homogeneous_spec, 1, 6, SMALL_GRID, EXACT)
    assert report.n_star is not None
    assert report.persistence
    assert report.tested_range == (1, 6)
    assert [r.n_users for r in report.rows] == [1, 2, 3, 4, 5, 6]
    assert all(r.entropy_min_margin >= -1e-12 for r in report.rows)
    doc = report.to_dict()
    assert set(doc) == {"n_star", "tested_range", "persistence", "trajectory"}


def test_invariant_policy_is_a_best_response_beyond_n_star(homogeneous_spec):
    grid = PowerGrid.uniform(1.0, 101)
    report = find_n_star(homogeneous_spec, 1, 5, grid, EXACT)
    assert report.n_star is not None
    for n in range(report.n_star, 6):
        spec = homogeneous_spec.with_user_count(n)
        profile = invariant_profile(spec)
        table = conditional_payoff_table(0, profile.others(0), spec, grid, EXACT)
        br = best_response(0, profile.others(0), spec, table=table)
        inv = user_objective(0, profile, spec, EXACT)
        assert br.value - inv.value <= 1e-6 * abs(inv.value)


def test_find_n_star_refuses_affine_model(gaussian_model, fixture_ladder, fixture_user):
    spec = SystemSpec.homogeneous(fixture_ladder, fixture_user, 4, gaussian_model)
    with pytest.raises(RegularityViolation) as exc:
        find_n_star(spec, 1, 4)
    assert "regularity condition (2)" in str(exc.value)


def test_find_n_star_refuses_concave_model(fixture_ladder, fixture_user):
    spec = SystemSpec.homogeneous(fixture_ladder, fixture_user, 4, EntropyPowerModel.power_law(3.0, sigma2=1.0))
    with pytest.raises(RegularityViolation):
        find_n_star(spec, 1, 4)


def test_require_regularity_flags_heavy_zero_gain(fixture_ladder, laplace_model):
    spec = SystemSpec.homogeneous(fixture_ladder, UserSpec.of([0.6, 0.2, 0.2], 0.3, 1.0), 2, laplace_model)
    with pytest.raises(RegularityViolation) as exc:
        require_regularity(spec)
    assert "regularity condition (1)" in str(exc.value)
    assert exc.value.details["passed"] is False


def test_find_n_star_validates_range(homogeneous_spec):
    with pytest.raises(SpecValidationError):
        find_n_star(homogeneous_spec, 5, 2)
    with pytest.raises(SpecValidationError):
        find_n_star(homogeneous_spec, 0, 2)


# n_star of the homogeneous p = 1 fixture over N in [1, 64] with default grid and settings
GOLDEN_N_STAR = 1


def test_find_n_star_golden_sweep_to_64(homogeneous_spec):
    report = find_n_star(homogeneous_spec, 1, 64)
    assert report.n_star == GOLDEN_N_STAR
    assert report.persistence
    assert len(report.rows) == 64
    assert all(r.status == "holds" for r in report.rows)
    assert report.rows[-1].method == "convolve"


def _scripted_rate_certificates(monkeypatch, statuses: dict[int, str]) -> None:
    def _verify(spec, grid=None, settings=None, grid_points=None):
        status = statuses[spec.n_users]
        return SimpleNamespace(
            n_users=spec.n_users,
            status=status,
            holds=status == "holds",
            min_margin=0.0,
            min_ci_low=0.0,
            method="exact",
            samples=0,
        )

    monkeypatch.setattr(certificate_service, "verify_m_dominating", _verify)


def test_n_star_is_the_first_holding_n(homogeneous_spec, monkeypatch):
    _scripted_rate_certificates(monkeypatch, {1: "violated", 2: "violated", 3: "holds", 4: "holds"})
    report = find_n_star(homogeneous_spec, 1, 4, SMALL_GRID, EXACT)
    assert report.n_star == 3
    assert report.persistence


def test_lapse_after_first_hold_breaks_persistence(homogeneous_spec, monkeypatch, caplog):
    _scripted_rate_certificates(monkeypatch, {1: "violated", 2: "holds", 3: "violated", 4: "holds"})
    with caplog.at_level(logging.WARNING, logger="app.services.certificate_service"):
        report = find_n_star(homogeneous_spec, 1, 4, SMALL_GRID, EXACT)
    assert report.n_star is None
    assert report.persistence is False
    assert "fails again at N=[3]" in caplog.text


def test_no_holding_n_has_no_persistence(homogeneous_spec, monkeypatch):
    _scripted_rate_certificates(monkeypatch, {1: "violated", 2: "violated"})
    report = find_n_star(homogeneous_spec, 1, 2, SMALL_GRID, EXACT)
    assert (report.n_star, report.persistence) == (None, False)


# ---------- per-user power caps ----------
def _mk_mixed_caps_spec(laplace_model, fixture_ladder) -> SystemSpec:
    users = (UserSpec.of([0.2, 0.3, 0.5], 0.6, 2.0), UserSpec.of([0.2, 0.3, 0.5], 0.6, 1.0))
    return SystemSpec(ladder=fixture_ladder, users=users, model=laplace_model)


def test_m_dominating_builds_a_grid_per_user(laplace_model, fixture_ladder):
    spec = _mk_mixed_caps_spec(laplace_model, fixture_ladder)
    cert = verify_m_dominating(spec, None, EXACT, grid_points=11)
    assert len(cert.rows) == 2 * 3 * 11
    assert max(r.g for r in cert.rows if r.condition.endswith("@user0")) == 2.0
    assert max(r.g for r in cert.rows if r.condition.endswith("@user1")) == 1.0
    assert len(cert.duals) == 2


def test_shared_grid_must_fit_every_user(laplace_model, fixture_ladder):
    spec = _mk_mixed_caps_spec(laplace_model, fixture_ladder)
    with pytest.raises(SpecValidationError) as exc:
        verify_m_dominating(spec, PowerGrid.uniform(1.0, 11), EXACT)
    assert exc.value.path == "grid"


def test_find_n_star_with_per_user_caps(laplace_model, fixture_ladder):
    spec = _mk_mixed_caps_spec(laplace_model, fixture_ladder)
    report = find_n_star(spec, 1, 3, None, EXACT, grid_points=11)
    assert [r.n_users for r in report.rows] == [1, 2, 3]
    assert report.certificates[0].rows[-1].g == 2.0


def test_n_star_spread(homogeneous_spec):
    variants = [UserSpec.of([0.2, 0.3, 0.5], 0.6, 1.0), UserSpec.of([0.1, 0.3, 0.6], 0.4, 1.0)]
    spread = n_star_spread(homogeneous_spec, variants, 1, 3, SMALL_GRID, EXACT)
    assert len(spread.entries) == 2
    doc = spread.to_dict()
    assert [e["g_bar"] for e in doc["entries"]] == [0.6, 0.4]
    if len(spread.finite) == 2:
        assert spread.spread == max(spread.finite) - min(spread.finite)
