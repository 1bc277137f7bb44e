# tests/test_entropy_power.py
from __future__ import annotations

import math

import numpy as np
import pytest

from app.core.errors import DomainError, RegularityViolation, SearchFailure, SpecValidationError
from app.services.entropy_power import (
    EntropyPowerModel,
    NoiseModel,
    PowerLawConstraint,
    TabulatedEntropyPowerModel,
    chord_gap,
    classify_convexity,
    max_entropy,
    probe_convexity_gaps,
    require_strict_convexity,
    scaled_entropy_power,
    verify_convexity_gaps,
)
from app.services.power_grid import PowerGrid

LAPLACE_N11 = 2 * math.e / math.pi


def _mk_tabulated(row=(0.0, 0.2, 1.0)) -> TabulatedEntropyPowerModel:
    return TabulatedEntropyPowerModel(
        gains=(0.0, 1.0),
        powers=(0.0, 0.5, 1.0),
        table=((0.0, 0.0, 0.0), tuple(row)),
    )


# ---------- maximum entropy ----------
def test_max_entropy_gaussian_and_laplace_closed_forms():
    assert max_entropy(PowerLawConstraint(2.0), 1.0) == pytest.approx(0.5 * math.log(2 * math.pi * math.e), abs=1e-12)
    assert max_entropy(PowerLawConstraint(1.0), 1.0) == pytest.approx(math.log(2 * math.e), abs=1e-12)


@pytest.mark.parametrize("p", [0.5, 1.5, 3.0])
@pytest.mark.parametrize("moment", [0.3, 1.0, 4.0])
def test_max_entropy_matches_generalized_gaussian(p, moment):
    # density p / (2 a Gamma(1/p)) exp(-(|x|/a)^p) has E|X|^p = a^p / p
    a = (p * moment) ** (1.0 / p)
    expected = 1.0 / p + math.log(2.0 * a * math.gamma(1.0 / p) / p)
    assert max_entropy(PowerLawConstraint(p), moment) == pytest.approx(expected, rel=1e-12)


def test_max_entropy_rejects_nonpositive_moment():
    with pytest.raises(DomainError):
        max_entropy(PowerLawConstraint(1.0), 0.0)


def test_constraint_and_noise_validation():
    with pytest.raises(SpecValidationError):
        PowerLawConstraint(0.0)
    with pytest.raises(SpecValidationError):
        NoiseModel.gaussian(-1.0)
    with pytest.raises(SpecValidationError):
        EntropyPowerModel.power_law(1.0, sigma2=1.0, noise_entropy=1.4)
    with pytest.raises(SpecValidationError):
        EntropyPowerModel.power_law(1.0)


# ---------- N(h, g) ----------
def test_scaled_entropy_power_oracles(laplace_model, gaussian_model):
    assert scaled_entropy_power(laplace_model, 1.0, 1.0) == pytest.approx(LAPLACE_N11, rel=1e-12)
    assert scaled_entropy_power(gaussian_model, 0.7, 0.3) == pytest.approx(0.49 * 0.3, rel=1e-12)
    assert scaled_entropy_power(laplace_model, 0.0, 1.0) == 0.0
    assert scaled_entropy_power(laplace_model, 1.0, 0.0) == 0.0


def test_kappa_at_half_is_e():
    c = PowerLawConstraint(0.5)
    assert c.log_kappa == pytest.approx(1.0, abs=1e-12)


def test_entropy_noise_matches_gaussian_noise():
    by_entropy = EntropyPowerModel.power_law(1.0, noise_entropy=0.5 * math.log(2 * math.pi * math.e))
    by_sigma = EntropyPowerModel.power_law(1.0, sigma2=1.0)
    g = np.linspace(0, 1, 7)
    np.testing.assert_allclose(by_entropy.n(0.8, g), by_sigma.n(0.8, g), rtol=1e-12)


def test_n_is_vectorized_over_gains_and_powers(laplace_model):
    out = laplace_model.n(np.array([0.0, 0.5, 1.0])[:, None], np.array([0.0, 0.5, 1.0])[None, :])
    assert out.shape == (3, 3)
    assert out[2, 2] == pytest.approx(LAPLACE_N11)
    assert out[1, 2] == pytest.approx(LAPLACE_N11 / 4)
    assert np.all(out[0] == 0.0)


def test_scaled_entropy_power_rejects_negative_arguments(laplace_model):
    with pytest.raises(DomainError):
        scaled_entropy_power(laplace_model, -0.1, 1.0)
    with pytest.raises(DomainError):
        scaled_entropy_power(laplace_model, 1.0, -0.1)


# ---------- convexity ----------
def test_chord_gap_example(laplace_model):
    gap = float(chord_gap(laplace_model, 1.0, 0.5, 1.0))
    assert gap == pytest.approx(LAPLACE_N11 * 0.5 - LAPLACE_N11 / 4, rel=1e-12)


@pytest.mark.parametrize(
    "p, expected",
    [(0.5, "strictly_convex"), (1.0, "strictly_convex"), (1.5, "strictly_convex"), (2.0, "not_strictly_convex"), (3.0, "not_strictly_convex")],
)
def test_classify_convexity_by_exponent(p, expected, unit_grid):
    model = EntropyPowerModel.power_law(p, sigma2=1.0)
    assert classify_convexity(model, 1.0, unit_grid) == expected


def test_require_strict_convexity_refuses_affine_model(gaussian_model, fixture_ladder, unit_grid):
    with pytest.raises(RegularityViolation) as exc:
        require_strict_convexity(gaussian_model, fixture_ladder, unit_grid)
    assert "regularity condition (2)" in str(exc.value)
    assert set(exc.value.details["classifier"].values()) == {"not_strictly_convex"}


def test_require_strict_convexity_accepts_laplace(laplace_model, fixture_ladder, unit_grid):
    require_strict_convexity(laplace_model, fixture_ladder, unit_grid)


def test_convexity_needs_three_points(laplace_model):
    with pytest.raises(SpecValidationError):
        classify_convexity(laplace_model, 1.0, PowerGrid.uniform(1.0, 2))


# ---------- gap witnesses ----------
def test_probe_convexity_gaps_and_refined_check(laplace_model, fixture_ladder, unit_grid):
    report = probe_convexity_gaps(laplace_model, fixture_ladder, 0.5, 0.25, unit_grid)
    assert report.epsilon > 0
    assert report.g1 == pytest.approx(0.25)
    assert report.g2 == pytest.approx(0.75)
    assert math.isfinite(report.L) and report.L > LAPLACE_N11
    assert set(report.margins) == {"secant_near_g_max", "ratio_near_zero", "chord_gap"}
    assert verify_convexity_gaps(laplace_model, fixture_ladder, 0.5, report, unit_grid.refined(10)) > 0


def test_probe_convexity_gaps_fails_for_vanishing_delta(laplace_model, fixture_ladder, unit_grid):
    with pytest.raises(SearchFailure) as exc:
        probe_convexity_gaps(laplace_model, fixture_ladder, 0.5, 1e-9, unit_grid)
    assert "chord_gap" in exc.value.diagnostics["margins"]


def test_probe_convexity_gaps_rejects_bad_delta(laplace_model, fixture_ladder, unit_grid):
    with pytest.raises(DomainError):
        probe_convexity_gaps(laplace_model, fixture_ladder, 0.5, 0.6, unit_grid)


# ---------- tabulated family ----------
def test_tabulated_model_interpolates_between_nodes():
    model = _mk_tabulated()
    assert float(model.n(1.0, 0.75)) == pytest.approx(0.6)
    assert float(model.n(0.0, 0.75)) == 0.0


def test_tabulated_model_rejects_decreasing_rows():
    with pytest.raises(SpecValidationError):
        _mk_tabulated(row=(0.0, 0.5, 0.4))


def test_tabulated_model_domain_errors():
    model = _mk_tabulated()
    with pytest.raises(DomainError):
        model.n(1.0, 1.5)
    with pytest.raises(DomainError):
        model.n(0.5, 0.2)


def test_piecewise_linear_table_is_not_strictly_convex(unit_grid):
    assert classify_convexity(_mk_tabulated(), 1.0, unit_grid) == "not_strictly_convex"
