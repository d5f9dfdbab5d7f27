import numpy as np
import pytest
from scipy import integrate

from weakgas.configuration import (Box, Configuration, QuadratureGrid, abs_pairing, energy, energy_delta, field_at,
                                   pairing, random_configuration, simulation_window, smeared_cutoff,
                                   stability_bound)
from weakgas.model import EnergyDensity
from weakgas.observables import TestFunction

from conftest import make_model


def cfg_of(model, pos, chg):
    return Configuration(np.asarray(pos, float).reshape(-1, 1), chg, simulation_window(model))


def test_field_empty(model):
    c = Configuration.empty(simulation_window(model))
    assert np.all(field_at(c, model.kernel, np.linspace(-3, 3, 11)) == 0.0)


def test_field_single_particle(model):
    c = cfg_of(model, [0.3], [1.0])
    xs = np.linspace(-2, 2, 41)
    assert np.allclose(field_at(c, model.kernel, xs), model.kernel(xs - 0.3))


def test_field_cancellation(model):
    c = cfg_of(model, [0.3, 0.3], [1.0, -1.0])
    assert np.all(field_at(c, model.kernel, np.linspace(-2, 2, 41)) == 0.0)


def test_field_matches_direct_sum(model, rng):
    c = random_configuration(model, rng, 40)
    xs = np.linspace(-3, 3, 97)
    direct = sum(s * model.kernel(xs - y[0]) for y, s in zip(c.positions, c.charges))
    assert np.allclose(field_at(c, model.kernel, xs), direct, atol=1e-12)


def test_pairings(model):
    one = TestFunction("plateau_ramp", (0.0,), plateau=10.0)
    assert pairing(Configuration.empty(simulation_window(model)), one) == 0.0
    c = cfg_of(model, [0.1, -1.0, 2.0], [1.0, 1.0, -1.0])
    assert pairing(c, one) == 1.0
    assert abs_pairing(c, one) == 3.0


def test_energy_empty_and_zero(model, grid, rng):
    assert energy(Configuration.empty(simulation_window(model)), model, grid) == 0.0
    free = make_model("zero")
    c = random_configuration(free, rng, 30)
    assert energy(c, free, grid) == 0.0


def test_linear_energy_fubini(grid, rng):
    lin = make_model("linear", params=(-1.0,))
    c = random_configuration(lin, rng, 25)
    # field-then-density summation against per-particle smearing of g on the same nodes
    U = energy(c, lin, grid)
    assert U == pytest.approx(-(c.charges @ smeared_cutoff(lin, grid, c.positions)), rel=1e-10)


def test_linear_energy_converges_to_continuum(rng):
    lin = make_model("linear", params=(-1.0,))
    c = random_configuration(lin, rng, 25)
    fine = QuadratureGrid.for_model(lin, 1e-3)
    exact = []
    for (y,) in c.positions:
        kinks = [p for p in (-2.0, 2.0, y - 1, y, y + 1) if -2.5 < p < 2.5]
        exact.append(integrate.quad(lambda x: lin.kernel(x - y) * lin.cutoff(x), -2.5, 2.5, points=kinks,
                                    limit=200)[0])
    assert energy(c, lin, fine) == pytest.approx(-(c.charges @ np.array(exact)), rel=1e-5)


def test_energy_delta_reversibility(model, grid, rng):
    c = random_configuration(model, rng, 20)
    y, s = np.array([0.4]), -1.0
    up = energy_delta(c, ("insert", y, s), model, grid)
    c2 = c.inserted(y, s)
    down = energy_delta(c2, ("remove", c2.n - 1), model, grid)
    assert up + down == pytest.approx(0.0, abs=1e-10)
    assert up == pytest.approx(energy(c2, model, grid) - energy(c, model, grid), abs=1e-10)


def test_energy_delta_empty_equals_singleton(model, grid):
    empty = Configuration.empty(simulation_window(model))
    d = energy_delta(empty, ("insert", np.array([0.2]), 1.0), model, grid)
    assert d == pytest.approx(energy(cfg_of(model, [0.2], [1.0]), model, grid), abs=1e-12)


def test_energy_delta_far_insertion_is_zero(model, grid, rng):
    c = random_configuration(model, rng, 10)
    W = simulation_window(model)
    wide = Configuration(c.positions, c.charges, W.dilate(10.0))
    assert energy_delta(wide, ("insert", np.array([8.0]), 1.0), model, grid) == 0.0


def test_energy_delta_invalid_index(model, grid):
    c = cfg_of(model, [0.0], [1.0])
    with pytest.raises(IndexError):
        energy_delta(c, ("remove", 3), model, grid)


def test_stability_bound_empty(model, grid):
    assert stability_bound(Configuration.empty(simulation_window(model)), model, grid) == 0.0


def test_stability_bound_saturates_for_linear(grid, rng):
    lin = make_model("linear", params=(-1.0,))
    W = simulation_window(lin)
    pos = W.lo + rng.random((30, 1)) * (W.hi - W.lo)
    c = Configuration(pos, np.ones(30), W)
    assert abs(energy(c, lin, grid)) == pytest.approx(stability_bound(c, lin, grid), rel=1e-12)


@pytest.mark.parametrize("kind", ["logcosh_gauged", "sqrt_saturating_gauged"])
def test_stability_bound_holds(kind, grid, rng):
    m = make_model(kind)
    for _ in range(200):
        c = random_configuration(m, rng, int(rng.integers(0, 60)))
        assert abs(energy(c, m, grid)) <= stability_bound(c, m, grid) + 1e-6


def test_configuration_validation(model):
    W = simulation_window(model)
    with pytest.raises(ValueError):
        Configuration([[0.0]], [0.0], W)
    with pytest.raises(ValueError):
        Configuration([[100.0]], [1.0], W)


def test_csv_roundtrip(model, rng, tmp_path):
    c = random_configuration(model, rng, 7)
    c.to_csv(tmp_path / "c.csv")
    back = Configuration.from_csv(tmp_path / "c.csv", c.window)
    assert np.array_equal(back.positions, c.positions) and np.array_equal(back.charges, c.charges)


def test_grid_weights_integrate_cutoff(model):
    grid = QuadratureGrid.for_model(model)
    # integral of g: plateau 4 plus two ramps of area 0.25
    assert grid.weights.sum() == pytest.approx(4.5, rel=1e-12)


def test_window_is_cutoff_plus_range(model):
    W = simulation_window(model)
    assert W == Box([-3.5], [3.5])
