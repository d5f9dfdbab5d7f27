import math

import numpy as np
import pytest
from scipy import integrate, special

from weakgas.configuration import Box, Configuration, QuadratureGrid, field_at, simulation_window
from weakgas.lattice import (LatticeConfiguration, LatticeSystem, LatticeWindow, discretize, enumerate_lattice,
                             fd_agrees, fkg_finite_difference, fkg_mixed_partial, lattice_energy, lattice_field,
                             omitted_mass_bound, random_lattice_state, site_law)
from weakgas.model import ChargeLaw, EnergyDensity, tabulated_energy
from weakgas.observables import Observable, TestFunction

from conftest import RADEMACHER, make_model


def cell(c, lam=1.0):
    return TestFunction("plateau_ramp", (c + lam / 2,), plateau=lam / 2)


def test_window_geometry():
    w = LatticeWindow.covering(Box([-1.0], [1.0]), 0.25)
    assert w.m == 8 and w.box == Box([-1.0], [1.0])
    assert np.allclose(w.centers()[:, 0], -0.875 + 0.25 * np.arange(8))
    assert list(w.site_of(np.array([[-1.0], [-0.76], [0.99], [1.0]]))) == [0, 0, 7, -1]


def test_discretize_cases(model):
    w = LatticeWindow.covering(simulation_window(model), 0.5)
    W = w.box
    assert np.all(discretize(Configuration.empty(W), w).values == 0)
    one = discretize(Configuration([[0.3]], [-1.0], W), w)
    j = int(w.site_of(np.array([[0.3]]))[0])
    assert one.values[j] == -1.0 and np.count_nonzero(one.values) == 1
    pair = discretize(Configuration([[0.3], [0.4]], [1.0, -1.0], W), w)
    assert np.all(pair.values == 0)


def test_zero_lattice_state(model, grid):
    w = LatticeWindow.covering(simulation_window(model), 0.5)
    lat = LatticeConfiguration(w, np.zeros(w.m))
    assert np.all(lattice_field(lat, model.kernel, np.linspace(-3, 3, 13)) == 0)
    assert lattice_energy(lat, model, grid) == 0.0


def test_lattice_field_converges(model):
    y, x = 0.3, np.array([-0.4, 0.1, 0.9])
    W = simulation_window(model)
    exact = field_at(Configuration([[y]], [1.0], W), model.kernel, x)
    errs = []
    for lam in (0.5, 0.25, 0.125, 0.0625):
        w = LatticeWindow.covering(W, lam)
        lat = discretize(Configuration([[y]], [1.0], W), w)
        errs.append(np.max(np.abs(lattice_field(lat, model.kernel, x) - exact)))
    assert errs[-1] < 0.05
    assert errs[-1] < errs[0]


def test_linear_lattice_energy(grid):
    lin = make_model("linear", params=(-1.0,))
    w = LatticeWindow.covering(simulation_window(lin), 0.5)
    rng = np.random.default_rng(3)
    vals = rng.integers(-2, 3, w.m).astype(float)
    U = lattice_energy(LatticeConfiguration(w, vals), lin, grid)
    # independent: sum_j lam^-1 eta_j int (G * 1_j) g dx by adaptive quadrature
    lam = w.spacing
    tot = 0.0
    for (c,), v in zip(w.centers(), vals):
        if v == 0:
            continue
        conv = lambda x: integrate.quad(lambda q: lin.kernel(x - q), c - lam / 2, c + lam / 2)[0] / lam
        tot += v * integrate.quad(lambda x: conv(x) * lin.cutoff(x), -2.5, 2.5,
                                  points=[-2.0, 2.0, c - 1.25, c + 1.25], limit=200)[0]
    assert U == pytest.approx(-tot, rel=2e-3)


def test_site_law_zero_activity():
    s = site_law(0.0, 0.5, 1, RADEMACHER, 5)
    assert list(s.values) == [0.0] and list(s.probs) == [1.0] and s.tail == 0.0


def test_site_law_positive_charges_is_poisson():
    law = ChargeLaw(((1.0, 1.0),))
    s = site_law(2.0, 0.5, 1, law, 6)
    assert np.allclose(s.values, np.arange(7))
    assert np.allclose(s.probs, [math.exp(-1.0) / math.factorial(k) for k in range(7)], atol=1e-15)
    assert s.tail == pytest.approx(1 - sum(s.probs), abs=1e-14)


def test_site_law_rademacher_formula_and_monte_carlo():
    mu, N = 0.8, 8
    s = site_law(mu, 1.0, 1, RADEMACHER, N)
    for k, p in zip(s.values, s.probs):
        k = int(k)
        exact = math.exp(-mu) * sum(mu**n / math.factorial(n) * special.comb(n, (n + k) // 2) / 2**n
                                    for n in range(abs(k), N + 1) if (n - k) % 2 == 0)
        assert p == pytest.approx(exact, rel=1e-12)
    rng = np.random.default_rng(0)
    n = rng.poisson(mu, 400_000)
    charge = 2 * rng.binomial(n, 0.5) - n
    keep = n <= N
    for k, p in zip(s.values, s.probs):
        freq = np.mean((charge == k) & keep)
        assert abs(freq - p) < 5 * math.sqrt(p * (1 - p) / len(n)) + 1e-6


def test_mixed_partial_linear_is_zero(grid):
    lin = make_model("linear", params=(-1.0,))
    w = LatticeWindow(0.5, (-3,), (6,))
    lat = LatticeConfiguration(w, np.array([1.0, -1, 2, 0, 1, -2]))
    assert fkg_mixed_partial(lat, 1, 2, lin, grid) == 0.0


def test_mixed_partial_rejects_diagonal(model, grid):
    w = LatticeWindow(0.5, (-3,), (6,))
    with pytest.raises(ValueError):
        fkg_mixed_partial(LatticeConfiguration(w, np.zeros(6)), 2, 2, model, grid)


@pytest.mark.parametrize("energy", [EnergyDensity("logcosh_gauged"), EnergyDensity("sqrt_saturating_gauged"),
                                    tabulated_energy(lambda x: 1 - np.sqrt(1 + x * x) - x, -30, 30, 241)])
def test_mixed_partial_nonpositive_and_matches_fd(energy):
    m = make_model(energy, plateau=1.0)
    grid = QuadratureGrid.for_model(m)
    w = LatticeWindow(0.25, (-8,), (16,))
    system = LatticeSystem(m, w, grid)
    law = site_law(m.z, w.spacing, 1, m.charge_law, 5)
    rng = np.random.default_rng(7)
    for _ in range(5):
        lat = LatticeConfiguration(w, random_lattice_state(law, w.m, rng) * 2)
        M = system.mixed_partials(lat.values)
        off = M[~np.eye(w.m, dtype=bool)]
        assert np.all(off <= 1e-12)
        for j, l in [(3, 4), (5, 7), (0, 15), (8, 9)]:
            val = fkg_mixed_partial(lat, j, l, m, grid, system)
            assert val == pytest.approx(M[j, l], abs=1e-14)
            assert fd_agrees(val, fkg_finite_difference(lat, j, l, m, grid, system))


def test_convex_control_has_positive_mixed_partial():
    convex = tabulated_energy(lambda x: np.sqrt(1 + x * x) - 1, -30, 30, 241)
    m = make_model(convex, plateau=1.0)
    grid = QuadratureGrid.for_model(m)
    w = LatticeWindow(0.25, (-8,), (16,))
    lat = LatticeConfiguration(w, np.zeros(16))
    assert fkg_mixed_partial(lat, 7, 8, m, grid) > 0


def obs_tanh(name, tf, a=1.0):
    return Observable("tanh", (tf,), (a,), name=name)


def test_enumeration_free_factorizes():
    free = make_model("zero", z=0.5, plateau=1.0)
    w = LatticeWindow(1.0, (-1,), (2,))
    law = site_law(free.z, 1.0, 1, free.charge_law, 5)
    lin = [Observable("linear", (cell(c),), (1.0,), name=f"n{c}") for c in (-1, 0)]
    res = enumerate_lattice(free, w, 5, lin)
    mean = float(law.values @ law.probs / law.probs.sum())
    for o in lin:
        assert res.expectations[o.name] == pytest.approx(mean, abs=1e-14)
    assert res.covariances[("n-1", "n0")] == pytest.approx(0.0, abs=1e-14)
    pos = make_model("zero", z=0.5, plateau=1.0, law=ChargeLaw(((1.0, 1.0),)))
    res = enumerate_lattice(pos, w, 5, lin)
    assert res.expectations["n0"] == pytest.approx(0.5, abs=1e-3)


def test_enumeration_single_site_chebyshev():
    m = make_model("logcosh_gauged", z=0.3, plateau=1.0)
    w = LatticeWindow(1.0, (0,), (1,))
    obs = [obs_tanh("a", cell(0)), Observable("sigmoid_product", (cell(0),), (3.0, 0.5), name="b"),
           Observable("exp", (cell(0),), (0.2,), name="c")]
    res = enumerate_lattice(m, w, 5, obs)
    for cov in res.covariances.values():
        assert cov >= 0


def test_enumeration_two_sites_concave():
    m = make_model("logcosh_gauged", z=0.1, plateau=1.0, strength=0.5)
    w = LatticeWindow(1.0, (-1,), (2,))
    res = enumerate_lattice(m, w, 5, [obs_tanh("A", cell(-1)), obs_tanh("B", cell(0))])
    key = ("A", "B")
    assert res.covariances[key] >= -res.cov_error[key]
    assert res.cov_error[key] < 1e-4


def test_enumeration_convex_control_violates():
    convex = tabulated_energy(lambda x: np.sqrt(1 + x * x) - 1, -30, 30, 241)
    m = make_model(convex, z=0.1, plateau=1.0)
    w = LatticeWindow(1.0, (-1,), (2,))
    res = enumerate_lattice(m, w, 5, [obs_tanh("A", cell(-1)), obs_tanh("B", cell(0))])
    key = ("A", "B")
    assert res.covariances[key] < -res.cov_error[key]


def test_enumeration_budget():
    m = make_model("logcosh_gauged", plateau=1.0)
    with pytest.raises(ValueError, match="budget"):
        enumerate_lattice(m, LatticeWindow(0.5, (-4,), (8,)), 5, [obs_tanh("A", cell(0))], budget=1000)


def test_omitted_mass_bound_shrinks_with_truncation():
    m = make_model("logcosh_gauged", z=0.5, plateau=1.0)
    w = LatticeWindow(1.0, (-1,), (2,))
    o = [obs_tanh("A", cell(-1))]
    bounds = [enumerate_lattice(m, w, n, o).omitted_bound for n in (2, 3, 5)]
    assert bounds[0] > bounds[1] > bounds[2] > 0
