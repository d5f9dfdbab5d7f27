import math

import numpy as np
import pytest
from scipy import integrate

from weakgas.configuration import Configuration, QuadratureGrid, random_configuration, simulation_window
from weakgas.model import ChargeLaw, CutoffFunction
from weakgas.observables import (OUTERS, MCEstimate, Observable, SignedFunction, Stream, TestFunction,
                                 batch_means, char_functional_estimate, decompose, free_char_oracle,
                                 free_laplace_oracle, iid_estimate, laplace_observable, merge_estimates,
                                 tilted_bound_oracle, uniform_bound)
from weakgas.sampler import free_pairings

from conftest import RADEMACHER, make_model

H1 = TestFunction("gaussian_bump", (0.0,), width=0.5)
H2 = TestFunction("scaled_shifted", (0.6,), width=0.8)


def test_test_function_kinds():
    assert H1(0.0) == 1.0
    assert H2(0.6 + 0.8) == 0.0 and H2(0.6) == pytest.approx(1.0)
    ind = TestFunction("plateau_ramp", (0.0,), plateau=1.0, ramp=0.5)
    assert ind(1.0) == 1.0 and ind(1.25) == pytest.approx(0.5) and ind(1.5) == 0.0
    assert H1.shifted(2.0)(2.0) == 1.0


def test_identity_on_empty_configuration(model):
    o = Observable("linear", (H1,), (1.0,))
    assert o.evaluate(Configuration.empty(simulation_window(model))) == 0.0


def test_exponential_single_particle(model):
    o = Observable("exp", (H1,), (0.7,))
    c = Configuration([[0.3]], [-1.0], simulation_window(model))
    assert o.evaluate(c) == pytest.approx(math.exp(-0.7 * H1(0.3)), rel=1e-14)


def registry_observables():
    out = []
    for name in ("linear", "exp", "tanh"):
        out.append(Observable(name, (H1, H2), (0.5, 1.0)))
    out.append(Observable("sigmoid_product", (H1, H2), (1.0, 2.0, 0.3, -0.2)))
    out.append(Observable("smoothmax", (H1, H2), (3.0,)))
    out.append(Observable("smoothmin", (H1, H2), (3.0,)))
    out.append(Observable("power", (H1,), (3,)))
    return out


def test_registry_monotone_flags():
    assert all(o.monotone for o in registry_observables())
    assert not Observable("linear", (H1,), (-1.0,)).monotone
    assert not Observable("cos", (H1,)).monotone
    assert not laplace_observable(h=H1).monotone


def test_monotone_observables_increase_under_positive_insertion(model):
    rng = np.random.default_rng(0)
    W = simulation_window(model)
    obs = registry_observables()
    for case in range(1000):
        c = random_configuration(model, rng, int(rng.integers(0, 12)))
        y = W.lo + rng.random(1) * (W.hi - W.lo)
        up = c.inserted(y, 1.0)
        o = obs[case % len(obs)]
        assert o.evaluate(up) >= o.evaluate(c) - 1e-12 * (1 + abs(o.evaluate(c)))


def test_bound_envelopes_hold():
    for name in OUTERS:
        n = OUTERS[name].arity or 2
        params = {"linear": (1.0, -1.0), "exp": (0.5, -0.3), "tanh": (1.0, 1.0),
                  "sigmoid_product": (1.0, 1.0, 0.0, 0.0), "smoothmax": (2.0,), "smoothmin": (2.0,),
                  "power": (3,)}.get(name, ())
        n = OUTERS[name].arity or len(params) // (2 if name == "sigmoid_product" else 1) or 2
        if name in ("smoothmax", "smoothmin"):
            n = 2
        o = Observable(name, (H1,) * n, params)
        assert o.check_bound(), name


def test_decompose_monotone_is_trivial():
    o = Observable("tanh", (H1,), (1.0,))
    up, down = decompose(o)
    X = np.linspace(-5, 5, 101)[:, None]
    assert np.allclose(up.H(X) - down.H(X), o.H(X), atol=1e-12)
    assert np.ptp(down.H(X)) == 0.0


def test_decompose_decreasing_linear():
    o = Observable("linear", (H1,), (-1.0,))
    up, down = decompose(o)
    X = np.linspace(-4, 4, 41)[:, None]
    assert np.allclose(up.H(X), 0.0, atol=1e-9)
    assert np.allclose(down.H(X), X[:, 0], atol=1e-9)


def test_decompose_product():
    o = Observable("product", (H1, H2))
    up, down = decompose(o)
    g = np.linspace(0, 4, 21)
    X = np.stack([m.ravel() for m in np.meshgrid(g, g)], axis=1)
    assert np.allclose(up.H(X) - down.H(X), X[:, 0] * X[:, 1], atol=1e-9)
    # both parts increasing in each coordinate on the scan
    for part in (up, down):
        V = part.H(X).reshape(21, 21)
        assert np.all(np.diff(V, axis=0) >= -1e-9) and np.all(np.diff(V, axis=1) >= -1e-9)


def test_decompose_nonmonotone_two_argument():
    o = Observable("cos_diff", (H1, H2))
    up, down = decompose(o)
    g = np.linspace(0, 3, 13)
    X = np.stack([m.ravel() for m in np.meshgrid(g, g)], axis=1)
    assert np.allclose(up.H(X) - down.H(X), o.H(X), atol=1e-7)


def test_decompose_rejects_three_arguments():
    with pytest.raises(ValueError):
        decompose(Observable("linear", (H1, H2, H1), (1.0, -1.0, 1.0)))


def test_char_functional_zero_f(model):
    s = free_pairings(model, simulation_window(model), np.random.default_rng(0), 100, [H1])
    est = char_functional_estimate(s, SignedFunction(()))
    assert est.mean == 1.0 and est.se == 0.0


def test_estimators():
    rng = np.random.default_rng(1)
    x = rng.normal(2.0, 1.0, 64_000)
    e = iid_estimate(x)
    assert e.se == pytest.approx(1 / math.sqrt(64_000), rel=0.02)
    b = batch_means(x)
    assert b.mean == e.mean and b.se == pytest.approx(e.se, rel=0.4)
    m = merge_estimates([e, e])
    assert m.mean == pytest.approx(e.mean) and m.se == pytest.approx(e.se / math.sqrt(2))
    with pytest.raises(ValueError):
        batch_means(x[:10])


def test_batch_means_sees_autocorrelation():
    rng = np.random.default_rng(2)
    x = np.zeros(100_000)
    for i in range(1, len(x)):
        x[i] = 0.95 * x[i - 1] + rng.normal()
    assert batch_means(x).se > 3 * iid_estimate(x).se


def test_free_laplace_trivial_cases(model):
    assert free_laplace_oracle(model, None, None) == 1.0
    tiny = make_model("zero", z=1e-15)
    assert free_laplace_oracle(tiny, SignedFunction.of(H1), SignedFunction.of(H2)) == pytest.approx(1.0, abs=1e-12)


def test_free_laplace_poisson_closed_form():
    c, z = 0.4, 0.8
    m = make_model("zero", z=z, law=ChargeLaw(((1.0, 1.0),)))
    box = TestFunction("plateau_ramp", (0.0,), amplitude=c, plateau=0.5)
    val = free_laplace_oracle(m, None, SignedFunction.of(box))
    assert val == pytest.approx(math.exp(z * (math.exp(c) - 1)), rel=1e-8)


def test_free_char_rademacher_is_real(model):
    f = SignedFunction.of(H2.scaled(1.3))
    val = free_char_oracle(model, f)
    expect = math.exp(model.z * integrate.quad(lambda y: math.cos(f(y)) - 1, -0.2, 1.4)[0])
    assert val.imag == pytest.approx(0.0, abs=1e-14)
    assert val.real == pytest.approx(expect, rel=1e-7)
    assert free_char_oracle(model, SignedFunction(())) == 1.0


def test_free_laplace_matches_monte_carlo(model):
    W = simulation_window(model)
    h, f = SignedFunction.of(H1, 0.3), SignedFunction.of(H2, -0.5)
    s = free_pairings(model, W, np.random.default_rng(5), 100_000, [H1, H2])
    F = np.exp(s.pairing(h, absolute=True) + s.pairing(f))
    e = iid_estimate(F)
    assert abs(e.mean - free_laplace_oracle(model, h, f, W)) < 3 * e.se


def test_tilted_bound_without_cutoff_mass_is_free_value():
    m = make_model("logcosh_gauged").replace(cutoff=CutoffFunction(2.0, 0.5, 1e-12, 1.0))
    grid = QuadratureGrid.for_model(m)
    h = SignedFunction.of(H1.scaled(0.2))
    W = simulation_window(m)
    assert tilted_bound_oracle(m, grid, h, 2.5, W) == pytest.approx(2.5 * free_laplace_oracle(m, h, None, W),
                                                                     rel=1e-9)


def test_tilted_bound_below_uniform(model, grid):
    h = SignedFunction.of(H1.scaled(0.3))
    assert tilted_bound_oracle(model, grid, h) <= uniform_bound(model, h)


def test_stream_covariance_of_independent_regions(model):
    free = make_model("zero")
    A = TestFunction("plateau_ramp", (-1.5,), plateau=0.5)
    B = TestFunction("plateau_ramp", (1.5,), plateau=0.5)
    s = free_pairings(free, simulation_window(free), np.random.default_rng(3), 50_000, [A, B])
    oa, ob = Observable("linear", (A,), (1.0,)), Observable("linear", (B,), (1.0,))
    cov = s.covariance(oa, ob)
    assert abs(cov.mean) < 4 * cov.se
    assert s.covariance(oa, oa).mean >= 0
