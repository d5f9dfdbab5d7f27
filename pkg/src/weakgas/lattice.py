"""Lattice approximation: per-cell charge sums, cell-smeared field, exact enumeration."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import _core
from .configuration import Box, Configuration, QuadratureGrid
from .model import ChargeLaw, ModelSpec

SUB = 4  # sub-cell midpoints per axis for (G * 1_cell)(x)


@dataclass(frozen=True)
class LatticeWindow:
    """Cells [i lam, (i+1) lam)^d for integer i in lo_index + [0, shape)."""

    spacing: float
    lo_index: tuple
    shape: tuple

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValueError("lattice spacing must be positive")
        object.__setattr__(self, "lo_index", tuple(int(i) for i in self.lo_index))
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        if len(self.lo_index) != len(self.shape) or any(n < 1 for n in self.shape):
            raise ValueError("lattice window needs at least one cell per axis")

    @classmethod
    def covering(cls, box: Box, spacing: float) -> LatticeWindow:
        lo = np.floor(box.lo / spacing + 1e-9).astype(int)
        hi = np.ceil(box.hi / spacing - 1e-9).astype(int)
        return cls(spacing, tuple(lo), tuple(np.maximum(hi - lo, 1)))

    @property
    def d(self) -> int:
        return len(self.shape)

    @property
    def m(self) -> int:
        return int(np.prod(self.shape))

    @property
    def box(self) -> Box:
        lo = np.asarray(self.lo_index, float) * self.spacing
        return Box(lo, lo + np.asarray(self.shape) * self.spacing)

    def indices(self) -> np.ndarray:
        """Global integer index of every site, row-major."""
        axes = [np.arange(self.lo_index[k], self.lo_index[k] + self.shape[k]) for k in range(self.d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def centers(self) -> np.ndarray:
        return (self.indices() + 0.5) * self.spacing

    def site_of(self, positions) -> np.ndarray:
        """Flat site index under the half-open cell convention; -1 outside."""
        pos = np.asarray(positions, float).reshape(-1, self.d)
        idx = np.floor(pos / self.spacing).astype(np.int64) - np.asarray(self.lo_index)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.shape)), axis=1)
        flat = np.full(len(pos), -1, np.int64)
        if inside.any():
            flat[inside] = np.ravel_multi_index(idx[inside].T, self.shape)
        return flat

    def sub_points(self) -> np.ndarray:
        """Offsets of the SUB^d sub-cell midpoints relative to a cell center."""
        u = ((np.arange(SUB) + 0.5) / SUB - 0.5) * self.spacing
        mesh = np.meshgrid(*([u] * self.d), indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def contains_window(self, other: LatticeWindow) -> bool:
        return self.box.covers(other.box)


@dataclass
class LatticeConfiguration:
    window: LatticeWindow
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, float).reshape(self.window.m)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("lattice values must be finite")


def discretize(cfg: Configuration, window: LatticeWindow) -> LatticeConfiguration:
    """eta_j = total charge of the particles in cell j."""
    if cfg.n == 0:
        return LatticeConfiguration(window, np.zeros(window.m))
    sites = window.site_of(cfg.positions)
    if np.any(sites < 0):
        raise ValueError("configuration has particles outside the lattice window")
    vals = np.bincount(sites, weights=cfg.charges, minlength=window.m)
    return LatticeConfiguration(window, vals)


def cell_average(window: LatticeWindow, fn, pts) -> np.ndarray:
    """(m, len(pts)) matrix of sub-cell averages of fn(x - q) over q in each cell."""
    pts = np.asarray(pts, float).reshape(-1, window.d)
    centers = window.centers()
    out = np.zeros((window.m, len(pts)))
    for off in window.sub_points():
        q = centers + off
        out += fn(pts[None, :, :] - q[:, None, :])
    return out / len(window.sub_points())


def smearing_matrix(window: LatticeWindow, kernel, grid: QuadratureGrid) -> np.ndarray:
    """A[j, k] = lam^-d (G * 1_{cell j})(x_k) by sub-cell midpoint quadrature."""
    code, p, rng, taper = kernel.packed()

    def G(dx):
        r = np.linalg.norm(dx, axis=-1)
        return _core.kernel_profile_many(code, p, rng, taper, kernel.d, r.ravel()).reshape(r.shape)

    return cell_average(window, G, grid.nodes())


def lattice_pairing_matrix(window: LatticeWindow, test_functions) -> np.ndarray:
    """P[j, t] = lam^-d int_{cell j} h_t by sub-cell midpoints, so <eta^lam, h_t> = eta @ P."""
    centers = window.centers()
    subs = window.sub_points()
    P = np.zeros((window.m, len(test_functions)))
    for t, tf in enumerate(test_functions):
        for off in subs:
            P[:, t] += tf.values(centers + off)
    return P / len(subs)


def accumulate_field(values, A) -> np.ndarray:
    """phi = sum_j eta_j A_j over non-zero sites in site order (bit-stable under window growth)."""
    phi = np.zeros(A.shape[1])
    for j in np.nonzero(values)[0]:
        phi += values[j] * A[j]
    return phi


class LatticeSystem:
    """Model + lattice window + quadrature grid with the cached smearing matrix."""

    def __init__(self, model: ModelSpec, window: LatticeWindow, grid: QuadratureGrid | None = None):
        self.model = model
        self.window = window
        self.grid = grid if grid is not None else QuadratureGrid.for_model(model)
        self.A = smearing_matrix(window, model.kernel, self.grid)
        self.gw = np.asarray(self.grid.weights, float)

    def with_energy(self, energy) -> LatticeSystem:
        out = LatticeSystem.__new__(LatticeSystem)
        out.__dict__.update(self.__dict__)
        out.model = self.model.replace(energy=energy)
        return out

    def field(self, values) -> np.ndarray:
        return accumulate_field(np.asarray(values, float), self.A)

    def energy(self, values, density=None) -> float:
        dens = (density or self.model.energy).packed()
        return float(_core.field_energy(self.field(values), self.gw, dens))

    def energies(self, V, density=None) -> np.ndarray:
        """Energies of many states (rows of V) at once."""
        code, p, scale, lin = (density or self.model.energy).packed()
        phi = np.asarray(V, float) @ self.A
        v = scale * _core.density_many(code, p, phi.ravel(), 0).reshape(phi.shape) + lin * phi
        return v @ self.gw

    def cell_smear(self) -> np.ndarray:
        """c_j = sum_k w_k A_jk, so that |U| <= b sum_j |eta_j| c_j."""
        return self.A @ self.gw

    def mixed_partials(self, values) -> np.ndarray:
        """Matrix of d^2 U / d eta_j d eta_l = sum_k w_k v''(phi_k) A_jk A_lk."""
        phi = self.field(values)
        code, p, scale, _ = self.model.energy.packed()
        v2 = scale * _core.density_many(code, p, phi, 2)
        return (self.A * (self.gw * v2)) @ self.A.T

    def finite_difference(self, values, j: int, l: int) -> float:
        """Centered four-point stencil of U in (eta_j, eta_l), summed node by node."""
        values = np.asarray(values, float)
        hj = 1e-4 * max(1.0, abs(values[j]))
        hl = 1e-4 * max(1.0, abs(values[l]))
        phi = self.field(values)
        aj, al = hj * self.A[j], hl * self.A[l]
        v = self.model.energy
        st = v(phi + aj + al) - v(phi + aj - al) - v(phi - aj + al) + v(phi - aj - al)
        return float(self.gw @ st) / (4.0 * hj * hl)


def lattice_field(lat: LatticeConfiguration, kernel, x) -> np.ndarray:
    """phi^lam(x) = sum_j lam^-d eta_j (G * 1_{cell j})(x) at arbitrary points."""
    code, p, rng, taper = kernel.packed()

    def G(dx):
        r = np.linalg.norm(dx, axis=-1)
        return _core.kernel_profile_many(code, p, rng, taper, kernel.d, r.ravel()).reshape(r.shape)

    x = np.asarray(x, float)
    scalar = x.ndim == 0 or (x.ndim == 1 and lat.window.d > 1)
    nz = np.nonzero(lat.values)[0]
    pts = x.reshape(-1, lat.window.d)
    if len(nz) == 0:
        out = np.zeros(len(pts))
    else:
        out = lat.values @ cell_average(lat.window, G, pts)
    return float(out[0]) if scalar else out


def lattice_energy(lat: LatticeConfiguration, model: ModelSpec, grid: QuadratureGrid, density=None) -> float:
    return LatticeSystem(model, lat.window, grid).energy(lat.values, density)


def lattice_pairing(lat: LatticeConfiguration, h) -> float:
    """<eta^lam, h> = sum_j lam^-d eta_j int_{cell j} h."""
    tfs = [tf for _, tf in h.terms] if hasattr(h, "terms") else [h]
    coefs = [c for c, _ in h.terms] if hasattr(h, "terms") else [1.0]
    P = lattice_pairing_matrix(lat.window, tfs)
    return float(lat.values @ P @ np.asarray(coefs))


# -- single-site law -------------------------------------------------------


@dataclass(frozen=True)
class SiteLaw:
    """Compound Poisson law of one cell's charge, truncated at N_max particles."""

    values: np.ndarray
    probs: np.ndarray
    N_max: int
    tail: float
    mu: float

    def prob_of(self, v) -> np.ndarray:
        idx = np.searchsorted(self.values, v)
        return self.probs[np.clip(idx, 0, len(self.values) - 1)]

    def log_prob_table(self) -> dict:
        return {float(v): math.log(p) for v, p in zip(self.values, self.probs)}


def _key(v):
    return round(float(v), 10)


def site_law(z: float, lam: float, d: int, law: ChargeLaw, N_max: int) -> SiteLaw:
    if N_max < 0:
        raise ValueError("N_max must be non-negative")
    mu = z * lam**d
    if mu == 0.0:
        return SiteLaw(np.array([0.0]), np.array([1.0]), N_max, 0.0, 0.0)
    dist = {0.0: 1.0}
    total = {0.0: math.exp(-mu)}
    for n in range(1, N_max + 1):
        nxt: dict = {}
        for v, q in dist.items():
            for s, p in law.atoms:
                k = _key(v + s)
                nxt[k] = nxt.get(k, 0.0) + q * p
        dist = nxt
        w = float(stats.poisson.pmf(n, mu))
        for v, q in dist.items():
            total[v] = total.get(v, 0.0) + w * q
    vals = np.array(sorted(total))
    probs = np.array([total[v] for v in vals])
    return SiteLaw(vals, probs, N_max, float(stats.poisson.sf(N_max, mu)), mu)


# -- mixed partial of the lattice density ----------------------------------


def fkg_mixed_partial(lat: LatticeConfiguration, j: int, l: int, model: ModelSpec, grid: QuadratureGrid,
                      system: LatticeSystem | None = None) -> float:
    """Quadrature value of d^2 W / d eta_j d eta_l = sum_k w_k v''(phi_k) A_jk A_lk, j != l."""
    if j == l:
        raise ValueError("the criterion concerns off-diagonal pairs only")
    sys_ = system or LatticeSystem(model, lat.window, grid)
    phi = sys_.field(lat.values)
    code, p, scale, _ = model.energy.packed()
    v2 = scale * _core.density_many(code, p, phi, 2)
    return float(np.sum(sys_.gw * v2 * sys_.A[j] * sys_.A[l]))


def fkg_finite_difference(lat: LatticeConfiguration, j: int, l: int, model: ModelSpec, grid: QuadratureGrid,
                          system: LatticeSystem | None = None) -> float:
    """Centered finite-difference estimate of the same mixed partial from lattice energies."""
    if j == l:
        raise ValueError("the criterion concerns off-diagonal pairs only")
    sys_ = system or LatticeSystem(model, lat.window, grid)
    return sys_.finite_difference(lat.values, j, l)


def fd_agrees(val: float, fd: float) -> bool:
    return abs(val - fd) <= max(1e-6, 1e-4 * abs(val))


# -- exact enumeration -----------------------------------------------------


@dataclass
class EnumerationResult:
    Z: float
    omitted_bound: float
    states: int
    expectations: dict = field(default_factory=dict)
    covariances: dict = field(default_factory=dict)
    cov_error: dict = field(default_factory=dict)
    mean_error: dict = field(default_factory=dict)
    site_laws: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "Z": float(self.Z), "omitted_mass_bound": float(self.omitted_bound), "states": self.states,
            "expectations": self.expectations,
            "covariances": {f"{a}|{b}": v for (a, b), v in self.covariances.items()},
            "covariance_error_bound": {f"{a}|{b}": float(v) for (a, b), v in self.cov_error.items()},
        }


def omitted_mass_bound(system: LatticeSystem, law: SiteLaw, Z_trunc: float) -> float:
    """Certified upper bound on the probability of states with > N_max particles at some site.

    With t_j = b C c_j and |U| <= sum_j t_j n_j, the omitted weight is at most
    prod_j M_j - prod_j M_j^{<=N}, M_j = exp(mu (e^{t_j} - 1)).
    """
    model = system.model
    t = model.b * model.charge_law.C * system.cell_smear()
    mu = law.mu
    if mu == 0.0:
        return 0.0
    log_M = mu * np.expm1(t)
    log_cdf = np.log1p(-np.minimum(stats.poisson.sf(law.N_max, mu * np.exp(t)), 1.0 - 1e-300))
    omega = math.exp(log_M.sum()) * -math.expm1(log_cdf.sum())
    return omega / (Z_trunc + omega)


def enumerate_lattice(model: ModelSpec, window: LatticeWindow, N_max: int, observables, grid=None,
                      budget: int = 10**7, pairs=None, chunk: int = 200_000) -> EnumerationResult:
    """Exact expectations and covariances under the truncated lattice measure.

    Weights are prod_j rho(eta_j) exp(-U(eta)) over all states with at most N_max
    particles per site.  ``pairs`` defaults to all unordered pairs of observables.
    """
    system = LatticeSystem(model, window, grid)
    law = site_law(model.z, window.spacing, model.d, model.charge_law, N_max)
    k = len(law.values)
    total = k ** window.m
    if total > budget:
        raise ValueError(f"state space of {total} states exceeds the budget of {budget}")
    for o in observables:
        if any(a.absolute for a in o.args):
            raise ValueError("absolute pairings are not defined for lattice states")
    tfs = sorted({tf for o in observables for tf in o.test_functions}, key=repr)
    P = lattice_pairing_matrix(window, tfs)
    col = {tf: i for i, tf in enumerate(tfs)}
    logp = np.log(law.probs)
    names = [o.name or f"obs{i}" for i, o in enumerate(observables)]
    if pairs is None:
        pairs = [(a, b) for a, b in itertools.combinations(range(len(observables)), 2)]
    sw = 0.0
    s1 = np.zeros(len(observables))
    s2 = {pr: 0.0 for pr in pairs}
    shift = None
    for start in range(0, total, chunk):
        idx = np.arange(start, min(total, start + chunk))
        digits = np.stack(np.unravel_index(idx, (k,) * window.m), axis=1)
        V = law.values[digits]
        logw = logp[digits].sum(axis=1) - system.energies(V)
        if shift is None:
            shift = float(logw.max())
        w = np.exp(logw - shift)
        PV = V @ P
        F = []
        for o in observables:
            X = np.stack([sum(c * PV[:, col[tf]] for c, tf in a.f.terms) if a.f.terms else np.zeros(len(V))
                          for a in o.args], axis=1)
            F.append(o.H(X))
        sw += w.sum()
        for i, Fi in enumerate(F):
            s1[i] += w @ Fi
        for a, b in pairs:
            s2[(a, b)] += w @ (F[a] * F[b])
    Z = sw * math.exp(shift)
    eps = omitted_mass_bound(system, law, Z)
    res = EnumerationResult(Z=Z, omitted_bound=eps, states=total, site_laws=[law])
    means = s1 / sw
    for i, n in enumerate(names):
        res.expectations[n] = float(means[i])
        K = observables[i].sup_bound
        res.mean_error[n] = 2.0 * eps * K
    for a, b in pairs:
        cov = s2[(a, b)] / sw - means[a] * means[b]
        res.covariances[(names[a], names[b])] = float(cov)
        K1, K2 = observables[a].sup_bound, observables[b].sup_bound
        res.cov_error[(names[a], names[b])] = eps * K1 * K2 * (6.0 + 4.0 * eps)
    return res


def random_lattice_state(law: SiteLaw, m: int, rng) -> np.ndarray:
    p = law.probs / law.probs.sum()
    return law.values[rng.choice(len(p), size=m, p=p)]
