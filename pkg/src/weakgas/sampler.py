"""Samplers: exact free and tilted marked Poisson gases, the grand-canonical chain, the lattice chain."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

from . import _core
from .configuration import (Box, Configuration, QuadratureGrid, energy, grid_field, simulation_window,
                            smeared_cutoff)
from .lattice import LatticeSystem, LatticeWindow, SiteLaw, lattice_pairing_matrix
from .model import ModelSpec
from .observables import MCEstimate, Stream, batch_means, difference

BLOCK = 10_000  # steps between full energy resyncs
MAX_SAMPLES = 100_000
DRIFT_TOL = 1e-8
STAB_TOL = 1e-6


@dataclass(frozen=True)
class SamplerParams:
    """Chain settings.  One sweep is ``sweep_length`` proposals; burn-in is in sweeps, thinning in steps."""

    sweeps: int = 10_000
    burn_in: int | None = None
    thinning: int | None = None
    proposal_mix: tuple = (0.25, 0.25, 0.35, 0.15)
    alpha: float = 1.0
    seed: int = 0
    sweep_length: int = 10
    move_scale: float | None = None

    def __post_init__(self):
        mix = tuple(float(p) for p in self.proposal_mix)
        object.__setattr__(self, "proposal_mix", mix)
        if len(mix) != 4 or min(mix) < 0 or abs(sum(mix) - 1.0) > 1e-12:
            raise ValueError("proposal_mix must be four probabilities summing to 1")
        if mix[0] != mix[1]:
            raise ValueError("birth and death proposal probabilities must be equal")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.sweeps < 1 or self.sweep_length < 1:
            raise ValueError("sweeps and sweep_length must be positive")
        if self.burn_in is not None and not 0 <= self.burn_in < self.sweeps:
            raise ValueError("burn_in must be smaller than sweeps")
        if self.thinning is not None and self.thinning < 1:
            raise ValueError("thinning must be positive")

    @property
    def steps(self) -> int:
        return self.sweeps * self.sweep_length

    @property
    def burn_steps(self) -> int:
        burn = self.sweeps // 5 if self.burn_in is None else self.burn_in
        return burn * self.sweep_length

    @property
    def thin_steps(self) -> int:
        if self.thinning is not None:
            return int(self.thinning)
        return max(1, math.ceil((self.steps - self.burn_steps) / MAX_SAMPLES))

    def with_seed(self, seed: int) -> SamplerParams:
        return replace(self, seed=int(seed))


def replica_seeds(seed: int, n: int) -> list[int]:
    """Independent 64-bit sub-seeds from one master seed."""
    return [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


# -- exact free gas --------------------------------------------------------


def sample_free(model: ModelSpec, window: Box, rng) -> Configuration:
    """Exact draw of the marked Poisson gas (activity z, charges ~ r) on the window."""
    n = rng.poisson(model.z * window.volume)
    pos = window.lo + rng.random((n, window.d)) * (window.hi - window.lo)
    return Configuration(pos, model.charge_law.sample(rng, n), window)


def _segment_sums(owner, w, vals, n_samples):
    out = np.zeros((n_samples, vals.shape[1]))
    np.add.at(out, owner, w[:, None] * vals)
    return out


def _table(test_functions, pts):
    if not test_functions:
        return np.zeros((len(pts), 0))
    codes = np.array([tf.packed()[0] for tf in test_functions], np.int64)
    pars = np.array([tf.packed()[1] for tf in test_functions])
    return _core.tf_table(codes, pars, np.ascontiguousarray(pts))


def free_pairings(model: ModelSpec, window: Box, rng, n_samples: int, test_functions, chunk: int = 20_000) -> Stream:
    """Pairings of ``n_samples`` independent free-gas draws, as an iid stream."""
    tfs = tuple(test_functions)
    Ps, As, Ns = [], [], []
    for start in range(0, n_samples, chunk):
        k = min(chunk, n_samples - start)
        counts = rng.poisson(model.z * window.volume, size=k)
        total = int(counts.sum())
        pos = window.lo + rng.random((total, window.d)) * (window.hi - window.lo)
        chg = model.charge_law.sample(rng, total)
        owner = np.repeat(np.arange(k), counts)
        vals = _table(tfs, pos)
        Ps.append(_segment_sums(owner, chg, vals, k))
        As.append(_segment_sums(owner, np.abs(chg), vals, k))
        Ns.append(counts)
    return Stream(tfs, np.vstack(Ps), np.vstack(As), np.concatenate(Ns), method="iid",
                  meta={"sampler": "free", "samples": n_samples})


# -- exact tilted free gas -------------------------------------------------


def tilt_ceiling(model: ModelSpec, grid: QuadratureGrid, window: Box | None = None) -> float:
    """Upper bound for (G * g)(y) over the window: 1.01 x the maximum on a 4x finer scan."""
    window = simulation_window(model) if window is None else window
    h = grid.spacing / (4.0 if model.d == 1 else 2.0)
    axes = [np.arange(window.lo[k] + h / 2, window.hi[k], h) for k in range(model.d)]
    pts = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    return 1.01 * float(smeared_cutoff(model, grid, pts).max())


class _Tilt:
    """Per-atom dominating rates and thinning for intensity z p_i exp(s_i b c(y))."""

    def __init__(self, model, grid, window, b):
        self.model, self.grid, self.window, self.b = model, grid, window, float(b)
        self.cmax = tilt_ceiling(model, grid, window) if self.b != 0.0 else 0.0
        s = model.charge_law.charges
        self.s = s
        self.ceil = np.where(s > 0, s * self.b * self.cmax, 0.0)
        self.rates = model.z * model.charge_law.weights * np.exp(self.ceil) * window.volume

    def draw(self, rng, k):
        """Points of k independent draws: (owner, positions, charges)."""
        owners, posl, chgl = [], [], []
        for i, s in enumerate(self.s):
            counts = rng.poisson(self.rates[i], size=k)
            total = int(counts.sum())
            pos = self.window.lo + rng.random((total, self.window.d)) * (self.window.hi - self.window.lo)
            u = rng.random(total)
            if self.b != 0.0 and total:
                c = smeared_cutoff(self.model, self.grid, pos)
                acc = s * self.b * c - self.ceil[i]
                if np.any(acc > 1e-12):
                    raise RuntimeError("tilt ceiling below the smeared cutoff; thinning would be biased")
                keep = np.log(u) < acc
            else:
                keep = np.ones(total, bool)
            owners.append(np.repeat(np.arange(k), counts)[keep])
            posl.append(pos[keep])
            chgl.append(np.full(int(keep.sum()), s))
        owner = np.concatenate(owners)
        order = np.argsort(owner, kind="stable")
        return owner[order], np.vstack(posl)[order], np.concatenate(chgl)[order]


def sample_tilted_free(model: ModelSpec, window: Box | None, rng, grid: QuadratureGrid | None = None,
                       b: float | None = None) -> Configuration:
    """Exact draw of the marked Poisson gas with intensity z exp(s b (G*g)(y)) dr(s) dy, by thinning."""
    window = simulation_window(model) if window is None else window
    grid = QuadratureGrid.for_model(model) if grid is None else grid
    b = model.b if b is None else b
    _, pos, chg = _Tilt(model, grid, window, b).draw(rng, 1)
    return Configuration(pos, chg, window)


def tilted_pairings(model: ModelSpec, window: Box | None, rng, n_samples: int, test_functions,
                    grid: QuadratureGrid | None = None, b: float | None = None, chunk: int = 20_000) -> Stream:
    """Pairings of independent tilted-free-gas draws, as an iid stream."""
    window = simulation_window(model) if window is None else window
    grid = QuadratureGrid.for_model(model) if grid is None else grid
    b = model.b if b is None else b
    tilt = _Tilt(model, grid, window, b)
    tfs = tuple(test_functions)
    Ps, As, Ns = [], [], []
    for start in range(0, n_samples, chunk):
        k = min(chunk, n_samples - start)
        owner, pos, chg = tilt.draw(rng, k)
        vals = _table(tfs, pos)
        Ps.append(_segment_sums(owner, chg, vals, k))
        As.append(_segment_sums(owner, np.abs(chg), vals, k))
        Ns.append(np.bincount(owner, minlength=k))
    return Stream(tfs, np.vstack(Ps), np.vstack(As), np.concatenate(Ns), method="iid",
                  meta={"sampler": "tilted_free", "samples": n_samples, "tilt_ceiling": tilt.cmax})


# -- interacting chain -----------------------------------------------------


def chain_density(model: ModelSpec, alpha: float):
    """Energy density of the interpolated measure: alpha v - (1 - alpha) b phi."""
    if alpha == 1.0:
        return model.energy
    return model.energy.interpolated(alpha, model.b)[0]


def interpolated_energy(cfg: Configuration, model: ModelSpec, grid: QuadratureGrid, alpha: float):
    """(U_alpha, dU_alpha/dalpha): energies for alpha v - (1-alpha) b phi and for v + b phi."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    dens, deriv = model.energy.interpolated(alpha, model.b)
    return energy(cfg, model, grid, dens), energy(cfg, model, grid, deriv)


class ChainState:
    """Configuration plus the cached grid field, energy, smeared cutoff and pairings."""

    def __init__(self, cfg: Configuration, model: ModelSpec, grid: QuadratureGrid, rng=None,
                 alpha: float = 1.0, test_functions=(), capacity: int | None = None):
        self.model, self.grid, self.alpha = model, grid, float(alpha)
        self.density = chain_density(model, alpha)
        self.b_eff = self.density.slope_bound
        self.window = cfg.window
        self.rng = rng
        self.step = 0
        self.tfs = tuple(test_functions)
        cap = max(64, cfg.n * 2, int(4 * model.z * cfg.window.volume) + 16) if capacity is None else capacity
        d = cfg.d
        self.pos = np.zeros((cap, d))
        self.chg = np.zeros(cap)
        self.cval = np.zeros(cap)
        self.pos[:cfg.n] = cfg.positions
        self.chg[:cfg.n] = cfg.charges
        self.n = cfg.n
        self.resync()

    @property
    def configuration(self) -> Configuration:
        return Configuration(self.pos[:self.n].copy(), self.chg[:self.n].copy(), self.window)

    @property
    def cached_energy(self) -> float:
        return float(self.sf[0])

    def resync(self) -> float:
        """Recompute every cache from scratch; returns the energy drift that was removed."""
        n = self.n
        pos, chg = self.pos[:n], self.chg[:n]
        self.phi = _core.scatter_field(self.grid.packed(), self.model.kernel.packed(), pos, chg, n)
        e = float(_core.field_energy(self.phi, self.grid.weights, self.density.packed()))
        self.cval[:n] = smeared_cutoff(self.model, self.grid, pos) if n else 0.0
        bound = float(self.b_eff * np.abs(chg) @ self.cval[:n]) if n else 0.0
        drift = abs(e - self.sf[0]) if hasattr(self, "sf") else 0.0
        excess = max(self.sf[2], abs(e) - bound) if hasattr(self, "sf") else abs(e) - bound
        self.sf = np.array([e, bound, excess])
        vals = _table(self.tfs, pos)
        self.P = chg @ vals if n else np.zeros(len(self.tfs))
        self.A = np.abs(chg) @ vals if n else np.zeros(len(self.tfs))
        return drift

    def grow(self):
        cap = 2 * len(self.chg)
        for name in ("pos", "chg", "cval"):
            old = getattr(self, name)
            new = np.zeros((cap,) + old.shape[1:])
            new[:len(old)] = old
            setattr(self, name, new)

    def copy(self) -> ChainState:
        out = ChainState.__new__(ChainState)
        out.__dict__.update(self.__dict__)
        for name in ("pos", "chg", "cval", "phi", "sf", "P", "A"):
            setattr(out, name, getattr(self, name).copy())
        return out


def _draws(rng, k, d):
    return rng.random((k, 4 + d)), rng.standard_normal((k, d))


def _advance(state: ChainState, params: SamplerParams, U, normals, stats, burn, every, rec, check_stab):
    """Run the rows of U through the compiled chain, growing the buffer as needed."""
    model = state.model
    law = model.charge_law
    win = state.window
    move = params.move_scale if params.move_scale is not None else model.kernel.width / 2.0
    mix_cum = np.cumsum(params.proposal_mix)
    mix_cum[-1] = 1.0
    codes = np.array([tf.packed()[0] for tf in state.tfs], np.int64)
    pars = np.array([tf.packed()[1] for tf in state.tfs]) if state.tfs else np.zeros((0, 3 + model.d))
    si = np.array([state.n, rec[4], state.step], np.int64)
    start = 0
    while True:
        ret = _core.mh_run(state.pos, state.chg, state.cval, state.phi, state.P, state.A, state.sf, si, stats,
                           state.grid.packed(), model.kernel.packed(), state.density.packed(), state.b_eff,
                           law.charges, law.cumulative, model.z, win.lo, win.hi, move, mix_cum, codes, pars,
                           U, normals, start, burn, every, rec[0], rec[1], rec[2], rec[3], check_stab, STAB_TOL)
        state.n = int(si[0])
        if ret < 0:
            break
        state.grow()
        start = ret
    state.step = int(si[2])
    return int(si[1])


def mh_step(state: ChainState, model: ModelSpec, params: SamplerParams, grid: QuadratureGrid) -> ChainState:
    """One birth/death/move/recharge update; returns a new state (the input is untouched)."""
    out = state.copy()
    U, normals = _draws(out.rng, 1, model.d)
    stats = np.zeros(9, np.int64)
    T = len(out.tfs)
    rec = [np.zeros((1, T)), np.zeros((1, T)), np.zeros(1, np.int64), np.zeros(1), 0]
    _advance(out, params, U, normals, stats, np.iinfo(np.int64).max, 1, rec, True)
    out.last_move = (int(np.argmax(stats[:4])), bool(stats[4:8].sum()))
    return out


def log_target(cfg: Configuration, model: ModelSpec, grid: QuadratureGrid, alpha: float = 1.0) -> float:
    """log of z^n exp(-U) prod_j r(s_j), the density against the unit-rate Poisson gas with counting charges."""
    dens = chain_density(model, alpha)
    law = model.charge_law
    logp = {float(s): math.log(p) for s, p in zip(law.charges, law.weights)}
    return cfg.n * math.log(model.z) - energy(cfg, model, grid, dens) + sum(logp[float(s)] for s in cfg.charges)


def log_acceptance_ratio(cfg: Configuration, change, model: ModelSpec, grid: QuadratureGrid,
                         alpha: float = 1.0) -> float:
    """Metropolis log ratio the chain uses for ("birth", y, s), ("death", j), ("move", j, y), ("recharge", j, s)."""
    dens = chain_density(model, alpha)
    m = model.replace(energy=dens)
    zW = model.z * cfg.window.volume
    kind = change[0]
    if kind == "birth":
        return math.log(zW / (cfg.n + 1)) - (energy(cfg.inserted(change[1], change[2]), m, grid) - energy(cfg, m, grid))
    if kind == "death":
        return math.log(cfg.n / zW) - (energy(cfg.removed(change[1]), m, grid) - energy(cfg, m, grid))
    if kind == "move":
        j, y = change[1], change[2]
        new = cfg.removed(j).inserted(y, cfg.charges[j])
        return -(energy(new, m, grid) - energy(cfg, m, grid))
    if kind == "recharge":
        j, s = change[1], change[2]
        new = cfg.removed(j).inserted(cfg.positions[j], s)
        return -(energy(new, m, grid) - energy(cfg, m, grid))
    raise ValueError(f"unknown change {kind!r}")


def proposal_log_ratio(cfg: Configuration, change, model: ModelSpec) -> float:
    """log q(reverse) - log q(forward) for the chain's proposals."""
    law = model.charge_law
    p = {float(s): w for s, w in zip(law.charges, law.weights)}
    vol = cfg.window.volume
    kind = change[0]
    if kind == "birth":
        return math.log(1.0 / (cfg.n + 1)) - math.log(p[float(change[2])] / vol)
    if kind == "death":
        return math.log(p[float(cfg.charges[change[1]])] / vol) - math.log(1.0 / cfg.n)
    if kind == "recharge":
        return math.log(p[float(cfg.charges[change[1]])]) - math.log(p[float(change[2])])
    return 0.0


@dataclass
class ChainResult:
    stream: Stream
    state: ChainState
    diagnostics: dict = field(default_factory=dict)


def run_chain(model: ModelSpec, params: SamplerParams, grid: QuadratureGrid | None = None, observables=(),
              test_functions=(), window: Box | None = None, init: Configuration | None = None,
              check_stability: bool = True) -> ChainResult:
    """Run one chain; the stream records pairings of every needed test function at thinning points."""
    grid = QuadratureGrid.for_model(model) if grid is None else grid
    window = simulation_window(model) if window is None else window
    tfs = list(test_functions)
    for o in observables:
        for tf in o.test_functions:
            if tf not in tfs:
                tfs.append(tf)
    rng = np.random.default_rng(params.seed)
    cfg = Configuration.empty(window) if init is None else init
    state = ChainState(cfg, model, grid, rng, params.alpha, tfs)
    burn, every, total = params.burn_steps, params.thin_steps, params.steps
    n_rec = (total - burn) // every
    T = len(tfs)
    rec = [np.zeros((n_rec, T)), np.zeros((n_rec, T)), np.zeros(n_rec, np.int64), np.zeros(n_rec), 0]
    stats = np.zeros(9, np.int64)
    max_drift = 0.0
    done = 0
    while done < total:
        k = min(BLOCK, total - done)
        U, normals = _draws(rng, k, model.d)
        rec[4] = _advance(state, params, U, normals, stats, burn, every, rec, check_stability)
        done += k
        max_drift = max(max_drift, state.resync())
    if max_drift > DRIFT_TOL:
        raise RuntimeError(f"cached energy drifted by {max_drift:.3e} from the recomputed value")
    stream = Stream(tfs, rec[0][:rec[4]], rec[1][:rec[4]], rec[2][:rec[4]], rec[3][:rec[4]], method="batch",
                    meta={"sampler": "chain", "seed": params.seed, "alpha": params.alpha})
    names = ("birth", "death", "move", "recharge")
    diag = {
        "steps": total, "samples": int(rec[4]), "burn_steps": burn, "thinning": every,
        "acceptance": {nm: (float(stats[4 + i] / stats[i]) if stats[i] else None) for i, nm in enumerate(names)},
        "stability_violations": int(stats[8]), "max_stability_excess": float(state.sf[2]),
        "max_energy_drift": float(max_drift), "final_particles": state.n,
        "mean_particles": float(stream.n_particles.mean()) if len(stream) else 0.0,
    }
    if observables and len(stream) >= 128:
        diag["split_agreement"] = {}
        half = len(stream) // 2
        for i, o in enumerate(observables):
            vals = stream.values(o)
            e1, e2 = batch_means(vals[:half]), batch_means(vals[half:])
            diff, se = difference(e1, e2)
            diag["split_agreement"][o.name or f"obs{i}"] = bool(abs(diff) <= 3 * se) if se > 0 else bool(diff == 0)
    stream.meta["diagnostics"] = diag
    return ChainResult(stream, state, diag)


# -- lattice chain ---------------------------------------------------------


@dataclass
class LatticeChainResult:
    stream: Stream
    values: np.ndarray | None
    diagnostics: dict


def lattice_chain(model: ModelSpec, window: LatticeWindow, law: SiteLaw, params: SamplerParams,
                  grid: QuadratureGrid | None = None, test_functions=(), record_values: bool = False,
                  system: LatticeSystem | None = None) -> LatticeChainResult:
    """Single-site chain on per-site atom counts; the site values follow the lattice measure.

    Each site holds independent Poisson(mu p_i) counts of every charge atom under the
    reference law, restricted to at most N_max atoms per site.  A proposal picks a site
    and an atom and adds or removes one copy of it.
    """
    system = LatticeSystem(model, window, grid) if system is None else system
    tfs = tuple(test_functions)
    Pmat = lattice_pairing_matrix(window, tfs) if tfs else np.zeros((window.m, 0))
    rng = np.random.default_rng(params.seed)
    cl = model.charge_law
    m = window.m
    counts = np.zeros((m, len(cl.charges)), np.int64)
    values = np.zeros(m)
    phi = np.zeros(system.A.shape[1])
    P = np.zeros(len(tfs))
    sf = np.zeros(1)
    si = np.zeros(2, np.int64)
    stats = np.zeros(2, np.int64)
    burn, every, total = params.burn_steps, params.thin_steps, params.steps
    n_rec = (total - burn) // every
    rec_P = np.zeros((n_rec, len(tfs)))
    rec_E = np.zeros(n_rec)
    rec_V = np.zeros((n_rec if record_values else 1, m))
    dens = model.energy.packed()
    done = 0
    max_drift = 0.0
    while done < total:
        k = min(BLOCK, total - done)
        U = rng.random((k, 4))
        _core.lattice_run(counts, values, phi, P, sf, si, stats, system.A, system.gw, dens, cl.charges,
                          cl.weights, cl.cumulative, law.mu, law.N_max, Pmat, U, burn, every, rec_P, rec_V,
                          rec_E, record_values)
        done += k
        fresh = system.energy(values)
        max_drift = max(max_drift, abs(fresh - sf[0]))
        sf[0] = fresh
        phi[:] = system.field(values)
    if max_drift > DRIFT_TOL:
        raise RuntimeError(f"cached lattice energy drifted by {max_drift:.3e}")
    r = int(si[0])
    stream = Stream(tfs, rec_P[:r], None, None, rec_E[:r], method="batch",
                    meta={"sampler": "lattice_chain", "seed": params.seed})
    diag = {"steps": total, "samples": r, "acceptance": float(stats[1] / max(stats[0], 1)),
            "max_energy_drift": float(max_drift)}
    return LatticeChainResult(stream, rec_V[:r] if record_values else None, diag)


def chi2_test(samples, support, probs, min_expected: float = 5.0) -> tuple[float, float]:
    """Pearson chi-square of discrete samples against a law on ``support``; sparse tail cells are pooled."""
    samples = np.asarray(samples, float)
    support = np.asarray(support, float)
    probs = np.asarray(probs, float) / np.sum(probs)
    idx = np.searchsorted(support, samples)
    if np.any(idx >= len(support)) or np.any(support[np.minimum(idx, len(support) - 1)] != samples):
        raise ValueError("samples outside the support of the law")
    obs = np.bincount(idx, minlength=len(support)).astype(float)
    exp = probs * len(samples)
    bins_o, bins_e, acc_o, acc_e = [], [], 0.0, 0.0
    for o, e in zip(obs, exp):
        acc_o += o
        acc_e += e
        if acc_e >= min_expected:
            bins_o.append(acc_o)
            bins_e.append(acc_e)
            acc_o = acc_e = 0.0
    if bins_e:
        bins_o[-1] += acc_o
        bins_e[-1] += acc_e
    bins_o, bins_e = np.array(bins_o), np.array(bins_e)
    if len(bins_e) < 2:
        return 0.0, 1.0
    chi2 = float(np.sum((bins_o - bins_e) ** 2 / bins_e))
    return chi2, float(special.chdtrc(len(bins_e) - 1, chi2))
