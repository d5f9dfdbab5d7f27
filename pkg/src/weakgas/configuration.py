"""Marked point configurations, the static field, quadrature energy and its bound."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _core
from .model import ModelSpec


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, float))
        hi = np.atleast_1d(np.asarray(self.hi, float))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("box needs lo < hi in every coordinate")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def centered(cls, center, half_width) -> Box:
        c = np.atleast_1d(np.asarray(center, float))
        return cls(c - half_width, c + half_width)

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def contains(self, pts) -> np.ndarray:
        pts = np.asarray(pts, float).reshape(-1, self.d)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=1)

    def dilate(self, r: float) -> Box:
        return Box(self.lo - r, self.hi + r)

    def shifted(self, x) -> Box:
        return Box(self.lo + x, self.hi + x)

    def covers(self, other: Box) -> bool:
        return bool(np.all(self.lo <= other.lo) and np.all(self.hi >= other.hi))

    def __eq__(self, other):
        return isinstance(other, Box) and np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)

    def __hash__(self):
        return hash((tuple(self.lo), tuple(self.hi)))


def cutoff_box(model: ModelSpec) -> Box:
    return Box.centered(model.center, model.cutoff.support_radius)


def simulation_window(model: ModelSpec) -> Box:
    """supp g dilated by the kernel range: particles outside never touch U_g."""
    return cutoff_box(model).dilate(model.kernel.range)


class Configuration:
    """Finite charged point set eta = sum_j s_j delta_{y_j} inside a window."""

    def __init__(self, positions, charges, window: Box, C: float | None = None):
        pos = np.asarray(positions, float)
        d = window.d
        pos = pos.reshape(-1, d) if pos.size else np.zeros((0, d))
        chg = np.asarray(charges, float).reshape(-1)
        if len(chg) != len(pos):
            raise ValueError("positions and charges differ in length")
        if np.any(chg == 0):
            raise ValueError("zero charges are not allowed")
        if C is not None and np.any(np.abs(chg) > C):
            raise ValueError("charge exceeds the charge-law bound")
        if not np.all(window.contains(pos)):
            raise ValueError("particle outside the window")
        self.positions = pos
        self.charges = chg
        self.window = window

    @classmethod
    def empty(cls, window: Box) -> Configuration:
        return cls(np.zeros((0, window.d)), np.zeros(0), window)

    @property
    def n(self) -> int:
        return len(self.charges)

    @property
    def d(self) -> int:
        return self.window.d

    def __len__(self):
        return self.n

    def inserted(self, y, s) -> Configuration:
        return Configuration(np.vstack([self.positions, np.reshape(y, (1, self.d))]),
                             np.append(self.charges, s), self.window)

    def removed(self, index: int) -> Configuration:
        if not 0 <= index < self.n:
            raise IndexError(f"particle index {index} out of range for {self.n} particles")
        keep = np.arange(self.n) != index
        return Configuration(self.positions[keep], self.charges[keep], self.window)

    def translated(self, t) -> Configuration:
        t = np.atleast_1d(np.asarray(t, float))
        return Configuration(self.positions + t, self.charges, self.window.shifted(t))

    def restricted(self, box: Box) -> Configuration:
        inside = box.contains(self.positions)
        return Configuration(self.positions[inside], self.charges[inside], box)

    def permuted(self, perm) -> Configuration:
        return Configuration(self.positions[perm], self.charges[perm], self.window)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{k + 1}" for k in range(self.d)] + ["charge"])
            for y, s in zip(self.positions, self.charges):
                w.writerow([repr(float(v)) for v in y] + [repr(float(s))])

    @classmethod
    def from_csv(cls, path, window: Box) -> Configuration:
        rows = list(csv.reader(Path(path).read_text().splitlines()))
        header, body = rows[0], rows[1:]
        if header[-1] != "charge" or len(header) != window.d + 1:
            raise ValueError("CSV header must be x1,...,xd,charge")
        data = np.array([[float(v) for v in r] for r in body]) if body else np.zeros((0, window.d + 1))
        return cls(data[:, :-1], data[:, -1], window)


@dataclass(frozen=True)
class QuadratureGrid:
    """Regular midpoint grid over a box; weights carry g(x_k) h^d."""

    origin: np.ndarray
    spacing: float
    shape: tuple
    weights: np.ndarray

    @classmethod
    def for_model(cls, model: ModelSpec, h_target: float | None = None, box: Box | None = None) -> QuadratureGrid:
        box = cutoff_box(model) if box is None else box
        if not box.covers(cutoff_box(model)):
            raise ValueError("quadrature box must contain the cutoff support")
        if h_target is None:
            h_target = min(model.kernel.width, model.cutoff.ramp_width) / 8.0
        ext = box.hi - box.lo
        if not np.allclose(ext, ext[0]):
            raise ValueError("quadrature box must be a cube")
        n = int(math.ceil(ext[0] / h_target - 1e-9))
        h = float(ext[0] / n)
        shape = (n,) * model.d
        grid = cls(box.lo.copy(), h, shape, np.zeros(0))
        w = np.asarray(model.cutoff(grid.nodes(), d=model.d), float).reshape(-1) * h**model.d
        return cls(box.lo.copy(), h, shape, w)

    @property
    def d(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def axis(self, k) -> np.ndarray:
        return self.origin[k] + (np.arange(self.shape[k]) + 0.5) * self.spacing

    def nodes(self) -> np.ndarray:
        axes = [self.axis(k) for k in range(self.d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def box(self) -> Box:
        return Box(self.origin, self.origin + self.spacing * np.asarray(self.shape))

    def packed(self):
        return (np.asarray(self.origin, float), float(self.spacing), np.asarray(self.shape, np.int64),
                np.asarray(self.weights, float))

    def refined(self, model: ModelSpec) -> QuadratureGrid:
        """Grid with half the spacing over the same box."""
        return QuadratureGrid.for_model(model, self.spacing / 2.0, self.box())


# -- field and pairings ----------------------------------------------------


def _cell_list(positions, lo, size, d):
    idx = np.floor((positions - lo) / size).astype(np.int64)
    shape = np.maximum(idx.max(axis=0) + 1, 1) if len(idx) else np.ones(d, np.int64)
    flat = np.ravel_multi_index(idx.T, shape) if len(idx) else np.zeros(0, np.int64)
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=int(np.prod(shape)))
    start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return start, order.astype(np.int64), np.asarray(shape, np.int64)


def field_at(cfg: Configuration, kernel, x) -> np.ndarray | float:
    """phi(x) = sum_j s_j G(x - y_j), using a cell list with cell size = kernel range."""
    xs = np.asarray(x, float)
    scalar = xs.ndim == 0 or (xs.ndim == 1 and cfg.d > 1)
    if cfg.d == 1 and xs.ndim >= 1 and xs.shape[-1] == 1:
        xs = xs[..., 0]
    pts = xs.reshape(-1, cfg.d)
    if cfg.n == 0:
        out = np.zeros(len(pts))
    else:
        lo = cfg.positions.min(axis=0)
        size = float(kernel.range)
        start, items, shape = _cell_list(cfg.positions, lo, size, cfg.d)
        out = _core.field_at_points(kernel.packed(), cfg.positions, cfg.charges, start, items, lo, size, shape, pts)
    return float(out[0]) if scalar else out.reshape(xs.shape[:-1] if cfg.d > 1 else xs.shape)


def pairing(cfg: Configuration, h) -> float:
    """<eta, h> = sum_j s_j h(y_j)."""
    if cfg.n == 0:
        return 0.0
    return float(cfg.charges @ _values(h, cfg.positions))


def abs_pairing(cfg: Configuration, h) -> float:
    """<|eta|, h> = sum_j |s_j| h(y_j)."""
    if cfg.n == 0:
        return 0.0
    return float(np.abs(cfg.charges) @ _values(h, cfg.positions))


def _values(h, pts):
    vals = h(pts) if not hasattr(h, "values") else h.values(pts)
    return np.asarray(vals, float).reshape(len(pts))


# -- energy ----------------------------------------------------------------


def grid_field(cfg: Configuration, model: ModelSpec, grid: QuadratureGrid) -> np.ndarray:
    return _core.scatter_field(grid.packed(), model.kernel.packed(), cfg.positions, cfg.charges, cfg.n)


def energy(cfg: Configuration, model: ModelSpec, grid: QuadratureGrid, density=None) -> float:
    """Midpoint-rule U_g = h^d sum_k v(phi(x_k)) g(x_k)."""
    dens = (density or model.energy).packed()
    phi = grid_field(cfg, model, grid)
    return float(_core.field_energy(phi, grid.weights, dens))


def energy_delta(cfg: Configuration, change, model: ModelSpec, grid: QuadratureGrid) -> float:
    """U(cfg') - U(cfg) for change = ("insert", y, s) or ("remove", index)."""
    phi = grid_field(cfg, model, grid)
    kind = change[0]
    if kind == "insert":
        y = np.atleast_1d(np.asarray(change[1], float))
        s = float(change[2])
    elif kind == "remove":
        j = int(change[1])
        if not 0 <= j < cfg.n:
            raise IndexError(f"particle index {j} out of range for {cfg.n} particles")
        y, s = cfg.positions[j], -cfg.charges[j]
    else:
        raise ValueError(f"unknown change {kind!r}")
    return float(_core.pair_delta(phi, grid.packed(), model.kernel.packed(), model.energy.packed(),
                                  y, s, y, 0.0, False))


def smeared_cutoff(model: ModelSpec, grid: QuadratureGrid, ys) -> np.ndarray:
    """(G * g)(y) by the same quadrature that defines U_g."""
    ys = np.asarray(ys, float).reshape(-1, model.d)
    return _core.smear_many(grid.packed(), model.kernel.packed(), ys)


def stability_bound(cfg: Configuration, model: ModelSpec, grid: QuadratureGrid, b: float | None = None) -> float:
    """b * sum_j |s_j| (G * g)(y_j): bounds |U_g| pathwise."""
    b = model.b if b is None else b
    if cfg.n == 0:
        return 0.0
    return float(b * np.abs(cfg.charges) @ smeared_cutoff(model, grid, cfg.positions))


def random_configuration(model: ModelSpec, rng, n: int | None = None, window: Box | None = None) -> Configuration:
    window = simulation_window(model) if window is None else window
    if n is None:
        n = rng.poisson(model.z * window.volume)
    pos = window.lo + rng.random((n, model.d)) * (window.hi - window.lo)
    return Configuration(pos, model.charge_law.sample(rng, n), window)
