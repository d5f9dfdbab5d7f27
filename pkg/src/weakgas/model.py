"""Model primitives: kernels, charge laws, energy densities, cutoffs.

All types are frozen dataclasses; evaluation is delegated to the compiled
routines in ``_core`` through the ``packed()`` tuples.
"""

from __future__ import annotations

import json
import math
import re
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from scipy import integrate, interpolate, special

from . import _core

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid model or experiment description, optionally anchored to a line."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where = f"{source}:{line}: " if line is not None else f"{source}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


# -- kernels ---------------------------------------------------------------

KERNEL_CODES = {"gaussian": _core.GAUSSIAN, "tent": _core.TENT, "ball": _core.BALL}
KERNEL_ALIASES = {"ball-indicator-smoothed": "ball", "ball_smoothed": "ball"}
TAPER_FRACTION = 0.05


def _radial_weight(d, r):
    return 2.0 * np.ones_like(r) if d == 1 else 2.0 * math.pi * r


@dataclass(frozen=True)
class Kernel:
    """Radial non-negative kernel G.

    kind / params:
        gaussian  (sigma,)                normalized, default range 8 sigma
        tent      (height, half_width)
        ball      (height, radius, w)     plateau up to radius - w, cosine edge of width w
    ``taper`` > 0 multiplies G by a linear ramp over the last fraction of ``range``.
    """

    kind: str
    params: tuple
    d: int = 1
    range: float | None = None
    taper: float = 0.0

    def __post_init__(self):
        kind = KERNEL_ALIASES.get(self.kind, self.kind)
        if kind not in KERNEL_CODES:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        params = tuple(float(p) for p in self.params)
        object.__setattr__(self, "params", params)
        need = {"gaussian": 1, "tent": 2, "ball": 3}[kind]
        if len(params) != need:
            raise ValueError(f"{kind} kernel takes {need} parameters, got {len(params)}")
        if any(not p > 0 for p in params):
            raise ValueError("kernel parameters must be positive")
        if kind == "ball" and params[2] > params[1]:
            raise ValueError("ball smoothing width exceeds its radius")
        if self.d not in (1, 2):
            raise ValueError("dimension must be 1 or 2")
        if self.range is None:
            object.__setattr__(self, "range", self.support)
        if not self.range > 0:
            raise ValueError("kernel range must be positive")
        object.__setattr__(self, "range", float(min(self.range, self.support)))
        if not 0.0 <= self.taper < 1.0:
            raise ValueError("taper fraction must lie in [0, 1)")

    @property
    def support(self) -> float:
        """Radius beyond which the untruncated profile vanishes (8 sigma for gaussians)."""
        if self.kind == "gaussian":
            return 8.0 * self.params[0]
        return self.params[1]

    @property
    def width(self) -> float:
        """Characteristic length used for default grid and proposal scales."""
        if self.kind == "gaussian":
            return self.params[0]
        if self.kind == "tent":
            return self.params[1]
        return self.params[2]

    def packed(self):
        return (KERNEL_CODES[self.kind], np.asarray(self.params, dtype=float), float(self.range), float(self.taper))

    def profile(self, r):
        """G as a function of the radius |x|."""
        r = np.atleast_1d(np.asarray(r, dtype=float))
        code, p, rng, taper = self.packed()
        return _core.kernel_profile_many(code, p, rng, taper, self.d, r)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.d == 1 and x.ndim <= 1:
            r = np.abs(x)
        else:
            r = np.linalg.norm(np.atleast_2d(x), axis=-1)
        out = self.profile(np.ravel(r))
        return out.reshape(np.shape(r)) if np.ndim(r) else float(out[0])

    def _ideal(self, r):
        """Profile without range cut or taper."""
        p = self.params
        if self.kind == "gaussian":
            s = p[0]
            return (2 * math.pi * s * s) ** (-0.5 * self.d) * np.exp(-0.5 * r * r / (s * s))
        return self.profile_untruncated(r)

    def profile_untruncated(self, r):
        code = KERNEL_CODES[self.kind]
        return _core.kernel_profile_many(code, np.asarray(self.params), np.inf, 0.0, self.d, np.atleast_1d(r))

    def ideal_l1(self) -> float:
        p, d = self.params, self.d
        if self.kind == "gaussian":
            return 1.0
        if self.kind == "tent":
            h, a = p
            return h * a if d == 1 else h * math.pi * a * a / 3.0
        h, a, w = p
        if d == 1:
            return h * (2 * a - w)
        return h * math.pi * ((a - w) ** 2 + (a - w) * w + w * w / 2 - 2 * w * w / math.pi**2)

    def _ideal_tail(self, R):
        """Mass of the ideal profile beyond radius R."""
        if self.kind == "gaussian":
            s = self.params[0]
            if self.d == 1:
                return float(special.erfc(R / (s * math.sqrt(2.0))))
            return math.exp(-0.5 * R * R / (s * s))
        a = self.params[1]
        if R >= a:
            return 0.0
        f = lambda r: float(self._ideal(np.array([r]))[0] * _radial_weight(self.d, np.array([r]))[0])
        brk = [self.params[1] - self.params[2]] if self.kind == "ball" else None
        val, _ = integrate.quad(f, R, a, points=[b for b in (brk or []) if R < b < a] or None,
                                epsabs=1e-15, epsrel=1e-13, limit=200)
        return val

    def truncation_error(self) -> float:
        """L1 distance to the untruncated profile; zero when nothing was cut."""
        R = self.range
        err = self._ideal_tail(R)
        if self.taper > 0.0:
            r0 = R * (1.0 - self.taper)

            def f(r):
                rr = np.array([r])
                return float(self._ideal(rr)[0] * (1.0 - (R - r) / (R - r0)) * _radial_weight(self.d, rr)[0])

            val, _ = integrate.quad(f, r0, R, epsabs=1e-16, epsrel=1e-13)
            err += val
        return err

    @property
    def l1_norm(self) -> float:
        if self.kind == "gaussian" and self.taper == 0.0:
            return 1.0 - self._ideal_tail(self.range)
        return self.ideal_l1() - self.truncation_error()

    def kinks(self):
        """Radii at which the profile is not smooth (used to place quadrature breakpoints)."""
        if self.kind == "tent":
            return [0.0, self.params[1]]
        out = [self.range]
        if self.taper > 0.0:
            out.append(self.range * (1.0 - self.taper))
        return out


def evaluate_kernel(kernel: Kernel, x) -> float:
    return kernel(x)


def truncate_kernel(kernel: Kernel, radius: float):
    """Compactly supported version of ``kernel`` cut at ``radius`` plus its L1 error."""
    if not radius > 0:
        raise ValueError("truncation radius must be positive")
    if radius >= kernel.range:
        return kernel, kernel.truncation_error()
    out = replace(kernel, range=float(radius), taper=TAPER_FRACTION)
    return out, out.truncation_error()


# -- charge laws -----------------------------------------------------------


@dataclass(frozen=True)
class ChargeLaw:
    atoms: tuple
    C: float | None = None

    def __post_init__(self):
        atoms = tuple((float(s), float(p)) for s, p in self.atoms)
        if not atoms:
            raise ValueError("charge law needs at least one atom")
        for s, p in atoms:
            if s == 0.0:
                raise ValueError("charge law may not put mass on 0")
            if not p > 0:
                raise ValueError("atom weights must be positive")
        total = sum(p for _, p in atoms)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"atom weights sum to {total}, not 1")
        atoms = tuple((s, p / total) for s, p in atoms)
        object.__setattr__(self, "atoms", atoms)
        cmax = max(abs(s) for s, _ in atoms)
        if self.C is None:
            object.__setattr__(self, "C", cmax)
        elif cmax > self.C:
            raise ValueError(f"atom |s| = {cmax} exceeds bound C = {self.C}")

    @property
    def charges(self) -> np.ndarray:
        return np.array([s for s, _ in self.atoms])

    @property
    def weights(self) -> np.ndarray:
        return np.array([p for _, p in self.atoms])

    @property
    def cumulative(self) -> np.ndarray:
        c = np.cumsum(self.weights)
        c[-1] = 1.0
        return c

    @property
    def mean(self) -> float:
        return float(self.charges @ self.weights)

    def sample(self, rng, size):
        return self.charges[rng.choice(len(self.atoms), size=size, p=self.weights)]


RADEMACHER = ChargeLaw(((1.0, 0.5), (-1.0, 0.5)))
POSITIVE = ChargeLaw(((1.0, 1.0),))


# -- energy densities ------------------------------------------------------

DENSITY_CODES = {
    "zero": _core.ZERO,
    "linear": _core.LINEAR,
    "logcosh_gauged": _core.LOGCOSH,
    "sqrt_saturating_gauged": _core.SQRT_SAT,
    "tabulated": _core.TABULATED,
}
SCAN = np.linspace(-50.0, 50.0, 10_000)


def _pack_spline(x, y):
    cs = interpolate.CubicSpline(x, y, bc_type="natural")
    s0 = float(cs(0.0)) if x[0] <= 0.0 <= x[-1] else None
    packed = np.concatenate([[len(x)], x, cs.c.ravel(), [0.0]])
    if s0 is None:
        s0 = float(_core._spline(packed, 0.0, 0))
    packed[-1] = s0
    return packed


@dataclass(frozen=True)
class EnergyDensity:
    """v(phi) = strength * base(phi) + shift * phi.

    kinds: zero; linear (params (a,): a phi); logcosh_gauged (-log cosh phi - phi);
    sqrt_saturating_gauged (1 - sqrt(1 + phi^2) - phi); tabulated (natural cubic
    spline through ``knots``/``values``, linearly extended, shifted so v(0)=0).
    """

    kind: str
    params: tuple = ()
    strength: float = 1.0
    shift: float = 0.0
    knots: tuple = ()
    values: tuple = ()
    _packed: Any = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in DENSITY_CODES:
            raise ValueError(f"unknown energy kind {self.kind!r}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if self.kind == "linear" and len(self.params) != 1:
            raise ValueError("linear energy takes one parameter (the slope)")
        if not self.strength >= 0:
            raise ValueError("strength must be non-negative")
        if self.kind == "tabulated":
            x = np.asarray(self.knots, float)
            y = np.asarray(self.values, float)
            if x.ndim != 1 or x.shape != y.shape or len(x) < 3:
                raise ValueError("tabulated energy needs >= 3 matching knots and values")
            if np.any(np.diff(x) <= 0):
                raise ValueError("tabulated knots must be strictly increasing")
            object.__setattr__(self, "knots", tuple(x))
            object.__setattr__(self, "values", tuple(y))
            p = _pack_spline(x, y)
        elif self.kind == "linear":
            p = np.array(self.params)
        else:
            p = np.zeros(1)
        object.__setattr__(self, "_packed", p)

    def packed(self):
        return (DENSITY_CODES[self.kind], self._packed, float(self.strength), float(self.shift))

    def _eval(self, phi, order):
        phi = np.asarray(phi, dtype=float)
        flat = np.ravel(phi)
        code, p, scale, lin = self.packed()
        out = scale * _core.density_many(code, p, flat, order)
        if order == 0:
            out = out + lin * flat
        elif order == 1:
            out = out + lin
        return out.reshape(phi.shape) if phi.ndim else float(out[0])

    def __call__(self, phi):
        return self._eval(phi, 0)

    def d1(self, phi):
        return self._eval(phi, 1)

    def d2(self, phi):
        return self._eval(phi, 2)

    def _base_slope_range(self):
        if self.kind == "zero":
            return 0.0, 0.0
        if self.kind == "linear":
            return self.params[0], self.params[0]
        if self.kind in ("logcosh_gauged", "sqrt_saturating_gauged"):
            return -2.0, 0.0
        # spline derivative is piecewise quadratic: check knots and interior vertices
        p = self._packed
        n = int(p[0])
        x = p[1:1 + n]
        c = p[1 + n:1 + n + 4 * (n - 1)].reshape(4, n - 1)
        cand = [float(_core._spline(p, xi, 1)) for xi in x]
        for i in range(n - 1):
            if c[0, i] != 0.0:
                t = -c[1, i] / (3.0 * c[0, i])
                if 0.0 < t < x[i + 1] - x[i]:
                    cand.append(float(_core._spline(p, x[i] + t, 1)))
        return min(cand), max(cand)

    @property
    def slope_range(self):
        lo, hi = self._base_slope_range()
        return self.strength * lo + self.shift, self.strength * hi + self.shift

    @property
    def slope_bound(self) -> float:
        lo, hi = self.slope_range
        return max(abs(lo), abs(hi))

    @property
    def monotone_falling(self) -> bool:
        return self.slope_range[1] <= 0.0

    @property
    def is_concave(self) -> bool:
        if self.kind != "tabulated":
            return True
        # the second derivative is piecewise linear, so its sign at the knots decides
        p = self._packed
        n = int(p[0])
        x = p[1:1 + n]
        return bool(np.all(_core.density_many(_core.TABULATED, p, x, 2) <= 1e-12))

    def with_shift(self, delta: float) -> EnergyDensity:
        return replace(self, shift=self.shift + delta, _packed=None)

    def interpolated(self, alpha: float, b: float):
        """Densities alpha v - (1 - alpha) b phi and its alpha-derivative v + b phi."""
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        main = replace(self, strength=alpha * self.strength,
                       shift=alpha * self.shift - (1.0 - alpha) * b, _packed=None)
        deriv = self.with_shift(b)
        return main, deriv


def tabulated_energy(fn, lo=-60.0, hi=60.0, n=2401, strength=1.0) -> EnergyDensity:
    x = np.linspace(lo, hi, n)
    return EnergyDensity("tabulated", knots=tuple(x), values=tuple(fn(x)), strength=strength)


# -- cutoffs ---------------------------------------------------------------


@dataclass(frozen=True)
class CutoffFunction:
    """Plateau of value ``height`` on |x - center|_inf <= R with a linear ramp of width w."""

    plateau_radius: float
    ramp_width: float
    height: float
    beta: float
    center: tuple = ()

    def __post_init__(self):
        if not self.plateau_radius >= 0:
            raise ValueError("plateau radius must be non-negative")
        if not self.ramp_width > 0:
            raise ValueError("ramp width must be positive")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not 0 < self.height <= self.beta * (1 + 1e-15):
            raise ValueError("cutoff height must lie in (0, beta]")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def support_radius(self) -> float:
        return self.plateau_radius + self.ramp_width

    def center_vec(self, d):
        c = np.zeros(d) if not self.center else np.asarray(self.center, float)
        if c.shape != (d,):
            raise ValueError("cutoff center has wrong dimension")
        return c

    def __call__(self, x, d=None):
        """g at points: shape (..., d), or any shape of scalars when d == 1."""
        x = np.asarray(x, dtype=float)
        d = d or len(self.center) or 1
        if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        t = np.max(np.abs(x - self.center_vec(d)), axis=-1)
        out = self.height * np.clip((self.support_radius - t) / self.ramp_width, 0.0, 1.0)
        return float(out) if out.ndim == 0 else out

    def shifted(self, x) -> CutoffFunction:
        x = np.atleast_1d(np.asarray(x, float))
        return replace(self, center=tuple(self.center_vec(len(x)) + x))


# -- model -----------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    d: int
    kernel: Kernel
    charge_law: ChargeLaw
    energy: EnergyDensity
    z: float
    cutoff: CutoffFunction
    allow_nonconcave: bool = False

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError("dimension must be 1 or 2")
        if self.kernel.d != self.d:
            raise ValueError("kernel dimension does not match model dimension")
        if self.cutoff.center and len(self.cutoff.center) != self.d:
            raise ValueError("cutoff center has wrong dimension")
        if not self.z > 0:
            raise ValueError("activity must be positive")
        if not self.allow_nonconcave and not self.energy.is_concave:
            raise ValueError("energy density is not concave")

    @property
    def beta(self) -> float:
        return self.cutoff.beta

    @property
    def b(self) -> float:
        return self.energy.slope_bound

    @property
    def center(self) -> np.ndarray:
        return self.cutoff.center_vec(self.d)

    def replace(self, **kw) -> ModelSpec:
        return replace(self, **kw)

    def gauged(self, b=None) -> ModelSpec:
        b = self.energy.slope_bound if b is None else b
        energy, law, z = gauge_transform(self.energy, self.charge_law, self.z, b, self.beta, self.kernel.l1_norm)
        return replace(self, energy=energy, charge_law=law, z=z)


def gauge_transform(energy: EnergyDensity, law: ChargeLaw, z: float, b: float, beta: float, g_l1: float):
    """Replace v by v - b phi and absorb the linear term into the charge law and activity."""
    if b < energy.slope_bound - 1e-12:
        raise ValueError(f"b = {b} is below sup|v'| = {energy.slope_bound}")
    s = law.charges
    w = law.weights * np.exp(-s * b * beta * g_l1)
    total = float(w.sum())
    new_law = ChargeLaw(tuple(zip(s.tolist(), (w / total).tolist())), C=law.C)
    return energy.with_shift(-b), new_law, z * total


# -- loading ---------------------------------------------------------------


def locate_key(text: str, dotted: str, fmt: str = "toml") -> int | None:
    """Best-effort line number of ``dotted`` key in a TOML or JSON source."""
    parts = dotted.split(".")
    lines = text.splitlines()
    if fmt == "json":
        for name in reversed(parts):
            pat = re.compile(r'"%s"\s*:' % re.escape(name))
            for i, line in enumerate(lines, 1):
                if pat.search(line):
                    return i
        return None
    section: list[str] = []
    best = None
    for i, line in enumerate(lines, 1):
        m = re.match(r"\s*\[\[?\s*([^\]]+?)\s*\]\]?", line)
        if m:
            section = m.group(1).split(".")
            if section == parts:
                best = best or i
            continue
        m = re.match(r"\s*([A-Za-z0-9_\-\"\.]+)\s*=", line)
        if m:
            key = section + m.group(1).strip('"').split(".")
            if key == parts:
                return i
            if best is None and parts[: len(key)] == key:
                best = i
    if best is None and len(parts) > 1:
        return locate_key(text, ".".join(parts[:-1]), fmt)
    return best


def _get(tree, dotted, default=KeyError):
    node = tree
    for p in dotted.split("."):
        if not isinstance(node, dict) or p not in node:
            if default is KeyError:
                raise KeyError(dotted)
            return default
        node = node[p]
    return node


def model_from_dict(data: dict, text: str | None = None, source: str | None = None,
                    prefix: str = "", fmt: str = "toml") -> ModelSpec:
    """Build a ModelSpec from a parsed description, raising line-anchored ConfigErrors."""

    def fail(key, msg):
        line = locate_key(text, prefix + key, fmt) if text else None
        raise ConfigError(f"{prefix + key}: {msg}", line, source)

    def need(key):
        try:
            return _get(data, key)
        except KeyError:
            fail(key, "missing required key")

    d = need("dimension")
    if d not in (1, 2):
        fail("dimension", f"must be 1 or 2, got {d!r}")
    try:
        kparams = need("kernel.params")
        kernel = Kernel(need("kernel.kind"), tuple(kparams), d=d, range=_get(data, "kernel.range", None),
                        taper=_get(data, "kernel.taper", 0.0))
    except (ValueError, TypeError) as exc:
        fail("kernel", str(exc))
    try:
        atoms = need("charge_law.atoms")
        law = ChargeLaw(tuple(tuple(a) for a in atoms), C=_get(data, "charge_law.C", None))
    except (ValueError, TypeError) as exc:
        fail("charge_law.atoms", str(exc))
    try:
        kind = need("energy.kind")
        energy = EnergyDensity(kind, tuple(_get(data, "energy.params", ())),
                               strength=_get(data, "energy.strength", 1.0),
                               shift=_get(data, "energy.shift", 0.0),
                               knots=tuple(_get(data, "energy.knots", ())),
                               values=tuple(_get(data, "energy.values", ())))
    except (ValueError, TypeError) as exc:
        fail("energy", str(exc))
    control = bool(_get(data, "energy.control", False))
    if not control and not energy.is_concave:
        fail("energy", "energy density is not concave (set control = true for negative controls)")
    z = need("activity")
    if not isinstance(z, (int, float)) or not z > 0:
        fail("activity", "must be a positive number")
    beta = need("beta")
    if not isinstance(beta, (int, float)) or not beta > 0:
        fail("beta", "must be a positive number")
    try:
        cutoff = CutoffFunction(float(need("cutoff.plateau_radius")), float(need("cutoff.ramp_width")),
                                float(_get(data, "cutoff.height", beta)), float(beta),
                                tuple(_get(data, "cutoff.center", ())))
    except (ValueError, TypeError) as exc:
        fail("cutoff", str(exc))
    try:
        model = ModelSpec(d, kernel, law, energy, float(z), cutoff, allow_nonconcave=control)
    except ValueError as exc:
        fail("", str(exc))
    if _get(data, "gauge", False):
        model = model.gauged()
    return model


def read_config_text(path) -> tuple[dict, str, str]:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        try:
            return json.loads(text), text, "json"
        except json.JSONDecodeError as exc:
            raise ConfigError(exc.msg, exc.lineno, str(path)) from None
    try:
        return tomllib.loads(text), text, "toml"
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(str(exc), int(m.group(1)) if m else None, str(path)) from None


def load_model(path) -> ModelSpec:
    data, text, fmt = read_config_text(path)
    return model_from_dict(data, text, str(path), fmt=fmt)
