"""Observables F(eta) = H(<eta,h_1>, ..., <eta,h_n>), estimators and free-gas oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize, special

from . import _core

# -- test functions --------------------------------------------------------

TF_CODES = {"gaussian_bump": _core.GAUSS_BUMP, "plateau_ramp": _core.PLATEAU_RAMP,
            "scaled_shifted": _core.SMOOTH_BUMP}
GAUSS_SUPPORT = 12.0  # gaussian bumps are treated as vanishing beyond 12 widths


@dataclass(frozen=True)
class TestFunction:
    """Non-negative (for amplitude >= 0) fast-falling function on R^d.

    gaussian_bump   amplitude * exp(-|x - c|^2 / 2 width^2)
    plateau_ramp    amplitude on |x - c|_inf <= plateau, linear ramp of width ``ramp`` (0 = indicator)
    scaled_shifted  amplitude * b((x - c) / width), b(u) = exp(1 - 1/(1 - |u|^2)) for |u| < 1
    """

    __test__ = False

    kind: str
    center: tuple
    amplitude: float = 1.0
    width: float = 1.0
    plateau: float = 0.0
    ramp: float = 0.0

    def __post_init__(self):
        if self.kind not in TF_CODES:
            raise ValueError(f"unknown test function kind {self.kind!r}")
        c = np.atleast_1d(np.asarray(self.center, float))
        object.__setattr__(self, "center", tuple(float(v) for v in c))
        for name in ("amplitude", "width", "plateau", "ramp"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.kind == "plateau_ramp":
            if self.plateau < 0 or self.ramp < 0 or self.plateau + self.ramp == 0:
                raise ValueError("plateau_ramp needs plateau, ramp >= 0 and a non-empty support")
        elif not self.width > 0:
            raise ValueError("width must be positive")

    @property
    def d(self) -> int:
        return len(self.center)

    @property
    def sign_certificate(self) -> bool:
        return self.amplitude >= 0

    def packed(self):
        if self.kind == "plateau_ramp":
            a1, a2 = self.plateau, self.ramp
        else:
            a1, a2 = self.width, 0.0
        return TF_CODES[self.kind], np.array([self.amplitude, a1, a2, *self.center])

    def values(self, pts) -> np.ndarray:
        pts = np.asarray(pts, float).reshape(-1, self.d)
        code, p = self.packed()
        return _core.tf_many(code, p, pts)

    def __call__(self, x):
        x = np.asarray(x, float)
        if self.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            shape = x.shape
        else:
            shape = x.shape[:-1]
        out = self.values(x).reshape(shape)
        return float(out) if out.ndim == 0 else out

    @property
    def radius(self) -> float:
        if self.kind == "plateau_ramp":
            return self.plateau + self.ramp
        if self.kind == "gaussian_bump":
            return GAUSS_SUPPORT * self.width
        return self.width

    def support_box(self):
        c = np.asarray(self.center)
        return c - self.radius, c + self.radius

    def breakpoints(self, axis: int) -> list:
        c = self.center[axis]
        if self.kind == "plateau_ramp":
            pts = [c - self.plateau, c + self.plateau]
            if self.ramp > 0:
                pts += [c - self.plateau - self.ramp, c + self.plateau + self.ramp]
            return pts
        lo, hi = self.support_box()
        return [lo[axis], hi[axis]]

    def sup(self) -> float:
        return abs(self.amplitude)

    def shifted(self, x) -> TestFunction:
        x = np.atleast_1d(np.asarray(x, float))
        return TestFunction(self.kind, tuple(np.asarray(self.center) + x), self.amplitude,
                            self.width, self.plateau, self.ramp)

    def scaled(self, a: float) -> TestFunction:
        return TestFunction(self.kind, self.center, self.amplitude * a, self.width, self.plateau, self.ramp)

    def decay_bound(self, N: int = 4, span: float = 50.0, n: int = 4001) -> float:
        """max |h(x)| (1 + |x|^2)^N on a scan grid: finite for fast-falling h."""
        axes = [np.linspace(c - span, c + span, n if self.d == 1 else 201) for c in self.center]
        pts = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
        vals = np.abs(self.values(pts)) * (1 + np.sum(pts**2, axis=1)) ** N
        return float(vals.max())


@dataclass(frozen=True)
class SignedFunction:
    """f = sum_k c_k h_k with registry test functions h_k >= 0."""

    terms: tuple

    def __post_init__(self):
        terms = tuple((float(c), tf) for c, tf in self.terms if c != 0.0)
        object.__setattr__(self, "terms", terms)

    @classmethod
    def of(cls, tf: TestFunction, c: float = 1.0) -> SignedFunction:
        return cls(((c, tf),))

    @property
    def test_functions(self) -> tuple:
        return tuple(tf for _, tf in self.terms)

    @property
    def is_zero(self) -> bool:
        return not self.terms

    @property
    def nonnegative(self) -> bool:
        return all(c > 0 and tf.sign_certificate for c, tf in self.terms)

    def parts(self) -> tuple[SignedFunction, SignedFunction]:
        """(f+, f-): the positive- and negative-coefficient parts, both >= 0."""
        pos, neg = [], []
        for c, tf in self.terms:
            sgn = c * (1 if tf.sign_certificate else -1)
            (pos if sgn > 0 else neg).append((abs(c), tf.scaled(1.0 if tf.sign_certificate else -1.0)))
        return SignedFunction(tuple(pos)), SignedFunction(tuple(neg))

    def values(self, pts) -> np.ndarray:
        pts = np.asarray(pts, float)
        d = self.terms[0][1].d if self.terms else pts.shape[-1]
        pts = pts.reshape(-1, d)
        out = np.zeros(len(pts))
        for c, tf in self.terms:
            out += c * tf.values(pts)
        return out

    def __call__(self, x):
        x = np.asarray(x, float)
        d = self.terms[0][1].d if self.terms else 1
        shape = x.shape if d == 1 and (x.ndim == 0 or x.shape[-1] != 1) else x.shape[:-1]
        out = self.values(x).reshape(shape)
        return float(out) if out.ndim == 0 else out

    def scaled(self, a: float) -> SignedFunction:
        return SignedFunction(tuple((a * c, tf) for c, tf in self.terms))

    def shifted(self, x) -> SignedFunction:
        return SignedFunction(tuple((c, tf.shifted(x)) for c, tf in self.terms))

    def __add__(self, other: SignedFunction) -> SignedFunction:
        return SignedFunction(self.terms + other.terms)

    def __neg__(self) -> SignedFunction:
        return self.scaled(-1.0)

    def support_box(self):
        boxes = [tf.support_box() for _, tf in self.terms]
        return np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0)

    def breakpoints(self, axis: int) -> list:
        return [p for _, tf in self.terms for p in tf.breakpoints(axis)]

    def sup(self) -> float:
        return float(sum(abs(c) * tf.sup() for c, tf in self.terms))


def as_signed(f) -> SignedFunction:
    if isinstance(f, SignedFunction):
        return f
    if isinstance(f, TestFunction):
        return SignedFunction.of(f)
    if f is None:
        return SignedFunction(())
    raise TypeError(f"cannot interpret {f!r} as a test function")


# -- outer functions -------------------------------------------------------


def _sig(x):
    return special.expit(x)


@dataclass(frozen=True)
class Outer:
    """Registry entry: H, its gradient and metadata on derivative signs."""

    name: str
    arity: int | None
    H: Callable
    grad: Callable
    d12: Callable | None
    partial_signs: Callable  # params, n -> list of +1 / -1 / 0 (0 = changes sign)
    mixed_sign: Callable  # params -> "zero", +1, -1 or 0
    bound: Callable  # params, n -> (K, kappa) with |H| <= K exp(kappa sum|x_i|)
    sup: Callable  # params, n -> sup |H| (inf when unbounded)
    profile: tuple | None = None  # (phi, phi', phi'') for H(x, y) = phi(x - y)


def _sgn(a):
    """Derivative-sign tag of a constant coefficient (0 counts as non-decreasing)."""
    return 1 if a >= 0 else -1


def _lin_H(X, p):
    return X @ np.asarray(p, float)


def _exp_H(X, p):
    return np.exp(X @ np.asarray(p, float))


def _tanh_H(X, p):
    return np.tanh(X @ np.asarray(p, float))


def _sp_split(p, n):
    p = np.asarray(p, float)
    return p[:n], p[n:2 * n]


def _sp_H(X, p):
    a, t = _sp_split(p, X.shape[1])
    return np.prod(_sig(a * (X - t)), axis=1)


def _sp_grad(X, p):
    a, t = _sp_split(p, X.shape[1])
    s = _sig(a * (X - t))
    tot = np.prod(s, axis=1)[:, None]
    return tot * a * (1 - s)


def _sp_d12(X, p):
    a, t = _sp_split(p, 2)
    s = _sig(a * (X - t))
    return a[0] * a[1] * s[:, 0] * (1 - s[:, 0]) * s[:, 1] * (1 - s[:, 1])


def _smax_H(X, p):
    a = p[0]
    return special.logsumexp(a * X, axis=1) / a


def _smax_grad(X, p):
    return special.softmax(p[0] * X, axis=1)


def _smin_H(X, p):
    a = p[0]
    return -special.logsumexp(-a * X, axis=1) / a


def _smin_grad(X, p):
    return special.softmax(-p[0] * X, axis=1)


def _pow_p(p):
    k = int(round(p[0]))
    if k != p[0] or k < 1 or k % 2 == 0:
        raise ValueError("power outer function needs an odd positive integer exponent")
    return k


OUTERS: dict[str, Outer] = {
    "linear": Outer(
        "linear", None, _lin_H,
        lambda X, p: np.broadcast_to(np.asarray(p, float), X.shape).copy(),
        lambda X, p: np.zeros(len(X)),
        lambda p, n: [_sgn(a) for a in p],
        lambda p: "zero",
        lambda p, n: (1.0, float(max(abs(a) for a in p))),
        lambda p, n: math.inf),
    "exp": Outer(
        "exp", None, _exp_H,
        lambda X, p: _exp_H(X, p)[:, None] * np.asarray(p, float),
        lambda X, p: p[0] * p[1] * _exp_H(X, p),
        lambda p, n: [_sgn(a) for a in p],
        lambda p: "zero" if p[0] * p[1] == 0 else _sgn(p[0] * p[1]),
        lambda p, n: (1.0, float(max(abs(a) for a in p))),
        lambda p, n: math.inf),
    "tanh": Outer(
        "tanh", None, _tanh_H,
        lambda X, p: (1 - _tanh_H(X, p) ** 2)[:, None] * np.asarray(p, float),
        lambda X, p: -2 * p[0] * p[1] * _tanh_H(X, p) * (1 - _tanh_H(X, p) ** 2),
        lambda p, n: [_sgn(a) for a in p],
        lambda p: 0 if p[0] * p[1] != 0 else "zero",
        lambda p, n: (1.0, 0.0),
        lambda p, n: 1.0),
    "sigmoid_product": Outer(
        "sigmoid_product", None, _sp_H, _sp_grad, _sp_d12,
        lambda p, n: [_sgn(a) for a in p[:n]],
        lambda p: "zero" if p[0] * p[1] == 0 else _sgn(p[0] * p[1]),
        lambda p, n: (1.0, 0.0),
        lambda p, n: 1.0),
    "smoothmax": Outer(
        "smoothmax", None, _smax_H, _smax_grad, None,
        lambda p, n: [1] * n,
        lambda p: 0,
        lambda p, n: (1.0 + math.log(n) / p[0], 1.0),
        lambda p, n: math.inf),
    "smoothmin": Outer(
        "smoothmin", None, _smin_H, _smin_grad, None,
        lambda p, n: [1] * n,
        lambda p: 0,
        lambda p, n: (1.0 + math.log(n) / p[0], 1.0),
        lambda p, n: math.inf),
    "power": Outer(
        "power", 1, lambda X, p: X[:, 0] ** _pow_p(p),
        lambda X, p: (_pow_p(p) * X[:, 0] ** (_pow_p(p) - 1))[:, None],
        None,
        lambda p, n: [1],
        lambda p: "zero",
        lambda p, n: (float(math.factorial(_pow_p(p))), 1.0),
        lambda p, n: math.inf),
    "product": Outer(
        "product", 2, lambda X, p: X[:, 0] * X[:, 1],
        lambda X, p: X[:, ::-1].copy(),
        lambda X, p: np.ones(len(X)),
        lambda p, n: [0, 0],
        lambda p: 1,
        lambda p, n: (1.0, 1.0),
        lambda p, n: math.inf),
    "cos": Outer(
        "cos", 1, lambda X, p: np.cos(X[:, 0]), lambda X, p: -np.sin(X), None,
        lambda p, n: [0], lambda p: "zero", lambda p, n: (1.0, 0.0), lambda p, n: 1.0),
    "sin": Outer(
        "sin", 1, lambda X, p: np.sin(X[:, 0]), lambda X, p: np.cos(X), None,
        lambda p, n: [0], lambda p: "zero", lambda p, n: (1.0, 0.0), lambda p, n: 1.0),
    "cos_diff": Outer(
        "cos_diff", 2, lambda X, p: np.cos(X[:, 0] - X[:, 1]),
        lambda X, p: np.stack([-np.sin(X[:, 0] - X[:, 1]), np.sin(X[:, 0] - X[:, 1])], axis=1),
        lambda X, p: np.cos(X[:, 0] - X[:, 1]),
        lambda p, n: [0, 0], lambda p: 0, lambda p, n: (1.0, 0.0), lambda p, n: 1.0,
        profile=(np.cos, lambda u: -np.sin(u), lambda u: -np.cos(u))),
    "sin_diff": Outer(
        "sin_diff", 2, lambda X, p: np.sin(X[:, 0] - X[:, 1]),
        lambda X, p: np.stack([np.cos(X[:, 0] - X[:, 1]), -np.cos(X[:, 0] - X[:, 1])], axis=1),
        lambda X, p: np.sin(X[:, 0] - X[:, 1]),
        lambda p, n: [0, 0], lambda p: 0, lambda p, n: (1.0, 0.0), lambda p, n: 1.0,
        profile=(np.sin, np.cos, lambda u: -np.sin(u))),
}


@dataclass(frozen=True)
class Arg:
    """One argument of H: <eta, f>, or <|eta|, f> when ``absolute``."""

    f: SignedFunction
    absolute: bool = False


def _as_arg(a) -> Arg:
    if isinstance(a, Arg):
        return a
    return Arg(as_signed(a))


@dataclass(frozen=True)
class Observable:
    """F(eta) = H(x_1, ..., x_n) with x_i = <eta, f_i> (or <|eta|, f_i>)."""

    outer: str
    args: tuple
    params: tuple = ()
    name: str = ""
    _custom: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self._custom is None and self.outer not in OUTERS:
            raise ValueError(f"unknown outer function {self.outer!r}")
        args = tuple(_as_arg(a) for a in self.args)
        object.__setattr__(self, "args", args)
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        spec = self.spec
        if spec.arity is not None and spec.arity != len(args):
            raise ValueError(f"{self.outer} takes {spec.arity} arguments, got {len(args)}")
        if not args:
            raise ValueError("observable needs at least one argument")
        if spec.name in ("linear", "exp", "tanh") and len(self.params) != len(args):
            raise ValueError(f"{self.outer} needs one coefficient per argument")
        if spec.name == "sigmoid_product" and len(self.params) != 2 * len(args):
            raise ValueError("sigmoid_product needs slopes and thresholds for every argument")
        if spec.name in ("smoothmax", "smoothmin") and not (len(self.params) == 1 and self.params[0] > 0):
            raise ValueError(f"{self.outer} needs one positive sharpness parameter")
        if spec.name == "power":
            _pow_p(self.params)

    @property
    def spec(self) -> Outer:
        return self._custom if self._custom is not None else OUTERS[self.outer]

    @property
    def n(self) -> int:
        return len(self.args)

    @property
    def test_functions(self) -> tuple:
        return tuple(tf for a in self.args for tf in a.f.test_functions)

    @property
    def monotone(self) -> bool:
        """Certified from registry metadata: h_i >= 0 and every partial of H >= 0."""
        if any(a.absolute or not a.f.nonnegative for a in self.args):
            return False
        override = getattr(self.spec, "monotone_override", None)
        if override is not None:
            return override
        return all(s > 0 for s in self.spec.partial_signs(self.params, self.n))

    @property
    def argument_domain(self) -> str:
        return getattr(self.spec, "argument_domain", "all")

    @property
    def bound_params(self) -> tuple[float, float]:
        return self.spec.bound(self.params, self.n)

    @property
    def sup_bound(self) -> float:
        return self.spec.sup(self.params, self.n)

    def H(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        return self.spec.H(X, self.params)

    def grad(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        return self.spec.grad(X, self.params)

    def arguments(self, cfg) -> np.ndarray:
        out = np.empty(self.n)
        for i, a in enumerate(self.args):
            if cfg.n == 0 or a.f.is_zero:
                out[i] = 0.0
                continue
            w = np.abs(cfg.charges) if a.absolute else cfg.charges
            out[i] = float(w @ a.f.values(cfg.positions))
        return out

    def evaluate(self, cfg) -> float:
        return float(self.H(self.arguments(cfg)[None, :])[0])

    def check_bound(self, span: float = 10.0, n: int = 41) -> bool:
        """|H(x)| <= K exp(kappa sum |x_i|) on a scan grid."""
        K, kappa = self.bound_params
        axes = [np.linspace(-span, span, n)] * self.n
        X = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
        lhs = np.abs(self.H(X))
        rhs = K * np.exp(kappa * np.abs(X).sum(axis=1))
        return bool(np.all(lhs <= rhs * (1 + 1e-12)))

    def shifted(self, x) -> Observable:
        args = tuple(Arg(a.f.shifted(x), a.absolute) for a in self.args)
        return Observable(self.outer, args, self.params, self.name, self._custom)

    def with_name(self, name: str) -> Observable:
        return Observable(self.outer, self.args, self.params, name, self._custom)


def laplace_observable(h=None, f=None, name: str = "") -> Observable:
    """F(eta) = exp(<|eta|, h> + <eta, f>)."""
    args, coef = [], []
    if h is not None:
        args.append(Arg(as_signed(h), absolute=True))
        coef.append(1.0)
    if f is not None:
        args.append(Arg(as_signed(f)))
        coef.append(1.0)
    return Observable("exp", tuple(args), tuple(coef), name)


# -- decomposition into increasing parts -----------------------------------


class _PositivePart:
    """x -> int_0^x (phi(s))^{+/-} ds for phi = A' with A known in closed form.

    Sign changes of phi are located once on [-span, span]; on each piece
    between consecutive roots the integral is a difference of A.
    """

    def __init__(self, phi, A, span: float, per_unit: int = 400):
        self.A = A
        self.span = span
        grid = np.linspace(-span, span, int(2 * span * per_unit) + 1)
        vals = phi(grid)
        scalar = lambda t: float(np.ravel(phi(t))[0])
        roots = [optimize.brentq(scalar, grid[i], grid[i + 1], xtol=1e-15, rtol=1e-15)
                 for i in np.nonzero(vals[:-1] * vals[1:] < 0)[0]]
        pts = np.unique(np.concatenate([[-span, 0.0, span], roots, grid[vals == 0]]))
        mids = 0.5 * (pts[:-1] + pts[1:])
        self.pts = pts
        self.masks = {"+": phi(mids) > 0, "-": phi(mids) < 0}
        self.Apts = A(pts)
        k0 = int(np.searchsorted(pts, 0.0))
        inc = np.diff(self.Apts)
        self.cum = {}
        for key, sgn in (("+", 1.0), ("-", -1.0)):
            piece = np.where(self.masks[key], sgn * inc, 0.0)
            cum = np.zeros(len(pts))
            cum[k0 + 1:] = np.cumsum(piece[k0:])
            cum[:k0] = -np.cumsum(piece[:k0][::-1])[::-1]
            self.cum[key] = cum

    def __call__(self, x, which: str):
        x = np.asarray(x, float)
        if np.any(np.abs(x) > self.span):
            raise ValueError("argument outside the decomposition span")
        i = np.clip(np.searchsorted(self.pts, x, side="right") - 1, 0, len(self.pts) - 2)
        # every piece lies on one side of 0: anchor at its end nearer 0
        anchor = np.where(self.pts[i] >= 0.0, i, i + 1)
        sgn = 1.0 if which == "+" else -1.0
        part = sgn * (self.A(x) - self.Apts[anchor])
        return self.cum[which][anchor] + np.where(self.masks[which][i], part, 0.0)


def _rect_part(k_int, ku_int, roots, ix, iy, sign):
    """Integral over the rectangle ix x iy of the sign-part of k(s - t), >= 0.

    Substituting u = s - t turns it into int k(u)^{+/-} l(u) du with l the
    piecewise linear overlap length; on each piece both k and u k(u) have
    closed-form antiderivatives.
    """
    (x0, x1), (y0, y1) = ix, iy

    def ell(u):
        return max(0.0, min(y1, x1 - u) - max(y0, x0 - u))

    kinks = sorted({x0 - y1, x0 - y0, x1 - y1, x1 - y0})
    lo, hi = kinks[0], kinks[-1]
    pts = np.unique(np.concatenate([kinks, roots[(roots > lo) & (roots < hi)]]))
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        kint = k_int(b) - k_int(a)
        if np.sign(kint) != sign:
            continue
        ua, ub = a + 0.25 * (b - a), a + 0.75 * (b - a)
        la, lb = ell(ua), ell(ub)
        slope = (lb - la) / (ub - ua)
        icpt = la - slope * ua
        total += sign * (slope * (ku_int(b) - ku_int(a)) + icpt * kint)
    return total


class DecomposedOuter:
    """Outer function H^{up} (which="+") or H^{down} (which="-") of the anchored split.

    H^{up/down}(x, y) = H^{+/-}(0,0) + int_0^y (d2 H(0,t))^{+/-} dt
                        + int_0^x (d1 H(s,0))^{+/-} ds + int_0^y int_0^x (d1 d2 H)^{+/-}
    """

    monotone_override = True
    profile = None

    def __init__(self, obs: Observable, which: str, span: float = 50.0):
        if obs.n > 2:
            raise ValueError("decomposition supports at most two arguments")
        self.base = obs
        self.which = which
        self.name = f"{obs.outer}_{'up' if which == '+' else 'down'}"
        self.arity = obs.n
        self.span = span
        self.argument_domain = "all"
        spec, p, n = obs.spec, obs.params, obs.n
        signs = spec.partial_signs(p, n)
        self.H0 = float(spec.H(np.zeros((1, n)), p)[0])
        self.parts1 = []
        for i in range(n):
            def phi(s, i=i):
                X = np.zeros((np.size(s), n))
                X[:, i] = s
                return spec.grad(X, p)[:, i]

            def A(s, i=i):
                X = np.zeros((np.size(s), n))
                X[:, i] = s
                return spec.H(X, p)

            self.parts1.append((signs[i], A, _PositivePart(phi, A, span) if signs[i] == 0 else None))
        self.mixed = ("zero",)
        if n == 2:
            ms = spec.mixed_sign(p)
            if ms in (1, -1):
                self.mixed = ("const", ms)
            elif ms != "zero":
                if spec.profile is None:
                    raise ValueError(f"no closed form for the mixed partial of {obs.outer}")
                f, f1, f2 = spec.profile
                k = lambda u: -f2(np.asarray(u, float))
                grid = np.linspace(-2 * span, 2 * span, int(4 * span * 400) + 1)
                vals = k(grid)
                roots = np.array([optimize.brentq(k, grid[i], grid[i + 1], xtol=1e-15, rtol=1e-15)
                                  for i in np.nonzero(vals[:-1] * vals[1:] < 0)[0]])
                self.mixed = ("profile", lambda u: -f1(u), lambda u: -u * f1(u) + f(u), roots)
            if self.mixed[0] != "zero":
                # d/dx of the double integral is int_0^y (d1 d2 H)^+ dt, >= 0 only for y >= 0
                self.argument_domain = "nonnegative"

    def partial_signs(self, p, n):
        return [1] * n

    def mixed_sign(self, p):
        return 0

    def bound(self, p, n):
        return math.inf, 0.0

    def sup(self, p, n):
        return math.inf

    def grad(self, X, p):
        raise NotImplementedError("decomposed parts are evaluated, not differentiated")

    def _one(self, x, i):
        sign, A, pp = self.parts1[i]
        diff = A(x) - self.H0
        if sign > 0:
            return diff if self.which == "+" else np.zeros_like(diff)
        if sign < 0:
            return -diff if self.which == "-" else np.zeros_like(diff)
        return pp(x, self.which)

    def _double(self, X):
        kind = self.mixed[0]
        if kind == "zero":
            return np.zeros(len(X))
        if kind == "const":
            spec, p = self.base.spec, self.base.params
            z0 = np.zeros(len(X))
            rect = (spec.H(X, p) - spec.H(np.stack([X[:, 0], z0], 1), p)
                    - spec.H(np.stack([z0, X[:, 1]], 1), p) + self.H0)
            sgn = self.mixed[1]
            return sgn * rect if (sgn > 0) == (self.which == "+") else np.zeros(len(X))
        _, k_int, ku_int, roots = self.mixed
        sign = 1 if self.which == "+" else -1
        out = np.zeros(len(X))
        for r, (x, y) in enumerate(X):
            if x == 0 or y == 0:
                continue
            orient = np.sign(x) * np.sign(y)
            out[r] = orient * _rect_part(k_int, ku_int, roots, (min(0.0, x), max(0.0, x)),
                                         (min(0.0, y), max(0.0, y)), sign)
        return out

    def H(self, X, p=None):
        X = np.atleast_2d(np.asarray(X, float))
        if np.any(np.abs(X) > self.span):
            raise ValueError("argument outside the decomposition span")
        h0 = max(self.H0, 0.0) if self.which == "+" else max(-self.H0, 0.0)
        out = np.full(len(X), h0)
        for i in range(self.arity):
            out += self._one(X[:, i], i)
        if self.arity == 2:
            out += self._double(X)
        return out


class _ShiftedOuter:
    """H + c, keeping the registry metadata of H."""

    monotone_override = True
    argument_domain = "all"
    profile = None

    def __init__(self, obs: Observable, c: float):
        self.base, self.c = obs, c
        self.name, self.arity = obs.outer + "_up", obs.n
        self.partial_signs, self.mixed_sign, self.grad = obs.spec.partial_signs, obs.spec.mixed_sign, obs.spec.grad

    def bound(self, p, n):
        K, kappa = self.base.bound_params
        return K + self.c, kappa

    def sup(self, p, n):
        return self.base.sup_bound + self.c

    def H(self, X, p):
        return self.base.spec.H(X, p) + self.c


class _ConstOuter:
    monotone_override = True
    argument_domain = "all"
    profile = None

    def __init__(self, c: float, n: int):
        self.c, self.name, self.arity = c, "constant", n

    def partial_signs(self, p, n):
        return [1] * n

    def mixed_sign(self, p):
        return "zero"

    def bound(self, p, n):
        return max(self.c, 1e-300), 0.0

    def sup(self, p, n):
        return self.c

    def grad(self, X, p):
        return np.zeros_like(X)

    def H(self, X, p):
        return np.full(len(X), self.c)


def decompose(obs: Observable, span: float = 50.0) -> tuple[Observable, Observable]:
    """F = F_up - F_down with both outer functions non-decreasing.

    Registry-monotone H give the trivial split F_up = F + c, F_down = c with
    c = H^-(0, 0).  Otherwise the anchored construction from the signed parts
    of d1 H(s, 0), d2 H(0, t) and the mixed partial is used; with two
    arguments and a non-vanishing mixed partial the parts are increasing on
    arguments >= 0 only (``argument_domain == "nonnegative"``).
    """
    if obs.n > 2:
        raise ValueError("decomposition supports at most two arguments")
    if any(a.absolute or not a.f.nonnegative for a in obs.args):
        raise ValueError("decomposition needs non-negative test functions")
    if obs.monotone:
        c = max(-float(obs.H(np.zeros((1, obs.n)))[0]), 0.0)
        return (Observable(obs.outer, obs.args, obs.params, obs.name + "_up", _ShiftedOuter(obs, c)),
                Observable(obs.outer, obs.args, obs.params, obs.name + "_down", _ConstOuter(c, obs.n)))
    return tuple(Observable(obs.outer, obs.args, obs.params, obs.name + tag, DecomposedOuter(obs, which, span))
                 for which, tag in (("+", "_up"), ("-", "_down")))


# -- estimates -------------------------------------------------------------

N_BATCHES = 32


@dataclass(frozen=True)
class MCEstimate:
    mean: complex | float
    se: float
    n_eff: float
    batches: int
    n: int

    def as_dict(self) -> dict:
        if isinstance(self.mean, complex):
            mean = {"re": self.mean.real, "im": self.mean.imag}
        else:
            mean = self.mean
        return {"mean": mean, "se": self.se, "n_eff": self.n_eff, "batches": self.batches, "n": self.n}


def _finish(mean, se, x, batches):
    n = len(x)
    xv = np.asarray(x)
    var = float(np.var(xv.real, ddof=1) + (np.var(xv.imag, ddof=1) if np.iscomplexobj(xv) else 0.0)) if n > 1 else 0.0
    n_eff = float(n) if se == 0.0 else float(min(n, var / se**2))
    if np.iscomplexobj(xv):
        mean = complex(mean)
    else:
        mean = float(mean)
    return MCEstimate(mean, float(se), n_eff, batches, n)


def batch_means(x, n_batches: int = N_BATCHES) -> MCEstimate:
    """Mean with a batch-means standard error (robust to autocorrelation)."""
    x = np.asarray(x)
    n = len(x)
    if n < 2 * n_batches:
        raise ValueError(f"batch means needs at least {2 * n_batches} samples, got {n}")
    mean = x.mean()
    bm = np.array([b.mean() for b in np.array_split(x, n_batches)])
    var_b = np.var(bm.real, ddof=1) + (np.var(bm.imag, ddof=1) if np.iscomplexobj(bm) else 0.0)
    return _finish(mean, math.sqrt(var_b / n_batches), x, n_batches)


def iid_estimate(x) -> MCEstimate:
    """Mean with the independent-sample standard error."""
    x = np.asarray(x)
    n = len(x)
    if n < 2:
        raise ValueError("need at least two samples")
    var = np.var(x.real, ddof=1) + (np.var(x.imag, ddof=1) if np.iscomplexobj(x) else 0.0)
    return _finish(x.mean(), math.sqrt(var / n), x, 0)


def estimate(x, method: str = "batch") -> MCEstimate:
    return batch_means(x) if method == "batch" else iid_estimate(x)


def merge_estimates(ests) -> MCEstimate:
    """Combine estimates from independent streams, weighting by sample count."""
    ests = list(ests)
    if len(ests) == 1:
        return ests[0]
    w = np.array([e.n for e in ests], float)
    W = w.sum()
    mean = sum(wi * e.mean for wi, e in zip(w, ests)) / W
    se = math.sqrt(sum((wi * e.se) ** 2 for wi, e in zip(w, ests))) / W
    return MCEstimate(mean, se, float(sum(e.n_eff for e in ests)), sum(e.batches for e in ests), int(W))


def covariance_samples(a, b) -> np.ndarray:
    """Per-sample (a - mean a)(b - mean b) n/(n-1); their mean is the sample covariance."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    n = len(a)
    return (a - a.mean()) * (b - b.mean()) * (n / (n - 1))


def difference(e1: MCEstimate, e2: MCEstimate) -> tuple[float, float]:
    """e1 - e2 and its standard error for independent estimates."""
    return e1.mean - e2.mean, math.hypot(e1.se, e2.se)


# -- sample streams --------------------------------------------------------


class Stream:
    """Per-sample pairings <eta, h_t> and <|eta|, h_t> for a fixed list of test functions."""

    def __init__(self, test_functions, P, A, n_particles=None, energy=None, method="batch", meta=None):
        self.test_functions = tuple(test_functions)
        self.index = {tf: i for i, tf in enumerate(self.test_functions)}
        P = np.asarray(P, float)
        self.P = P if P.ndim == 2 else P.reshape(-1, len(self.test_functions))
        self.A = np.asarray(A, float).reshape(self.P.shape) if A is not None else None
        self.n_particles = None if n_particles is None else np.asarray(n_particles)
        self.energy = None if energy is None else np.asarray(energy, float)
        self.method = method
        self.meta = meta or {}

    def __len__(self):
        return len(self.P)

    def pairing(self, f, absolute: bool = False) -> np.ndarray:
        f = as_signed(f)
        out = np.zeros(len(self.P))
        M = self.A if absolute else self.P
        for c, tf in f.terms:
            if tf not in self.index:
                raise KeyError(f"test function {tf} was not recorded in this stream")
            out += c * M[:, self.index[tf]]
        return out

    def arguments(self, obs: Observable) -> np.ndarray:
        return np.stack([self.pairing(a.f, a.absolute) for a in obs.args], axis=1)

    def values(self, obs: Observable) -> np.ndarray:
        return obs.H(self.arguments(obs))

    def estimate(self, obs: Observable) -> MCEstimate:
        return estimate(self.values(obs), self.method)

    def covariance(self, o1: Observable, o2: Observable) -> MCEstimate:
        return estimate(covariance_samples(self.values(o1), self.values(o2)), self.method)


def char_functional_estimate(stream: Stream, f) -> MCEstimate:
    """Estimate of E[exp(i <eta, f>)] from a stream."""
    f = as_signed(f)
    if f.is_zero:
        return MCEstimate(complex(1.0), 0.0, float(len(stream)), N_BATCHES if stream.method == "batch" else 0,
                          len(stream))
    return estimate(np.exp(1j * stream.pairing(f)), stream.method)


# -- quadrature over y -----------------------------------------------------


def integrate_box(fn, lo, hi, breaks=None, tol: float = 1e-8, n0: int = 8, max_points: int = 2_000_000):
    """Midpoint rule with Richardson extrapolation under repeated halving.

    Cells never straddle the given breakpoints (per axis), so piecewise smooth
    integrands keep the h^2 error expansion.  Returns the extrapolated value.
    """
    lo = np.atleast_1d(np.asarray(lo, float))
    hi = np.atleast_1d(np.asarray(hi, float))
    d = len(lo)
    segs = []
    for k in range(d):
        b = [lo[k], hi[k]] + [p for p in (breaks[k] if breaks else []) if lo[k] < p < hi[k]]
        segs.append(np.unique(b))

    def rule(m):
        axes, wts = [], []
        for k in range(d):
            e = segs[k]
            pts, ws = [], []
            for a, b in zip(e[:-1], e[1:]):
                h = (b - a) / m
                pts.append(a + (np.arange(m) + 0.5) * h)
                ws.append(np.full(m, h))
            axes.append(np.concatenate(pts))
            wts.append(np.concatenate(ws))
        mesh = np.meshgrid(*axes, indexing="ij")
        wmesh = np.meshgrid(*wts, indexing="ij")
        pts = np.stack([g.ravel() for g in mesh], axis=1)
        w = np.prod(np.stack([g.ravel() for g in wmesh], axis=1), axis=1)
        return np.sum(w * fn(pts))

    m = n0
    prev = rule(m)
    prev_r = None
    while True:
        m *= 2
        if (m * max(len(s) - 1 for s in segs)) ** d > max_points:
            raise RuntimeError("quadrature did not reach its tolerance within the point budget")
        cur = rule(m)
        rich = (4.0 * cur - prev) / 3.0
        if prev_r is not None and abs(rich - prev_r) <= tol * max(1.0, abs(rich)):
            return rich
        prev, prev_r = cur, rich


def _domain(fs, window, d):
    los, his = [], []
    for f in fs:
        if f is not None and not f.is_zero:
            a, b = f.support_box()
            los.append(a)
            his.append(b)
    if not los:
        return None
    lo, hi = np.min(los, axis=0), np.max(his, axis=0)
    if window is not None:
        lo, hi = np.maximum(lo, window.lo), np.minimum(hi, window.hi)
        if np.any(hi <= lo):
            return None
    return lo, hi


def _breaks(fs, d, extra=None):
    out = []
    for k in range(d):
        pts = [p for f in fs if f is not None for p in f.breakpoints(k)]
        if extra is not None:
            pts += list(extra[k])
        out.append(pts)
    return out


def free_laplace_oracle(model, h=None, f=None, window=None, tol: float = 1e-8, theta=1.0):
    """E_0[exp(<|eta|,h> + theta <eta,f>)] = exp(z int sum_i p_i (e^{|s_i| h + theta s_i f} - 1) dy).

    ``theta`` may be complex; theta = i gives the characteristic functional.
    """
    h, f = as_signed(h), as_signed(f)
    d = model.d
    dom = _domain([h, f], window, d)
    if dom is None:
        return complex(1.0) if isinstance(theta, complex) else 1.0
    s, p = model.charge_law.charges, model.charge_law.weights

    def integrand(y):
        hv = h.values(y) if not h.is_zero else np.zeros(len(y))
        fv = f.values(y) if not f.is_zero else np.zeros(len(y))
        return np.expm1(np.abs(s)[None, :] * hv[:, None] + theta * s[None, :] * fv[:, None]) @ p

    val = np.exp(model.z * integrate_box(integrand, *dom, _breaks([h, f], d), tol))
    return complex(val) if isinstance(theta, complex) else float(val)


def free_char_oracle(model, f, window=None, tol: float = 1e-8) -> complex:
    """C_0(f) = exp(int psi(f(y)) dy), psi(t) = z sum_i p_i (e^{i s_i t} - 1)."""
    f = as_signed(f)
    dom = _domain([f], window, model.d)
    if dom is None:
        return complex(1.0)
    s, p = model.charge_law.charges, model.charge_law.weights

    def integrand(y):
        return np.expm1(1j * s[None, :] * f.values(y)[:, None]) @ p

    return complex(np.exp(model.z * integrate_box(integrand, *dom, _breaks([f], model.d), tol)))


def _smear_breaks(model, grid, dom):
    """Points where (G * g)(y) on the quadrature grid is not smooth (1-d tent kernels)."""
    if model.kernel.kind != "tent" or model.d != 1:
        return None
    x = grid.axis(0)
    a = model.kernel.params[1]
    pts = np.concatenate([x - a, x, x + a])
    return [pts[(pts > dom[0][0]) & (pts < dom[1][0])]]


def tilted_laplace_oracle(model, grid, h=None, f=None, window=None, tol: float = 1e-8) -> float:
    """E_{0,g}[exp(<|eta|,h> + <eta,f>)] for the gas with intensity z p_i e^{s_i b (G*g)(y)}."""
    from .configuration import smeared_cutoff

    h, f = as_signed(h), as_signed(f)
    d = model.d
    dom = _domain([h, f], window, d)
    if dom is None:
        return 1.0
    s, p = model.charge_law.charges, model.charge_law.weights
    b = model.b

    def integrand(y):
        c = smeared_cutoff(model, grid, y)
        hv = h.values(y) if not h.is_zero else np.zeros(len(y))
        fv = f.values(y) if not f.is_zero else np.zeros(len(y))
        tilt = np.exp(b * c[:, None] * s[None, :])
        return (tilt * np.expm1(np.abs(s)[None, :] * hv[:, None] + s[None, :] * fv[:, None])) @ p

    brk = _breaks([h, f], d, _smear_breaks(model, grid, dom))
    return math.exp(model.z * integrate_box(integrand, *dom, brk, tol))


def tilted_bound_oracle(model, grid, h, K: float = 1.0, window=None, tol: float = 1e-8) -> float:
    """K exp(z int sum_i p_i [e^{|s_i| h + s_i b G*g} - e^{s_i b G*g}] dy): bounds E_{0,g}[F] for F <= K e^{<|eta|,h>}."""
    return K * tilted_laplace_oracle(model, grid, h=h, window=window, tol=tol)


def uniform_bound(model, h, K: float = 1.0) -> float:
    """g-independent bound K exp(z C e^{C|h|_inf + C b beta |G|_1} int h)."""
    h = as_signed(h)
    C = model.charge_law.C
    lo, hi = h.support_box()
    integral = integrate_box(lambda y: h.values(y), lo, hi, _breaks([h], model.d))
    R = C * math.exp(C * h.sup() + C * model.b * model.beta * model.kernel.l1_norm)
    return K * math.exp(model.z * R * integral)
