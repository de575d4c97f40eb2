"""Exact reference solutions in one dimension.

Everything here is evaluated in closed form from piecewise-constant
coefficients: the flux ``a u'`` is an antiderivative of ``-f``, so the solution
of ``-(a u')' = f`` on (0, 1) with ``u(0) = u(1) = 0`` is

    u'(x) = (c - F(x)) / a(x),   F(x) = int_0^x f,
    c     = int_0^1 F/a  /  int_0^1 1/a.

The cell functions follow from the same first-integral argument:

    w' = a*/a - 1                         (periodic, zero mean)
    psi' = (b_bar - b (1 + w')) / a       (periodic, zero mean)
    chi' = -1_{(0,1)} b (1 + w') / a      (chi = 0 left of the unit cell)

For chi, ``a chi' + 1_{(0,1)} b (1 + w')`` is constant on the real line and
square integrability of ``chi'`` forces that constant to vanish. chi is then
fixed up to a constant, which we choose so that chi vanishes on (-inf, 0];
it equals ``chi_inf = -int_0^1 b (1 + w')/a`` on [1, inf).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


@dataclass(frozen=True)
class PiecewiseCoefficient1D:
    """Piecewise-constant function on ``[t0, tn]`` (extended periodically when asked)."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.breakpoints, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or v.shape != (len(t) - 1,):
            raise ValueError("need n+1 breakpoints for n values")
        if np.any(np.diff(t) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def uniform(cls, values, lower=0.0, upper=1.0):
        values = np.asarray(values, dtype=float)
        return cls(np.linspace(lower, upper, len(values) + 1), values)

    @classmethod
    def two_phase(cls, a0, a1, fraction=0.5):
        return cls(np.array([0.0, fraction, 1.0]), np.array([a0, a1]))

    @property
    def lengths(self):
        return np.diff(self.breakpoints)

    def simplified(self):
        """Merge neighbouring pieces with equal values."""
        v = self.values
        keep = np.concatenate([[True], v[1:] != v[:-1]])
        t = np.concatenate([self.breakpoints[:-1][keep], self.breakpoints[-1:]])
        return PiecewiseCoefficient1D(t, v[keep])

    def piece_index(self, x, periodic=False):
        x = np.asarray(x, dtype=float)
        t = self.breakpoints
        if periodic:
            x = t[0] + np.mod(x - t[0], t[-1] - t[0])
        return np.clip(np.searchsorted(t, x, side="right") - 1, 0, len(self.values) - 1)

    def __call__(self, x, periodic=False):
        return self.values[self.piece_index(x, periodic)]

    def integral_of_inverse(self):
        return float(np.sum(self.lengths / self.values))

    def mean(self):
        return float(np.sum(self.lengths * self.values) / (self.breakpoints[-1] - self.breakpoints[0]))

    def on_breakpoints(self, breakpoints):
        """Same function on a finer common partition (breakpoints must include ours)."""
        t = np.asarray(breakpoints, dtype=float)
        mids = 0.5 * (t[1:] + t[:-1])
        return PiecewiseCoefficient1D(t, self(mids))


def merge_breakpoints(*coeffs):
    t = np.unique(np.concatenate([c.breakpoints for c in coeffs]))
    keep = np.concatenate([[True], np.diff(t) > 1e-14])
    return t[keep]


@dataclass(frozen=True)
class PiecewiseLinear1D:
    """Continuous piecewise-linear function given by knot values.

    Outside the knot range it is continued by periodicity (``periodic=True``)
    or by its end values (constant continuation).
    """

    knots: np.ndarray
    knot_values: np.ndarray
    periodic: bool = True

    @property
    def slopes(self):
        return np.diff(self.knot_values) / np.diff(self.knots)

    def _prepare(self, y):
        y = np.asarray(y, dtype=float)
        t = self.knots
        if self.periodic:
            y = t[0] + np.mod(y - t[0], t[-1] - t[0])
        i = np.clip(np.searchsorted(t, y, side="right") - 1, 0, len(t) - 2)
        return y, i

    def value(self, y):
        y, i = self._prepare(y)
        t = self.knots
        v = self.knot_values[i] + self.slopes[i] * (y - t[i])
        if not self.periodic:
            v = np.where(y <= t[0], self.knot_values[0], v)
            v = np.where(y >= t[-1], self.knot_values[-1], v)
        return v

    def derivative(self, y):
        y, i = self._prepare(y)
        d = self.slopes[i]
        if not self.periodic:
            d = np.where((y < self.knots[0]) | (y >= self.knots[-1]), 0.0, d)
        return d

    def __call__(self, y):
        return self.value(y), self.derivative(y)


def _integrate_slopes(knots, slopes, start=0.0):
    return np.concatenate([[start], start + np.cumsum(slopes * np.diff(knots))])


def _zero_mean(knots, vals):
    mean = np.sum(0.5 * (vals[1:] + vals[:-1]) * np.diff(knots)) / (knots[-1] - knots[0])
    return vals - mean


@dataclass(frozen=True)
class Corrector1D:
    a: PiecewiseCoefficient1D
    a_star: float
    w0: PiecewiseLinear1D


def corrector_1d(a):
    """Harmonic mean a* and the zero-mean periodic corrector w0 (w0' = a*/a - 1)."""
    a_star = 1.0 / a.integral_of_inverse()
    vals = _integrate_slopes(a.breakpoints, a_star / a.values - 1.0)
    return Corrector1D(a, a_star, PiecewiseLinear1D(a.breakpoints, _zero_mean(a.breakpoints, vals)))


def effective_b_1d(a, b):
    """b_bar = int b (1 + w0')^2 = a*^2 int b / a^2."""
    t = merge_breakpoints(a, b)
    aa, bb = a.on_breakpoints(t), b.on_breakpoints(t)
    a_star = 1.0 / a.integral_of_inverse()
    return float(a_star**2 * np.sum(np.diff(t) * bb.values / aa.values**2))


def psi_1d(a, b):
    """Zero-mean periodic psi with a psi' + b (1 + w0') = b_bar."""
    t = merge_breakpoints(a, b)
    aa, bb = a.on_breakpoints(t), b.on_breakpoints(t)
    a_star = 1.0 / a.integral_of_inverse()
    b_bar = effective_b_1d(a, b)
    slopes = (b_bar - bb.values * a_star / aa.values) / aa.values
    vals = _integrate_slopes(t, slopes)
    return PiecewiseLinear1D(t, _zero_mean(t, vals))


@dataclass(frozen=True)
class Chi1D:
    """Whole-line defect corrector: zero on (-inf, 0], constant ``chi_inf`` on [1, inf)."""

    profile: PiecewiseLinear1D

    @property
    def chi_inf(self):
        return float(self.profile.knot_values[-1])

    def __call__(self, y):
        return self.profile(y)


def chi_1d(a, b):
    t = merge_breakpoints(a, b)
    aa, bb = a.on_breakpoints(t), b.on_breakpoints(t)
    a_star = 1.0 / a.integral_of_inverse()
    slopes = -bb.values * a_star / aa.values**2
    vals = _integrate_slopes(t, slopes)
    return Chi1D(PiecewiseLinear1D(t, vals, periodic=False))


# sources and the exact solver -----------------------------------------------------


@dataclass(frozen=True)
class Source1D:
    """Right-hand side f with antiderivatives F1 = int_0^x f and F2 = int_0^x F1."""

    f: object
    F1: object
    F2: object

    @classmethod
    def constant(cls, c=1.0):
        return cls(lambda x: c + 0.0 * np.asarray(x), lambda x: c * np.asarray(x), lambda x: 0.5 * c * np.asarray(x) ** 2)

    @classmethod
    def sine(cls, amplitude=1.0):
        """f = amplitude * pi^2 sin(pi x), so that -u'' = f has u = amplitude sin(pi x)."""
        A, pi = amplitude, np.pi
        return cls(
            lambda x: A * pi**2 * np.sin(pi * np.asarray(x)),
            lambda x: A * pi * (1.0 - np.cos(pi * np.asarray(x))),
            lambda x: A * (pi * np.asarray(x) - np.sin(pi * np.asarray(x))),
        )

    @classmethod
    def polynomial(cls, coeffs):
        p = Polynomial(coeffs)
        p1 = p.integ(lbnd=0.0)
        p2 = p1.integ(lbnd=0.0)
        return cls(p, p1, p2)

    @classmethod
    def piecewise_constant(cls, coeff):
        """Source equal to a PiecewiseCoefficient1D on [0, 1]."""
        t, v = coeff.breakpoints, coeff.values
        F1k = _integrate_slopes(t, v)
        F2k = np.concatenate([[0.0], np.cumsum(F1k[:-1] * np.diff(t) + 0.5 * v * np.diff(t) ** 2)])

        def idx(x):
            return np.clip(np.searchsorted(t, x, side="right") - 1, 0, len(v) - 1)

        def f(x):
            return v[idx(x)]

        def F1(x):
            x = np.asarray(x, dtype=float)
            i = idx(x)
            return F1k[i] + v[i] * (x - t[i])

        def F2(x):
            x = np.asarray(x, dtype=float)
            i = idx(x)
            s = x - t[i]
            return F2k[i] + F1k[i] * s + 0.5 * v[i] * s**2

        return cls(f, F1, F2)

    @classmethod
    def from_spec(cls, spec):
        spec = spec or {"kind": "sine"}
        kind = spec.get("kind", "sine")
        if kind == "sine":
            return cls.sine(spec.get("amplitude", 1.0))
        if kind == "constant":
            return cls.constant(spec.get("value", 1.0))
        if kind == "polynomial":
            return cls.polynomial(spec["coefficients"])
        raise ValueError(f"unknown 1D source kind {kind!r}")


@dataclass(frozen=True)
class Solution1D:
    a: PiecewiseCoefficient1D
    source: Source1D
    flux_constant: float
    _knot_u: np.ndarray

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        i = self.a.piece_index(x)
        t = self.a.breakpoints
        c, F1, F2 = self.flux_constant, self.source.F1, self.source.F2
        u = self._knot_u[i] + (c * (x - t[i]) - (F2(x) - F2(t[i]))) / self.a.values[i]
        du = (c - F1(x)) / self.a.values[i]
        return u, du

    def flux(self, x):
        return self.flux_constant - self.source.F1(np.asarray(x, dtype=float))


def exact_solve_1d(a, source):
    """Exact solution of -(a u')' = f on (0, 1), u(0) = u(1) = 0, for piecewise-constant a."""
    t = a.breakpoints
    if abs(t[0]) > 1e-14 or abs(t[-1] - 1.0) > 1e-14:
        raise ValueError("coefficient must be given on [0, 1]")
    dF2 = np.diff(source.F2(t))
    c = float(np.sum(dF2 / a.values) / np.sum(np.diff(t) / a.values))
    incr = (c * np.diff(t) - dF2) / a.values
    knot_u = np.concatenate([[0.0], np.cumsum(incr)])
    return Solution1D(a, source, c, knot_u)


def oscillatory_coefficient(a_cell, epsilon, b_cell=None, eta=0.0, X=None):
    """Unfold ``a(x/eps) + eta X_k b(x/eps)`` on (0, 1) into one PiecewiseCoefficient1D."""
    N = int(round(1.0 / epsilon))
    cells = [a_cell] if b_cell is None else [a_cell, b_cell]
    t_cell = merge_breakpoints(*cells)
    aa = a_cell.on_breakpoints(t_cell).values
    k = np.arange(N)
    t = (k[:, None] + t_cell[None, :-1]).ravel() / N
    t = np.concatenate([t, [1.0]])
    vals = np.tile(aa, N)
    if b_cell is not None and X is not None and eta != 0.0:
        bb = b_cell.on_breakpoints(t_cell).values
        vals = vals + eta * np.repeat(np.asarray(X, dtype=float), len(aa)) * np.tile(bb, N)
    return PiecewiseCoefficient1D(t, vals)


# two-scale expansion and rate check ----------------------------------------------


@dataclass(frozen=True)
class CellData1D:
    a: PiecewiseCoefficient1D
    b: PiecewiseCoefficient1D
    a_star: float
    b_bar: float
    w0: PiecewiseLinear1D
    psi: PiecewiseLinear1D
    chi: Chi1D

    @classmethod
    def build(cls, a, b):
        cor = corrector_1d(a)
        return cls(a, b, cor.a_star, effective_b_1d(a, b), cor.w0, psi_1d(a, b), chi_1d(a, b))


def lattice_chi_sum(chi, coeffs, y):
    """S(y) = sum_k c_k chi(y - k) over k = 0..N-1 and its y-derivative.

    chi vanishes left of 0 and equals chi_inf right of 1, so only the cell
    containing y contributes a non-constant part.
    """
    c = np.asarray(coeffs, dtype=float)
    N = len(c)
    y = np.asarray(y, dtype=float)
    k0 = np.clip(np.floor(y).astype(np.int64), 0, N - 1)
    before = np.concatenate([[0.0], np.cumsum(c)])[k0]
    val, der = chi(y - k0)
    return chi.chi_inf * before + c[k0] * val, c[k0] * der


def expansion_1d(cell, source, epsilon, eta=0.0, mean_x=0.0, X=None):
    """Evaluator of the two-scale expansion v and v' on (0, 1)."""
    u0 = exact_solve_1d(PiecewiseCoefficient1D(np.array([0.0, 1.0]), np.array([cell.a_star])), source)
    ratio = -cell.b_bar / cell.a_star  # u1bar* = ratio * u0* since both solve constant-coefficient problems
    coeffs = None if X is None else np.asarray(X, dtype=float) - mean_x

    def v(x):
        x = np.asarray(x, dtype=float)
        y = x / epsilon
        U, dU = u0(x)
        d2U = -source.f(x) / cell.a_star
        scale = 1.0 + eta * mean_x * ratio
        w, dw = cell.w0(y)
        val = scale * U + epsilon * w * scale * dU
        der = scale * dU + dw * scale * dU + epsilon * w * scale * d2U
        if eta != 0.0:
            p, dp = cell.psi(y)
            val = val + eta * mean_x * epsilon * p * dU
            der = der + eta * mean_x * (dp * dU + epsilon * p * d2U)
            if coeffs is not None:
                S, dS = lattice_chi_sum(cell.chi, coeffs, y)
                val = val + eta * epsilon * S * dU
                der = der + eta * (dS * dU + epsilon * S * d2U)
        return val, der

    return v


def _quadrature_points(breakpoints):
    t = np.asarray(breakpoints)
    mid, half = 0.5 * (t[1:] + t[:-1]), 0.5 * np.diff(t)
    x = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    w = half[:, None] * _GL_WEIGHTS[None, :]
    return x.ravel(), w.ravel()


def error_norms_1d(u, v, breakpoints):
    """H1, L2 and (sampled) Linf norms of u - v with 8-point Gauss-Legendre per piece."""
    x, w = _quadrature_points(breakpoints)
    uu, du = u(x)
    vv, dv = v(x)
    e, de = uu - vv, du - dv
    l2 = float(np.sqrt(np.sum(w * e**2)))
    semi = float(np.sqrt(np.sum(w * de**2)))
    ub, _ = u(np.asarray(breakpoints))
    vb, _ = v(np.asarray(breakpoints))
    linf = float(max(np.abs(e).max(), np.abs(ub - vb).max()))
    return {"H1": float(np.hypot(l2, semi)), "L2": l2, "H1_semi": semi, "Linf": linf}


def rate_check_1d(config):
    """Monte Carlo study of E[|u - v|^2]^(1/2) in H1 and Linf from the exact 1D path.

    ``config`` keys: ``a`` and ``b`` (PiecewiseCoefficient1D), ``law`` (a
    random_field.Law), ``seed``, ``epsilons``, ``etas``, ``replicates`` and
    optionally ``source`` (Source1D).
    """
    from .random_field import cell_uniforms
    from .study import fit_rates

    epsilons = list(config["epsilons"])
    if len(epsilons) < 3:
        raise ValueError("rate check needs at least 3 epsilon values")
    a, b, law = config["a"], config["b"], config["law"]
    source = config.get("source") or Source1D.sine()
    seed, M = int(config.get("seed", 0)), int(config.get("replicates", 1))
    cell = CellData1D.build(a, b)
    mean_x, var_x = law.mean, law.variance
    rows = []
    for eps in epsilons:
        N = int(round(1.0 / eps))
        for eta in config["etas"]:
            reps = 1 if eta == 0.0 else M
            h1, linf = [], []
            for r in range(reps):
                X = law.transform(cell_uniforms(seed, r, N, 1))
                coef = oscillatory_coefficient(a, eps, b, eta, X)
                u = exact_solve_1d(coef, source)
                v = expansion_1d(cell, source, eps, eta, mean_x, X)
                err = error_norms_1d(u, v, coef.breakpoints)
                h1.append(err["H1"] ** 2)
                linf.append(err["Linf"] ** 2)
            h1, linf = np.array(h1), np.array(linf)
            stat = float(np.sqrt(h1.mean()))
            se = float(h1.std(ddof=1) / np.sqrt(reps) / (2 * stat)) if reps > 1 and stat > 0 else 0.0
            rows.append({"eps": eps, "eta": eta, "M": reps, "err_H1": stat, "stderr": se,
                         "err_Linf": float(np.sqrt(linf.mean()))})
    zero = [r for r in rows if r["eta"] == 0.0]
    out = {"rows": rows, "a_star": cell.a_star, "b_bar": cell.b_bar, "var_x": var_x}
    if len(zero) >= 3:
        out["slope_H1_eta0"] = fit_rates(zero, "eps_slope")["slope"]
        out["slope_Linf_eta0"] = fit_rates(zero, "eps_slope", key="err_Linf")["slope"]
    if len(rows) >= 6 and any(r["eta"] != 0.0 for r in rows):
        out["model_fit"] = fit_rates(rows, "full_model", basis="1d")
    return out
