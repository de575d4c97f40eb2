"""Oscillatory, homogenized and auxiliary solutions, and the two-scale expansion.

All fine problems are posed on the unit box with homogeneous Dirichlet data.
The macro problems are solved on the same grid as the fine ones. The
expansion v is never differentiated numerically: its gradient is built by
the product rule from exact corrector gradients (taken with respect to the
fast variable, hence without an epsilon factor) and nodal macro
derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from . import oracle_1d
from .errors import AlignmentError, GridMismatchError
from .grid_fem import (
    DiscreteField,
    Factorization,
    StructuredGrid,
    MatrixField,
    assemble_diffusion,
    assemble_divergence_rhs,
    assemble_mass,
    assemble_source_rhs,
    nodal_gradient,
    norm_from_quadrature,
    periodic_eval,
    solve,
)
from .random_field import check_alignment, lattice_index, oscillating


def make_source(spec, dim):
    """Callable f(points) for a source spec ``{"kind": "sine" | "constant", ...}``.

    ``sine`` is ``amplitude * d pi^2 prod sin(pi x_i)``, for which the
    Laplacian problem has solution ``amplitude * prod sin(pi x_i)``.
    """
    spec = spec or {"kind": "sine"}
    kind = spec.get("kind", "sine")
    if kind == "sine":
        amp = float(spec.get("amplitude", 1.0))
        return lambda x: amp * dim * np.pi**2 * np.prod(np.sin(np.pi * x), axis=-1)
    if kind == "constant":
        c = float(spec.get("value", 1.0))
        return lambda x: np.full(x.shape[:-1], c)
    raise ValueError(f"unknown source kind {kind!r}")


def _flux(coeff_values, grads):
    return np.einsum("eab,egb->ega", coeff_values, grads)


def _solve_with(system, rhs, method, rtol, lu=None):
    if lu is not None:
        return lu.solve(rhs)
    return solve(system.with_rhs(rhs), method=method, rtol=rtol)


# fine problems -------------------------------------------------------------------------


def solve_oscillatory(realization, f, method="cg", rtol=1e-10):
    """u_eta^eps: -div[A_eta(x/eps) grad u] = f with u = 0 on the boundary."""
    grid = realization.grid
    system = assemble_diffusion(grid, realization.coefficient)
    return solve(system.with_rhs(assemble_source_rhs(grid, f)), method=method, rtol=rtol)


def solve_u0_eps(cell, epsilon, grid, f, method="cg", rtol=1e-10, lu=None):
    """u_0^eps for the purely periodic coefficient A_per(x/eps)."""
    check_alignment(grid, epsilon)
    system = assemble_diffusion(grid, oscillating(cell.A, epsilon, grid))
    return _solve_with(system, assemble_source_rhs(grid, f), method, rtol, lu)


def periodic_factorization(cell, epsilon, grid):
    """LU of the A_per(x/eps) stiffness, shared by u0^eps, u1bar^eps, u1^eps and phi_k^eps."""
    check_alignment(grid, epsilon)
    return Factorization(assemble_diffusion(grid, oscillating(cell.A, epsilon, grid)))


def solve_u1bar_eps(epsilon, cell, u0_eps, method="cg", rtol=1e-10, lu=None):
    """-div[A_per(x/eps) grad u] = div[B_per(x/eps) grad u0^eps]."""
    grid = u0_eps.grid
    B = oscillating(cell.B, epsilon, grid)
    _, g = u0_eps.at_quadrature()
    system = assemble_diffusion(grid, oscillating(cell.A, epsilon, grid))
    return _solve_with(system, assemble_divergence_rhs(grid, _flux(B.values, g)), method, rtol, lu)


def solve_u1_eps(realization, cell, u0_eps, method="cg", rtol=1e-10, lu=None):
    """-div[A_per(x/eps) grad u] = div[A_1(x/eps) grad u0^eps], A_1 = sum_k 1_{Y+k} X_k B_per."""
    grid = u0_eps.grid
    if not grid.same_as(realization.grid):
        raise GridMismatchError("realization and u0^eps live on different grids")
    _, g = u0_eps.at_quadrature()
    A1 = realization.B_eps.values * realization.X_per_element[:, None, None]
    system = assemble_diffusion(grid, realization.A_eps)
    return _solve_with(system, assemble_divergence_rhs(grid, _flux(A1, g)), method, rtol, lu)


def in_lattice(k, epsilon, dim):
    """Whether eps(Y + k) meets the unit box, i.e. k in I_eps."""
    N = int(round(1.0 / epsilon))
    k = np.atleast_1d(k)
    return len(k) == dim and bool(np.all((k >= 0) & (k < N)))


class PhiLoads:
    """Load vectors of div[1_{Y+k}(x/eps) B_per(x/eps) grad u0^eps], one per lattice cell."""

    def __init__(self, epsilon, cell, u0_eps):
        grid = u0_eps.grid
        self.grid = grid
        self.epsilon = epsilon
        self.N, _ = check_alignment(grid, epsilon)
        B = oscillating(cell.B, epsilon, grid)
        _, g = u0_eps.at_quadrature()
        F = _flux(B.values, g)
        self.local = -np.einsum("g,egd,gjd->ej", grid.gauss_weights, F, grid.shape_gradients)
        k = lattice_index(grid, epsilon)
        flat = np.ravel_multi_index(tuple(k.T), (self.N,) * grid.dim)
        order = np.argsort(flat, kind="stable")
        self._order = order
        self._starts = np.searchsorted(flat[order], np.arange(self.N**grid.dim + 1))

    @property
    def n_cells(self):
        return self.N**self.grid.dim

    def load(self, flat_k):
        els = self._order[self._starts[flat_k] : self._starts[flat_k + 1]]
        dofs = self.grid.element_dofs[els].ravel()
        vals = self.local[els].ravel()
        keep = dofs >= 0
        out = np.zeros(self.grid.n_dofs)
        np.add.at(out, dofs[keep], vals[keep])
        return out


def solve_phi_k(epsilon, cell, u0_eps, k, method="cg", rtol=1e-10, lu=None):
    """phi_k^eps; the zero field when eps(Y + k) misses the domain."""
    grid = u0_eps.grid
    if not in_lattice(k, epsilon, grid.dim):
        return DiscreteField.zeros(grid)
    loads = PhiLoads(epsilon, cell, u0_eps)
    flat = int(np.ravel_multi_index(tuple(np.atleast_1d(k)), (loads.N,) * grid.dim))
    system = assemble_diffusion(grid, oscillating(cell.A, epsilon, grid))
    return _solve_with(system, loads.load(flat), method, rtol, lu)


def iter_phi(epsilon, cell, u0_eps, lu=None, batch=32):
    """Yield (flat k, nodal DOF vector of phi_k^eps) for every k in I_eps, in C order of k."""
    loads = PhiLoads(epsilon, cell, u0_eps)
    lu = lu or periodic_factorization(cell, epsilon, u0_eps.grid)
    n = loads.n_cells
    for start in range(0, n, batch):
        ks = range(start, min(start + batch, n))
        X = lu.solve_many(np.stack([loads.load(k) for k in ks], axis=1))
        for j, k in enumerate(ks):
            yield k, X[:, j]


def h1_gram(grid):
    """Gram matrix of the H1 inner product on the DOFs."""
    return assemble_diffusion(grid, MatrixField.constant(grid, np.eye(grid.dim))).matrix + assemble_mass(grid)


# macro problems ---------------------------------------------------------------------------


def _qp_from_nodal(grid, nodal):
    """Q1 interpolant of a full nodal array: values (ne, G) and gradients (ne, G, d)."""
    ev = np.asarray(nodal).ravel()[grid.element_nodes]
    return ev @ grid.shape_values.T, np.einsum("ej,gjd->egd", ev, grid.shape_gradients)


@dataclass(frozen=True, eq=False)
class MacroSolution:
    u0_star: DiscreteField
    u1bar_star: DiscreteField
    du0: np.ndarray  # (d, *node_shape)
    du1: np.ndarray
    d2u0: np.ndarray  # (d, d, *node_shape), d2u[q, p] = d_q d_p u
    d2u1: np.ndarray
    A_star: np.ndarray
    B_bar: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def grid(self):
        return self.u0_star.grid

    def second_difference_max(self):
        return float(max(np.abs(self.d2u0).max(), np.abs(self.d2u1).max()))

    def macro_derivative(self, which, p):
        """(qp values, qp gradients, nodal values) of d_p u0* (which=0) or d_p u1bar* (which=1)."""
        key = (which, p)
        if key not in self._cache:
            du, d2u = (self.du0, self.d2u0) if which == 0 else (self.du1, self.d2u1)
            grid = self.grid
            vals, _ = _qp_from_nodal(grid, du[p])
            grads = np.stack([_qp_from_nodal(grid, d2u[q, p])[0] for q in range(grid.dim)], axis=-1)
            self._cache[key] = (vals, grads, du[p].ravel())
        return self._cache[key]


def solve_macro(correctors, f, grid, method="cg", rtol=1e-10):
    """u0* and u1bar* on ``grid`` plus centred-difference derivative fields."""
    A_star, B_bar = correctors.A_star, correctors.B_bar
    system = assemble_diffusion(grid, MatrixField.constant(grid, A_star))
    u0 = solve(system.with_rhs(assemble_source_rhs(grid, f)), method=method, rtol=rtol)
    if np.any(B_bar):
        _, g = u0.at_quadrature()
        rhs = assemble_divergence_rhs(grid, np.einsum("ab,egb->ega", B_bar, g))
        u1 = solve(system.with_rhs(rhs), method=method, rtol=rtol)
    else:
        u1 = DiscreteField.zeros(grid)
    du0 = nodal_gradient(grid, u0.nodal())
    du1 = nodal_gradient(grid, u1.nodal())
    d2u0 = np.stack([nodal_gradient(grid, du0[p]) for p in range(grid.dim)], axis=1)
    d2u1 = np.stack([nodal_gradient(grid, du1[p]) for p in range(grid.dim)], axis=1)
    if not (np.isfinite(d2u0).all() and np.isfinite(d2u1).all()):
        raise FloatingPointError("macro second differences are not finite")
    return MacroSolution(u0, u1, du0, du1, d2u0, d2u1, A_star, B_bar)


# micro samples -------------------------------------------------------------------------------


@dataclass
class MicroSample:
    """A fast-variable function sampled on the fine grid; gradients are w.r.t. y = x/eps."""

    qp_val: np.ndarray
    qp_grad: np.ndarray
    node_val: np.ndarray


def sample_cell_function(cell_field, epsilon, grid):
    qv, qg = periodic_eval(cell_field, grid.quadrature_points() / epsilon)
    nv, _ = periodic_eval(cell_field, grid.node_coordinates().reshape(-1, grid.dim) / epsilon)
    return MicroSample(qv, qg, nv)


class ChiLattice:
    """Evaluates lattice sums  sum_k c_k chi_p(x/eps - k)  over k in I_eps on the fine grid.

    In 2D the truncated chi is resampled once on a kernel grid aligned with the
    fine grid (same h/eps), after which the sum over k is a discrete
    convolution of the coefficient comb with that kernel. In 1D chi is the
    exact whole-line profile and the sum is a cumulative sum.
    """

    def __init__(self, chi, epsilon, grid):
        self.chi = list(chi)
        self.epsilon = epsilon
        self.grid = grid
        self.N, self.m = check_alignment(grid, epsilon)
        self.dim = grid.dim
        if self.dim == 1:
            return
        R = {c.radius for c in self.chi if c is not None}
        if len(R) > 1:
            raise ValueError("all chi fields must share the truncation radius")
        self.R = R.pop() if R else 0
        if self.m % 2:
            raise AlignmentError("the chi kernel needs an even number of cells per epsilon-cell")
        self.offset = (2 * self.R - 1) * self.m // 2
        if self.R:
            kg = StructuredGrid(self.dim, (0.5 - self.R,) * self.dim, (0.5 + self.R,) * self.dim,
                                (2 * self.R * self.m,) * self.dim)
            kshape = kg.element_shape
            nshape = kg.node_shape
            G = len(kg.gauss_weights)
            qp = kg.quadrature_points()
            nodes = kg.node_coordinates().reshape(-1, self.dim)
        self.kernels = []
        for c in self.chi:
            if c is None:
                self.kernels.append(None)
                continue
            qv, qg = c(qp)
            nv, _ = c(nodes)
            self.kernels.append((qv.reshape(kshape + (G,)), qg.reshape(kshape + (G, self.dim)), nv.reshape(nshape)))

    def _zero(self):
        g = self.grid
        G = len(g.gauss_weights)
        return MicroSample(np.zeros((g.n_elements, G)), np.zeros((g.n_elements, G, g.dim)), np.zeros(int(np.prod(g.node_shape))))

    def sum(self, coeffs):
        """One MicroSample per direction p for the given lattice coefficients (shape (N,)*d)."""
        coeffs = np.asarray(coeffs, dtype=float).reshape((self.N,) * self.dim)
        g = self.grid
        if self.dim == 1:
            out = []
            yq = g.quadrature_points()[..., 0] / self.epsilon
            yn = g.node_coordinates()[..., 0].ravel() / self.epsilon
            for c in self.chi:
                qv, qd = oracle_1d.lattice_chi_sum(c, coeffs, yq)
                nv, _ = oracle_1d.lattice_chi_sum(c, coeffs, yn)
                out.append(MicroSample(qv, qd[..., None], nv))
            return out
        M, o = self.N * self.m, self.offset
        comb = np.zeros((M,) * self.dim)
        comb[tuple(slice(0, M, self.m) for _ in range(self.dim))] = coeffs
        out = []
        for ker in self.kernels:
            if ker is None:
                out.append(self._zero())
                continue
            kq, kg, kn = ker
            el = tuple(slice(o, o + M) for _ in range(self.dim))
            nd = tuple(slice(o, o + M + 1) for _ in range(self.dim))
            qv = fftconvolve(comb[..., None], kq, mode="full", axes=tuple(range(self.dim)))[el]
            qg = fftconvolve(comb[..., None, None], kg, mode="full", axes=tuple(range(self.dim)))[el]
            nv = fftconvolve(comb, kn, mode="full")[nd]
            G = qv.shape[-1]
            out.append(MicroSample(qv.reshape(-1, G), qg.reshape(-1, G, self.dim), nv.ravel()))
        return out

    def single(self, k):
        """chi_p(x/eps - k) on the elements where it can be non-zero.

        Returns ``(element_slices, [(qp_val, qp_grad) per p])`` with arrays of
        shape ``patch_shape + (G,)`` and ``patch_shape + (G, d)``.
        """
        g = self.grid
        k = tuple(int(i) for i in np.atleast_1d(k))
        if self.dim == 1:
            yq = g.quadrature_points()[..., 0] / self.epsilon - k[0]
            vals = []
            for c in self.chi:
                v, dv = c(yq)
                vals.append((v, dv[..., None]))
            return (slice(0, g.cells[0]),), vals
        M, o, m = self.N * self.m, self.offset, self.m
        el, ker = [], []
        for a in range(self.dim):
            lo = max(k[a] * m - o, 0)
            hi = min(k[a] * m - o + 2 * self.R * m, M)
            el.append(slice(lo, hi))
            ker.append(slice(lo - k[a] * m + o, hi - k[a] * m + o))
        el, ker = tuple(el), tuple(ker)
        vals = []
        for kern in self.kernels:
            if kern is None:
                shape = tuple(s.stop - s.start for s in el) + (len(g.gauss_weights),)
                vals.append((np.zeros(shape), np.zeros(shape + (self.dim,))))
            else:
                vals.append((kern[0][ker], kern[1][ker]))
        return el, vals


# the two-scale expansion ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ExpansionField:
    """v_eta^eps at the fine Gauss points (value and product-rule gradient) and at every node."""

    grid: object
    qp_val: np.ndarray
    qp_grad: np.ndarray
    node_val: np.ndarray
    epsilon: float

    def error_against(self, u):
        """Norms of u - v: H1, L2, H1_semi by Gauss quadrature; Linf over all nodes."""
        if not u.grid.same_as(self.grid):
            raise GridMismatchError("field and expansion live on different grids")
        uv, ug = u.at_quadrature()
        dv, dg = uv - self.qp_val, ug - self.qp_grad
        out = {k: norm_from_quadrature(self.grid, dv, dg, k) for k in ("H1", "L2", "H1_semi")}
        out["Linf"] = float(np.abs(u.nodal().ravel() - self.node_val).max())
        return out


class _Accumulator:
    def __init__(self, field):
        v, g = field.at_quadrature()
        self.qv, self.qg = v.copy(), g.copy()
        self.nv = field.nodal().ravel().copy()

    def add_field(self, field, weight):
        v, g = field.at_quadrature()
        self.qv += weight * v
        self.qg += weight * g
        self.nv += weight * field.nodal().ravel()

    def add_term(self, epsilon, micro, macro, weight):
        """weight * eps * g(x/eps) m(x), differentiated by the product rule."""
        mv, mg, mn = macro
        self.qv += weight * epsilon * micro.qp_val * mv
        self.qg += weight * (micro.qp_grad * mv[..., None] + epsilon * micro.qp_val[..., None] * mg)
        self.nv += weight * epsilon * micro.node_val * mn


def build_expansion(correctors, macro, realization=None, epsilon=None, chi_lattice=None):
    """v = u0* + eta E(X) u1bar*
         + eps sum_p [ w_p (d_p u0* + eta E(X) d_p u1bar*) + eta E(X) psi_p d_p u0*
                       + eta sum_k (X_k - E(X)) chi_p(x/eps - k) d_p u0* ].

    Without a realization this is the classical expansion of u_0^eps.
    """
    grid = macro.grid
    if realization is not None:
        if epsilon is not None and abs(epsilon - realization.epsilon) > 1e-14:
            raise ValueError("epsilon does not match the realization")
        epsilon = realization.epsilon
        if not realization.grid.same_as(grid):
            raise GridMismatchError("realization and macro solution live on different grids")
    if epsilon is None:
        raise ValueError("epsilon is required without a realization")
    check_alignment(grid, epsilon)
    if not correctors.w0 or (realization is not None and realization.model.eta != 0.0 and not correctors.psi):
        raise ValueError("corrector fields missing")
    eta = realization.model.eta if realization is not None else 0.0
    mean_x = realization.model.law.mean if realization is not None else 0.0
    acc = _Accumulator(macro.u0_star)
    d = grid.dim
    if eta != 0.0 and mean_x != 0.0:
        acc.add_field(macro.u1bar_star, eta * mean_x)
    du0 = [macro.macro_derivative(0, p) for p in range(d)]
    for p in range(d):
        w = sample_cell_function(correctors.w0[p], epsilon, grid)
        acc.add_term(epsilon, w, du0[p], 1.0)
        if eta != 0.0 and mean_x != 0.0:
            acc.add_term(epsilon, w, macro.macro_derivative(1, p), eta * mean_x)
            acc.add_term(epsilon, sample_cell_function(correctors.psi[p], epsilon, grid), du0[p], eta * mean_x)
    if eta != 0.0 and realization.model.law.variance > 0.0 and any(c is not None for c in correctors.chi):
        lattice = chi_lattice or ChiLattice(correctors.chi, epsilon, grid)
        S = lattice.sum(realization.X - mean_x)
        for p in range(d):
            acc.add_term(epsilon, S[p], du0[p], eta)
    return ExpansionField(grid, acc.qv, acc.qg, acc.nv, float(epsilon))


def build_u1bar_expansion(correctors, macro, epsilon):
    """v1bar = u1bar* + eps sum_p (w_p d_p u1bar* + psi_p d_p u0*)."""
    grid = macro.grid
    acc = _Accumulator(macro.u1bar_star)
    for p in range(grid.dim):
        acc.add_term(epsilon, sample_cell_function(correctors.w0[p], epsilon, grid), macro.macro_derivative(1, p), 1.0)
        acc.add_term(epsilon, sample_cell_function(correctors.psi[p], epsilon, grid), macro.macro_derivative(0, p), 1.0)
    return ExpansionField(grid, acc.qv, acc.qg, acc.nv, float(epsilon))


def phi_expansion_error_sq(phi_values, k, lattice, macro, gram):
    """|phi_k - eps sum_p chi_p(x/eps - k) d_p u0*|^2_H1.

    Expanded as |phi|^2 - 2 (phi, vbar_k) + |vbar_k|^2 with the cross terms
    integrated only where vbar_k can be non-zero.
    """
    grid = macro.grid
    eps = lattice.epsilon
    phi_values = np.asarray(phi_values, dtype=float)
    full = float(phi_values @ (gram @ phi_values))
    el, chis = lattice.single(k)
    G = len(grid.gauss_weights)
    pshape = tuple(s.stop - s.start for s in el)
    idx = np.arange(grid.n_elements).reshape(grid.element_shape)[el].ravel()
    nodal = DiscreteField(grid, phi_values).nodal().ravel()
    ev = nodal[grid.element_nodes[idx]]
    pv = (ev @ grid.shape_values.T).reshape(pshape + (G,))
    pg = np.einsum("ej,gjd->egd", ev, grid.shape_gradients).reshape(pshape + (G, grid.dim))
    vv = np.zeros(pshape + (G,))
    vg = np.zeros(pshape + (G, grid.dim))
    for p in range(grid.dim):
        mv, mg, _ = macro.macro_derivative(0, p)
        mv, mg = mv[idx].reshape(pshape + (G,)), mg[idx].reshape(pshape + (G, grid.dim))
        cv, cg = chis[p]
        vv += eps * cv * mv
        vg += cg * mv[..., None] + eps * cv[..., None] * mg
    w = grid.gauss_weights
    cross = float(np.sum(w * (pv * vv)) + np.sum(w[:, None] * (pg * vg)))
    vbar = float(np.sum(w * vv**2) + np.sum(w[:, None] * vg**2))
    return max(full - 2.0 * cross + vbar, 0.0)
