"""Structured-grid Q1 finite elements.

Uniform Cartesian grids in one or two dimensions carrying multilinear
nodal elements. Coefficients are sampled once per element (at the
centroid); bilinear forms and norms are integrated with the tensor
two-point Gauss rule, which is exact for products of Q1 functions and
their gradients against element-constant coefficients.

Nodes and elements are numbered in C order over their multi-index, with
axis 0 the slowest. Degrees of freedom are the interior nodes on
``dirichlet_zero`` grids and the nodes modulo the period on ``periodic``
grids.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    EllipticityError,
    GridMismatchError,
    SolverError,
    UnsupportedDimensionError,
)

DIRICHLET = "dirichlet_zero"
PERIODIC = "periodic"

_GAUSS_1D = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
_GAUSS_W_1D = np.array([0.5, 0.5])


def _require_supported(dim):
    if dim not in (1, 2):
        raise UnsupportedDimensionError(dim)


@dataclass(frozen=True, eq=False)
class StructuredGrid:
    """Uniform Cartesian mesh of the box ``[lower, upper]``."""

    dim: int
    lower: tuple
    upper: tuple
    cells: tuple
    boundary: str = DIRICHLET

    def __post_init__(self):
        lower = tuple(float(v) for v in np.atleast_1d(self.lower))
        upper = tuple(float(v) for v in np.atleast_1d(self.upper))
        cells = tuple(int(v) for v in np.atleast_1d(self.cells))
        if len(cells) == 1 and self.dim > 1:
            cells = cells * self.dim
        if len(lower) == 1 and self.dim > 1:
            lower = lower * self.dim
        if len(upper) == 1 and self.dim > 1:
            upper = upper * self.dim
        if not (len(lower) == len(upper) == len(cells) == self.dim):
            raise ValueError("lower, upper and cells must have one entry per axis")
        if any(n < 2 for n in cells):
            raise ValueError("cells_per_axis must be >= 2 on every axis")
        if any(u <= l for l, u in zip(lower, upper)):
            raise ValueError("upper must exceed lower on every axis")
        if self.boundary not in (DIRICHLET, PERIODIC):
            raise ValueError(f"unknown boundary kind {self.boundary!r}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "cells", cells)

    @classmethod
    def unit(cls, dim, n, boundary=DIRICHLET):
        return cls(dim, (0.0,) * dim, (1.0,) * dim, (n,) * dim, boundary)

    def same_as(self, other):
        return (
            self.dim == other.dim
            and self.cells == other.cells
            and self.boundary == other.boundary
            and np.allclose(self.lower, other.lower, rtol=0, atol=1e-14)
            and np.allclose(self.upper, other.upper, rtol=0, atol=1e-14)
        )

    @property
    def h(self):
        return np.array([(u - l) / n for l, u, n in zip(self.lower, self.upper, self.cells)])

    @property
    def element_volume(self):
        return float(np.prod(self.h))

    @property
    def node_shape(self):
        return tuple(n + 1 for n in self.cells)

    @property
    def element_shape(self):
        return self.cells

    @property
    def n_elements(self):
        return int(np.prod(self.cells))

    @property
    def dof_shape(self):
        if self.boundary == PERIODIC:
            return self.cells
        return tuple(n - 1 for n in self.cells)

    @property
    def n_dofs(self):
        return int(np.prod(self.dof_shape))

    @cached_property
    def corners(self):
        return np.array(list(itertools.product((0, 1), repeat=self.dim)), dtype=int)

    @cached_property
    def node_dof(self):
        """DOF index of every node (shape ``node_shape``), -1 on Dirichlet boundary."""
        idx = np.indices(self.node_shape)
        if self.boundary == PERIODIC:
            wrapped = tuple(idx[a] % self.cells[a] for a in range(self.dim))
            return np.ravel_multi_index(wrapped, self.dof_shape)
        interior = np.ones(self.node_shape, dtype=bool)
        for a in range(self.dim):
            interior &= (idx[a] > 0) & (idx[a] < self.cells[a])
        out = np.full(self.node_shape, -1, dtype=np.int64)
        inner = tuple(idx[a][interior] - 1 for a in range(self.dim))
        out[interior] = np.ravel_multi_index(inner, self.dof_shape)
        return out

    @cached_property
    def element_nodes(self):
        """Flat node indices of each element's corners, shape (n_elements, 2**dim)."""
        e = np.indices(self.element_shape).reshape(self.dim, -1)
        cols = []
        for c in self.corners:
            cols.append(np.ravel_multi_index(tuple(e[a] + c[a] for a in range(self.dim)), self.node_shape))
        return np.stack(cols, axis=1)

    @cached_property
    def element_dofs(self):
        return self.node_dof.ravel()[self.element_nodes]

    def node_coordinates(self):
        """Coordinates of all nodes, shape ``node_shape + (dim,)``."""
        axes = [l + hh * np.arange(n + 1) for l, hh, n in zip(self.lower, self.h, self.cells)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def element_origins(self):
        e = np.indices(self.element_shape).reshape(self.dim, -1).T
        return np.asarray(self.lower) + e * self.h

    def centroids(self):
        return self.element_origins() + 0.5 * self.h

    # reference-element quadrature -------------------------------------------------

    @cached_property
    def gauss_local(self):
        """Local coordinates in [0,1]^d of the Gauss points, shape (G, dim)."""
        return np.array(list(itertools.product(_GAUSS_1D, repeat=self.dim)))

    @cached_property
    def gauss_weights(self):
        w = np.array([np.prod(c) for c in itertools.product(_GAUSS_W_1D, repeat=self.dim)])
        return w * self.element_volume

    @cached_property
    def shape_values(self):
        return shape_functions(self.gauss_local, self.corners)

    @cached_property
    def shape_gradients(self):
        return shape_gradients(self.gauss_local, self.corners) / self.h

    def quadrature_points(self):
        """Physical Gauss points, shape (n_elements, G, dim)."""
        return self.element_origins()[:, None, :] + self.gauss_local[None, :, :] * self.h


def shape_functions(xi, corners):
    """Q1 shape function values, shape (npts, 2**d), at local points ``xi``."""
    xi = np.atleast_2d(xi)
    out = np.ones((xi.shape[0], len(corners)))
    for j, c in enumerate(corners):
        for a, ca in enumerate(c):
            out[:, j] *= xi[:, a] if ca else 1.0 - xi[:, a]
    return out


def shape_gradients(xi, corners):
    """Reference gradients d/dxi of the Q1 shape functions, shape (npts, 2**d, d)."""
    xi = np.atleast_2d(xi)
    npts, d = xi.shape
    out = np.ones((npts, len(corners), d))
    for j, c in enumerate(corners):
        for k in range(d):
            for a, ca in enumerate(c):
                if a == k:
                    out[:, j, k] *= 1.0 if ca else -1.0
                else:
                    out[:, j, k] *= xi[:, a] if ca else 1.0 - xi[:, a]
    return out


@dataclass(frozen=True, eq=False)
class DiscreteField:
    grid: StructuredGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_dofs,):
            raise GridMismatchError(f"expected {self.grid.n_dofs} nodal values, got {v.shape}")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.n_dofs))

    @classmethod
    def from_function(cls, grid, fn):
        """Nodal interpolant of ``fn(points)``; boundary nodes are dropped on Dirichlet grids."""
        x = grid.node_coordinates().reshape(-1, grid.dim)
        vals = np.asarray(fn(x), dtype=float).ravel()
        dof = grid.node_dof.ravel()
        out = np.zeros(grid.n_dofs)
        keep = dof >= 0
        out[dof[keep]] = vals[keep]
        return cls(grid, out)

    def nodal(self):
        """Values at every node, shape ``grid.node_shape`` (zero on Dirichlet boundary)."""
        dof = self.grid.node_dof
        out = np.where(dof >= 0, self.values[np.maximum(dof, 0)], 0.0)
        return out

    def element_values(self):
        return self.nodal().ravel()[self.grid.element_nodes]

    def at_quadrature(self):
        """Values (n_elements, G) and gradients (n_elements, G, dim) at Gauss points."""
        ev = self.element_values()
        vals = ev @ self.grid.shape_values.T
        grads = np.einsum("ej,gjd->egd", ev, self.grid.shape_gradients)
        return vals, grads

    def __add__(self, other):
        _check_same(self.grid, other.grid)
        return DiscreteField(self.grid, self.values + other.values)

    def __sub__(self, other):
        _check_same(self.grid, other.grid)
        return DiscreteField(self.grid, self.values - other.values)

    def __mul__(self, alpha):
        return DiscreteField(self.grid, float(alpha) * self.values)

    __rmul__ = __mul__

    def __neg__(self):
        return DiscreteField(self.grid, -self.values)


def _check_same(g1, g2):
    if g1 is not g2 and not g1.same_as(g2):
        raise GridMismatchError("fields live on different grids")


@dataclass(frozen=True, eq=False)
class MatrixField:
    """Symmetric d x d matrix per element (coefficient sampled at the centroid)."""

    grid: StructuredGrid
    values: np.ndarray

    def __post_init__(self):
        d = self.grid.dim
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None, None] * np.eye(d)
        if v.shape != (self.grid.n_elements, d, d):
            raise GridMismatchError(f"expected shape {(self.grid.n_elements, d, d)}, got {v.shape}")
        scale = max(np.abs(v).max(), 1.0)
        if np.abs(v - np.swapaxes(v, 1, 2)).max() > 1e-12 * scale:
            raise EllipticityError("coefficient matrices must be symmetric")
        v = 0.5 * (v + np.swapaxes(v, 1, 2))
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, grid, fn):
        """Sample ``fn(points) -> (n, d, d) or (n,)`` at element centroids."""
        return cls(grid, fn(grid.centroids()))

    @classmethod
    def constant(cls, grid, matrix):
        m = np.atleast_2d(np.asarray(matrix, dtype=float))
        if m.shape == (1, 1):
            m = m[0, 0] * np.eye(grid.dim)
        return cls(grid, np.broadcast_to(m, (grid.n_elements, grid.dim, grid.dim)))

    def eigen_bounds(self):
        ev = np.linalg.eigvalsh(self.values)
        return float(ev.min()), float(ev.max())

    def check_elliptic(self, c_min=0.0):
        lo, hi = self.eigen_bounds()
        if not lo > c_min:
            raise EllipticityError(f"smallest eigenvalue {lo:.3e} is not above {c_min:.3e}")
        return lo, hi

    def __add__(self, other):
        _check_same(self.grid, other.grid)
        return MatrixField(self.grid, self.values + other.values)

    def __mul__(self, alpha):
        alpha = np.asarray(alpha, dtype=float)
        if alpha.ndim == 1:
            return MatrixField(self.grid, self.values * alpha[:, None, None])
        return MatrixField(self.grid, self.values * float(alpha))

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class LinearSystem:
    grid: StructuredGrid
    matrix: sp.csr_matrix
    rhs: np.ndarray
    constraint: str = "none"

    def with_rhs(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape != (self.grid.n_dofs,):
            raise GridMismatchError(f"rhs has shape {rhs.shape}, expected ({self.grid.n_dofs},)")
        return replace(self, rhs=rhs)


# assembly -----------------------------------------------------------------------


def _scatter(grid, local):
    """Sum element-local vectors (n_elements, 2**d) into a DOF vector."""
    dofs = grid.element_dofs.ravel()
    vals = np.asarray(local).ravel()
    keep = dofs >= 0
    return np.bincount(dofs[keep], weights=vals[keep], minlength=grid.n_dofs)


def _assemble_local(grid, local):
    nl = local.shape[1]
    dofs = grid.element_dofs
    rows = np.repeat(dofs, nl, axis=1).ravel()
    cols = np.tile(dofs, (1, nl)).ravel()
    vals = local.ravel()
    keep = (rows >= 0) & (cols >= 0)
    mat = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(grid.n_dofs, grid.n_dofs))
    return mat.tocsr()


def element_stiffness(grid, coeff_values):
    """Element matrices of  int grad(v)^T A grad(u)  for element-constant A."""
    dN = grid.shape_gradients  # (G, nl, d)
    w = grid.gauss_weights
    ref = np.einsum("g,gia,gjb->abij", w, dN, dN)
    return np.einsum("eab,abij->eij", coeff_values, ref)


def assemble_diffusion(grid, coeff):
    """Stiffness operator of  int (grad v)^T A grad u  as a LinearSystem (zero rhs)."""
    _require_supported(grid.dim)
    if not coeff.grid.same_as(grid):
        raise GridMismatchError("coefficient field lives on another grid")
    coeff.check_elliptic()
    K = _assemble_local(grid, element_stiffness(grid, coeff.values))
    constraint = "mean_zero" if grid.boundary == PERIODIC else "none"
    return LinearSystem(grid, K, np.zeros(grid.n_dofs), constraint)


def assemble_mass(grid):
    _require_supported(grid.dim)
    N = grid.shape_values
    local = np.einsum("g,gi,gj->ij", grid.gauss_weights, N, N)
    return _assemble_local(grid, np.broadcast_to(local, (grid.n_elements,) + local.shape))


def assemble_divergence_rhs(grid, flux):
    """Load vector of ``div F``: entries ``-int F . grad(phi_i)``.

    ``flux`` is either element-constant, shape (n_elements, d), or given at the
    Gauss points, shape (n_elements, G, d).
    """
    _require_supported(grid.dim)
    F = np.asarray(flux, dtype=float)
    G = len(grid.gauss_weights)
    if F.shape == (grid.n_elements, grid.dim):
        F = np.broadcast_to(F[:, None, :], (grid.n_elements, G, grid.dim))
    if F.shape != (grid.n_elements, G, grid.dim):
        raise GridMismatchError(f"flux has shape {F.shape}")
    local = -np.einsum("g,egd,gjd->ej", grid.gauss_weights, F, grid.shape_gradients)
    return _scatter(grid, local)


def assemble_source_rhs(grid, f):
    """Load vector ``int f phi_i`` with f sampled at element centroids.

    ``f`` is a callable of points (n, d) or an array of per-element values.
    """
    _require_supported(grid.dim)
    fe = f(grid.centroids()) if callable(f) else f
    fe = np.broadcast_to(np.asarray(fe, dtype=float), (grid.n_elements,))
    nl = len(grid.corners)
    local = np.repeat((fe * grid.element_volume / nl)[:, None], nl, axis=1)
    return _scatter(grid, local)


# solvers ------------------------------------------------------------------------


def default_maxiter(n):
    return int(50 * np.sqrt(n) + 1000)


def pcg(A, b, rtol=1e-10, maxiter=None):
    """Jacobi-preconditioned conjugate gradients; returns (x, iterations)."""
    n = b.shape[0]
    maxiter = default_maxiter(n) if maxiter is None else maxiter
    x = np.zeros(n)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x, 0
    dinv = 1.0 / A.diagonal()
    target = rtol * bnorm
    r = b.copy()
    it = 0
    while it < maxiter:
        z = dinv * r
        p = z.copy()
        rz = r @ z
        while it < maxiter:
            Ap = A @ p
            alpha = rz / (p @ Ap)
            x += alpha * p
            r -= alpha * Ap
            it += 1
            if np.linalg.norm(r) <= target:
                break
            z = dinv * r
            rz_new = r @ z
            p = z + (rz_new / rz) * p
            rz = rz_new
        # recursive residual drifts; confirm with the true one and restart if needed
        r = b - A @ x
        if np.linalg.norm(r) <= target:
            return x, it
    res = np.linalg.norm(b - A @ x) / bnorm
    raise SolverError(
        f"CG did not converge in {maxiter} iterations (relative residual {res:.3e})",
        residual=res,
        iterations=it,
    )


def _reduced(system):
    """Matrix with the pinned DOF removed for periodic systems."""
    if system.constraint == "mean_zero":
        return system.matrix[1:, 1:].tocsr()
    return system.matrix


def _finish(system, x):
    if system.constraint == "mean_zero":
        full = np.concatenate([[0.0], x])
        # equal nodal weights on a uniform periodic grid: cell average = nodal mean
        return full - full.mean()
    return x


def solve(system, method="cg", rtol=1e-10, maxiter=None):
    """Solve a LinearSystem; periodic systems are pinned at DOF 0 then shifted to zero mean."""
    b = system.rhs[1:] if system.constraint == "mean_zero" else system.rhs
    A = _reduced(system)
    if method == "cg":
        x, _ = pcg(A, b, rtol=rtol, maxiter=maxiter)
    elif method == "direct":
        x = spla.spsolve(A.tocsc(), b) if b.size else b.copy()
    else:
        raise ValueError(f"unknown solve method {method!r}")
    return DiscreteField(system.grid, _finish(system, x))


class Factorization:
    """LU factorization of a system operator for repeated solves with new loads."""

    def __init__(self, system):
        self.system = system
        self._lu = spla.splu(_reduced(system).tocsc())

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        b = rhs[1:] if self.system.constraint == "mean_zero" else rhs
        x = self._lu.solve(b)
        return DiscreteField(self.system.grid, _finish(self.system, x))

    def solve_many(self, rhs_columns):
        """Solve for each column of an (n_dofs, m) array; returns the raw (n_dofs, m) array."""
        B = np.asarray(rhs_columns, dtype=float)
        if self.system.constraint == "mean_zero":
            X = self._lu.solve(np.ascontiguousarray(B[1:]))
            X = np.vstack([np.zeros((1, X.shape[1])), X])
            return X - X.mean(axis=0)
        return self._lu.solve(np.ascontiguousarray(B))


# norms --------------------------------------------------------------------------


def norm_from_quadrature(grid, values, grads, kind):
    """L2 / H1_semi / H1 norm of data given at the Gauss points of ``grid``."""
    w = grid.gauss_weights
    if kind == "L2":
        return float(np.sqrt(np.einsum("g,eg->", w, values**2)))
    if kind == "H1_semi":
        return float(np.sqrt(np.einsum("g,egd->", w, grads**2)))
    if kind == "H1":
        return float(np.sqrt(np.einsum("g,eg->", w, values**2) + np.einsum("g,egd->", w, grads**2)))
    raise ValueError(f"unknown norm kind {kind!r}")


def norm(field, kind="H1"):
    if kind == "Linf":
        return float(np.abs(field.values).max()) if field.values.size else 0.0
    vals, grads = field.at_quadrature()
    return norm_from_quadrature(field.grid, vals, grads, kind)


def hminus1_norm(grid, functional):
    """Discrete H^{-1} norm: H1 norm of the Riesz representer z, (-Lap + I) z = functional."""
    if grid.boundary != DIRICHLET:
        raise ValueError("hminus1_norm needs a dirichlet_zero grid")
    F = np.asarray(functional, dtype=float)
    if not np.any(F):
        return 0.0
    G = assemble_diffusion(grid, MatrixField.constant(grid, np.eye(grid.dim))).matrix + assemble_mass(grid)
    z = spla.spsolve(G.tocsc(), F)
    return float(np.sqrt(max(F @ z, 0.0)))


# evaluation ---------------------------------------------------------------------


def interpolate(field, points, outside=None):
    """Multilinear interpolant and its (elementwise) gradient at arbitrary points.

    Periodic grids wrap points into the cell. On other grids, points outside the
    box get value and gradient ``outside`` (raises if None).
    """
    grid = field.grid
    pts = np.asarray(points, dtype=float)
    shape = pts.shape[:-1]
    pts = pts.reshape(-1, grid.dim)
    lo = np.asarray(grid.lower)
    L = np.asarray(grid.upper) - lo
    s = (pts - lo) / grid.h
    inside = np.ones(len(pts), dtype=bool)
    if grid.boundary == PERIODIC:
        s = np.mod(s, np.asarray(grid.cells, dtype=float))
    else:
        inside = np.all((pts >= lo - 1e-13 * L) & (pts <= lo + L + 1e-13 * L), axis=1)
        if outside is None and not inside.all():
            raise ValueError("points outside the grid")
    idx = np.clip(np.floor(s).astype(np.int64), 0, np.asarray(grid.cells) - 1)
    xi = s - idx
    nodal = field.nodal()
    N = shape_functions(xi, grid.corners)
    dN = shape_gradients(xi, grid.corners) / grid.h
    node_vals = np.empty((len(pts), len(grid.corners)))
    for j, c in enumerate(grid.corners):
        node_vals[:, j] = nodal[tuple((idx + c).T)]
    vals = np.einsum("pj,pj->p", N, node_vals)
    grads = np.einsum("pjd,pj->pd", dN, node_vals)
    if not inside.all():
        vals[~inside] = outside
        grads[~inside] = outside
    return vals.reshape(shape), grads.reshape(shape + (grid.dim,))


def periodic_eval(cell_field, points):
    """Evaluate a periodic cell function (value, gradient) at points wrapped into the cell."""
    if cell_field.grid.boundary != PERIODIC:
        raise ValueError("periodic_eval needs a field on a periodic grid")
    return interpolate(cell_field, points)


def nodal_gradient(grid, nodal):
    """Nodal derivative fields by centred differences (second-order one-sided at the edges).

    Returns an array of shape ``(dim,) + node_shape``.
    """
    g = np.gradient(nodal, *grid.h, edge_order=2)
    if grid.dim == 1:
        g = [g]
    return np.stack(g)
