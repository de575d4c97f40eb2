"""Corrector problems on the unit cell Y = (0, 1)^d and the effective tensors.

Cell functions are periodic Q1 fields normalized to zero cell average.
The defect corrector chi is solved on the box ``1/2 + (-R, R)^d`` with
homogeneous Dirichlet data; in one dimension it is the exact whole-line
profile from :mod:`weakhom.oracle_1d`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import oracle_1d
from .errors import ConfigError, GridMismatchError
from .grid_fem import (
    DIRICHLET,
    PERIODIC,
    DiscreteField,
    Factorization,
    MatrixField,
    StructuredGrid,
    assemble_diffusion,
    assemble_divergence_rhs,
    interpolate,
    norm_from_quadrature,
    periodic_eval,
    solve,
)


@dataclass(frozen=True, eq=False)
class CellCoefficients:
    A: MatrixField
    B: MatrixField

    def __post_init__(self):
        if self.A.grid.boundary != PERIODIC:
            raise ValueError("cell coefficients live on a periodic unit-cell grid")
        if not self.A.grid.same_as(self.B.grid):
            raise GridMismatchError("A_per and B_per must share the cell grid")
        self.A.check_elliptic()

    @property
    def grid(self):
        return self.A.grid

    @property
    def dim(self):
        return self.grid.dim

    @classmethod
    def from_functions(cls, dim, resolution, A, B):
        grid = StructuredGrid.unit(dim, resolution, PERIODIC)
        return cls(MatrixField.from_function(grid, A), MatrixField.from_function(grid, B))

    @classmethod
    def from_spec(cls, spec, dim, resolution=None):
        resolution = int(spec.get("resolution", resolution or (1024 if dim == 1 else 128)))
        grid = StructuredGrid.unit(dim, resolution, PERIODIC)
        A = MatrixField(grid, _preset(spec["A"], grid, None))
        B = MatrixField(grid, _preset(spec.get("B", {"kind": "constant", "value": 0.0}), grid, A))
        return cls(A, B)

    def scalar_pieces(self):
        """1D only: A_per and B_per as PiecewiseCoefficient1D on the cell elements."""
        if self.dim != 1:
            raise ValueError("scalar_pieces is one-dimensional")
        a = oracle_1d.PiecewiseCoefficient1D.uniform(self.A.values[:, 0, 0])
        b = oracle_1d.PiecewiseCoefficient1D.uniform(self.B.values[:, 0, 0])
        return a, b


def _scalar_to_matrix(vals, d):
    return np.asarray(vals, dtype=float)[:, None, None] * np.eye(d)


def _preset(spec, grid, A):
    """Element values (n_elements, d, d) of a named coefficient preset."""
    d = grid.dim
    y = grid.centroids()
    kind = spec.get("kind")
    if kind == "constant":
        v = np.asarray(spec.get("value", 1.0), dtype=float)
        m = v * np.eye(d) if v.ndim == 0 else v.reshape(d, d)
        return np.broadcast_to(m, (grid.n_elements, d, d)).copy()
    if kind == "laminate":
        lo, hi = spec.get("values", [1.0, 4.0])
        axis, frac = int(spec.get("axis", 0)), float(spec.get("fraction", 0.5))
        return _scalar_to_matrix(np.where(np.mod(y[:, axis], 1.0) < frac, lo, hi), d)
    if kind == "checkerboard":
        lo, hi = spec.get("values", [1.0, 4.0])
        width = float(spec.get("smoothing", 0.0))
        s = np.prod(np.sin(2 * np.pi * y), axis=1)
        step = np.sign(s) if width <= 0 else np.tanh(s / width)
        return _scalar_to_matrix(0.5 * (lo + hi) - 0.5 * (hi - lo) * step, d)
    if kind == "sinusoidal":
        mean, amp = float(spec.get("mean", 2.0)), float(spec.get("amplitude", 1.0))
        return _scalar_to_matrix(mean + amp * np.prod(np.sin(2 * np.pi * y), axis=1), d)
    if kind == "scaled_A":
        if A is None:
            raise ConfigError("scaled_A is only available for B_per")
        return float(spec.get("factor", 1.0)) * A.values
    if kind == "raw":
        v = np.asarray(spec["values"], dtype=float)
        if v.shape == (grid.n_elements,):
            return _scalar_to_matrix(v, d)
        return v.reshape(grid.n_elements, d, d)
    raise ConfigError(f"unknown coefficient preset {kind!r}")


# periodic correctors --------------------------------------------------------------


def _corrected_gradients(coeff, w0):
    """(e_i + grad w0_i) at the cell Gauss points, shape (n_elements, G, d, d) indexed [.., comp, i]."""
    d = coeff.dim
    grads = np.stack([w.at_quadrature()[1] for w in w0], axis=-1)
    return grads + np.eye(d)


def solve_w0(coeff, i, method="cg", rtol=1e-10):
    """Periodic zero-mean solution of -div[A_per (e_i + grad w)] = 0."""
    grid = coeff.grid
    system = assemble_diffusion(grid, coeff.A)
    flux = coeff.A.values[:, :, i]
    return solve(system.with_rhs(assemble_divergence_rhs(grid, flux)), method=method, rtol=rtol)


def _energy_matrix(coeff, M, w0, asym_tol):
    G = _corrected_gradients(coeff, w0)
    out = np.einsum("g,egai,eab,egbj->ij", coeff.grid.gauss_weights, G, M.values, G)
    scale = max(np.abs(out).max(), 1e-300)
    if np.abs(out - out.T).max() > asym_tol * scale:
        raise ArithmeticError("effective tensor is not symmetric to tolerance")
    return 0.5 * (out + out.T)


def homogenized_matrix(coeff, w0, asym_tol=1e-10):
    """A*_ij = int_Y (e_i + grad w0_i)^T A_per (e_j + grad w0_j)."""
    return _energy_matrix(coeff, coeff.A, w0, asym_tol)


def effective_B(coeff, w0, asym_tol=1e-10):
    """B_bar_ij = int_Y (e_i + grad w0_i)^T B_per (e_j + grad w0_j)."""
    return _energy_matrix(coeff, coeff.B, w0, asym_tol)


def solve_psi(coeff, i, w0_i, method="cg", rtol=1e-10):
    """Periodic zero-mean solution of -div[A_per grad psi] = div[B_per (e_i + grad w0_i)]."""
    grid = coeff.grid
    _, gw = w0_i.at_quadrature()
    flux = np.einsum("eab,egb->ega", coeff.B.values, gw + np.eye(grid.dim)[i])
    system = assemble_diffusion(grid, coeff.A)
    return solve(system.with_rhs(assemble_divergence_rhs(grid, flux)), method=method, rtol=rtol)


def effective_B_alternate(coeff, w0, psi):
    """int e_i^T A grad psi_j + int e_i^T B (e_j + grad w0_j): equal to B_bar at the discrete level."""
    w = coeff.grid.gauss_weights
    gpsi = np.stack([p.at_quadrature()[1] for p in psi], axis=-1)
    G = _corrected_gradients(coeff, w0)
    return np.einsum("g,eib,egbj->ij", w, coeff.A.values, gpsi) + np.einsum(
        "g,eib,egbj->ij", w, coeff.B.values, G
    )


def variational_residual(coeff, w0):
    """max_ij |int (grad w0_j)^T A (e_i + grad w0_i)|, zero by Galerkin orthogonality."""
    w = coeff.grid.gauss_weights
    gw = np.stack([x.at_quadrature()[1] for x in w0], axis=-1)
    G = gw + np.eye(coeff.dim)
    return float(np.abs(np.einsum("g,egaj,eab,egbi->ij", w, gw, coeff.A.values, G)).max())


def mean_bounds(coeff):
    """Harmonic and arithmetic averages of A_per, the Reuss/Voigt bounds on A*."""
    vol = coeff.grid.element_volume
    arith = coeff.A.values.sum(axis=0) * vol
    harm = np.linalg.inv(np.linalg.inv(coeff.A.values).sum(axis=0) * vol)
    return harm, arith


# defect corrector -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ChiField:
    """Dirichlet-truncated chi on (1/2 - R, 1/2 + R)^d; zero outside the box."""

    field: DiscreteField
    radius: int
    resolution: int

    @property
    def grid(self):
        return self.field.grid

    @property
    def center(self):
        return np.full(self.grid.dim, 0.5)

    def __call__(self, y):
        return interpolate(self.field, y, outside=0.0)

    def boundary_max(self):
        nodal = self.field.nodal()
        mask = np.zeros(nodal.shape, dtype=bool)
        for a in range(nodal.ndim):
            sl = [slice(None)] * nodal.ndim
            sl[a] = [0, -1]
            mask[tuple(sl)] = True
        return float(np.abs(nodal[mask]).max())


def chi_grid(dim, radius, resolution):
    if resolution % 2:
        raise ValueError("chi grid needs an even cell resolution so the box edges are grid lines")
    return StructuredGrid(dim, (0.5 - radius,) * dim, (0.5 + radius,) * dim, (2 * radius * resolution,) * dim, DIRICHLET)


def extend_periodically(cell_field, grid):
    """Element values of a cell MatrixField on a lattice-aligned grid."""
    cg = cell_field.grid
    s = np.mod(grid.centroids() - np.asarray(cg.lower), 1.0) / cg.h
    idx = np.clip(np.floor(s).astype(np.int64), 0, np.asarray(cg.cells) - 1)
    return MatrixField(grid, cell_field.values[np.ravel_multi_index(tuple(idx.T), cg.element_shape)])


def solve_chi(coeff, i, w0_i, radius=8, method="direct", rtol=1e-10):
    """Defect corrector for direction i.

    2D: -div[A_per grad chi] = div[1_Y B_per (e_i + grad w0_i)] on the truncated box.
    1D: the exact whole-line profile (``w0_i`` unused, recomputed exactly).
    """
    if coeff.dim == 1:
        a, b = coeff.scalar_pieces()
        return oracle_1d.chi_1d(a, b)
    radius = int(radius)
    if radius < 2:
        raise ValueError("truncation radius must be an integer >= 2")
    grid = chi_grid(coeff.dim, radius, coeff.grid.cells[0])
    A = extend_periodically(coeff.A, grid)
    B = extend_periodically(coeff.B, grid)
    qp = grid.quadrature_points()
    inside = np.all((grid.centroids() > 0.0) & (grid.centroids() < 1.0), axis=1)
    _, gw = periodic_eval(w0_i, qp)
    flux = np.einsum("eab,egb->ega", B.values, gw + np.eye(coeff.dim)[i]) * inside[:, None, None]
    system = assemble_diffusion(grid, A).with_rhs(assemble_divergence_rhs(grid, flux))
    return ChiField(solve(system, method=method, rtol=rtol), radius, coeff.grid.cells[0])


@dataclass
class DecayReport:
    radii: list
    value_max: list
    grad_max: list
    value_slope: float | None
    grad_slope: float | None
    undefined: bool


def _loglog_slope(r, v):
    r, v = np.asarray(r, dtype=float), np.asarray(v, dtype=float)
    if len(r) < 2 or np.any(v <= 0):
        return None
    return float(np.polyfit(np.log(r), np.log(v), 1)[0])


def chi_decay_report(chi, radii):
    """Annulus maxima of |chi| and |grad chi| for annuli [r_i, r_{i+1}) around the cell centre.

    Slopes are least-squares fits of log(max) against log(inner radius).
    """
    radii = [float(r) for r in radii]
    if len(radii) < 2 or np.any(np.diff(radii) <= 0):
        raise ValueError("radii must be increasing with at least two entries")
    if radii[-1] > chi.radius + 1e-12:
        raise ValueError("radii exceed the truncation radius")
    grid = chi.grid
    c = chi.center
    rn = np.linalg.norm(grid.node_coordinates().reshape(-1, grid.dim) - c, axis=1)
    vn = np.abs(chi.field.nodal().ravel())
    qp = grid.quadrature_points().reshape(-1, grid.dim)
    rq = np.linalg.norm(qp - c, axis=1)
    _, gq = chi.field.at_quadrature()
    gq = np.linalg.norm(gq.reshape(-1, grid.dim), axis=1)
    vmax, gmax = [], []
    for lo, hi in zip(radii[:-1], radii[1:]):
        sel_n = (rn >= lo) & (rn < hi)
        sel_q = (rq >= lo) & (rq < hi)
        if not sel_n.any() or not sel_q.any():
            raise ValueError(f"annulus [{lo}, {hi}) contains no grid points")
        vmax.append(float(vn[sel_n].max()))
        gmax.append(float(gq[sel_q].max()))
    vs, gs = _loglog_slope(radii[:-1], vmax), _loglog_slope(radii[:-1], gmax)
    return DecayReport(radii, vmax, gmax, vs, gs, vs is None or gs is None)


def chi_truncation_change(chi_small, chi_large, inner=4.0):
    """Relative H1 change on the box centre + (-inner, inner)^d between two truncation radii."""
    grid = chi_large.grid
    c = chi_large.center
    keep = np.all(np.abs(grid.centroids() - c) < inner, axis=1)
    v2, g2 = chi_large.field.at_quadrature()
    qp = grid.quadrature_points()[keep]
    v1, g1 = chi_small(qp)
    v2, g2 = v2[keep], g2[keep]
    diff = norm_from_quadrature(grid, v2 - v1, g2 - g1, "H1")
    ref = norm_from_quadrature(grid, v2, g2, "H1")
    return diff / ref if ref > 0 else 0.0


# the full set -------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CorrectorSet:
    coeff: CellCoefficients
    w0: list
    psi: list
    A_star: np.ndarray
    B_bar: np.ndarray
    chi: list
    radius: int

    @property
    def dim(self):
        return self.coeff.dim

    @property
    def resolution(self):
        return self.coeff.grid.cells[0]


def build_correctors(coeff, radius=8, with_chi=True, method="direct", rtol=1e-10):
    """Solve every cell problem once for a coefficient pair.

    A factorization of the periodic cell operator is shared between the
    w0 and psi solves when ``method == "direct"``.
    """
    d = coeff.dim
    if method == "direct":
        system = assemble_diffusion(coeff.grid, coeff.A)
        lu = Factorization(system)
        w0 = [lu.solve(assemble_divergence_rhs(coeff.grid, coeff.A.values[:, :, i])) for i in range(d)]
        psi = []
        for i in range(d):
            _, gw = w0[i].at_quadrature()
            flux = np.einsum("eab,egb->ega", coeff.B.values, gw + np.eye(d)[i])
            psi.append(lu.solve(assemble_divergence_rhs(coeff.grid, flux)))
    else:
        w0 = [solve_w0(coeff, i, method, rtol) for i in range(d)]
        psi = [solve_psi(coeff, i, w0[i], method, rtol) for i in range(d)]
    A_star = homogenized_matrix(coeff, w0)
    B_bar = effective_B(coeff, w0)
    chi = []
    if with_chi:
        if np.any(coeff.B.values):
            chi = [solve_chi(coeff, i, w0[i], radius, method="direct") for i in range(d)]
        elif d == 1:
            chi = [solve_chi(coeff, 0, w0[0])]
        else:
            chi = [None] * d
    return CorrectorSet(coeff, w0, psi, A_star, B_bar, chi, int(radius))


def export_correctors(cs, out_dir):
    """Write tensors as JSON and each field as raw little-endian float64 nodal arrays."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fields = {}

    def dump(name, f):
        arr = f.nodal()
        arr.astype("<f8").tofile(out / f"{name}.f64")
        fields[name] = {
            "file": f"{name}.f64",
            "shape": list(arr.shape),
            "lower": list(f.grid.lower),
            "upper": list(f.grid.upper),
            "boundary": f.grid.boundary,
        }

    for i, w in enumerate(cs.w0):
        dump(f"w0_{i}", w)
    for i, p in enumerate(cs.psi):
        dump(f"psi_{i}", p)
    for i, c in enumerate(cs.chi):
        if isinstance(c, ChiField):
            dump(f"chi_{i}", c.field)
    meta = {
        "dim": cs.dim,
        "resolution": cs.resolution,
        "chi_radius": cs.radius,
        "A_star": cs.A_star.tolist(),
        "B_bar": cs.B_bar.tolist(),
        "fields": fields,
    }
    (out / "correctors.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return meta


def load_field(meta_entry, base_dir):
    """Read a field written by :func:`export_correctors` back as a nodal array."""
    arr = np.fromfile(Path(base_dir) / meta_entry["file"], dtype="<f8")
    return arr.reshape(meta_entry["shape"])
