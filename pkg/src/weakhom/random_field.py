"""Realizations of A_per(x/eps) + eta X_k B_per(x/eps) with i.i.d. per-cell X_k.

Each lattice cell draws its uniform variate from a hash of
(seed, replicate, 1/eps, k), so a realization does not depend on traversal
order, thread count, or which other cells are sampled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, EllipticityError
from .grid_fem import DIRICHLET, MatrixField

_TWO_M53 = 2.0**-53


@dataclass(frozen=True)
class Law:
    """Bounded law of the scalar variables X_k."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("bernoulli", "uniform", "constant"):
            raise ValueError(f"unsupported law {self.kind!r}; only bounded laws are offered")
        if self.kind == "bernoulli" and not 0.0 <= self.params.get("p", 0.5) <= 1.0:
            raise ValueError("bernoulli p must lie in [0, 1]")
        if self.kind == "uniform" and not self.params.get("a", -1.0) < self.params.get("b", 1.0):
            raise ValueError("uniform law needs a < b")

    @classmethod
    def from_spec(cls, spec):
        spec = dict(spec)
        kind = spec.pop("kind")
        spec = spec.pop("params", spec)
        return cls(kind, dict(spec))

    def to_spec(self):
        return {"kind": self.kind, **self.params}

    @property
    def mean(self):
        return expectation_and_variance(self)[0]

    @property
    def variance(self):
        return expectation_and_variance(self)[1]

    @property
    def bound(self):
        if self.kind == "bernoulli":
            return 1.0
        if self.kind == "uniform":
            return max(abs(self.params.get("a", -1.0)), abs(self.params.get("b", 1.0)))
        return abs(self.params.get("c", 1.0))

    def transform(self, u):
        """Map uniform variates in [0, 1) to draws of the law."""
        u = np.asarray(u, dtype=float)
        if self.kind == "bernoulli":
            return (u < self.params.get("p", 0.5)).astype(float)
        if self.kind == "uniform":
            a, b = self.params.get("a", -1.0), self.params.get("b", 1.0)
            return a + (b - a) * u
        return np.full_like(u, self.params.get("c", 1.0))


def expectation_and_variance(law):
    if law.kind == "bernoulli":
        p = law.params.get("p", 0.5)
        return p, p * (1.0 - p)
    if law.kind == "uniform":
        a, b = law.params.get("a", -1.0), law.params.get("b", 1.0)
        return 0.5 * (a + b), (b - a) ** 2 / 12.0
    return law.params.get("c", 1.0), 0.0


@dataclass(frozen=True)
class PerturbationModel:
    eta: float
    law: Law
    seed: int = 0

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_spec(cls, spec, eta=None):
        law = Law.from_spec(spec["law"])
        return cls(float(spec.get("eta", 0.0) if eta is None else eta), law, int(spec.get("seed", 0)))


def cell_uniforms(seed, replicate, n_per_axis, dim):
    """One uniform in [0, 1) per lattice cell k in {0..N-1}^dim, keyed by (seed, replicate, N, k)."""
    out = np.empty((n_per_axis,) * dim)
    for k in np.ndindex(*out.shape):
        ss = np.random.SeedSequence(int(seed), spawn_key=(int(replicate), int(n_per_axis)) + tuple(int(i) for i in k))
        out[k] = float(ss.generate_state(1, np.uint64)[0] >> np.uint64(11)) * _TWO_M53
    return out


def lattice_size(epsilon):
    N = int(round(1.0 / epsilon))
    if N < 1 or abs(N * epsilon - 1.0) > 1e-9:
        raise AlignmentError(f"epsilon = {epsilon} is not of the form 1/N")
    return N


def check_alignment(grid, epsilon):
    """Return (N, cells per epsilon-cell) for a unit-box grid aligned with the epsilon-lattice."""
    N = lattice_size(epsilon)
    if any(abs(l) > 1e-14 for l in grid.lower) or any(abs(u - 1.0) > 1e-14 for u in grid.upper):
        raise AlignmentError("the oscillatory problems are posed on the unit box")
    ratios = set()
    for n in grid.cells:
        if n % N:
            raise AlignmentError(f"{n} cells per axis do not resolve eps = 1/{N}")
        ratios.add(n // N)
    if len(ratios) != 1:
        raise AlignmentError("mesh must have the same ratio h/eps on every axis")
    return N, ratios.pop()


def lattice_index(grid, epsilon):
    """Lattice cell multi-index k of every element, shape (n_elements, dim)."""
    N = lattice_size(epsilon)
    return np.clip(np.floor(grid.centroids() * N).astype(np.int64), 0, N - 1)


def oscillating(cell_field, epsilon, grid):
    """Sample the periodic cell MatrixField at x/eps for every element of ``grid``."""
    cg = cell_field.grid
    y = grid.centroids() / epsilon
    lo = np.asarray(cg.lower)
    s = np.mod((y - lo) / cg.h, np.asarray(cg.cells, dtype=float))
    idx = np.clip(np.floor(s).astype(np.int64), 0, np.asarray(cg.cells) - 1)
    flat = np.ravel_multi_index(tuple(idx.T), cg.element_shape)
    return MatrixField(grid, cell_field.values[flat])


@dataclass(frozen=True, eq=False)
class CoefficientRealization:
    coefficient: MatrixField
    A_eps: MatrixField
    B_eps: MatrixField
    X: np.ndarray
    element_cell: np.ndarray
    epsilon: float
    model: PerturbationModel
    replicate: int

    @property
    def grid(self):
        return self.coefficient.grid

    @property
    def X_per_element(self):
        return self.X.ravel()[self.element_cell]


def sample_realization(model, cell, epsilon, domain_grid, replicate_index=0, c_min_fraction=0.05):
    """Draw X_k for every lattice cell meeting the domain and build the fine coefficient."""
    if replicate_index < 0:
        raise ValueError("replicate_index must be >= 0")
    if domain_grid.boundary != DIRICHLET:
        raise AlignmentError("oscillatory problems use a dirichlet_zero domain grid")
    N, _ = check_alignment(domain_grid, epsilon)
    d = domain_grid.dim
    X = model.law.transform(cell_uniforms(model.seed, replicate_index, N, d))
    k = lattice_index(domain_grid, epsilon)
    element_cell = np.ravel_multi_index(tuple(k.T), (N,) * d)
    A_eps = oscillating(cell.A, epsilon, domain_grid)
    B_eps = oscillating(cell.B, epsilon, domain_grid)
    values = A_eps.values + model.eta * X.ravel()[element_cell][:, None, None] * B_eps.values
    coefficient = MatrixField(domain_grid, values)
    if model.eta != 0.0:
        floor = c_min_fraction * cell.A.eigen_bounds()[0]
        lo, _ = coefficient.eigen_bounds()
        if lo < floor:
            raise EllipticityError(
                f"eta = {model.eta} breaks ellipticity: eigenvalue {lo:.3e} < {floor:.3e}"
            )
    return CoefficientRealization(coefficient, A_eps, B_eps, X, element_cell, float(epsilon), model, int(replicate_index))
