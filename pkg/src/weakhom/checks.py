"""Named numerical property checks shared by ``verify`` and the acceptance tests.

Each measurement function returns plain numbers; ``run_verification``
wraps them into (name, value, bound, passed) ledger entries.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .cell_problems import (
    CellCoefficients,
    build_correctors,
    chi_decay_report,
    chi_truncation_change,
    effective_B_alternate,
    solve_chi,
)
from .grid_fem import (
    DiscreteField,
    StructuredGrid,
    assemble_divergence_rhs,
    hminus1_norm,
    norm,
    periodic_eval,
)
from .random_field import Law, PerturbationModel, lattice_size, oscillating, sample_realization
from .solutions import (
    ChiLattice,
    build_expansion,
    build_u1bar_expansion,
    h1_gram,
    iter_phi,
    make_source,
    periodic_factorization,
    phi_expansion_error_sq,
    solve_macro,
    solve_oscillatory,
    solve_u0_eps,
    solve_u1_eps,
    solve_u1bar_eps,
)

SMOOTH_CELL_2D = {"A": {"kind": "sinusoidal", "mean": 2.0, "amplitude": 1.0}, "B": {"kind": "constant", "value": 0.5}}
LAMINATE_CELL_2D = {"A": {"kind": "laminate", "values": [1.0, 4.0]}, "B": {"kind": "constant", "value": 0.5}}
LAMINATE_CELL_1D = {"A": {"kind": "laminate", "values": [1.0, 4.0]}, "B": {"kind": "constant", "value": 0.5}}


@dataclass
class Check:
    name: str
    value: float
    bound: str
    passed: bool
    detail: str = ""

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.value:.6g} (bound {self.bound}) {self.detail}".rstrip()


def loglog_slope(x, y):
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def drift(values):
    v = np.abs(np.asarray(values, dtype=float))
    return float(v.max() / v.min()) if v.min() > 0 else float("inf")


def _cell(spec, dim, m):
    return CellCoefficients.from_spec(spec, dim, spec.get("resolution", m))


# individual measurements -----------------------------------------------------------


def classical_rate(spec, dim, epsilons, m=16, source=None, method="cg"):
    """H1 error of the classical expansion against u_0^eps; slope in eps."""
    cell = _cell(spec, dim, m)
    cs = build_correctors(cell, with_chi=False)
    f = make_source(source, dim)
    errs = []
    for eps in epsilons:
        grid = StructuredGrid.unit(dim, lattice_size(eps) * m)
        macro = solve_macro(cs, f, grid, method=method)
        u = solve_u0_eps(cell, eps, grid, f, method=method)
        errs.append(build_expansion(cs, macro, epsilon=eps).error_against(u)["H1"])
    return {"epsilons": list(epsilons), "errors": errs, "slope": loglog_slope(epsilons, errs)}


def chi_decay(spec, m=16, radius=16, small_radius=8, radii=None):
    """Annulus slopes of |chi| and |grad chi| and the nested-radius change."""
    cell = _cell(spec, 2, m)
    cs = build_correctors(cell, radius=radius)
    radii = radii or [r for r in (2, 3, 4, 6, 8, 11) if r <= 0.7 * radius]
    out = {"value_slopes": [], "grad_slopes": [], "nested_change": []}
    if cs.chi[0] is None:
        return out
    for i in range(2):
        rep = chi_decay_report(cs.chi[i], radii)
        out["value_slopes"].append(rep.value_slope)
        out["grad_slopes"].append(rep.grad_slope)
        if small_radius:
            small = solve_chi(cell, i, cs.w0[i], radius=small_radius)
            out["nested_change"].append(chi_truncation_change(small, cs.chi[i], inner=4.0))
    return out


def cell_consistency(spec, dim, m=16):
    cell = _cell(spec, dim, m)
    cs = build_correctors(cell, with_chi=False)
    alt = effective_B_alternate(cell, cs.w0, cs.psi)
    return {
        "B_bar_forms": float(np.abs(alt - cs.B_bar).max()),
        "A_star_min_eig": float(np.linalg.eigvalsh(cs.A_star).min()),
    }


def eta_residual(spec, dim, eps, etas=(0.2, 0.1, 0.05), m=16, law=None, seed=0):
    """|u_eta - u_0 - eta u_1|_H1 / eta^2 for one draw of X, shared across eta."""
    cell = _cell(spec, dim, m)
    law = Law.from_spec(law or {"kind": "bernoulli", "p": 0.5})
    f = make_source(None, dim)
    grid = StructuredGrid.unit(dim, lattice_size(eps) * m)
    lu = periodic_factorization(cell, eps, grid)
    u0 = solve_u0_eps(cell, eps, grid, f, lu=lu)
    ratios = []
    u1 = None
    for eta in etas:
        real = sample_realization(PerturbationModel(eta, law, seed), cell, eps, grid)
        if u1 is None:
            u1 = solve_u1_eps(real, cell, u0, lu=lu)
        u = solve_oscillatory(real, f, method="direct")
        ratios.append(norm(u - u0 - eta * u1, "H1") / eta**2)
    return {"etas": list(etas), "ratios": ratios, "drift": drift(ratios)}


def decomposition_identity(spec, dim, eps, m=16, law=None, seed=0, batch=32):
    """|u_1 - E u1bar - sum (X_k - E) phi_k|_H1 / |u_1|_H1."""
    cell = _cell(spec, dim, m)
    law = Law.from_spec(law or {"kind": "bernoulli", "p": 0.5})
    f = make_source(None, dim)
    grid = StructuredGrid.unit(dim, lattice_size(eps) * m)
    lu = periodic_factorization(cell, eps, grid)
    u0 = solve_u0_eps(cell, eps, grid, f, lu=lu)
    real = sample_realization(PerturbationModel(0.1, law, seed), cell, eps, grid)
    u1 = solve_u1_eps(real, cell, u0, lu=lu)
    ub = solve_u1bar_eps(eps, cell, u0, lu=lu)
    c = (real.X - law.mean).ravel()
    acc = np.zeros(grid.n_dofs)
    for k, phi in iter_phi(eps, cell, u0, lu=lu, batch=batch):
        acc += c[k] * phi
    resid = u1 - law.mean * ub - DiscreteField(grid, acc)
    return {"relative_residual": norm(resid, "H1") / max(norm(u1, "H1"), 1e-300)}


def phi_sweep(spec, epsilons, m=16, radius=8, with_expansion=True, source=None):
    """Per-eps statistics of phi_k^eps, u1bar^eps and their expansions (2D or 1D)."""
    dim = 2 if spec.get("dim", 2) == 2 else 1
    cell = _cell(spec, dim, m)
    cs = build_correctors(cell, radius=radius)
    f = make_source(source, dim)
    out = []
    for eps in epsilons:
        N = lattice_size(eps)
        grid = StructuredGrid.unit(dim, N * m)
        macro = solve_macro(cs, f, grid, method="direct")
        lu = periodic_factorization(cell, eps, grid)
        u0 = solve_u0_eps(cell, eps, grid, f, lu=lu)
        gram = h1_gram(grid)
        central = np.ravel_multi_index((N // 2,) * dim, (N,) * dim)
        row = {"eps": eps, "max_linf_over_eps": 0.0, "sum_h1_sq": 0.0, "central_h1": 0.0, "sum_expansion_sq": 0.0}
        lattice = ChiLattice(cs.chi, eps, grid) if with_expansion else None
        for k, phi in iter_phi(eps, cell, u0, lu=lu):
            h1sq = float(phi @ (gram @ phi))
            row["sum_h1_sq"] += h1sq
            row["max_linf_over_eps"] = max(row["max_linf_over_eps"], float(np.abs(phi).max()) / eps)
            if k == central:
                row["central_h1"] = np.sqrt(h1sq)
            if with_expansion:
                kk = np.unravel_index(k, (N,) * dim)
                row["sum_expansion_sq"] += phi_expansion_error_sq(phi, kk, lattice, macro, gram)
        if with_expansion:
            ub = solve_u1bar_eps(eps, cell, u0, lu=lu)
            row["u1bar_error"] = build_u1bar_expansion(cs, macro, eps).error_against(ub)["H1"]
        out.append(row)
    return out


def hminus1_oscillation_rate(spec, epsilons, m=16):
    """H^-1 norm of div[Z(x/eps) v] with Z = A(e_1 + grad w_1) - A* e_1, v = d_1 of prod sin."""
    cell = _cell(spec, 2, m)
    cs = build_correctors(cell, with_chi=False)
    norms = []
    for eps in epsilons:
        grid = StructuredGrid.unit(2, lattice_size(eps) * m)
        qp = grid.quadrature_points()
        _, gw = periodic_eval(cs.w0[0], qp / eps)
        A = oscillating(cell.A, eps, grid).values
        Z = np.einsum("eab,egb->ega", A, gw + np.eye(2)[0]) - cs.A_star[:, 0]
        v = np.pi * np.cos(np.pi * qp[..., 0]) * np.sin(np.pi * qp[..., 1])
        norms.append(hminus1_norm(grid, assemble_divergence_rhs(grid, Z * v[..., None])))
    return {"epsilons": list(epsilons), "norms": norms, "slope": loglog_slope(epsilons, norms)}


# the ledger -----------------------------------------------------------------------------


def _in(x, lo, hi):
    return bool(lo <= x <= hi)


def run_verification(config):
    """Ledger of checks at reduced sizes driven by ``config.verify`` (all keys optional)."""
    opts = dict(config.verify or {})
    spec = config.cell
    dim = config.dim
    m = int(opts.get("mesh_ratio", config.mesh_ratio))
    eps_list = [float(e) for e in opts.get("epsilons", config.epsilons)][:3] or [0.25, 0.125, 0.0625]
    eps_mid = eps_list[min(1, len(eps_list) - 1)]
    law = config.law
    ledger = []

    def add(name, value, bound, ok, detail=""):
        ledger.append(Check(name, float(value), bound, bool(ok), detail))

    c = cell_consistency(spec, dim, m)
    add("cell.B_bar_two_forms", c["B_bar_forms"], "<= 1e-8", c["B_bar_forms"] <= 1e-8)
    add("cell.A_star_positive", c["A_star_min_eig"], "> 0", c["A_star_min_eig"] > 0)

    if dim == 2 and opts.get("chi", True):
        r = int(opts.get("chi_radius", config.chi_radius))
        d = chi_decay(spec, m, radius=r, small_radius=opts.get("chi_small_radius", max(2, r // 2)))
        if not d["value_slopes"]:
            add("chi_decay.vanishes", 0.0, "B = 0", True)
        else:
            for i in range(2):
                add(f"chi_decay.value_slope_e{i + 1}", d["value_slopes"][i], "[-1.4, -0.6]", _in(d["value_slopes"][i], -1.4, -0.6))
                add(f"chi_decay.grad_slope_e{i + 1}", d["grad_slopes"][i], "[-2.6, -1.4]", _in(d["grad_slopes"][i], -2.6, -1.4))
                add(f"chi_decay.nested_change_e{i + 1}", d["nested_change"][i], "<= 0.05", d["nested_change"][i] <= 0.05)

    cr = classical_rate(spec, dim, eps_list, m, config.source, method=config.method)
    lo, hi = (0.85, 1.15) if dim == 1 else (0.35, 0.65)
    add("classical.eps_slope", cr["slope"], f"[{lo}, {hi}]", _in(cr["slope"], lo, hi))

    er = eta_residual(spec, dim, eps_mid, m=m, law=law, seed=config.seed)
    if max(er["ratios"]) == 0.0:
        add("eta_expansion.residual_drift", 1.0, "<= 2", True, "B = 0: zero residual")
    else:
        add("eta_expansion.residual_drift", er["drift"], "<= 2", er["drift"] <= 2.0)

    di = decomposition_identity(spec, dim, eps_mid, m=m, law=law, seed=config.seed)
    add("decomposition.identity_residual", di["relative_residual"], "<= 1e-8", di["relative_residual"] <= 1e-8)

    sweep = phi_sweep({**spec, "dim": dim}, eps_list, m=m, radius=config.chi_radius, with_expansion=False)
    linf = [r["max_linf_over_eps"] for r in sweep]
    sq = [r["sum_h1_sq"] for r in sweep]
    cen = [r["central_h1"] for r in sweep]
    if max(sq) == 0.0:
        add("phi.linf_over_eps_drift", 1.0, "<= 1.5", True, "B = 0: phi = 0")
        add("phi.sum_h1_sq_drift", 1.0, "<= 1.5", True, "B = 0: phi = 0")
        add("phi.central_decreasing", 0.0, "monotone within 10%", True, "B = 0: phi = 0")
    else:
        add("phi.linf_over_eps_drift", drift(linf), "<= 1.5", drift(linf) <= 1.5)
        add("phi.sum_h1_sq_drift", drift(sq), "<= 1.5", drift(sq) <= 1.5)
        worst = max(cen[i + 1] / cen[i] for i in range(len(cen) - 1)) if len(cen) > 1 else 0.0
        add("phi.central_decreasing", worst, "<= 1.1", worst <= 1.1)

    if dim == 2:
        osc = hminus1_oscillation_rate(spec, eps_list, m)
        add("oscillation.hminus1_slope", osc["slope"], "[0.8, 1.2]", _in(osc["slope"], 0.8, 1.2))
    return ledger


def ledger_to_dicts(ledger):
    return [asdict(c) for c in ledger]
