"""Configuration-driven convergence studies, rate fits and report output."""

from __future__ import annotations

import csv
import io
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.optimize import nnls

from .cell_problems import CellCoefficients, build_correctors
from .errors import ConfigError, RankDeficientError, WeakHomError
from .grid_fem import StructuredGrid
from .random_field import Law, PerturbationModel, lattice_size, sample_realization
from .solutions import ChiLattice, build_expansion, make_source, solve_macro, solve_oscillatory

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1
EXECUTION_KEYS = ("threads", "out_dir")
CSV_COLUMNS = ("dim", "eps", "eta", "M", "err_H1", "stderr", "err_L2", "err_Linf", "status")


def parse_epsilon(value):
    """Accept 0.125, "0.125" or "1/8"; the result must be 1/N."""
    try:
        eps = float(Fraction(value)) if isinstance(value, str) else float(value)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot read epsilon {value!r}") from exc
    try:
        lattice_size(eps)
    except WeakHomError as exc:
        raise ConfigError(str(exc)) from exc
    return 1.0 / lattice_size(eps)


@dataclass
class StudyConfig:
    dim: int
    cell: dict
    law: dict
    epsilons: list
    etas: list
    seed: int = 0
    source: dict = field(default_factory=lambda: {"kind": "sine"})
    mesh_ratio: int = 16
    replicates: int = 16
    chi_radius: int = 8
    rtol: float = 1e-10
    method: str = "cg"
    threads: int = 1
    out_dir: str = "study_out"
    name: str = "study"
    verify: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigError("dim must be 1 or 2")
        self.epsilons = [parse_epsilon(e) for e in self.epsilons]
        self.etas = [float(e) for e in self.etas]
        if not self.epsilons or not self.etas:
            raise ConfigError("epsilon and eta lists must be non-empty")
        if any(e < 0 for e in self.etas):
            raise ConfigError("eta values must be nonnegative")
        if int(self.replicates) < 1:
            raise ConfigError("replicates (M) must be >= 1")
        if int(self.mesh_ratio) < 1 or (self.dim == 2 and int(self.mesh_ratio) % 2):
            raise ConfigError("mesh_ratio eps/h must be a positive (even in 2D) integer")
        if self.method not in ("cg", "direct"):
            raise ConfigError("method must be 'cg' or 'direct'")
        self.replicates = int(self.replicates)
        self.mesh_ratio = int(self.mesh_ratio)
        self.chi_radius = int(self.chi_radius)
        self.seed = int(self.seed)
        self.threads = max(1, int(self.threads))
        if "A" not in self.cell:
            raise ConfigError("cell spec needs an 'A' entry")
        try:
            Law.from_spec(self.law)
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"bad law: {exc}") from exc

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        text = path.read_text()
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
        return cls.from_dict(data)

    def to_dict(self):
        return asdict(self)

    def numerical_dict(self):
        """Config without execution-only settings (threads, out_dir); echoed in reports."""
        d = self.to_dict()
        for key in EXECUTION_KEYS:
            d.pop(key)
        return d

    def model(self, eta):
        return PerturbationModel(eta, Law.from_spec(self.law), self.seed)


@dataclass
class StudyReport:
    rows: list
    fits: dict
    failures: list
    config: dict
    A_star: list
    B_bar: list

    def to_json(self):
        payload = {
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
            "A_star": self.A_star,
            "B_bar": self.B_bar,
            "rows": self.rows,
            "fits": self.fits,
            "failures": self.failures,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r.get(c)) for c in CSV_COLUMNS])
        return buf.getvalue()

    def write(self, out_dir, name="study"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.csv").write_text(self.to_csv())
        (out / f"{name}.json").write_text(self.to_json())
        return out / f"{name}.csv", out / f"{name}.json"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _aggregate(norms):
    """Error statistic sqrt(mean |e|^2) per norm and its delta-method standard error."""
    M = len(norms)
    out = {}
    for key in ("H1", "L2", "Linf"):
        sq = [n[key] ** 2 for n in norms]
        mean = math.fsum(sq) / M
        out[key] = math.sqrt(mean)
        if key == "H1":
            if M > 1 and mean > 0.0:
                var = math.fsum((s - mean) ** 2 for s in sq) / (M - 1)
                out["stderr"] = math.sqrt(var / M) / (2.0 * out[key])
            else:
                out["stderr"] = 0.0
    out["u_H1"] = math.sqrt(math.fsum(n["u_H1"] ** 2 for n in norms) / M)
    return out


def _one_replicate(config, cell, cs, macro, lattice, eps, eta, grid, f, r):
    from .grid_fem import norm

    real = sample_realization(config.model(eta), cell, eps, grid, r)
    u = solve_oscillatory(real, f, method=config.method, rtol=config.rtol)
    v = build_expansion(cs, macro, real, chi_lattice=lattice)
    err = v.error_against(u)
    err["u_H1"] = norm(u, "H1")
    return err


def run_study(config, progress=None):
    """Monte Carlo sweep over (eps, eta); returns a StudyReport.

    Correctors are built once. For each eps the macro solution and the chi
    lattice kernel are shared by all eta values and replicates; eta = 0 runs
    a single replicate. A failing cell is recorded with its message.
    """
    cell = CellCoefficients.from_spec(config.cell, config.dim, config.cell.get("resolution", config.mesh_ratio))
    cs = build_correctors(cell, radius=config.chi_radius)
    f = make_source(config.source, config.dim)
    rows, failures = [], []
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for eps in config.epsilons:
            N = lattice_size(eps)
            grid = StructuredGrid.unit(config.dim, N * config.mesh_ratio)
            macro = solve_macro(cs, f, grid, method=config.method, rtol=config.rtol)
            lattice = None
            for eta in config.etas:
                M = 1 if eta == 0.0 else config.replicates
                row = {"dim": config.dim, "eps": eps, "eta": eta, "M": M}
                try:
                    if lattice is None and eta != 0.0 and any(c is not None for c in cs.chi):
                        lattice = ChiLattice(cs.chi, eps, grid)
                    args = (config, cell, cs, macro, lattice, eps, eta, grid, f)
                    if pool is None:
                        norms = [_one_replicate(*args, r) for r in range(M)]
                    else:
                        norms = list(pool.map(lambda r: _one_replicate(*args, r), range(M)))
                    agg = _aggregate(norms)
                    row.update(err_H1=agg["H1"], stderr=agg["stderr"], err_L2=agg["L2"],
                               err_Linf=agg["Linf"], u_H1=agg["u_H1"], status="ok")
                except (WeakHomError, ArithmeticError, np.linalg.LinAlgError) as exc:
                    row.update(err_H1=None, stderr=None, err_L2=None, err_Linf=None, status="failed")
                    failures.append({"eps": eps, "eta": eta, "error": f"{type(exc).__name__}: {exc}"})
                rows.append(row)
                if progress is not None:
                    progress(row)
    finally:
        if pool is not None:
            pool.shutdown()
    ok = [r for r in rows if r["status"] == "ok"]
    fits = {}
    zero = [r for r in ok if r["eta"] == 0.0]
    if len(zero) >= 3:
        fits["eps_slope_at_eta0"] = fit_rates(zero, "eps_slope")
    if len(ok) >= 6 and len({r["eta"] for r in ok}) >= 2:
        try:
            fits["full_model"] = fit_rates(ok, "full_model", basis="1d" if config.dim == 1 else "2d")
        except RankDeficientError as exc:
            fits["full_model"] = {"error": str(exc)}
    return StudyReport(rows, fits, failures, config.numerical_dict(), cs.A_star.tolist(), cs.B_bar.tolist())


def model_basis(eps, eta, basis="2d"):
    """Columns of the three-term error model at the given (eps, eta) pairs."""
    eps, eta = np.asarray(eps, dtype=float), np.asarray(eta, dtype=float)
    if basis == "2d":
        return np.column_stack([np.sqrt(eps), eta * np.sqrt(eps * np.log(1.0 / eps)), eta**2])
    if basis == "1d":
        return np.column_stack([eps, eta * np.sqrt(eps), eta**2])
    raise ValueError(f"unknown basis {basis!r}")


def fit_rates(rows, mode, key="err_H1", basis="2d", against="eps"):
    """Rate fits on report rows.

    ``eps_slope`` (alias ``eps_slope_at_eta0``): least-squares slope of
    log(error) against log(eps), or against log(eps ln(1/eps)) when
    ``against="eps_log"``. ``full_model``: nonnegative least squares for
    error ~ C1 sqrt(eps) + C2 eta sqrt(eps ln(1/eps)) + C3 eta^2 (1D basis
    eps, eta sqrt(eps), eta^2).
    """
    rows = [r for r in rows if r.get(key) is not None]
    if mode in ("eps_slope", "eps_slope_at_eta0"):
        if mode == "eps_slope_at_eta0":
            rows = [r for r in rows if r.get("eta", 0.0) == 0.0]
        if len(rows) < 3:
            raise ValueError("slope fit needs at least 3 rows")
        eps = np.array([r["eps"] for r in rows], dtype=float)
        err = np.array([r[key] for r in rows], dtype=float)
        if np.any(err <= 0):
            raise ValueError("slope fit needs positive errors")
        x = np.log(eps) if against == "eps" else np.log(eps * np.log(1.0 / eps))
        slope, intercept = np.polyfit(x, np.log(err), 1)
        return {"slope": float(slope), "intercept": float(intercept), "n": len(rows), "against": against}
    if mode == "full_model":
        if len(rows) < 6:
            raise ValueError("full model fit needs at least 6 rows")
        A = model_basis([r["eps"] for r in rows], [r.get("eta", 0.0) for r in rows], basis)
        b = np.array([r[key] for r in rows], dtype=float)
        if np.linalg.matrix_rank(A) < A.shape[1]:
            raise RankDeficientError("design matrix is rank deficient (need eps and eta variation)")
        coef, res = nnls(A, b)
        return {
            "coefficients": [float(c) for c in coef],
            "relative_residual": float(res / np.linalg.norm(b)),
            "max_relative_deviation": float(np.max(np.abs(A @ coef - b) / np.abs(b))),
            "basis": basis,
            "n": len(rows),
        }
    raise ValueError(f"unknown fit mode {mode!r}")


def verify_lemmas(config):
    """Run the named property checks at the sizes in ``config.verify``; returns the ledger."""
    from .checks import run_verification

    return run_verification(config)
