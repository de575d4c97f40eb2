"""Command-line entry point: ``weakhom {cell,chi,solve,study,verify,oracle1d} CONFIG``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import WeakHomError


def _load(args):
    from .study import StudyConfig

    cfg = StudyConfig.from_file(args.config)
    if args.seed is not None:
        cfg.seed = int(args.seed)
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    if args.threads is not None:
        cfg.threads = max(1, int(args.threads))
    return cfg


def _dump(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    sys.stdout.write(text)


def cmd_cell(cfg, args):
    from .cell_problems import CellCoefficients, build_correctors, export_correctors

    cell = CellCoefficients.from_spec(cfg.cell, cfg.dim, cfg.cell.get("resolution", cfg.mesh_ratio))
    cs = build_correctors(cell, radius=cfg.chi_radius, with_chi=args.with_chi)
    if args.export:
        export_correctors(cs, Path(cfg.out_dir) / "correctors")
    _dump({"A_star": cs.A_star.tolist(), "B_bar": cs.B_bar.tolist()})
    return 0


def cmd_chi(cfg, args):
    from .checks import chi_decay

    if cfg.dim != 2:
        raise WeakHomError("the chi decay report is two-dimensional")
    out = chi_decay(cfg.cell, cfg.mesh_ratio, radius=cfg.chi_radius, small_radius=args.small_radius)
    _dump(out, Path(cfg.out_dir) / "chi_decay.json")
    return 0


def cmd_solve(cfg, args):
    from .cell_problems import CellCoefficients, build_correctors
    from .grid_fem import StructuredGrid
    from .random_field import lattice_size, sample_realization
    from .solutions import build_expansion, make_source, solve_macro, solve_oscillatory

    from .study import parse_epsilon

    eps = cfg.epsilons[0] if args.eps is None else parse_epsilon(args.eps)
    eta = cfg.etas[0] if args.eta is None else float(args.eta)
    cell = CellCoefficients.from_spec(cfg.cell, cfg.dim, cfg.cell.get("resolution", cfg.mesh_ratio))
    cs = build_correctors(cell, radius=cfg.chi_radius)
    grid = StructuredGrid.unit(cfg.dim, lattice_size(eps) * cfg.mesh_ratio)
    f = make_source(cfg.source, cfg.dim)
    real = sample_realization(cfg.model(eta), cell, eps, grid, args.replicate)
    u = solve_oscillatory(real, f, method=cfg.method, rtol=cfg.rtol)
    v = build_expansion(cs, solve_macro(cs, f, grid), real)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    u.nodal().astype("<f8").tofile(out / "u.f64")
    v.node_val.astype("<f8").tofile(out / "v.f64")
    meta = {
        "grid": {"dim": grid.dim, "cells": list(grid.cells), "lower": list(grid.lower), "upper": list(grid.upper)},
        "node_shape": list(grid.node_shape),
        "eps": eps,
        "eta": eta,
        "seed": cfg.seed,
        "replicate": args.replicate,
        "errors": v.error_against(u),
        "files": {"u": "u.f64", "v": "v.f64"},
    }
    _dump(meta, out / "solve.json")
    return 0


def cmd_study(cfg, args):
    from .study import run_study

    def progress(row):
        print(f"eps={row['eps']:.6g} eta={row['eta']:.6g} M={row['M']} err_H1={row['err_H1']} {row['status']}",
              file=sys.stderr)

    report = run_study(cfg, progress=progress)
    csv_path, json_path = report.write(cfg.out_dir, cfg.name)
    print(f"wrote {csv_path} and {json_path}")
    return 0


def cmd_verify(cfg, args):
    from .checks import ledger_to_dicts
    from .study import verify_lemmas

    ledger = verify_lemmas(cfg)
    for c in ledger:
        print(c.line())
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "verify.json").write_text(json.dumps(ledger_to_dicts(ledger), indent=2, sort_keys=True) + "\n")
    return 0 if all(c.passed for c in ledger) else 1


def cmd_oracle1d(cfg, args):
    from .cell_problems import CellCoefficients
    from .oracle_1d import Source1D, rate_check_1d
    from .random_field import Law

    cell = CellCoefficients.from_spec(cfg.cell, 1, cfg.cell.get("resolution", 1024))
    a, b = cell.scalar_pieces()
    out = rate_check_1d({
        "a": a.simplified(),
        "b": b.simplified(),
        "law": Law.from_spec(cfg.law),
        "seed": cfg.seed,
        "epsilons": cfg.epsilons,
        "etas": cfg.etas,
        "replicates": cfg.replicates,
        "source": Source1D.from_spec(cfg.source),
    })
    _dump(out, Path(cfg.out_dir) / "oracle1d.json")
    return 0


COMMANDS = {
    "cell": cmd_cell,
    "chi": cmd_chi,
    "solve": cmd_solve,
    "study": cmd_study,
    "verify": cmd_verify,
    "oracle1d": cmd_oracle1d,
}


def build_parser():
    p = argparse.ArgumentParser(prog="weakhom", description="Weakly random homogenization studies.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="study configuration (JSON or TOML)")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--out-dir", default=None, help="override the output directory")
    common.add_argument("--threads", type=int, default=None, help="worker threads for replicates")
    sub = p.add_subparsers(dest="command", required=True)
    c = sub.add_parser("cell", parents=[common], help="solve the cell problems and print A*, B-bar")
    c.add_argument("--with-chi", action="store_true", help="also solve the defect correctors")
    c.add_argument("--export", action="store_true", help="write correctors to OUT_DIR/correctors")
    c = sub.add_parser("chi", parents=[common], help="decay report of the defect correctors")
    c.add_argument("--small-radius", type=int, default=None, help="second radius for the nested check")
    c = sub.add_parser("solve", parents=[common], help="one realization: solve, expand, export")
    c.add_argument("--eps", default=None)
    c.add_argument("--eta", default=None)
    c.add_argument("--replicate", type=int, default=0)
    sub.add_parser("study", parents=[common], help="full (eps, eta) Monte Carlo sweep")
    sub.add_parser("verify", parents=[common], help="ledger of named property checks")
    sub.add_parser("oracle1d", parents=[common], help="1D exact-oracle rate check")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        return COMMANDS[args.command](cfg, args)
    except (WeakHomError, OSError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
