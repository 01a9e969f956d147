"""Command line interface.

Subcommands: ``bip run``, ``ocp run``, ``reference``, ``fem-convergence``,
``qmc-convergence``, ``lattice export``, ``lattice import``.  Exit codes:
0 success, 2 tolerance not reached under the resource caps, 3 bad
configuration.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import driver
from .driver import ConfigError, RunConfig, load_config
from .qmc import LatticeRule, SpodWeights


def _run_adaptive(args, kind: str) -> int:
    try:
        config = load_config(args.config)
        if config.kind != kind:
            config.kind = kind
            config.__post_init__()
        reference = None
        if kind == "bip" and not args.no_reference:
            reference = driver.reference_ratio(config)
        result = driver.adaptive_run(config, reference=reference)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    driver.emit_outputs(result, config)
    final = result.final_ratio
    if np.isscalar(final):
        print(f"final ratio: {final!r}")
    else:
        from . import fem

        print(f"final control norm: {fem.l2_norm(result.final_mesh, final)!r}")
    print(f"iterations: {len(result.rows)}  status: {result.status}")
    print(f"outputs in {config.output_dir}/")
    return result.status


def _run_reference(args) -> int:
    try:
        config = load_config(args.config)
        ref = driver.reference_ratio(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    print(f"reference ratio: {ref.value!r}")
    print(f"std error (batch means): {ref.std_error!r}")
    print(f"mesh dofs: {ref.mesh.num_dofs}  samples: {ref.samples}  mode: {ref.mode}")
    return 0


def _write_rows(path: str, rows: list[dict]) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for row in rows:
            w.writerow(row)


def _run_fem_convergence(args) -> int:
    rows = driver.fem_convergence_table(levels=args.levels, initial_n=args.initial_n)
    path = os.path.join(args.out, "fem_convergence.csv")
    _write_rows(path, rows)
    errs = [r["l2_error"] for r in rows]
    hs = [np.log2(1.0 / r["h_max"]) for r in rows]
    rate = driver.fitted_rate(hs, errs)
    print(f"wrote {path}")
    print(f"fitted L2 rate (per mesh halving): {-rate:.3f}")
    return 0


def _run_qmc_convergence(args) -> int:
    rows = driver.qmc_convergence_table(dimension=args.dimension)
    path = os.path.join(args.out, "qmc_convergence.csv")
    _write_rows(path, rows)
    rate = driver.fitted_rate([r["m"] for r in rows], [r["err_vs_ref"] for r in rows])
    print(f"wrote {path}")
    print(f"fitted log2 rate: {rate:.3f}")
    return 0


def _run_lattice_export(args) -> int:
    beta = 0.5 / np.arange(1, args.dimension + 1) ** 2
    rule = LatticeRule(
        dimension=args.dimension,
        weights=SpodWeights(alpha=args.alpha, n=args.shift, c=1.0, beta=beta),
    )
    for m in range(1, args.max_level + 1):
        rule.construct_level(m)
    rule.export_file(args.file)
    print(f"wrote {args.file} (levels 1..{args.max_level}, dimension {args.dimension})")
    return 0


def _run_lattice_import(args) -> int:
    beta = 0.5 / np.arange(1, args.dimension + 1) ** 2
    rule = LatticeRule(
        dimension=args.dimension,
        weights=SpodWeights(alpha=3, n=0, c=1.0, beta=beta),
    )
    try:
        rule.import_file(args.file)
    except (OSError, ValueError) as exc:
        print(f"import failed: {exc}", file=sys.stderr)
        return 3
    levels = sorted(rule.levels)
    print(f"imported {len(levels)} levels: {levels}")
    for m in levels[:3]:
        pts = rule.points(m)
        print(f"  level {m}: {pts.shape[0]} points, first {pts[0][: min(4, pts.shape[1])]}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="qmcratio",
        description="Ratio-of-integrals estimation with a-posteriori QMC-FEM error control",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_bip = sub.add_parser("bip", help="Bayesian inversion runs")
    bip_sub = p_bip.add_subparsers(dest="action", required=True)
    p_bip_run = bip_sub.add_parser("run", help="adaptive posterior-mean run")
    p_bip_run.add_argument("config")
    p_bip_run.add_argument("--no-reference", action="store_true")

    p_ocp = sub.add_parser("ocp", help="risk-averse control runs")
    ocp_sub = p_ocp.add_subparsers(dest="action", required=True)
    p_ocp_run = ocp_sub.add_parser("run", help="adaptive control run")
    p_ocp_run.add_argument("config")
    p_ocp_run.add_argument("--no-reference", action="store_true", default=True)

    p_ref = sub.add_parser("reference", help="Monte Carlo reference ratio")
    p_ref.add_argument("config")

    p_fem = sub.add_parser("fem-convergence", help="manufactured-solution ladder")
    p_fem.add_argument("--levels", type=int, default=4)
    p_fem.add_argument("--initial-n", type=int, default=8)
    p_fem.add_argument("--out", default="out")

    p_qmc = sub.add_parser("qmc-convergence", help="smooth-integrand lattice ladder")
    p_qmc.add_argument("--dimension", type=int, default=8)
    p_qmc.add_argument("--out", default="out")

    p_lat = sub.add_parser("lattice", help="generating vector files")
    lat_sub = p_lat.add_subparsers(dest="action", required=True)
    p_exp = lat_sub.add_parser("export")
    p_exp.add_argument("file")
    p_exp.add_argument("--dimension", type=int, default=16)
    p_exp.add_argument("--max-level", type=int, default=10)
    p_exp.add_argument("--alpha", type=int, default=3)
    p_exp.add_argument("--shift", type=int, default=0)
    p_imp = lat_sub.add_parser("import")
    p_imp.add_argument("file")
    p_imp.add_argument("--dimension", type=int, default=16)

    args = parser.parse_args(argv)
    if args.command == "bip":
        return _run_adaptive(args, "bip")
    if args.command == "ocp":
        return _run_adaptive(args, "ocp")
    if args.command == "reference":
        return _run_reference(args)
    if args.command == "fem-convergence":
        return _run_fem_convergence(args)
    if args.command == "qmc-convergence":
        return _run_qmc_convergence(args)
    if args.command == "lattice":
        if args.action == "export":
            return _run_lattice_export(args)
        return _run_lattice_import(args)
    return 3


if __name__ == "__main__":
    sys.exit(main())
