"""Command-line driver.

Exit codes: 0 success, 1 invalid input, 2 some vertices failed to fit.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .fitting import FitConfig
from .harness import RunConfig, estimate_mesh_file, make_mesh, run_experiment
from .mesh import MeshError, save_mesh

EXIT_OK, EXIT_INVALID, EXIT_FAILED_FITS = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # usage errors are input errors, keep exit code 2 for fit failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _degree_range(text):
    try:
        if ".." in text:
            lo, hi = (int(t) for t in text.split("..", 1))
            degs = tuple(range(lo, hi + 1))
        else:
            degs = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'a..b' or a comma list, got {text!r}")
    if not degs or any(not 1 <= d <= 6 for d in degs):
        raise argparse.ArgumentTypeError(f"degrees must lie in 1..6, got {text!r}")
    return degs


def _add_fit_args(p):
    p.add_argument("--iterative", action="store_true", help="refit Hessians from normals")
    p.add_argument("--no-weights", action="store_true", help="use unit row weights")
    p.add_argument("--no-conditioning", action="store_true",
                   help="disable ring upgrades and condition-based degree reduction")
    p.add_argument("--cond-threshold", type=float, default=1e3)


def _fit_config(args, degree):
    return FitConfig(
        degree=degree, weighting=not args.no_weights, iterative=args.iterative,
        conditioning=not args.no_conditioning, cond_threshold=args.cond_threshold,
    )


def build_parser():
    parser = _Parser(prog="heightfit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate", help="per-vertex normals and curvatures of a mesh file")
    p.add_argument("mesh", help="OFF or OBJ file")
    p.add_argument("--degree", type=int, default=2)
    _add_fit_args(p)
    p.add_argument("--out", required=True, help="per-vertex CSV path")

    p = sub.add_parser("convergence", help="error norms and rates over refinement levels")
    p.add_argument("--surface", required=True, choices=["sphere", "torus", "f1", "f2"])
    p.add_argument("--style", default="irregular",
                   choices=["irregular", "semiregular", "structured"])
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--start-level", type=int, default=0)
    p.add_argument("--degrees", type=_degree_range, default=(1, 2, 3, 4))
    _add_fit_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-vertex-csv", action="store_true", help="write only summary.csv")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("genmesh", help="write a generated test mesh")
    p.add_argument("--surface", required=True, choices=["sphere", "torus", "f1", "f2"])
    p.add_argument("--style", default="irregular",
                   choices=["irregular", "semiregular", "structured"])
    p.add_argument("--level", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="OFF or OBJ path")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "estimate":
            _, est = estimate_mesh_file(args.mesh, _fit_config(args, args.degree), args.out)
            if est.failures:
                print(f"fit failed at {len(est.failures)} vertices: "
                      f"{sorted(est.failures)[:20]}", file=sys.stderr)
                return EXIT_FAILED_FITS
        elif args.command == "convergence":
            cfg = RunConfig(
                command="convergence", surface=args.surface, style=args.style,
                levels=args.levels, start_level=args.start_level, degrees=args.degrees,
                fit=_fit_config(args, args.degrees[0]), seed=args.seed, out=args.out,
                vertex_csv=not args.no_vertex_csv,
            )
            rows = run_experiment(cfg)
            if any(r["n_failed"] for r in rows):
                print("some vertices failed; see n_failed in summary.csv", file=sys.stderr)
                return EXIT_FAILED_FITS
        elif args.command == "genmesh":
            mesh, _ = make_mesh(args.surface, args.style, args.level, args.seed)
            save_mesh(mesh, args.out)
    except (MeshError, ValueError, OSError) as exc:
        where = f"{args.mesh}: " if args.command == "estimate" and isinstance(exc, MeshError) else ""
        print(f"heightfit: error: {where}{exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
