"""
Command line front end of dbsmeta.

Subcommands: gen-world, train, meta-train, eval-adaptation, oracle, compare
and plot-data. Errors raised by the library end the program with one
``Error: ...`` line on stderr and the exit status of the error class.
"""

import argparse
import logging
import sys

from . import experiment
from .config import ALGORITHMS, load_spec
from .errors import ConfigError, DbsMetaError
from .plot_data import FIGURES, emit_plot_data
from .world import ORIGIN

logger = logging.getLogger("dbsmeta")


def setup_logging(verbose=False):
    """Console handler printing bare messages."""
    if any(getattr(h, "_dbsmeta_console", False) for h in logger.handlers):
        return
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("%(message)s"))
    handler._dbsmeta_console = True
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)


def _format_trajectory(traj):
    rows = []
    for n, row in enumerate(traj):
        stops = " -> ".join("O" if loc == ORIGIN else str(loc) for loc in row)
        rows.append("  DBS {}: O -> {} -> O".format(n, stops))
    return "\n".join(rows)


def _load(args, algorithm=None):
    overrides = list(args.override)
    if algorithm is not None:
        overrides.append("experiment.algorithm=\"{}\"".format(algorithm))
    print("Read TOML file {} ...".format(args.spec))
    return load_spec(args.spec, overrides, seed=args.seed, output_dir=args.out)


def cmd_gen_world(args):
    spec = _load(args)
    path = experiment.gen_world(spec, spec.output_dir)
    print("World written to {}".format(path))
    return 0


def cmd_train(args):
    spec = _load(args)
    if spec.algorithm == "meta":
        raise ConfigError("use meta-train for the meta algorithm")
    for summary in experiment.run_all(spec, [spec.algorithm], args.jobs):
        print("{} seed {}: final G = {:.6f}".format(summary["algo"], summary["seed"], summary["final_G"]))
    return 0


def cmd_meta_train(args):
    spec = _load(args, algorithm="meta")
    for summary in experiment.run_all(spec, ["meta"], args.jobs):
        print("meta seed {}: final G = {:.6f}".format(summary["seed"], summary["final_G"]))
    return 0


def cmd_eval_adaptation(args):
    spec = _load(args)
    medians = experiment.eval_adaptation_all(spec, args.jobs)
    print("Median iterations to threshold:")
    for name, value in medians.items():
        print("  {}: {:.1f}".format(name, value))
    return 0


def cmd_oracle(args):
    spec = _load(args, algorithm="oracle")
    for summary in experiment.run_all(spec, ["oracle"], args.jobs):
        print("G* = {:.6f} ({} optimal joint trajectories)".format(summary["G_star"], summary["argmax_count"]))
        print(_format_trajectory(summary["trajectory"]))
    return 0


def cmd_compare(args):
    spec = _load(args)
    algos = [a.strip() for a in args.algos.split(",") if a.strip()]
    table = experiment.compare(spec, algos, args.external, args.jobs)
    print(table.to_string(index=False))
    return 0


def cmd_plot_data(args):
    written = emit_plot_data(args.metrics, args.figure, args.out)
    for path in written:
        print("Wrote {}".format(path))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="dbsmeta", description="Drone base station trajectory learning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_spec(p):
        p.add_argument("--spec", required=True, help="TOML experiment file")
        p.add_argument("--seed", type=int, default=None, help="run a single seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, may be repeated")
        return p

    with_spec(sub.add_parser("gen-world", help="write the resolved world")).set_defaults(func=cmd_gen_world)
    with_spec(sub.add_parser("train", help="train experiment.algorithm")).set_defaults(func=cmd_train)
    with_spec(sub.add_parser("meta-train", help="meta-train an initialization")).set_defaults(func=cmd_meta_train)
    with_spec(sub.add_parser("eval-adaptation", help="adaptation speed on held-out tasks")).set_defaults(
        func=cmd_eval_adaptation)
    with_spec(sub.add_parser("oracle", help="brute-force optimum of the realization")).set_defaults(func=cmd_oracle)
    p_compare = with_spec(sub.add_parser("compare", help="run and tabulate several algorithms"))
    p_compare.add_argument("--algos", default="vdrl,iac", help="comma separated, from {}".format(", ".join(ALGORITHMS)))
    p_compare.add_argument("--external", action="append", default=[], metavar="NAME=PATH.csv")
    p_compare.set_defaults(func=cmd_compare)
    p_plot = sub.add_parser("plot-data", help="emit plot-ready CSV series")
    p_plot.add_argument("--figure", required=True, choices=FIGURES)
    p_plot.add_argument("--metrics", required=True, help="directory of runs")
    p_plot.add_argument("--out", default=None, help="output directory (default <metrics>/plot_data)")
    p_plot.set_defaults(func=cmd_plot_data)
    return parser


def run(argv=None):
    """Parse ``argv`` and execute; returns the exit status."""
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except DbsMetaError as e:
        print("Error: {}".format(e), file=sys.stderr)
        return e.exit_code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
