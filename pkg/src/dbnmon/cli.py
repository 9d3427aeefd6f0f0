"""Command-line interface: ``dbnmon gen|simulate|filter|bench``.

Exit codes: 0 success, 2 invalid input (model, trajectory, clustering or
configuration), 3 inference failure (depletion, join blow-up, impossible
evidence, state space too large), 4 file I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__, bench
from .errors import InferenceError
from .filters import (ALGORITHMS, FACTORED, FP3, PF, Clustering, FilterConfig, clique_tree_for, query_marginal,
                      run_filter)
from .generators import generate_random_parent_model, generate_two_cluster_model
from .io import dumps_beliefs, dumps_table, load_clustering, load_model, load_trajectory, save_model, save_trajectory
from .junction import prepare_static, transition_potentials
from .model import simulate
from .seeding import make_rng
from .tables import DEFAULT_EPSILON, MULTINOMIAL, SYSTEMATIC

EXIT_OK, EXIT_INVALID, EXIT_INFERENCE, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("dbnmon")


def _cmd_gen(args) -> int:
    rng = make_rng(args.seed)
    if args.topology == "two-cluster":
        model = generate_two_cluster_model(
            nodes_per_cluster=5 if args.nodes is None else args.nodes,
            cross_edges=args.cross, rng=rng, obs_accuracy=args.obs_accuracy)
    else:
        model = generate_random_parent_model(
            n=50 if args.nodes is None else args.nodes,
            parents_per_node=args.parents, skew=args.skew, rng=rng, obs_accuracy=args.obs_accuracy)
    save_model(model, args.out)
    log.info("wrote %s (%d state variables)", args.out, len(model.state_names))
    return EXIT_OK


def _cmd_simulate(args) -> int:
    model = load_model(args.model)
    traj = simulate(model, args.steps, make_rng(args.seed))
    save_trajectory(traj, args.out, observations_only=args.observations_only)
    return EXIT_OK


def _clustering(args) -> Clustering | None:
    if args.clusters is not None and args.clusters_file is not None:
        raise ValueError("give --clusters or --clusters-file, not both")
    if args.clusters is not None:
        return Clustering.parse(args.clusters)
    if args.clusters_file is not None:
        return load_clustering(args.clusters_file)
    return None


def _cmd_filter(args) -> int:
    model = load_model(args.model)
    traj = load_trajectory(args.obs, model)
    order = None
    if args.join_order is not None:
        try:
            order = tuple(int(x) for x in args.join_order.split(","))
        except ValueError:
            raise ValueError(f"--join-order {args.join_order!r} is not a comma-separated list of indices") from None
    config = FilterConfig(args.algorithm, particles=args.particles, clustering=_clustering(args),
                          resample=args.resample, seed=args.seed, epsilon=args.epsilon, join_order=order)
    config.check(model)
    if args.verbose >= 2 and config.algorithm == FP3:
        tree = clique_tree_for(model, config.clustering)
        static = prepare_static(tree, transition_potentials(model))
        print(tree.describe([sum(len(f) for f in group) for group in static.assigned]), file=sys.stderr)
    dump = Path(args.dump_tables) if args.dump_tables else None
    if dump is not None:
        dump.mkdir(parents=True, exist_ok=True)
    names = model.state_names
    records = []
    for state in run_filter(config, model, traj.observations(), make_rng(args.seed)):
        marginals = {n: query_marginal(state, model, (n,), args.epsilon).probabilities for n in names}
        records.append((state.t, state.increment, marginals))
        if dump is not None and (config.algorithm == PF or config.algorithm in FACTORED):
            tables = [state.belief] if config.algorithm == PF else state.belief
            for i, table in enumerate(tables):
                (dump / f"t{state.t:04d}_c{i}.csv").write_text(dumps_table(table))
        if args.verbose >= 1 and config.algorithm in FACTORED and state.diagnostics:
            log.info("t=%d %s", state.t, " ".join(f"{k}={v}" for k, v in sorted(state.diagnostics.items())))
    Path(args.out).write_text(dumps_beliefs(records, names, model.cardinalities))
    log.info("log-likelihood %.6f over %d slices", sum(r[1] for r in records), len(records))
    return EXIT_OK


def _cmd_bench(args) -> int:
    config = bench.load_config(args.config)
    out = args.out or config.output
    if out is None:
        raise ValueError("no output path: pass --out or set 'output' in the config")
    result = bench.run_experiment(config, base_dir=Path(args.config).resolve().parent)
    summary = bench.write_outputs(result, config, out, args.summary)
    print(bench.format_table(summary, config, result))
    for f in result.failures:
        print(f"failure: trial {f.trial} {f.algorithm} t={f.t}: {f.error}: {f.message}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dbnmon", description="Monitoring discrete dynamic Bayesian networks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="more logging; -vv also prints the FP3 clique tree")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a random model")
    p.add_argument("--topology", choices=["two-cluster", "random-parents"], required=True)
    p.add_argument("--nodes", type=int, help="nodes per cluster (two-cluster, default 5) or total (default 50)")
    p.add_argument("--parents", type=int, default=3, help="parents per node (random-parents)")
    p.add_argument("--cross", type=int, default=2, help="inter-cluster edges (two-cluster)")
    p.add_argument("--skew", type=float, default=0.05, help="CPT skew (random-parents)")
    p.add_argument("--obs-accuracy", type=float, default=0.9)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("simulate", help="sample a trajectory from a model")
    p.add_argument("--model", required=True)
    p.add_argument("--steps", type=int, required=True, help="number of transitions (the file has steps+1 slices)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--observations-only", action="store_true", help="omit the hidden state columns")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("filter", help="run a filter over an observation sequence")
    p.add_argument("--model", required=True)
    p.add_argument("--obs", required=True, help="trajectory CSV (hidden columns are ignored)")
    p.add_argument("--algorithm", choices=ALGORITHMS, required=True)
    p.add_argument("--particles", type=int, default=1000)
    p.add_argument("--clusters", help='clustering such as "A,B;B,C"')
    p.add_argument("--clusters-file", help="file with one comma-separated cluster per line")
    p.add_argument("--resample", choices=[MULTINOMIAL, SYSTEMATIC], default=MULTINOMIAL)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--join-order", help='fp2 sample-join cluster visit order as indices, e.g. "1,0"')
    p.add_argument("--dump-tables", metavar="DIR",
                   help="write each slice's particle tables (pf, fp1-3) as CSV files into DIR")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("bench", help="run an experiment described by a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="metrics CSV (overrides the config's 'output')")
    p.add_argument("--summary", help="also write a JSON summary here")
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s: %(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except InferenceError as exc:
        print(f"error: inference failed: {exc}", file=sys.stderr)
        return EXIT_INFERENCE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
