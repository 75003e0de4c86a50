"""Command-line interface: ``crowdagg {generate,aggregate,score,experiment}``.

Exit codes: 0 success, 1 internal error, 2 usage or precondition error.
Every run prints its resolved configuration and seed before working.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

from .data import (DataError, ProbeSet, decisions_to_map, load_answer_matrix, load_graph,
                   load_labels, load_probes, probes_to_map, restrict, save_answer_matrix,
                   save_labels)
from .experiment import (ExperimentError, METHODS, canonical_method, load_spec, needs_probes,
                         run_experiment, run_method, score, write_results)
from .gem import GemConfig, GemResult, run_gem
from .models import generate_dataset, load_crowd_config, save_params
from .plurality import PluralityError, PluralityResult

DEFAULT_SEED = 2015

log = logging.getLogger("crowdagg")


class UsageError(Exception):
    """Precondition failure reported with exit code 2."""


def _echo(pairs) -> None:
    for key, val in pairs:
        print(f"{key} = {val}")
    print("---")


def _writer(path):
    fh = open(path, "w", newline="", encoding="utf-8")
    return fh, csv.writer(fh, lineterminator="\n")


def _ensure_dir(path) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    try:
        config = load_crowd_config(args.config)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"invalid config {args.config}: {exc}") from None
    if args.seed is not None:
        config.seed = args.seed
    _echo(config.to_dict().items())
    _ensure_dir(args.out)
    answers, probes, params, truth = generate_dataset(config)
    save_answer_matrix(answers, os.path.join(args.out, "answers.csv"))
    save_labels(probes_to_map(answers, probes), os.path.join(args.out, "probes.csv"))
    save_labels({t: int(z) + 1 for t, z in zip(answers.task_ids, truth)},
                os.path.join(args.out, "truth.csv"))
    task_path = os.path.join(args.out, "task_params.csv")
    save_params(params, answers, os.path.join(args.out, "params.csv"), task_path, truth)
    if not args.task_params:
        os.remove(task_path)
    return 0


# ---------------------------------------------------------------------------
# aggregate


def _write_plurality(res: PluralityResult, answers, out: str) -> None:
    if res.weights is not None:
        fh, w = _writer(os.path.join(out, "weights.csv"))
        with fh:
            with_v = res.intentions is not None
            w.writerow(["worker_id", "weight"] + (["intention"] if with_v else []))
            for j, wid in enumerate(answers.worker_ids):
                row = [wid, repr(float(res.weights[j]))]
                if with_v:
                    row.append(int(res.intentions[j]))
                w.writerow(row)
    if res.objective_trace:
        fh, w = _writer(os.path.join(out, "objective_trace.csv"))
        with fh:
            w.writerow(["iter", "objective"])
            for i, val in enumerate(res.objective_trace):
                w.writerow([i, repr(float(val))])


def _write_gem(res: GemResult, answers, out: str) -> None:
    save_params(res.params, answers, os.path.join(out, "params.csv"),
                os.path.join(out, "task_params.csv"), res.decisions)
    fh, w = _writer(os.path.join(out, "ll_trace.csv"))
    with fh:
        w.writerow(["iter", "loglik"])
        for i, val in enumerate(res.ll_trace):
            w.writerow([i, repr(float(val))])
    fh, w = _writer(os.path.join(out, "posteriors.csv"))
    with fh:
        w.writerow(["task_id"] + [f"p{m + 1}" for m in range(answers.k)])
        for i, tid in enumerate(answers.task_ids):
            w.writerow([tid] + [repr(float(p)) for p in res.posteriors[i]])


def cmd_aggregate(args) -> int:
    method = canonical_method(args.method)
    seed = DEFAULT_SEED if args.seed is None else args.seed
    answers = load_answer_matrix(args.answers, args.k)
    if args.graph:
        answers = restrict(answers, load_graph(args.graph))
    probes = load_probes(args.probes, answers) if args.probes else ProbeSet()
    if needs_probes(method) and not probes:
        raise UsageError(f"{method} needs probe tasks (--probes with at least one row)")
    if probes and not needs_probes(method):
        log.warning("%s is unsupervised; ignoring --probes", method)
        probes = ProbeSet()
    _echo([("method", method), ("answers", args.answers), ("probes", args.probes or ""),
           ("graph", args.graph or ""), ("k", answers.k), ("tasks", answers.n_tasks),
           ("workers", answers.n_workers), ("seed", seed)])
    _ensure_dir(args.out)

    if method.endswith("-GEM"):
        config = GemConfig(seed=seed, n_restarts=args.restarts, tie_slopes=args.tie_slopes,
                           max_outer_iters=args.max_iters)
        res = run_gem(answers, probes, config)
        if not res.converged:
            log.warning("GEM stopped at the iteration cap before converging")
    else:
        res = run_method(method, answers, probes, seed)
    save_labels(decisions_to_map(answers, res.decisions), os.path.join(args.out, "decisions.csv"))
    if isinstance(res, GemResult):
        _write_gem(res, answers, args.out)
    else:
        _write_plurality(res, answers, args.out)
    return 0


# ---------------------------------------------------------------------------
# score


def cmd_score(args) -> int:
    decisions = load_labels(args.decisions)
    truth = load_labels(args.truth)
    probe_ids = set(load_labels(args.probes)) if args.probes else set()
    _echo([("decisions", args.decisions), ("truth", args.truth), ("probes", args.probes or "")])
    try:
        errors = score(decisions, truth, probe_ids)
    except ExperimentError as exc:
        raise UsageError(str(exc)) from None
    scored = sum(1 for t in truth if t not in probe_ids)
    print(f"errors = {errors}")
    print(f"scored_tasks = {scored}")
    if args.out:
        _ensure_dir(args.out)
        fh, w = _writer(os.path.join(args.out, "score.csv"))
        with fh:
            w.writerow(["errors", "scored_tasks"])
            w.writerow([errors, scored])
    return 0


# ---------------------------------------------------------------------------
# experiment


def cmd_experiment(args) -> int:
    spec = load_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    if args.trials is not None:
        if args.trials < 1:
            raise UsageError("--trials must be >= 1")
        spec.n_trials = args.trials
    _echo(spec.to_dict().items())
    _ensure_dir(args.out)
    result = run_experiment(spec, jobs=max(1, args.jobs))
    for name in write_results(result, args.out):
        log.info("wrote %s", os.path.join(args.out, name))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowdagg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="draw a synthetic crowd from the stochastic model")
    p.add_argument("config", help="key = value crowd config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--task-params", action="store_true",
                   help="also write task_params.csv (task_id,dtilde,z)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("aggregate", help="infer task answers with one method")
    p.add_argument("method", type=str.upper, choices=METHODS, metavar="METHOD",
                   help="one of " + ", ".join(m.lower() for m in METHODS))
    p.add_argument("answers", help="task_id,worker_id,answer CSV")
    p.add_argument("--probes", help="task_id,answer CSV of probe tasks")
    p.add_argument("--graph", help="task_id,worker_id CSV; answers off the graph are dropped")
    p.add_argument("--k", type=int, help="number of categories (default: largest answer)")
    p.add_argument("--seed", type=int, help=f"tie-break / restart seed (default {DEFAULT_SEED})")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--restarts", type=int, default=1, help="GEM: number of starts")
    p.add_argument("--tie-slopes", action="store_true", help="GEM: one slope shared by all workers")
    p.add_argument("--max-iters", type=int, default=200, help="GEM: outer iteration cap")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("score", help="count wrong non-probe decisions")
    p.add_argument("decisions", help="task_id,answer CSV")
    p.add_argument("truth", help="task_id,answer CSV")
    p.add_argument("--probes", help="task_id,answer CSV; these tasks are not scored")
    p.add_argument("--out", help="also write score.csv to this directory")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("experiment", help="run a multi-trial synthetic experiment")
    p.add_argument("spec", help="spec file, or a bundled name: table1, table2, table5, table6, table7")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.add_argument("--trials", type=int, help="override n_trials")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, DataError, ExperimentError, PluralityError, FileNotFoundError) as exc:
        print(f"crowdagg: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort handler for the exit code contract
        log.debug("internal error", exc_info=True)
        print(f"crowdagg: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
