"""Seeded multi-trial experiments over synthetic crowds.

An experiment is described by a flat ``key = value`` file::

    name = table1
    protocol = stochastic          # stochastic | sha | mixed
    methods = PLU, SS-PLU, US-SW, US-NEG, SS-GEM, US-GEM
    sweep = diff_var
    values = 4000, 2000, 1000, 500, 250
    n_trials = 20
    probe_count = 10
    seed = 2015

Two-way grids add ``columns`` / ``column_values``.  Any other key is passed
to the data generator of the chosen protocol.  Trial ``t`` at sweep point
``p`` draws all of its randomness from ``SeedSequence([seed, p, t])``, so
tables are reproducible regardless of ``jobs``.
"""

from __future__ import annotations

import csv
import itertools
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from importlib import resources
from typing import Mapping

import numpy as np

from .data import AnswerMatrix, ProbeSet
from .gem import GemConfig, run_gem
from .models import (CrowdGenConfig, ModelParams, generate_dataset, generate_mixed_skill_dataset,
                     generate_sha_dataset, read_kv_file)
from .plurality import objective, plu, ss_plu, us_hyb, us_neg, us_sw

log = logging.getLogger(__name__)

METHODS = ("PLU", "SS-PLU", "US-SW", "SS-SW", "US-NEG", "SS-NEG", "US-GEM", "SS-GEM", "US-HYB")
PROTOCOLS = ("stochastic", "sha", "mixed")
SHA_DEFAULTS = {"n_workers": 50, "n_tasks": 100, "k": 5, "spammer_fraction": 0.0,
                "adversary_fraction": 0.0, "degree": 0}
MIXED_DEFAULTS = {"n_workers": 50, "n_tasks": 100, "k": 5, "low_fraction": 0.0,
                  "adversary_fraction": 0.0, "slope": 1.0, "degree": 0}
BUNDLED = ("table1", "table2", "table5", "table6", "table7")
HIST_BINS = 10


class ExperimentError(ValueError):
    pass


def needs_probes(method: str) -> bool:
    return method.startswith("SS-")


def canonical_method(name: str) -> str:
    up = name.strip().upper()
    if up not in METHODS:
        raise ExperimentError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")
    return up


def run_method(method: str, answers: AnswerMatrix, probes: ProbeSet, seed: int):
    """Run one named aggregator.  Returns the method's result object, which
    always has a ``decisions`` attribute."""
    method = canonical_method(method)
    if needs_probes(method) and not probes:
        raise ExperimentError(f"{method} needs probe tasks")
    if method == "PLU":
        return plu(answers, seed)
    if method == "SS-PLU":
        return ss_plu(answers, probes, seed)
    if method.endswith("-SW"):
        return us_sw(answers, probes if method == "SS-SW" else None, seed)
    if method.endswith("-NEG"):
        return us_neg(answers, probes if method == "SS-NEG" else None, seed)
    if method == "US-HYB":
        return us_hyb(answers, None, seed)
    return run_gem(answers, probes if method == "SS-GEM" else None, GemConfig(seed=seed))


# ---------------------------------------------------------------------------
# scoring


def score(decisions, truth, probes=None) -> int:
    """Number of non-probe tasks whose decision differs from the truth.

    ``decisions`` and ``truth`` are either arrays indexed by task (with
    ``probes`` a :class:`ProbeSet`) or mappings keyed by task id (with
    ``probes`` any container of probe task ids).  Every task in ``truth``
    needs a decision.
    """
    if isinstance(truth, Mapping):
        if not isinstance(decisions, Mapping):
            raise ExperimentError("decisions must be a mapping when truth is")
        skip = set(probes.labels if isinstance(probes, ProbeSet) else (probes or ()))
        missing = [t for t in truth if t not in decisions]
        if missing:
            raise ExperimentError(f"no decision for task {missing[0]!r}")
        return sum(1 for t, z in truth.items() if t not in skip and decisions[t] != z)
    probes = probes or ProbeSet()
    truth = np.asarray(truth)
    decisions = np.asarray(decisions)
    if decisions.shape != truth.shape:
        raise ExperimentError(f"expected {truth.size} decisions, got {decisions.size}")
    wrong = decisions != truth
    wrong[probes.mask(truth.size)] = False
    return int(wrong.sum())


def _pearson(x, y) -> float:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.shape != y.shape:
        raise ExperimentError("parameter vectors differ in length")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


def recovery_stats(true_params: ModelParams, est_params: ModelParams):
    """Pearson correlations (skills, difficulties) between true and estimated
    parameters.  A constant vector gives NaN."""
    return _pearson(true_params.d, est_params.d), _pearson(true_params.dtilde, est_params.dtilde)


def worker_accuracies(answers: AnswerMatrix, truth) -> np.ndarray:
    """Fraction of each worker's answers that match the truth (NaN if none)."""
    hit = answers.answers == np.asarray(truth)[answers.tasks]
    n = answers.n_workers
    total = np.bincount(answers.workers, minlength=n)
    right = np.bincount(answers.workers, weights=hit, minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, right / np.maximum(total, 1), np.nan)


def accuracy_histogram(acc, bins: int = HIST_BINS):
    """Counts of worker accuracies in ``bins`` equal bins over [0, 1]."""
    acc = np.asarray(acc, float)
    counts, edges = np.histogram(acc[np.isfinite(acc)], bins=bins, range=(0.0, 1.0))
    return counts, edges


# ---------------------------------------------------------------------------
# spec


def _parse_value(text: str):
    text = text.strip()
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _parse_list(text: str) -> list:
    return [_parse_value(x) for x in text.split(",") if x.strip()]


def _truthy(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off", ""):
        return False
    raise ExperimentError(f"not a boolean: {text!r}")


@dataclass
class ExperimentSpec:
    name: str = "experiment"
    protocol: str = "stochastic"
    methods: tuple = ("PLU",)
    sweep: str = "diff_var"
    values: tuple = (250,)
    columns: str | None = None
    column_values: tuple = ()
    n_trials: int = 20
    probe_count: int = 10
    seed: int = 0
    generator: dict = field(default_factory=dict)
    recovery: bool = False  # correlations of GEM estimates vs truth
    histogram: bool = False  # worker-accuracy histogram of the first trial
    hyb_wins: bool = False  # count trials where US-HYB beats US-SW on errors and psi_bp
    timing: bool = False  # wall-clock runtimes make output non-reproducible

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ExperimentError(f"unknown protocol {self.protocol!r}")
        self.methods = tuple(canonical_method(m) for m in self.methods)
        if not self.methods:
            raise ExperimentError("no methods given")
        self.values = tuple(self.values)
        self.column_values = tuple(self.column_values)
        if not self.values or (self.columns and not self.column_values):
            raise ExperimentError("sweep axis is empty")
        if self.n_trials < 1:
            raise ExperimentError("n_trials must be >= 1")
        if self.probe_count < 0:
            raise ExperimentError("probe_count must be >= 0")
        if self.hyb_wins and not {"US-SW", "US-HYB"} <= set(self.methods):
            raise ExperimentError("hyb_wins needs both US-SW and US-HYB among the methods")
        allowed = self._generator_keys()
        for key in (self.sweep, self.columns):
            if key is not None and key not in allowed:
                raise ExperimentError(f"cannot sweep {key!r} under protocol {self.protocol}")
        unknown = set(self.generator) - allowed
        if unknown:
            raise ExperimentError(f"unknown keys: {', '.join(sorted(unknown))}")
        # catch bad generator settings before any trial runs
        for point in self.points():
            self.generator_args(point)

    def _generator_keys(self) -> set:
        if self.protocol == "stochastic":
            return {f.name for f in fields(CrowdGenConfig)} - {"seed", "probe_count"}
        return set(SHA_DEFAULTS if self.protocol == "sha" else MIXED_DEFAULTS)

    @classmethod
    def from_dict(cls, raw: Mapping[str, str]) -> "ExperimentSpec":
        raw = dict(raw)
        kw = {}
        for key in ("name", "protocol", "sweep", "columns"):
            if key in raw:
                kw[key] = raw.pop(key).strip()
        for key in ("methods",):
            if key in raw:
                kw[key] = [m for m in raw.pop(key).split(",") if m.strip()]
        for key in ("values", "column_values"):
            if key in raw:
                kw[key] = _parse_list(raw.pop(key))
        for key in ("n_trials", "probe_count", "seed"):
            if key in raw:
                kw[key] = int(raw.pop(key))
        for key in ("recovery", "histogram", "hyb_wins", "timing"):
            if key in raw:
                kw[key] = _truthy(raw.pop(key))
        kw["generator"] = {k: _parse_value(v) for k, v in raw.items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        out = {"name": self.name, "protocol": self.protocol, "methods": ", ".join(self.methods),
               "sweep": self.sweep, "values": ", ".join(map(str, self.values))}
        if self.columns:
            out["columns"] = self.columns
            out["column_values"] = ", ".join(map(str, self.column_values))
        out.update(n_trials=self.n_trials, probe_count=self.probe_count, seed=self.seed)
        for key in ("recovery", "histogram", "hyb_wins", "timing"):
            if getattr(self, key):
                out[key] = "true"
        out.update(self.generator)
        return out

    def points(self) -> list[tuple]:
        """Sweep points as tuples of axis values (one or two per point)."""
        if self.columns:
            return list(itertools.product(self.values, self.column_values))
        return [(v,) for v in self.values]

    def point_label(self, point: tuple) -> str:
        return "/".join(_fmt_num(v) for v in point)

    def generator_args(self, point: tuple) -> dict:
        args = dict(self.generator)
        args[self.sweep] = point[0]
        if self.columns:
            args[self.columns] = point[1]
        if self.protocol == "stochastic":
            cfg = CrowdGenConfig.from_dict({k: str(v) for k, v in args.items()})
            cfg.probe_count = self.probe_count
            if cfg.probe_count > cfg.n_tasks:
                raise ExperimentError("probe_count exceeds n_tasks")
            return cfg.to_dict()
        base = dict(SHA_DEFAULTS if self.protocol == "sha" else MIXED_DEFAULTS)
        base.update(args)
        if self.probe_count > base["n_tasks"]:
            raise ExperimentError("probe_count exceeds n_tasks")
        other = "spammer_fraction" if self.protocol == "sha" else "low_fraction"
        fracs = (base[other], base["adversary_fraction"])
        if min(fracs) < 0 or sum(fracs) > 1 + 1e-12:
            raise ExperimentError(f"{other} and adversary_fraction must be >= 0 and sum to at most 1")
        return base


def load_spec(path_or_name) -> ExperimentSpec:
    """Load a spec file, or one of the bundled specs by name (e.g. ``table1``)."""
    name = str(path_or_name)
    if not os.path.exists(name) and name in BUNDLED:
        with resources.as_file(resources.files("crowdagg") / "specs" / f"{name}.spec") as p:
            return ExperimentSpec.from_dict(read_kv_file(p))
    if not os.path.exists(name):
        raise ExperimentError(f"no such spec file or bundled spec: {name}")
    return ExperimentSpec.from_dict(read_kv_file(name))


# ---------------------------------------------------------------------------
# running


@dataclass
class TrialReport:
    errors: dict  # method -> int, or None when skipped
    runtime_ms: dict
    recovery: dict = field(default_factory=dict)  # method -> (corr_d, corr_dtilde)
    accuracies: np.ndarray | None = None
    hyb_win: bool = False
    n_scored: int = 0


def _generate(spec: ExperimentSpec, point: tuple, rng):
    args = spec.generator_args(point)
    if spec.protocol == "stochastic":
        answers, probes, params, truth = generate_dataset(CrowdGenConfig(**args), rng)
        return answers, probes, params, truth
    if spec.protocol == "sha":
        answers, truth, _ = generate_sha_dataset(
            args["n_workers"], args["n_tasks"], args["k"], args["spammer_fraction"],
            args["adversary_fraction"], seed=rng, degree=args["degree"])
        params = None
    else:
        answers, params, truth = generate_mixed_skill_dataset(
            args["n_workers"], args["n_tasks"], args["k"], args["low_fraction"],
            args["adversary_fraction"], seed=rng, slope=args["slope"], degree=args["degree"])
    probes = ProbeSet()
    if spec.probe_count:
        chosen = np.sort(rng.choice(answers.n_tasks, spec.probe_count, replace=False))
        probes = ProbeSet({int(t): int(truth[t]) for t in chosen})
    return answers, probes, params, truth


def run_trial(spec: ExperimentSpec, point_index: int, trial: int) -> TrialReport:
    point = spec.points()[point_index]
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, point_index, trial]))
    answers, probes, params, truth = _generate(spec, point, rng)
    report = TrialReport({}, {}, n_scored=answers.n_tasks - len(probes))
    if spec.histogram and point_index == 0 and trial == 0:
        report.accuracies = worker_accuracies(answers, truth)
    results = {}
    for method in spec.methods:
        if needs_probes(method) and not probes:
            report.errors[method] = None
            continue
        seed = int(np.random.SeedSequence([spec.seed, point_index, trial, METHODS.index(method)])
                   .generate_state(1)[0])
        start = time.perf_counter()
        res = run_method(method, answers, probes, seed)
        report.runtime_ms[method] = 1000.0 * (time.perf_counter() - start)
        report.errors[method] = score(res.decisions, truth, probes)
        results[method] = res
        if spec.recovery and params is not None and method.endswith("-GEM"):
            report.recovery[method] = recovery_stats(params, res.params)
    if spec.hyb_wins:
        sw, hyb = results["US-SW"], results["US-HYB"]
        psi_sw = objective("bp", answers, sw.decisions, sw.weights, sw.intentions)
        psi_hyb = objective("bp", answers, hyb.decisions, hyb.weights, hyb.intentions)
        report.hyb_win = report.errors["US-HYB"] < report.errors["US-SW"] and psi_hyb > psi_sw
    return report


def _run_trial_args(args):
    return run_trial(*args)


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    reports: dict  # point index -> list of TrialReport in trial order

    def cell(self, point_index: int, method: str):
        """(mean, std, mean runtime ms) of one method at one point, or None if skipped."""
        reps = self.reports[point_index]
        errs = [r.errors[method] for r in reps]
        if any(e is None for e in errs):
            return None
        errs = np.asarray(errs, dtype=float)
        rt = float(np.mean([r.runtime_ms[method] for r in reps]))
        return float(errs.mean()), float(errs.std()), rt

    def hyb_win_count(self, point_index: int) -> int:
        return sum(r.hyb_win for r in self.reports[point_index])


def run_experiment(spec: ExperimentSpec, jobs: int = 1) -> ExperimentResult:
    """Run every (point, trial) pair; aggregation is always in trial order."""
    work = [(spec, p, t) for p in range(len(spec.points())) for t in range(spec.n_trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(_run_trial_args, work, chunksize=1))
    else:
        out = [run_trial(*w) for w in work]
    reports = {p: [] for p in range(len(spec.points()))}
    for (_, p, _), rep in zip(work, out):
        reports[p].append(rep)
    return ExperimentResult(spec, reports)


# ---------------------------------------------------------------------------
# output


def _fmt_num(x) -> str:
    if isinstance(x, float):
        if np.isnan(x):
            return "NA"
        return f"{x:.6g}"
    return str(x)


def _fmt_stat(x: float) -> str:
    return "NA" if x is None or not np.isfinite(x) else f"{x:.4f}"


def write_results(result: ExperimentResult, out_dir) -> list[str]:
    """Write results.csv, results.md and the optional recovery / histogram /
    US-HYB tables.  Returns the written file names."""
    spec = result.spec
    os.makedirs(out_dir, exist_ok=True)
    written = ["results.csv", "results.md"]
    with open(os.path.join(out_dir, "results.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sweep_value", "method", "mean_errors", "std_errors", "mean_runtime_ms"])
        for p, point in enumerate(spec.points()):
            for m in spec.methods:
                cell = result.cell(p, m)
                label = spec.point_label(point)
                if cell is None:
                    w.writerow([label, m, "NA", "NA", "NA"])
                    continue
                rt = f"{cell[2]:.1f}" if spec.timing else "NA"
                w.writerow([label, m, f"{cell[0]:.4f}", f"{cell[1]:.4f}", rt])
    with open(os.path.join(out_dir, "results.md"), "w", encoding="utf-8") as fh:
        fh.write(render_markdown(result))

    if spec.recovery and any(r.recovery for reps in result.reports.values() for r in reps):
        written.append("recovery.csv")
        with open(os.path.join(out_dir, "recovery.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sweep_value", "method", "trial", "corr_d", "corr_dtilde"])
            for p, point in enumerate(spec.points()):
                for t, rep in enumerate(result.reports[p]):
                    for m in spec.methods:
                        if m in rep.recovery:
                            cd, ct = rep.recovery[m]
                            w.writerow([spec.point_label(point), m, t, _fmt_stat(cd), _fmt_stat(ct)])
    first = result.reports[0][0]
    if first.accuracies is not None:
        written.append("accuracy_hist.csv")
        counts, edges = accuracy_histogram(first.accuracies)
        with open(os.path.join(out_dir, "accuracy_hist.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_low", "bin_high", "count"])
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                w.writerow([f"{lo:.2f}", f"{hi:.2f}", int(c)])
    if spec.hyb_wins:
        written.append("hyb_wins.csv")
        with open(os.path.join(out_dir, "hyb_wins.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sweep_value", "trials", "n_trials"])
            for p, point in enumerate(spec.points()):
                w.writerow([spec.point_label(point), result.hyb_win_count(p), spec.n_trials])
    return written


def _md_cell(result, p, methods) -> str:
    parts = []
    for m in methods:
        cell = result.cell(p, m)
        parts.append("skipped" if cell is None else f"{cell[0]:.2f}")
    return "/".join(parts)


def render_markdown(result: ExperimentResult) -> str:
    """Mean error table: one row per sweep value, or a row x column grid whose
    cells list the methods' means separated by slashes."""
    spec = result.spec
    lines = [f"# {spec.name}", "",
             f"Mean erroneous non-probe tasks over {spec.n_trials} trial(s), seed {spec.seed}.", ""]
    if not spec.columns:
        lines.append("| " + " | ".join([spec.sweep, *spec.methods]) + " |")
        lines.append("|" + "---|" * (len(spec.methods) + 1))
        for p, point in enumerate(spec.points()):
            cells = [_md_cell(result, p, [m]) for m in spec.methods]
            lines.append("| " + " | ".join([_fmt_num(point[0]), *cells]) + " |")
    else:
        lines.append(f"Cells: {'/'.join(spec.methods)}; rows: {spec.sweep}; columns: {spec.columns}.")
        lines.append("")
        lines.append("| " + " | ".join([spec.sweep, *map(_fmt_num, spec.column_values)]) + " |")
        lines.append("|" + "---|" * (len(spec.column_values) + 1))
        pts = spec.points()
        for rv in spec.values:
            row = [_md_cell(result, pts.index((rv, cv)), spec.methods) for cv in spec.column_values]
            lines.append("| " + " | ".join([_fmt_num(rv), *row]) + " |")
    if spec.hyb_wins:
        lines += ["", "Trials where US-HYB has fewer errors and a strictly larger psi_bp than US-SW:", ""]
        pts = spec.points()
        if spec.columns:
            lines.append("| " + " | ".join([spec.sweep, *map(_fmt_num, spec.column_values)]) + " |")
            lines.append("|" + "---|" * (len(spec.column_values) + 1))
            for rv in spec.values:
                row = [str(result.hyb_win_count(pts.index((rv, cv)))) for cv in spec.column_values]
                lines.append("| " + " | ".join([_fmt_num(rv), *row]) + " |")
        else:
            for p, point in enumerate(pts):
                lines.append(f"- {spec.point_label(point)}: {result.hyb_win_count(p)}")
    return "\n".join(lines) + "\n"
