"""Stochastic answer model: worker pmfs and synthetic crowd generation.

A worker ``j`` solves task ``i`` with probability ``sigmoid(a_j (d_j - dtilde_i))``.
Honest workers who solve answer correctly; simple adversaries who solve pick
uniformly among the wrong answers; workers who fail answer uniformly at
random.  Complex adversaries additionally answer easy tasks (difficulty
below a threshold ``theta_j``) correctly.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from typing import Literal

import numpy as np
from scipy.special import expit

from .data import AnswerMatrix, ProbeSet, generate_regular_bipartite

SIMPLE = "simple"
COMPLEX = "complex"


def sigmoid(x):
    """Logistic function; ``scipy.special.expit`` does not overflow for large |x|."""
    return expit(x)


# ---------------------------------------------------------------------------
# pmfs


def beta_honest(delta, k: int, is_correct):
    s = sigmoid(delta)
    # (1 + (K-1) s) / K equals s + (1 - s)/K but stays monotone after rounding
    return np.where(is_correct, (1.0 + (k - 1) * s) / k, (1.0 - s) / k)


def beta_simple_adversary(delta, k: int, is_correct):
    s = sigmoid(delta)
    guess = (1.0 - s) / k
    return np.where(is_correct, guess, guess + s / (k - 1))


def beta_complex_adversary(worker: "WorkerParams", difficulty, k: int, is_correct):
    """Complex adversary pmf.

    With ``s_a = sigmoid(a (d - dtilde))`` and ``s_b = sigmoid(b (theta - dtilde))``
    the correct answer gets ``(1 - s_a)/K + s_b s_a`` and each wrong answer
    ``(1 - s_a)/K + (1 - s_b) s_a / (K - 1)``.
    """
    s_a = sigmoid(worker.a * (worker.d - difficulty))
    s_b = sigmoid(worker.b * (worker.theta - difficulty))
    guess = (1.0 - s_a) / k
    return np.where(is_correct, guess + s_b * s_a, guess + (1.0 - s_b) * s_a / (k - 1))


@dataclass(frozen=True)
class WorkerParams:
    v: int = 1
    d: float = 0.0
    a: float = 1.0
    kind: Literal["simple", "complex"] = SIMPLE
    theta: float = float("nan")
    b: float = float("nan")

    def __post_init__(self):
        if self.v not in (0, 1):
            raise ValueError(f"intention must be 0 or 1, got {self.v}")
        if self.kind not in (SIMPLE, COMPLEX):
            raise ValueError(f"unknown adversary kind {self.kind!r}")
        if self.v == 0 and self.kind == COMPLEX and not self.theta < self.d:
            raise ValueError(f"complex adversary needs theta < d (theta={self.theta}, d={self.d})")


@dataclass(frozen=True)
class TaskParams:
    dtilde: float
    z: int


def beta(worker: WorkerParams, difficulty: float, k: int, z, r):
    """Probability that ``worker`` answers ``r`` on a task with truth ``z``."""
    correct = np.asarray(r) == np.asarray(z)
    if worker.v == 1:
        return beta_honest(worker.a * (worker.d - difficulty), k, correct)
    if worker.kind == COMPLEX:
        return beta_complex_adversary(worker, difficulty, k, correct)
    return beta_simple_adversary(worker.a * (worker.d - difficulty), k, correct)


def answer_pmf(worker: WorkerParams, difficulty: float, k: int, z: int) -> np.ndarray:
    """Length-K pmf of a worker's answer given 0-based truth ``z``."""
    return beta(worker, difficulty, k, z, np.arange(k))


@dataclass
class ModelParams:
    """Per-worker (v, d, a[, theta, b]) and per-task difficulty arrays."""

    v: np.ndarray
    d: np.ndarray
    a: np.ndarray
    dtilde: np.ndarray
    kind: np.ndarray = None
    theta: np.ndarray = None
    b: np.ndarray = None

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.int64)
        self.d = np.asarray(self.d, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        self.dtilde = np.asarray(self.dtilde, dtype=float)
        n = len(self.v)
        self.kind = np.array([SIMPLE] * n if self.kind is None else self.kind, dtype=object)
        self.theta = np.full(n, np.nan) if self.theta is None else np.asarray(self.theta, dtype=float)
        self.b = np.full(n, np.nan) if self.b is None else np.asarray(self.b, dtype=float)
        if not (len(self.d) == len(self.a) == len(self.kind) == n):
            raise ValueError("worker parameter arrays differ in length")

    @property
    def n_workers(self) -> int:
        return len(self.v)

    @property
    def n_tasks(self) -> int:
        return len(self.dtilde)

    def worker(self, j: int) -> WorkerParams:
        return WorkerParams(int(self.v[j]), float(self.d[j]), float(self.a[j]),
                            str(self.kind[j]), float(self.theta[j]), float(self.b[j]))

    def copy(self) -> "ModelParams":
        return ModelParams(self.v.copy(), self.d.copy(), self.a.copy(), self.dtilde.copy(),
                           self.kind.copy(), self.theta.copy(), self.b.copy())

    def has_complex(self) -> bool:
        return bool(np.any((self.v == 0) & (self.kind == COMPLEX)))

    def check(self, matrix: AnswerMatrix) -> None:
        if self.n_workers != matrix.n_workers or self.n_tasks != matrix.n_tasks:
            raise ValueError(
                f"parameters describe {self.n_workers} workers x {self.n_tasks} tasks, "
                f"answers have {matrix.n_workers} x {matrix.n_tasks}"
            )


def entry_pmf(params: ModelParams, matrix: AnswerMatrix):
    """Per-entry (p_correct, p_wrong) for every observed (task, worker) pair."""
    t, w = matrix.tasks, matrix.workers
    k = matrix.k
    delta = params.a[w] * (params.d[w] - params.dtilde[t])
    s = sigmoid(delta)
    guess = (1.0 - s) / k
    honest = params.v[w] == 1
    p_c = np.where(honest, (1.0 + (k - 1) * s) / k, guess)
    p_w = np.where(honest, guess, guess + s / (k - 1))
    cplx = (~honest) & (params.kind[w] == COMPLEX)
    if cplx.any():
        s_b = sigmoid(params.b[w[cplx]] * (params.theta[w[cplx]] - params.dtilde[t[cplx]]))
        s_a = s[cplx]
        p_c[cplx] = guess[cplx] + s_b * s_a
        p_w[cplx] = guess[cplx] + (1.0 - s_b) * s_a / (k - 1)
    return p_c, p_w


# ---------------------------------------------------------------------------
# synthetic crowds


@dataclass
class CrowdGenConfig:
    """Gaussian skill/slope/difficulty crowd.  Distributions are (mean, variance)."""

    n_workers: int = 100
    n_tasks: int = 100
    k: int = 5
    skill_mean: float = 1.0
    skill_var: float = 400.0
    slope_mean: float = 0.3
    slope_var: float = 0.2
    diff_mean: float = 8.0
    diff_var: float = 250.0
    adv_fraction: float = 0.1
    adv_kind: str = SIMPLE
    probe_count: int = 10
    seed: int = 0
    theta_gap: float = 5.0
    slope_sign: str = "abs"  # "abs" folds drawn slopes to |a|, "keep" leaves them signed
    degree: int = 0  # 0 means every worker answers every task

    def __post_init__(self):
        if not 0.0 <= self.adv_fraction <= 1.0:
            raise ValueError("adv_fraction must be in [0, 1]")
        if min(self.skill_var, self.slope_var, self.diff_var) < 0:
            raise ValueError("variances must be >= 0")
        if self.adv_kind not in (SIMPLE, COMPLEX):
            raise ValueError(f"adv_kind must be simple or complex, got {self.adv_kind!r}")
        if self.k < 2 or self.n_workers < 1 or self.n_tasks < 1:
            raise ValueError("need k >= 2 and at least one worker and task")
        if not 0 <= self.probe_count <= self.n_tasks:
            raise ValueError("probe_count must be in 0..n_tasks")
        if self.slope_sign not in ("abs", "keep"):
            raise ValueError("slope_sign must be abs or keep")
        if self.degree < 0 or self.degree > self.n_workers:
            raise ValueError("degree must be in 0..n_workers")

    @classmethod
    def from_dict(cls, raw: dict) -> "CrowdGenConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(raw) - set(types)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        conv = {"int": int, "float": float, "str": str}
        return cls(**{key: conv[types[key]](val) for key, val in raw.items()})

    def to_dict(self) -> dict:
        return asdict(self)


def read_kv_file(path) -> dict[str, str]:
    """Read a flat ``key = value`` text file (``#`` comments allowed)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    with open(path, encoding="utf-8") as fh:
        parser.read_string("[top]\n" + fh.read(), source=str(path))
    return dict(parser["top"])


def write_kv_file(values: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, val in values.items():
            fh.write(f"{key} = {val}\n")


def load_crowd_config(path) -> CrowdGenConfig:
    return CrowdGenConfig.from_dict(read_kv_file(path))


def _draw_answers(rng, p_c: np.ndarray, truth: np.ndarray, k: int) -> np.ndarray:
    """Correct with prob ``p_c``, else uniform over the K-1 wrong answers."""
    correct = rng.random(len(truth)) < p_c
    offset = rng.integers(1, k, size=len(truth))
    return np.where(correct, truth, (truth + offset) % k)


def _ids(prefix: str, n: int) -> tuple[str, ...]:
    return tuple(f"{prefix}{i + 1}" for i in range(n))


def _assignment(rng, n_tasks: int, n_workers: int, degree: int):
    if degree == 0 or degree == n_workers:
        tasks, workers = np.divmod(np.arange(n_tasks * n_workers), n_workers)
        return tasks, workers
    graph = generate_regular_bipartite(n_tasks, n_workers, degree, seed=rng.integers(2**63),
                                       task_ids=range(n_tasks), worker_ids=range(n_workers))
    edges = np.array(sorted(graph.edges))
    return edges[:, 0], edges[:, 1]


def _pick_probes(rng, n_tasks: int, probe_count: int, truth: np.ndarray) -> ProbeSet:
    chosen = np.sort(rng.choice(n_tasks, probe_count, replace=False))
    return ProbeSet({int(t): int(truth[t]) for t in chosen})


def generate_dataset(config: CrowdGenConfig, rng=None):
    """Draw a crowd, tasks and answers from the stochastic model.

    Returns ``(answers, probes, params, truth)`` where ``truth`` is a
    length-T array of 0-based ground-truth answers.  All randomness comes
    from ``rng`` (default: a generator seeded with ``config.seed``).
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    n, t_count, k = config.n_workers, config.n_tasks, config.k

    d = rng.normal(config.skill_mean, np.sqrt(config.skill_var), n)
    a = rng.normal(config.slope_mean, np.sqrt(config.slope_var), n)
    if config.slope_sign == "abs":
        a = np.abs(a)
    v = np.ones(n, dtype=np.int64)
    n_adv = int(np.floor(config.adv_fraction * n))
    v[rng.choice(n, n_adv, replace=False)] = 0
    kind = np.array([SIMPLE] * n, dtype=object)
    theta = np.full(n, np.nan)
    b = np.full(n, np.nan)
    if config.adv_kind == COMPLEX:
        adv = v == 0
        kind[adv] = COMPLEX
        theta[adv] = d[adv] - abs(config.theta_gap)
        b[adv] = a[adv]
    dtilde = rng.normal(config.diff_mean, np.sqrt(config.diff_var), t_count)
    truth = rng.integers(0, k, t_count)
    params = ModelParams(v, d, a, dtilde, kind, theta, b)

    tasks, workers = _assignment(rng, t_count, n, config.degree)
    skeleton = _Entries(tasks, workers, k)
    p_c, _ = entry_pmf(params, skeleton)
    answers = _draw_answers(rng, p_c, truth[tasks], k)
    matrix = AnswerMatrix(tasks, workers, answers, k, _ids("t", t_count), _ids("w", n))
    probes = _pick_probes(rng, t_count, config.probe_count, truth)
    return matrix, probes, params, truth


@dataclass
class _Entries:
    """Bare (task, worker) skeleton accepted by :func:`entry_pmf`."""

    tasks: np.ndarray
    workers: np.ndarray
    k: int


def generate_sha_dataset(n_workers: int, n_tasks: int, k: int, spammer_fraction: float,
                         adversary_fraction: float, seed=None, degree: int = 0):
    """Spammer / hammer / adversary crowd.

    Spammers answer uniformly on all K answers, hammers always answer the
    truth, adversaries answer uniformly among the K-1 wrong answers.  Worker
    counts are ``floor(fraction * N)``; the rest are hammers.  Returns
    ``(answers, truth, roles)`` with roles in {"spammer", "hammer", "adversary"}.
    """
    if spammer_fraction < 0 or adversary_fraction < 0 or spammer_fraction + adversary_fraction > 1 + 1e-12:
        raise ValueError("spammer and adversary fractions must be >= 0 and sum to at most 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_spam = int(np.floor(spammer_fraction * n_workers + 1e-9))
    n_adv = int(np.floor(adversary_fraction * n_workers + 1e-9))
    roles = np.array(["hammer"] * n_workers, dtype=object)
    order = rng.permutation(n_workers)
    roles[order[:n_spam]] = "spammer"
    roles[order[n_spam:n_spam + n_adv]] = "adversary"

    truth = rng.integers(0, k, n_tasks)
    tasks, workers = _assignment(rng, n_tasks, n_workers, degree)
    role = roles[workers]
    z = truth[tasks]
    uniform = rng.integers(0, k, len(tasks))
    wrong = (z + rng.integers(1, k, len(tasks))) % k
    answers = np.where(role == "hammer", z, np.where(role == "spammer", uniform, wrong))
    matrix = AnswerMatrix(tasks, workers, answers, k, _ids("t", n_tasks), _ids("w", n_workers))
    return matrix, truth, roles


def generate_mixed_skill_dataset(n_workers: int, n_tasks: int, k: int, low_fraction: float,
                                 adversary_fraction: float, seed=None, slope: float = 1.0,
                                 degree: int = 0):
    """Uniform-skill crowd of high-skilled honest, low-skilled honest and
    high-skilled simple-adversary workers.

    Difficulties ~ U[0, 8]; high skills ~ U[0, 8]; low skills ~ U[0, 2];
    every worker uses slope ``slope``.  Returns ``(answers, params, truth)``.
    """
    if low_fraction < 0 or adversary_fraction < 0 or low_fraction + adversary_fraction > 1 + 1e-12:
        raise ValueError("low-skill and adversary fractions must be >= 0 and sum to at most 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_low = int(np.floor(low_fraction * n_workers + 1e-9))
    n_adv = int(np.floor(adversary_fraction * n_workers + 1e-9))
    order = rng.permutation(n_workers)
    d = rng.uniform(0.0, 8.0, n_workers)
    d[order[:n_low]] = rng.uniform(0.0, 2.0, n_low)
    v = np.ones(n_workers, dtype=np.int64)
    v[order[n_low:n_low + n_adv]] = 0
    a = np.full(n_workers, float(slope))
    dtilde = rng.uniform(0.0, 8.0, n_tasks)
    truth = rng.integers(0, k, n_tasks)
    params = ModelParams(v, d, a, dtilde)

    tasks, workers = _assignment(rng, n_tasks, n_workers, degree)
    p_c, _ = entry_pmf(params, _Entries(tasks, workers, k))
    answers = _draw_answers(rng, p_c, truth[tasks], k)
    matrix = AnswerMatrix(tasks, workers, answers, k, _ids("t", n_tasks), _ids("w", n_workers))
    return matrix, params, truth


# ---------------------------------------------------------------------------
# export


def save_params(params: ModelParams, matrix: AnswerMatrix, worker_path, task_path,
                truth=None) -> None:
    """Write ``worker_id,v,d,a[,theta,b]`` and ``task_id,dtilde,z`` CSVs."""
    import csv

    with_cplx = params.has_complex()
    with open(worker_path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["worker_id", "v", "d", "a"] + (["theta", "b"] if with_cplx else []))
        for j, wid in enumerate(matrix.worker_ids):
            row = [wid, int(params.v[j]), _fmt(params.d[j]), _fmt(params.a[j])]
            if with_cplx:
                row += [_fmt(params.theta[j]), _fmt(params.b[j])]
            out.writerow(row)
    with open(task_path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["task_id", "dtilde", "z"])
        for i, tid in enumerate(matrix.task_ids):
            z = "" if truth is None or truth[i] < 0 else int(truth[i]) + 1
            out.writerow([tid, _fmt(params.dtilde[i]), z])


def _fmt(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))
