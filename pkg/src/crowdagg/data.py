"""Answer matrices, probe sets, assignment graphs and their CSV formats.

Answers are stored sparsely as three parallel arrays (task index, worker
index, answer).  Internal indices are dense and 0-based and answers are
0-based category indices; every file format uses the original string ids
and 1-based answers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed or inconsistent crowd data."""


class ParseError(DataError):
    pass


class DomainError(DataError):
    pass


class DuplicateError(DataError):
    pass


@dataclass(frozen=True)
class CategorySpace:
    k: int

    def __post_init__(self):
        if self.k < 2:
            raise DomainError(f"need at least 2 categories, got K={self.k}")


@dataclass(frozen=True, eq=False)
class AnswerMatrix:
    """Sparse worker x task table of categorical answers.

    ``tasks``, ``workers`` and ``answers`` are parallel int arrays, one
    element per observed (task, worker) pair.  ``answers`` holds 0-based
    categories in ``0..k-1``.
    """

    tasks: np.ndarray
    workers: np.ndarray
    answers: np.ndarray
    k: int
    task_ids: tuple[str, ...]
    worker_ids: tuple[str, ...]

    def __post_init__(self):
        CategorySpace(self.k)
        for name in ("tasks", "workers", "answers"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.tasks) == len(self.workers) == len(self.answers)):
            raise DataError("entry arrays differ in length")
        if len(self.answers) == 0:
            raise DataError("no entries")
        if self.answers.min() < 0 or self.answers.max() >= self.k:
            bad = int(np.flatnonzero((self.answers < 0) | (self.answers >= self.k))[0])
            raise DomainError(
                f"answer {self.answers[bad] + 1} outside 1..{self.k} "
                f"(task {self.task_ids[self.tasks[bad]]}, worker {self.worker_ids[self.workers[bad]]})"
            )
        if self.tasks.min() < 0 or self.tasks.max() >= self.n_tasks:
            raise DataError("task index out of range")
        if self.workers.min() < 0 or self.workers.max() >= self.n_workers:
            raise DataError("worker index out of range")
        keys = self.tasks * self.n_workers + self.workers
        uniq, counts = np.unique(keys, return_counts=True)
        if len(uniq) != len(keys):
            key = int(uniq[np.argmax(counts > 1)])
            t, w = divmod(key, self.n_workers)
            raise DuplicateError(
                f"duplicate answer for task {self.task_ids[t]}, worker {self.worker_ids[w]}"
            )
        per_task = np.bincount(self.tasks, minlength=self.n_tasks)
        if np.any(per_task == 0):
            t = int(np.flatnonzero(per_task == 0)[0])
            raise DataError(f"task {self.task_ids[t]} has no answers")

    @property
    def n_tasks(self) -> int:
        return len(self.task_ids)

    @property
    def n_workers(self) -> int:
        return len(self.worker_ids)

    @property
    def n_entries(self) -> int:
        return len(self.answers)

    @classmethod
    def from_dense(cls, dense, k: int, task_ids=None, worker_ids=None) -> "AnswerMatrix":
        """Build from a (T, N) array of 0-based answers; negative means missing."""
        dense = np.asarray(dense)
        n_tasks, n_workers = dense.shape
        tasks, workers = np.nonzero(dense >= 0)
        return cls(
            tasks=tasks,
            workers=workers,
            answers=dense[tasks, workers],
            k=k,
            task_ids=tuple(task_ids or (f"t{i + 1}" for i in range(n_tasks))),
            worker_ids=tuple(worker_ids or (f"w{j + 1}" for j in range(n_workers))),
        )

    def dense(self) -> np.ndarray:
        """(T, N) array of 0-based answers with -1 where no answer exists."""
        out = np.full((self.n_tasks, self.n_workers), -1, dtype=np.int64)
        out[self.tasks, self.workers] = self.answers
        return out

    def entry_set(self) -> set[tuple[str, str, int]]:
        return {
            (self.task_ids[t], self.worker_ids[w], int(r) + 1)
            for t, w, r in zip(self.tasks, self.workers, self.answers)
        }

    def vote_counts(self, weights=None) -> np.ndarray:
        """(T, K) per-task sums of worker weights for each answer."""
        wts = np.ones(self.n_entries) if weights is None else np.asarray(weights, float)[self.workers]
        flat = np.bincount(self.tasks * self.k + self.answers, weights=wts,
                           minlength=self.n_tasks * self.k)
        return flat.reshape(self.n_tasks, self.k)

    def task_index(self, task_id: str) -> int:
        return self.task_ids.index(task_id)


@dataclass(frozen=True)
class ProbeSet:
    """Tasks with known ground truth, keyed by dense task index (0-based labels)."""

    labels: Mapping[int, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def __bool__(self):
        return bool(self.labels)

    def mask(self, n_tasks: int) -> np.ndarray:
        m = np.zeros(n_tasks, dtype=bool)
        m[list(self.labels)] = True
        return m

    def label_array(self, n_tasks: int) -> np.ndarray:
        """Length-T array of probe labels, -1 on non-probe tasks."""
        out = np.full(n_tasks, -1, dtype=np.int64)
        for t, z in self.labels.items():
            out[t] = z
        return out

    def validate(self, matrix: AnswerMatrix) -> None:
        for t, z in self.labels.items():
            if not 0 <= t < matrix.n_tasks:
                raise DataError(f"probe task index {t} not in answer matrix")
            if not 0 <= z < matrix.k:
                raise DomainError(f"probe label {z + 1} outside 1..{matrix.k}")


@dataclass(frozen=True)
class AssignmentGraph:
    """Bipartite task-worker edges; every task has exactly ``degree`` workers."""

    degree: int
    edges: frozenset[tuple[str, str]]

    def task_degrees(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for t, _ in self.edges:
            out[t] = out.get(t, 0) + 1
        return out

    def worker_degrees(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for _, w in self.edges:
            out[w] = out.get(w, 0) + 1
        return out


def decisions_to_map(matrix: AnswerMatrix, decisions: np.ndarray) -> dict[str, int]:
    """Dense 0-based decision vector to ``{task_id: answer 1..K}``."""
    return {matrix.task_ids[i]: int(z) + 1 for i, z in enumerate(decisions)}


def one_hot(decisions: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(decisions), k))
    out[np.arange(len(decisions)), decisions] = 1.0
    return out


# ---------------------------------------------------------------------------
# CSV I/O


def _read_rows(path, header: Sequence[str]) -> Iterable[tuple[int, list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            return
        if [c.strip() for c in first] != list(header):
            raise ParseError(f"{path}: line 1: expected header {','.join(header)}")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: line {reader.line_num}: expected {len(header)} fields, got {len(row)}")
            yield reader.line_num, [c.strip() for c in row]


def _parse_answer(text: str, path, line: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"{path}: line {line}: answer {text!r} is not an integer") from None


def load_answer_matrix(path, k: int | None = None) -> AnswerMatrix:
    """Read ``task_id,worker_id,answer`` rows.

    Ids are mapped to dense indices in order of first appearance.  When
    ``k`` is None it is inferred as the largest answer seen (at least 2).
    """
    task_index: dict[str, int] = {}
    worker_index: dict[str, int] = {}
    seen: set[tuple[int, int]] = set()
    tasks, workers, answers = [], [], []
    for line, (t, w, r) in _read_rows(path, ("task_id", "worker_id", "answer")):
        ans = _parse_answer(r, path, line)
        if ans < 1 or (k is not None and ans > k):
            raise DomainError(f"{path}: line {line}: answer {ans} outside 1..{k if k else 'K'}")
        ti = task_index.setdefault(t, len(task_index))
        wi = worker_index.setdefault(w, len(worker_index))
        if (ti, wi) in seen:
            raise DuplicateError(f"{path}: line {line}: duplicate answer for task {t}, worker {w}")
        seen.add((ti, wi))
        tasks.append(ti)
        workers.append(wi)
        answers.append(ans - 1)
    if not answers:
        raise DataError(f"{path}: no entries")
    if k is None:
        k = max(2, max(answers) + 1)
    return AnswerMatrix(
        tasks=np.array(tasks), workers=np.array(workers), answers=np.array(answers),
        k=k, task_ids=tuple(task_index), worker_ids=tuple(worker_index),
    )


def save_answer_matrix(matrix: AnswerMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["task_id", "worker_id", "answer"])
        for t, w, r in zip(matrix.tasks, matrix.workers, matrix.answers):
            out.writerow([matrix.task_ids[t], matrix.worker_ids[w], int(r) + 1])


def load_labels(path) -> dict[str, int]:
    """Read a ``task_id,answer`` file into ``{task_id: answer 1..K}``."""
    out: dict[str, int] = {}
    for line, (t, r) in _read_rows(path, ("task_id", "answer")):
        if t in out:
            raise DuplicateError(f"{path}: line {line}: duplicate task {t}")
        out[t] = _parse_answer(r, path, line)
    return out


def save_labels(labels: Mapping[str, int], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["task_id", "answer"])
        for t, r in labels.items():
            out.writerow([t, int(r)])


def load_probes(path, matrix: AnswerMatrix) -> ProbeSet:
    index = {t: i for i, t in enumerate(matrix.task_ids)}
    labels = {}
    for t, r in load_labels(path).items():
        if t not in index:
            raise DataError(f"{path}: probe task {t} has no answers")
        if not 1 <= r <= matrix.k:
            raise DomainError(f"{path}: probe answer {r} for task {t} outside 1..{matrix.k}")
        labels[index[t]] = r - 1
    return ProbeSet(labels)


def probes_to_map(matrix: AnswerMatrix, probes: ProbeSet) -> dict[str, int]:
    return {matrix.task_ids[t]: z + 1 for t, z in sorted(probes.labels.items())}


def load_graph(path) -> AssignmentGraph:
    edges = set()
    for line, (t, w) in _read_rows(path, ("task_id", "worker_id")):
        if (t, w) in edges:
            raise DuplicateError(f"{path}: line {line}: duplicate edge ({t}, {w})")
        edges.add((t, w))
    degrees = set(AssignmentGraph(0, frozenset(edges)).task_degrees().values())
    degree = degrees.pop() if len(degrees) == 1 else 0
    return AssignmentGraph(degree, frozenset(edges))


def save_graph(graph: AssignmentGraph, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["task_id", "worker_id"])
        for t, w in sorted(graph.edges, key=_natural_edge_key):
            out.writerow([t, w])


def _natural_key(s: str):
    digits = "".join(c for c in s if c.isdigit())
    return (s.rstrip("0123456789"), int(digits) if digits else -1, s)


def _natural_edge_key(edge):
    return _natural_key(edge[0]), _natural_key(edge[1])


# ---------------------------------------------------------------------------
# assignment graphs


def generate_regular_bipartite(n_tasks: int, n_workers: int, degree: int, seed=None,
                               task_ids=None, worker_ids=None) -> AssignmentGraph:
    """Random task-regular bipartite graph via configuration-model stub matching.

    Worker stubs are laid out as evenly as possible (``degree * n_tasks``
    stubs spread round-robin over workers), shuffled, then dealt to tasks.
    A task that receives the same worker twice swaps the repeat with a
    random stub of another task, provided neither task ends up with a
    repeat; if no such swap turns up the whole matching is redrawn.  When
    ``degree`` exceeds half the workers, the complement graph (degree
    ``n_workers - degree``) is drawn this way and inverted.
    """
    if not 1 <= degree <= n_workers:
        raise ValueError(f"degree must be in 1..{n_workers}, got {degree}")
    rng = np.random.default_rng(seed)
    task_ids = list(task_ids or (f"t{i + 1}" for i in range(n_tasks)))
    worker_ids = list(worker_ids or (f"w{j + 1}" for j in range(n_workers)))
    if 2 * degree > n_workers:
        # dense graphs: draw the sparse complement and invert it per task
        keep = np.ones((n_tasks, n_workers), dtype=bool)
        if degree < n_workers:
            drop = _regular_blocks(n_tasks, n_workers, n_workers - degree, rng)
            np.put_along_axis(keep, drop, False, axis=1)
        blocks = [np.flatnonzero(row) for row in keep]
    else:
        blocks = _regular_blocks(n_tasks, n_workers, degree, rng)
    edges = frozenset(
        (task_ids[t], worker_ids[int(w)]) for t in range(n_tasks) for w in blocks[t]
    )
    return AssignmentGraph(degree, edges)


def _regular_blocks(n_tasks: int, n_workers: int, degree: int, rng) -> np.ndarray:
    """(n_tasks, degree) worker indices, distinct within each row."""
    n_stubs = degree * n_tasks
    for _ in range(100):
        # remainder stubs go to a random subset of workers
        base = np.repeat(np.arange(n_workers), n_stubs // n_workers)
        extra = rng.choice(n_workers, n_stubs % n_workers, replace=False)
        blocks = rng.permutation(np.concatenate([base, extra])).reshape(n_tasks, degree)
        if _repair(blocks, rng):
            return blocks
    raise RuntimeError("failed to generate a regular bipartite graph")


def _repair(blocks: np.ndarray, rng, max_tries: int = 200) -> bool:
    """Remove repeated workers within rows by swapping with random entries
    of other rows, accepting a swap only if neither row gains a repeat."""
    n_rows, width = blocks.shape
    for t in range(n_rows):
        row = blocks[t]
        for p in range(width):
            w = row[p]
            if not np.any(row[:p] == w) and not np.any(row[p + 1:] == w):
                continue
            for _ in range(max_tries):
                t2 = int(rng.integers(n_rows))
                p2 = int(rng.integers(width))
                w2 = blocks[t2, p2]
                if t2 == t or w2 in row or w in blocks[t2]:
                    continue
                row[p], blocks[t2, p2] = w2, w
                break
            else:
                return False
    return True


def restrict(matrix: AnswerMatrix, graph: AssignmentGraph) -> AnswerMatrix:
    """Keep only answers lying on a graph edge.

    Tasks and workers left without answers are dropped; the result is
    re-validated, so a graph that keeps nothing raises ``DataError``.
    """
    keep = restrict_indices(matrix, graph)
    if not keep.any():
        raise DataError("no entries")
    return _subset(matrix, keep)


def restrict_indices(matrix: AnswerMatrix, graph: AssignmentGraph) -> np.ndarray:
    """Boolean mask over entries of ``matrix`` that lie on graph edges."""
    return np.array([
        (matrix.task_ids[t], matrix.worker_ids[w]) in graph.edges
        for t, w in zip(matrix.tasks, matrix.workers)
    ], dtype=bool)


def _subset(matrix: AnswerMatrix, keep: np.ndarray) -> AnswerMatrix:
    tasks, workers = matrix.tasks[keep], matrix.workers[keep]
    t_used = np.unique(tasks)
    w_used = np.unique(workers)
    t_map = np.full(matrix.n_tasks, -1)
    t_map[t_used] = np.arange(len(t_used))
    w_map = np.full(matrix.n_workers, -1)
    w_map[w_used] = np.arange(len(w_used))
    return AnswerMatrix(
        tasks=t_map[tasks], workers=w_map[workers], answers=matrix.answers[keep], k=matrix.k,
        task_ids=tuple(matrix.task_ids[i] for i in t_used),
        worker_ids=tuple(matrix.worker_ids[j] for j in w_used),
    )
