"""Plurality voting and the energy-constrained weighted-plurality optimizers.

All iterative methods alternate exact block maximizations of their own
objective, so every recorded objective trace is nondecreasing:

* ``wp``  -- weighted plurality with nonnegative weights,
* ``bp``  -- weighted plurality with binary intention flags (US-SW / SS-SW),
* ``neg`` -- signed weights, negative meaning adversarial (US-NEG / SS-NEG).

Decisions are 0-based category indices, one per task.  Passing a non-empty
:class:`ProbeSet` gives the semisupervised variants, which clamp probe
tasks to their labels in the decision step only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import AnswerMatrix, ProbeSet

MAX_ITERS = 500
WEIGHT_TOL = 1e-9
TIE_TOL = 1e-12  # scores closer than this count as tied

KINDS = ("wp", "bp", "neg")


class PluralityError(ValueError):
    pass


@dataclass
class PluralityResult:
    decisions: np.ndarray
    weights: np.ndarray | None = None
    intentions: np.ndarray | None = None  # 1 honest, 0 adversarial
    objective_trace: list[float] = field(default_factory=list)
    converged: bool = True
    degenerate: bool = False
    n_iters: int = 0


def _rng(seed):
    return np.random.default_rng(seed)


def _pick(scores: np.ndarray, rng, current=None) -> np.ndarray:
    """Row-wise argmax.  Ties keep ``current`` when it is among the maximizers,
    otherwise one maximizer is drawn uniformly at random."""
    top = scores.max(axis=1, keepdims=True)
    is_max = scores >= top - TIE_TOL
    u = rng.random(scores.shape)
    pick = np.argmax(np.where(is_max, u, -1.0), axis=1)
    if current is not None:
        keep = is_max[np.arange(len(current)), current]
        pick = np.where(keep, current, pick)
    return pick


def _clamp(decisions: np.ndarray, probes: ProbeSet) -> np.ndarray:
    for t, z in probes.labels.items():
        decisions[t] = z
    return decisions


def _agreement(answers: AnswerMatrix, decisions: np.ndarray):
    """Per-worker counts of answers agreeing / disagreeing with ``decisions``."""
    hit = answers.answers == decisions[answers.tasks]
    n = answers.n_workers
    agree = np.bincount(answers.workers, weights=hit, minlength=n)
    total = np.bincount(answers.workers, minlength=n)
    return agree, total - agree


# ---------------------------------------------------------------------------
# objectives


def objective(kind: str, answers: AnswerMatrix, decisions, weights, intentions=None) -> float:
    """Evaluate psi_wp, psi_bp or psi_neg over the observed (task, worker) pairs."""
    if kind not in KINDS:
        raise ValueError(f"unknown objective {kind!r}")
    decisions = np.asarray(decisions)
    w = np.asarray(weights, dtype=float)
    if decisions.shape != (answers.n_tasks,) or w.shape != (answers.n_workers,):
        raise ValueError("decisions / weights do not match the answer matrix")
    agree, disagree = _agreement(answers, decisions)
    k1 = answers.k - 1
    if kind == "wp":
        per_worker = agree
    elif kind == "neg":
        per_worker = agree - disagree / k1
    else:
        v = np.ones(answers.n_workers) if intentions is None else np.asarray(intentions, float)
        per_worker = v * agree + (1.0 - v) * disagree / k1
    return float(np.dot(w, per_worker))


def _task_scores(kind: str, answers: AnswerMatrix, w, v=None) -> np.ndarray:
    """(T, K) per-answer scores maximized by the decision step."""
    k1 = answers.k - 1
    if kind == "wp":
        return answers.vote_counts(w)
    if kind == "neg":
        votes = answers.vote_counts(w)
        return votes - (votes.sum(axis=1, keepdims=True) - votes) / k1
    honest = answers.vote_counts(w * v)
    adv = answers.vote_counts(w * (1 - v))
    return honest + (adv.sum(axis=1, keepdims=True) - adv) / k1


def _worker_scores(kind: str, answers: AnswerMatrix, decisions, v=None) -> np.ndarray:
    agree, disagree = _agreement(answers, decisions)
    k1 = answers.k - 1
    if kind == "wp":
        return agree
    if kind == "neg":
        return agree - disagree / k1
    return v * agree + (1 - v) * disagree / k1


def _active(answers: AnswerMatrix) -> np.ndarray:
    return np.bincount(answers.workers, minlength=answers.n_workers) > 0


def uniform_weights(answers: AnswerMatrix) -> np.ndarray:
    """1/sqrt(N) on every worker with at least one answer, 0 elsewhere."""
    act = _active(answers)
    return act / np.sqrt(act.sum())


def unit_energy(scores: np.ndarray, answers: AnswerMatrix):
    """Normalize worker scores to unit l2 norm.

    Returns ``(weights, degenerate)``; an all-zero score vector falls back
    to :func:`uniform_weights`.
    """
    norm = np.sqrt(np.dot(scores, scores))
    if not norm > 0:
        return uniform_weights(answers), True
    return scores / norm, False


# ---------------------------------------------------------------------------
# plain plurality


def plu(answers: AnswerMatrix, seed=None) -> PluralityResult:
    """Majority vote per task; ties are broken uniformly at random (seeded)."""
    dec = _pick(answers.vote_counts(), _rng(seed))
    return PluralityResult(dec)


def ss_plu(answers: AnswerMatrix, probes: ProbeSet, seed=None) -> PluralityResult:
    """Plurality weighted by each worker's accuracy on the probe tasks.

    Workers who answered no probe get weight 1/K, the accuracy of a spammer.
    """
    if not probes:
        raise PluralityError("ss_plu needs probe tasks; use plu for the unsupervised case")
    probes.validate(answers)
    labels = probes.label_array(answers.n_tasks)
    on_probe = labels[answers.tasks] >= 0
    n = answers.n_workers
    seen = np.bincount(answers.workers[on_probe], minlength=n)
    right = np.bincount(answers.workers[on_probe],
                        weights=answers.answers[on_probe] == labels[answers.tasks[on_probe]],
                        minlength=n)
    w = np.where(seen > 0, right / np.maximum(seen, 1), 1.0 / answers.k)
    dec = _clamp(_pick(answers.vote_counts(w), _rng(seed)), probes)
    return PluralityResult(dec, weights=w)


# ---------------------------------------------------------------------------
# alternating optimizers


def _iterate(kind: str, answers: AnswerMatrix, probes: ProbeSet, rng, w, v=None,
             decisions=None, max_iters: int = MAX_ITERS) -> PluralityResult:
    """Alternate decision / weight (/ intention) steps until nothing changes.

    When ``decisions`` is given the first decision step is skipped, so the
    run starts from the supplied (decisions, w, v).
    """
    probes.validate(answers)
    trace = []
    degenerate = False
    dec = decisions
    if dec is not None:
        dec = np.asarray(dec).copy()
        trace.append(objective(kind, answers, dec, w, v))
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        if it == 1 and dec is not None:
            new_dec = dec
        else:
            new_dec = _clamp(_pick(_task_scores(kind, answers, w, v), rng, dec), probes)
        new_w, flag = unit_energy(_worker_scores(kind, answers, new_dec, v), answers)
        degenerate |= flag
        new_v = v
        if kind == "bp":
            agree, disagree = _agreement(answers, new_dec)
            new_v = (new_w * agree >= new_w * disagree / (answers.k - 1)).astype(np.int64)
        trace.append(objective(kind, answers, new_dec, new_w, new_v))
        same = (dec is not None and np.array_equal(new_dec, dec)
                and (v is None or np.array_equal(new_v, v))
                and np.max(np.abs(new_w - w)) < WEIGHT_TOL)
        dec, w, v = new_dec, new_w, new_v
        if same:
            converged = True
            break
    intentions = v if kind == "bp" else ((w >= 0).astype(np.int64) if kind == "neg" else None)
    return PluralityResult(dec, w, intentions, trace, converged, degenerate, it)


def us_wp(answers: AnswerMatrix, probes: ProbeSet | None = None, seed=None) -> PluralityResult:
    """Energy-constrained weighted plurality with nonnegative weights."""
    return _iterate("wp", answers, probes or ProbeSet(), _rng(seed), uniform_weights(answers))


def us_sw(answers: AnswerMatrix, probes: ProbeSet | None = None, seed=None) -> PluralityResult:
    """Weighted plurality with binary intentions (SS-SW when probes are given)."""
    v = np.ones(answers.n_workers, dtype=np.int64)
    return _iterate("bp", answers, probes or ProbeSet(), _rng(seed), uniform_weights(answers), v)


def us_neg(answers: AnswerMatrix, probes: ProbeSet | None = None, seed=None) -> PluralityResult:
    """Signed-weight plurality (SS-NEG when probes are given).

    ``intentions`` of the result flags workers with negative weight as 0.
    """
    return _iterate("neg", answers, probes or ProbeSet(), _rng(seed), uniform_weights(answers))


def us_hyb(answers: AnswerMatrix, probes: ProbeSet | None = None, seed=None) -> PluralityResult:
    """US-SW started from the US-NEG solution.

    Intentions start at the sign of the US-NEG weights, weights at their
    magnitudes and decisions at the US-NEG decisions; the US-SW iteration
    then begins with its weight step.
    """
    probes = probes or ProbeSet()
    rng = _rng(seed)
    neg = _iterate("neg", answers, probes, rng, uniform_weights(answers))
    v = (neg.weights >= 0).astype(np.int64)
    res = _iterate("bp", answers, probes, rng, np.abs(neg.weights), v, decisions=neg.decisions)
    res.degenerate |= neg.degenerate
    return res


def ss_sw(answers, probes, seed=None):
    return us_sw(answers, probes, seed)


def ss_neg(answers, probes, seed=None):
    return us_neg(answers, probes, seed)
