"""Generalized EM for the skill / intention / difficulty answer model.

The hidden data are the true answers of non-probe tasks.  Each outer
iteration runs an E-step (exact posteriors) followed by a generalized
M-step alternating a closed-form intention update (M1) with projected
backtracking gradient ascent over skills, slopes and difficulties (M2).
Neither substep can decrease the expected complete log-likelihood, so the
incomplete log-likelihood is nondecreasing across outer iterations.

Only honest and simple-adversary workers are fitted.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import linalg
from scipy.special import logsumexp

from .data import AnswerMatrix, ProbeSet
from .models import ModelParams, sigmoid

log = logging.getLogger(__name__)

D_BOUND = 50.0
A_BOUND = 10.0
MONOTONE_SLACK = 1e-9


class GemError(RuntimeError):
    pass


@dataclass
class GemConfig:
    max_outer_iters: int = 200
    ll_rel_tol: float = 1e-7
    step_init: float = 1.0
    backtrack: float = 0.5
    max_inner_iters: int = 20
    grad_tol: float = 1e-6
    inner_rel_tol: float = 1e-7
    max_rounds: int = 10
    init_strategy: str = "plurality"
    n_restarts: int = 1
    seed: int = 0
    fit_adversaries: bool = True
    tie_slopes: bool = False

    def __post_init__(self):
        if min(self.ll_rel_tol, self.grad_tol, self.inner_rel_tol) <= 0:
            raise ValueError("tolerances must be > 0")
        if min(self.max_outer_iters, self.max_inner_iters, self.max_rounds, self.n_restarts) < 1:
            raise ValueError("iteration caps must be >= 1")
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError("backtrack factor must be in (0, 1)")
        if self.init_strategy not in ("plurality", "flat"):
            raise ValueError(f"unknown init strategy {self.init_strategy!r}")


@dataclass
class GemResult:
    params: ModelParams
    posteriors: np.ndarray  # (T, K); probe rows are one-hot on the known label
    decisions: np.ndarray
    ll_trace: list[float]
    converged: bool
    probe_mask: np.ndarray = field(repr=False)

    def posterior_rows(self) -> dict[int, np.ndarray]:
        """Posterior vectors of the non-probe tasks, keyed by task index."""
        return {int(i): self.posteriors[i] for i in np.flatnonzero(~self.probe_mask)}


@dataclass
class M2Result:
    params: ModelParams
    objective: float
    n_iters: int
    stalled: bool


# ---------------------------------------------------------------------------
# per-entry log pmfs


def _sigmoid_and_log_fail(delta):
    """Return ``sigmoid(delta)`` and ``log sigmoid(-delta)`` from one exp."""
    e = np.exp(-np.abs(delta))
    inv = 1.0 / (1.0 + e)
    s = np.where(delta >= 0, inv, e * inv)
    return s, -(np.maximum(delta, 0.0) + np.log1p(e))


def _log_pmfs(params: ModelParams, answers: AnswerMatrix, honest=None):
    """Per-entry log P(correct answer) and log P(a given wrong answer).

    ``honest`` overrides the intention of every entry (True/False) when given.
    """
    t, w, k = answers.tasks, answers.workers, answers.k
    delta = params.a[w] * (params.d[w] - params.dtilde[t])
    s, log_fail = _sigmoid_and_log_fail(delta)
    log_fail = log_fail - np.log(k)
    log_c_h = np.log1p(s * (k - 1)) - np.log(k)
    log_w_a = np.log((k - 1) + s) - np.log(k * (k - 1))
    if honest is None:
        honest = params.v[w] == 1
    return np.where(honest, log_c_h, log_fail), np.where(honest, log_fail, log_w_a)


def _task_loglik(params: ModelParams, answers: AnswerMatrix) -> np.ndarray:
    """(T, K) array of sum_j log beta(r_ij | Z_i = k)."""
    log_c, log_w = _log_pmfs(params, answers)
    n_t, k = answers.n_tasks, answers.k
    base = np.bincount(answers.tasks, weights=log_w, minlength=n_t)
    bonus = np.bincount(answers.tasks * k + answers.answers, weights=log_c - log_w,
                        minlength=n_t * k).reshape(n_t, k)
    return base[:, None] + bonus


def incomplete_log_likelihood(answers: AnswerMatrix, probes: ProbeSet, params: ModelParams) -> float:
    """log P(answers, probe labels | params) with a uniform prior on hidden truths."""
    params.check(answers)
    probe_mask = probes.mask(answers.n_tasks)
    labels = probes.label_array(answers.n_tasks)
    log_c, log_w = _log_pmfs(params, answers)
    on_probe = probe_mask[answers.tasks]
    hit = answers.answers == labels[answers.tasks]
    probe_term = np.sum(np.where(hit, log_c, log_w)[on_probe])
    loglik = _task_loglik(params, answers)[~probe_mask]
    hidden_term = np.sum(logsumexp(loglik, axis=1)) - len(loglik) * np.log(answers.k)
    return float(probe_term + hidden_term)


def e_step(answers: AnswerMatrix, probes: ProbeSet, params: ModelParams) -> np.ndarray:
    """Posterior P(Z_i = k | data, params) as a (T, K) array.

    Probe rows are one-hot on the known label.
    """
    params.check(answers)
    loglik = _task_loglik(params, answers)
    if not np.all(np.isfinite(loglik).any(axis=1)):
        raise FloatingPointError("posterior row with no finite likelihood")
    post = np.exp(loglik - logsumexp(loglik, axis=1, keepdims=True))
    for t, z in probes.labels.items():
        post[t] = 0.0
        post[t, z] = 1.0
    return post


def _correct_weight(answers: AnswerMatrix, probes: ProbeSet, posteriors: np.ndarray) -> np.ndarray:
    """Per-entry expected indicator that the answer equals the hidden truth."""
    return posteriors[answers.tasks, answers.answers]


def expected_complete_ll(answers: AnswerMatrix, probes: ProbeSet, posteriors: np.ndarray,
                         params: ModelParams) -> float:
    """E[log L_complete] under the given posteriors (probe rows one-hot)."""
    c = _correct_weight(answers, probes, posteriors)
    log_c, log_w = _log_pmfs(params, answers)
    return float(np.sum(c * log_c + (1.0 - c) * log_w))


def m2_gradient(answers: AnswerMatrix, probes: ProbeSet, posteriors: np.ndarray,
                params: ModelParams):
    """Analytic gradient of :func:`expected_complete_ll` in (d, a, dtilde)."""
    c = _correct_weight(answers, probes, posteriors)
    return _gradient(answers, c, params)


def _gradient(answers: AnswerMatrix, c: np.ndarray, params: ModelParams):
    t, w, k = answers.tasks, answers.workers, answers.k
    gap = params.d[w] - params.dtilde[t]
    delta = params.a[w] * gap
    s = sigmoid(delta)
    ss = s * (1.0 - s)
    honest = params.v[w] == 1
    # d log p / d delta for correct / wrong answers
    dc = np.where(honest, ss * (k - 1) / (1.0 + s * (k - 1)), -s)
    dw = np.where(honest, -s, ss / ((k - 1) + s))
    g = c * dc + (1.0 - c) * dw
    grad_d = np.bincount(w, weights=g * params.a[w], minlength=answers.n_workers)
    grad_a = np.bincount(w, weights=g * gap, minlength=answers.n_workers)
    grad_dt = -np.bincount(t, weights=g * params.a[w], minlength=answers.n_tasks)
    return grad_d, grad_a, grad_dt


# ---------------------------------------------------------------------------
# M-step


def m1_step(answers: AnswerMatrix, probes: ProbeSet, posteriors: np.ndarray,
            params: ModelParams) -> ModelParams:
    """Set each worker's intention to the value maximizing its own expected
    complete log-likelihood contribution (ties go to honest)."""
    c = _correct_weight(answers, probes, posteriors)
    n = answers.n_workers
    contrib = []
    for honest in (False, True):
        log_c, log_w = _log_pmfs(params, answers, honest=honest)
        contrib.append(np.bincount(answers.workers, weights=c * log_c + (1.0 - c) * log_w,
                                   minlength=n))
    out = params.copy()
    out.v = (contrib[1] >= contrib[0]).astype(np.int64)
    return out


def _pack(params: ModelParams, tie: bool) -> np.ndarray:
    a = params.a[:1] if tie else params.a
    return np.concatenate([params.d, a, params.dtilde])


def _unpack(x: np.ndarray, template: ModelParams, tie: bool) -> ModelParams:
    n = template.n_workers
    n_a = 1 if tie else n
    out = template.copy()
    out.d = x[:n].copy()
    out.a = np.full(n, x[n]) if tie else x[n:n + n_a].copy()
    out.dtilde = x[n + n_a:].copy()
    return out


@njit(cache=True, fastmath=True, error_model="numpy")
def _surface_kernel(t, w, honest, c, d, a, dt, k, n_t):
    """Objective and gradient of the M2 surface in one pass over the entries."""
    n = d.shape[0]
    gd = np.zeros(n)
    ga = np.zeros(n)
    gdt = np.zeros(n_t)
    log_k = np.log(k)
    log_kk = np.log(k * (k - 1.0))
    f = 0.0
    for e in range(t.shape[0]):
        j = w[e]
        i = t[e]
        aw = a[j]
        gap = d[j] - dt[i]
        delta = aw * gap
        ex = np.exp(-abs(delta))
        inv = 1.0 / (1.0 + ex)
        s = inv if delta >= 0 else ex * inv
        log_fail = -(max(delta, 0.0) + np.log1p(ex)) - log_k
        ss = s * (1.0 - s)
        ce = c[e]
        if honest[e]:
            f += ce * (np.log1p(s * (k - 1.0)) - log_k) + (1.0 - ce) * log_fail
            g = ce * ss * (k - 1.0) / (1.0 + s * (k - 1.0)) - (1.0 - ce) * s
        else:
            f += ce * log_fail + (1.0 - ce) * (np.log((k - 1.0) + s) - log_kk)
            g = -ce * s + (1.0 - ce) * ss / ((k - 1.0) + s)
        gd[j] += g * aw
        ga[j] += g * gap
        gdt[i] -= g * aw
    return f, gd, ga, gdt


@njit(cache=True, fastmath=True, error_model="numpy")
def _gauss_newton_matrix(t, w, n, n_a, d, a, dt, size, ridge):
    """Dense Gauss-Newton curvature of the surface, with a ridge on the diagonal."""
    h = np.zeros((size, size))
    off_t = n + n_a
    for e in range(t.shape[0]):
        j = w[e]
        i = t[e]
        aw = a[j]
        gap = d[j] - dt[i]
        delta = aw * gap
        ex = np.exp(-abs(delta))
        s = 1.0 / (1.0 + ex) if delta >= 0 else ex / (1.0 + ex)
        ss = s * (1.0 - s)
        pj = j
        pa = n + (0 if n_a == 1 else j)
        pt = off_t + i
        h[pj, pj] += ss * aw * aw
        h[pj, pa] += ss * aw * gap
        h[pa, pj] += ss * aw * gap
        h[pa, pa] += ss * gap * gap
        h[pj, pt] -= ss * aw * aw
        h[pt, pj] -= ss * aw * aw
        h[pa, pt] -= ss * aw * gap
        h[pt, pa] -= ss * aw * gap
        h[pt, pt] += ss * aw * aw
    for p in range(size):
        h[p, p] += ridge
    return h


class _Surface:
    """E[log L_c] as a function of the packed vector (d, a, dtilde) with v fixed."""

    def __init__(self, answers: AnswerMatrix, c: np.ndarray, v: np.ndarray, tie: bool):
        self.t, self.w, self.k = answers.tasks, answers.workers, answers.k
        self.n, self.n_t = answers.n_workers, answers.n_tasks
        self.n_a = 1 if tie else self.n
        self.tie = tie
        self.c = np.ascontiguousarray(c, dtype=float)
        self.honest = v[self.w] == 1

    def split(self, x):
        n, n_a = self.n, self.n_a
        a = np.full(n, x[n]) if self.tie else x[n:n + n_a]
        return x[:n], a, x[n + n_a:]

    def value(self, x):
        """Objective at ``x`` plus the derivative state for :meth:`gradient_and_direction`."""
        d, a, dt = self.split(x)
        out = _surface_kernel(self.t, self.w, self.honest, self.c, np.ascontiguousarray(d),
                              np.ascontiguousarray(a), np.ascontiguousarray(dt),
                              float(self.k), self.n_t)
        return out[0], out[1:]

    def gradient_and_direction(self, state, x, lo, hi, ridge: float = 1e-3):
        """Gradient and a Gauss-Newton ascent direction.

        Coordinates sitting on a bound with the gradient pointing outward
        are frozen; the free ones move along the solution of the damped
        Gauss-Newton system restricted to them.
        """
        gd, ga, gdt = state
        if self.tie:
            grad = np.concatenate([gd, [ga.sum()], gdt])
        else:
            grad = np.concatenate([gd, ga, gdt])
        free = ~(((x <= lo) & (grad < 0)) | ((x >= hi) & (grad > 0)))
        d, a, dt = self.split(x)
        h = _gauss_newton_matrix(self.t, self.w, self.n, self.n_a, np.ascontiguousarray(d),
                                 np.ascontiguousarray(a), np.ascontiguousarray(dt),
                                 x.shape[0], ridge)
        direction = np.zeros_like(x)
        idx = np.flatnonzero(free)
        if idx.size:
            sub = h if idx.size == x.shape[0] else h[np.ix_(idx, idx)]
            try:
                factor = linalg.cho_factor(sub, overwrite_a=True, check_finite=False)
                direction[idx] = linalg.cho_solve(factor, grad[idx], check_finite=False)
            except linalg.LinAlgError:
                direction[idx] = grad[idx] / np.diag(sub)
        return grad, direction


def m2_step(answers: AnswerMatrix, probes: ProbeSet, posteriors: np.ndarray,
            params: ModelParams, config: GemConfig | None = None) -> M2Result:
    """Projected backtracking gradient ascent on E[log L_c] over (d, a, dtilde).

    The ascent direction solves a ridge-damped Gauss-Newton system (positive
    definite, so still an ascent direction).  Each accepted step satisfies
    an Armijo condition and strictly increases the objective.  The loop
    stops early once the relative gain of a step drops below
    ``inner_rel_tol``.
    """
    config = config or GemConfig()
    tie = config.tie_slopes
    surface = _Surface(answers, _correct_weight(answers, probes, posteriors), params.v, tie)
    n, n_a = answers.n_workers, surface.n_a
    lo = np.concatenate([np.full(n, -D_BOUND), np.full(n_a, -A_BOUND), np.full(answers.n_tasks, -D_BOUND)])
    hi = -lo

    x = np.clip(_pack(params, tie), lo, hi)
    f, state = surface.value(x)
    step = config.step_init
    stalled = False
    it = 0
    for it in range(1, config.max_inner_iters + 1):
        g, direction = surface.gradient_and_direction(state, x, lo, hi)
        if np.max(np.abs(direction), initial=0.0) < config.grad_tol:
            break
        for _ in range(60):
            x_new = np.clip(x + step * direction, lo, hi)
            f_new, state_new = surface.value(x_new)
            if f_new >= f + 1e-4 * max(np.dot(g, x_new - x), 0.0) and f_new > f:
                break
            step *= config.backtrack
        else:
            stalled = True
            break
        gain = f_new - f
        x, f, state = x_new, f_new, state_new
        if gain <= config.inner_rel_tol * abs(f):
            break
        step = min(step * 2.0, config.step_init)
    return M2Result(_unpack(x, params, tie), f, it, stalled)


# ---------------------------------------------------------------------------
# driver


def plurality_reference(answers: AnswerMatrix, probes: ProbeSet) -> np.ndarray:
    """Simple plurality labels (lowest index on ties) with probes clamped."""
    ref = np.argmax(answers.vote_counts(), axis=1)
    for t, z in probes.labels.items():
        ref[t] = z
    return ref


def initial_params(answers: AnswerMatrix, probes: ProbeSet, strategy: str = "plurality",
                   rng=None, jitter: float = 0.0) -> ModelParams:
    """Starting point: all honest, unit slopes, zero difficulties, and skills
    from each worker's agreement rate with the plurality answers.

    The agreement rate ``rho`` is converted to a solve probability
    ``(rho - 1/K) / (1 - 1/K)`` before taking the logit, so agreement at
    chance level maps to a very low skill.
    """
    n, k = answers.n_workers, answers.k
    d = np.zeros(n)
    if strategy == "plurality":
        ref = plurality_reference(answers, probes)
        agree = np.bincount(answers.workers, weights=(answers.answers == ref[answers.tasks]),
                            minlength=n)
        total = np.maximum(np.bincount(answers.workers, minlength=n), 1)
        solve = np.clip((agree / total - 1.0 / k) / (1.0 - 1.0 / k), 1e-3, 1 - 1e-3)
        d = np.clip(np.log(solve / (1.0 - solve)), -5.0, 5.0)
    a = np.ones(n)
    dtilde = np.zeros(answers.n_tasks)
    if jitter > 0 and rng is not None:
        d = d + rng.normal(0.0, jitter, n)
        a = a + rng.normal(0.0, 0.1 * jitter, n)
        dtilde = dtilde + rng.normal(0.0, jitter, answers.n_tasks)
    return ModelParams(np.ones(n, dtype=np.int64), d, a, dtilde)


def _generalized_m_step(answers, probes, post, params, config):
    for rnd in range(config.max_rounds):
        if config.fit_adversaries:
            updated = m1_step(answers, probes, post, params)
            flips = int(np.sum(updated.v != params.v))
            params = updated
            if rnd > 0 and flips == 0:
                break
        before = _pack(params, config.tie_slopes)
        res = m2_step(answers, probes, post, params, config)
        params = res.params
        change = np.max(np.abs(_pack(params, config.tie_slopes) - before), initial=0.0)
        if change < 1e-6 or not config.fit_adversaries:
            break
    return params


def _run_once(answers, probes, config, init: ModelParams):
    params = init
    ll_trace = [incomplete_log_likelihood(answers, probes, params)]
    converged = False
    post = e_step(answers, probes, params)
    for it in range(config.max_outer_iters):
        params = _generalized_m_step(answers, probes, post, params, config)
        post = e_step(answers, probes, params)
        ll = incomplete_log_likelihood(answers, probes, params)
        prev = ll_trace[-1]
        ll_trace.append(ll)
        if ll < prev - MONOTONE_SLACK:
            raise GemError(f"log-likelihood decreased at iteration {it + 1}: {prev} -> {ll}")
        if abs(ll - prev) <= config.ll_rel_tol * abs(prev):
            converged = True
            break
    return params, post, ll_trace, converged


def run_gem(answers: AnswerMatrix, probes: ProbeSet | None = None,
            config: GemConfig | None = None, init: ModelParams | None = None) -> GemResult:
    """Fit the model by generalized EM and return MAP decisions.

    With an empty probe set this is the unsupervised specialization.  With
    ``n_restarts > 1`` extra runs start from jittered initializations and
    the run with the highest final log-likelihood is returned.
    """
    probes = probes or ProbeSet()
    config = config or GemConfig()
    probes.validate(answers)
    if init is not None:
        init.check(answers)
    rng = np.random.default_rng(config.seed)
    best = None
    for r in range(config.n_restarts):
        start = init if (init is not None and r == 0) else initial_params(
            answers, probes, config.init_strategy, rng, jitter=1.0 if r > 0 else 0.0)
        outcome = _run_once(answers, probes, config, start)
        log.debug("restart %d: ll=%.6f after %d iterations", r, outcome[2][-1], len(outcome[2]) - 1)
        if best is None or outcome[2][-1] > best[2][-1]:
            best = outcome
    params, post, ll_trace, converged = best
    decisions = np.argmax(post, axis=1)
    mask = probes.mask(answers.n_tasks)
    for t, z in probes.labels.items():
        decisions[t] = z
    return GemResult(params, post, decisions, ll_trace, converged, mask)
