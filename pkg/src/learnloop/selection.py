"""Adaptive item selection for one student session.

Candidates are scored two ways: by the expected size of the ability update
an item would trigger (weighted over both possible outcomes), and by the
coverage gain a candidate adds to the already-selected set under a
Monte-Carlo-estimated inter-item weight matrix. A greedy loop mixes the two
normalized scores and the ability estimate takes one real SGD step after
each observed response.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit

from .diagnosis import NcdModel, _check_ids, _row_mask, ability_forward_backward
from .ingest import KnowledgeGraph, QMatrix

MAX_POOL = 512  # weight-matrix estimation is quadratic in the pool size


@dataclass
class WeightMatrix:
    w: np.ndarray            # (m, m), symmetric, entries in [0, c]
    c: float                 # non-negativity offset (max pairwise distance)
    candidate_ids: list[int]

    def __post_init__(self):
        self._index = {q: i for i, q in enumerate(self.candidate_ids)}

    def index_of(self, q: int) -> int:
        try:
            return self._index[q]
        except KeyError:
            raise KeyError(f"item {q} is not in the candidate pool") from None


@dataclass
class SelectionState:
    """All mutable pieces of one adaptive session."""

    student_snapshot: np.ndarray      # ability copy taken at session start
    theta: np.ndarray                 # current working ability estimate
    candidate_ids: list[int]
    weight: WeightMatrix | None
    budget: int
    lambda_mix: float
    ability_lr: float
    seed: int
    selected: list[int] = field(default_factory=list)
    responses: list[tuple[int, int]] = field(default_factory=list)
    emc_cache: dict[int, float] | None = None
    trace: list[dict] = field(default_factory=list)

    @property
    def remaining(self) -> int:
        return self.budget - len(self.selected)

    def unselected(self) -> list[int]:
        chosen = set(self.selected)
        return [q for q in self.candidate_ids if q not in chosen]


def expected_model_change(model: NcdModel, s: int, q: int, q_row,
                          lr: float, theta: np.ndarray | None = None) -> float:
    """Outcome-probability-weighted L2 norm of the hypothetical one-step
    ability update an item would cause. The model is not mutated."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    _check_ids(model, s if theta is None else None, q)
    theta = model.theta[s] if theta is None else theta
    mask = _row_mask(q_row, model.d)
    p, g1, g0 = ability_forward_backward(model, theta, np.array([q]), mask[None, :])
    step_t = lr * np.linalg.norm(g1[0])
    step_f = lr * np.linalg.norm(g0[0])
    return float(p[0] * step_t + (1.0 - p[0]) * step_f)


def emc_scores(model: NcdModel, theta: np.ndarray, items, q_mask: np.ndarray,
               lr: float) -> np.ndarray:
    """Vectorized expected-model-change over a candidate pool."""
    items = np.asarray(items)
    p, g1, g0 = ability_forward_backward(model, theta, items, q_mask[items])
    return lr * (p * np.linalg.norm(g1, axis=1)
                 + (1.0 - p) * np.linalg.norm(g0, axis=1))


def weight_matrix(model: NcdModel, theta: np.ndarray, candidates,
                  q_mask: np.ndarray, n_samples: int = 16,
                  seed: int = 0) -> WeightMatrix:
    """Complementarity weights: C minus the Monte-Carlo mean pairwise L2
    distance between per-item ability gradients.

    Each sample draws one shared uniform and thresholds it against every
    item's predicted probability, so indistinguishable items always receive
    identical responses (and weight exactly C).
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("candidate pool is empty")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    items = np.asarray(candidates)
    p, g1, g0 = ability_forward_backward(model, theta, items, q_mask[items])
    rng = np.random.default_rng(seed)
    draws = rng.random(n_samples)
    dist = np.zeros((len(candidates), len(candidates)))
    for u in draws:
        responses = u < p
        grads = np.where(responses[:, None], g1, g0)
        dist += cdist(grads, grads)
    dist /= n_samples
    c = float(dist.max())
    return WeightMatrix(w=c - dist, c=c, candidate_ids=candidates)


def info_score(weight: WeightMatrix, selected) -> float:
    """Coverage of the unselected candidates by the selected set: the sum
    over items outside S of their best weight into S. Empty S scores 0."""
    sel_idx = [weight.index_of(q) for q in selected]
    if not sel_idx:
        return 0.0
    chosen = set(sel_idx)
    out_idx = [i for i in range(len(weight.candidate_ids)) if i not in chosen]
    if not out_idx:
        return 0.0
    return float(weight.w[np.ix_(out_idx, sel_idx)].max(axis=1).sum())


def marginal_gain(weight: WeightMatrix, selected, q: int) -> float:
    """Score increment from adding q to the selected set; may be negative
    (q's own coverage term leaves the outer sum)."""
    if q in selected:
        raise ValueError(f"item {q} already selected")
    weight.index_of(q)
    return info_score(weight, list(selected) + [q]) - info_score(weight, selected)


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def select_next(state: SelectionState, model: NcdModel, q_mask: np.ndarray) -> int:
    """Greedy choice over the unselected pool: the mix of min-max-normalized
    expected model change and coverage gain, ties to the smallest item id.
    Appends the choice to the selected set and returns it."""
    if state.remaining <= 0:
        raise RuntimeError("selection budget exhausted")
    pool = sorted(state.unselected())
    if not pool:
        raise RuntimeError("no unselected candidates remain")

    if state.emc_cache is None:
        all_ids = np.asarray(state.candidate_ids)
        scores = emc_scores(model, state.theta, all_ids, q_mask, state.ability_lr)
        state.emc_cache = dict(zip(state.candidate_ids, scores))
    emc = np.array([state.emc_cache[q] for q in pool])
    gains = np.array([marginal_gain(state.weight, state.selected, q) for q in pool])
    score = state.lambda_mix * _minmax(emc) + (1.0 - state.lambda_mix) * _minmax(gains)
    best = int(np.argmax(score))  # first max wins: pool is id-ascending
    choice = pool[best]
    state.selected.append(choice)
    state.trace.append({
        "step": len(state.selected),
        "item_id": choice,
        "emc": float(emc[best]),
        "gain": float(gains[best]),
        "score": float(score[best]),
        "predicted_p": _predict_one(model, state.theta, choice, q_mask),
        "observed": None,
        "theta_norm_change": None,
    })
    return choice


def _predict_one(model: NcdModel, theta: np.ndarray, q: int, q_mask: np.ndarray) -> float:
    p, _, _ = ability_forward_backward(model, theta, np.array([q]), q_mask[[q]])
    return float(p[0])


def update_ability(model: NcdModel, s: int | None, q: int, q_row, observed: int,
                   lr: float, theta: np.ndarray | None = None) -> np.ndarray:
    """One real SGD step on the ability vector only (items and MLP frozen)
    under the observed label. Returns the new ability; nothing is mutated."""
    if observed not in (0, 1):
        raise ValueError(f"observed must be 0 or 1, got {observed!r}")
    _check_ids(model, s if theta is None else None, q)
    theta = model.theta[s] if theta is None else theta
    mask = _row_mask(q_row, model.d)
    _, g1, g0 = ability_forward_backward(model, theta, np.array([q]), mask[None, :])
    grad = g1[0] if observed == 1 else g0[0]
    return theta - lr * grad


def record_response(state: SelectionState, model: NcdModel, q_mask: np.ndarray,
                    q: int, observed: int) -> np.ndarray:
    """Apply an observed response to the session: step the ability estimate,
    log the response, and invalidate the expected-model-change cache."""
    if q not in state.selected:
        raise ValueError(f"item {q} was never selected in this session")
    if any(item == q for item, _ in state.responses):
        raise ValueError(f"item {q} already has a recorded response")
    before = state.theta
    state.theta = update_ability(model, None, q, np.flatnonzero(q_mask[q]),
                                 observed, state.ability_lr, theta=before)
    state.responses.append((q, int(observed)))
    state.emc_cache = None
    delta = float(np.linalg.norm(state.theta - before))
    for entry in reversed(state.trace):
        if entry["item_id"] == q and entry["observed"] is None:
            entry["observed"] = int(observed)
            entry["theta_norm_change"] = delta
            break
    return state.theta


def trace_jsonl(state: SelectionState) -> str:
    """The session trace as JSON lines, one record per selection step."""
    return "\n".join(json.dumps(entry, sort_keys=True) for entry in state.trace)


def filter_candidates(q_matrix: QMatrix, graph: KnowledgeGraph | None,
                      mastery_row, threshold: float, pool) -> list[int]:
    """Keep items touching a weak knowledge point (mastery below threshold)
    or a direct prerequisite of one; an empty result falls back to the full
    pool."""
    mastery_row = np.asarray(mastery_row)
    weak = {int(k) for k in np.flatnonzero(mastery_row < threshold)}
    relevant = set(weak)
    if graph is not None:
        for k in weak:
            relevant |= graph.prerequisites_of(k)
    kept = [q for q in pool if q_matrix.rows[q] & relevant]
    return kept if kept else list(pool)


def create_selection_state(model: NcdModel, theta0: np.ndarray,
                           q_matrix: QMatrix, q_mask: np.ndarray,
                           graph: KnowledgeGraph | None, *,
                           budget: int, lambda_mix: float = 0.5,
                           threshold: float = 0.6, n_samples: int = 16,
                           ability_lr: float = 1.0, seed: int = 0,
                           pool: list[int] | None = None,
                           max_pool: int = MAX_POOL) -> SelectionState:
    """Build the session state: filter the candidate pool against weak
    knowledge points, truncate oversized pools by expected model change,
    and estimate the weight matrix once for the session."""
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if not (0.0 <= lambda_mix <= 1.0):
        raise ValueError("lambda_mix must be in [0,1]")
    full_pool = list(pool) if pool is not None else list(range(model.n_items))
    mastery_row = expit(theta0)
    candidates = filter_candidates(q_matrix, graph, mastery_row, threshold, full_pool)
    if len(candidates) > max_pool:
        scores = emc_scores(model, theta0, np.asarray(candidates), q_mask, ability_lr)
        order = np.lexsort((np.asarray(candidates), -scores))
        candidates = sorted(np.asarray(candidates)[order[:max_pool]].tolist())
    weight = None
    if budget > 0:
        weight = weight_matrix(model, theta0, candidates, q_mask,
                               n_samples=n_samples, seed=seed)
    return SelectionState(
        student_snapshot=np.array(theta0, dtype=np.float64, copy=True),
        theta=np.array(theta0, dtype=np.float64, copy=True),
        candidate_ids=list(candidates),
        weight=weight,
        budget=budget,
        lambda_mix=lambda_mix,
        ability_lr=ability_lr,
        seed=seed,
    )
