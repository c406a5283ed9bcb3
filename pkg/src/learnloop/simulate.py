"""Offline policy simulation: replay held-out responses through adaptive
sessions and measure how fast each policy's ability estimate approaches the
student's full-data estimate.

Protocol: the reference ability is fitted on the student's complete log
(ability-only steps, items and MLP frozen). Each simulated session then
starts from a neutral ability, picks items under the policy, answers from
the held-out log where a response exists (synthetic draws under the
reference ability otherwise), and records the L2 error against the
reference after every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from .diagnosis import NcdModel, ability_forward_backward, q_mask_array
from .ingest import DataBundle, ResponseDataset
from .selection import create_selection_state, record_response, select_next

POLICIES = ("becat", "random", "emc", "gain")
_POLICY_LAMBDA = {"becat": 0.5, "emc": 1.0, "gain": 0.0}


@dataclass
class SimulationConfig:
    policies: tuple[str, ...] = POLICIES
    n_students: int = 100
    budget: int = 10
    seed: int = 0
    lambda_mix: float = 0.5          # used by the becat policy
    n_samples: int = 16
    ability_lr: float = 0.2
    pool_size: int = 48
    reference_steps: int = 40
    reference_lr: float = 1.0
    min_test_records: int = 3
    test_fraction: float = 0.2

    def __post_init__(self):
        unknown = set(self.policies) - set(POLICIES)
        if unknown:
            raise ValueError(f"unknown policies: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {
            "policies": list(self.policies),
            "n_students": self.n_students,
            "budget": self.budget,
            "seed": self.seed,
            "lambda_mix": self.lambda_mix,
            "n_samples": self.n_samples,
            "ability_lr": self.ability_lr,
            "pool_size": self.pool_size,
            "reference_steps": self.reference_steps,
            "reference_lr": self.reference_lr,
            "min_test_records": self.min_test_records,
            "test_fraction": self.test_fraction,
        }


def fit_reference_ability(model: NcdModel, records, q_mask: np.ndarray,
                          steps: int, lr: float) -> np.ndarray:
    """Full-batch ability-only refinement on one student's complete log."""
    items = np.array([r.item_id for r in records])
    labels = np.array([float(r.correct) for r in records])
    theta = model.theta[records[0].student_id].copy()
    mask_rows = q_mask[items]
    for _ in range(steps):
        _, g1, g0 = ability_forward_backward(model, theta, items, mask_rows)
        rows = np.where(labels[:, None] == 1.0, g1, g0)
        theta = theta - lr * rows.mean(axis=0)
    return theta


def _answer_rng(seed: int, student: int, item: int) -> np.random.Generator:
    # stable per (seed, student, item): pairing across policies never depends
    # on the order in which items are asked
    return np.random.default_rng((seed, student, item))


def _simulate_session(model: NcdModel, q_mask: np.ndarray, bundle: DataBundle,
                      policy: str, student: int, pool: list[int],
                      answers: dict[int, int], theta_ref: np.ndarray,
                      p_ref: dict[int, float], cfg: SimulationConfig) -> list[float]:
    theta0 = np.zeros(model.d)
    lam = cfg.lambda_mix if policy == "becat" else _POLICY_LAMBDA.get(policy, 0.5)
    state = create_selection_state(
        model, theta0, bundle.q_matrix, q_mask, bundle.graph,
        budget=min(cfg.budget, len(pool)), lambda_mix=lam,
        n_samples=cfg.n_samples, ability_lr=cfg.ability_lr,
        seed=cfg.seed, pool=pool)
    random_rng = np.random.default_rng((cfg.seed, student, 0xBEEF))
    errors = []
    while state.remaining:
        if policy == "random":
            options = sorted(state.unselected())
            item = int(options[random_rng.integers(len(options))])
            state.selected.append(item)
        else:
            item = select_next(state, model, q_mask)
        if item in answers:
            observed = answers[item]
        else:
            observed = int(_answer_rng(cfg.seed, student, item).random()
                           < p_ref[item])
        record_response(state, model, q_mask, item, observed)
        errors.append(float(np.linalg.norm(state.theta - theta_ref)))
    return errors


def run_simulation(model: NcdModel, bundle: DataBundle,
                   train: ResponseDataset, test: ResponseDataset,
                   cfg: SimulationConfig) -> dict:
    """Paired-seed simulation across policies; one report document."""
    q_mask = q_mask_array(bundle.q_matrix, model.d)
    by_student_test = test.by_student()
    by_student_all = {}
    for ds in (train, test):
        for s, recs in ds.by_student().items():
            by_student_all.setdefault(s, []).extend(recs)

    eligible = sorted(s for s, recs in by_student_test.items()
                      if len(recs) >= cfg.min_test_records)
    picker = np.random.default_rng(cfg.seed)
    if len(eligible) > cfg.n_students:
        chosen = picker.choice(len(eligible), size=cfg.n_students, replace=False)
        students = sorted(int(eligible[i]) for i in chosen)
    else:
        students = eligible

    results: dict[str, dict] = {
        policy: {"final_errors": [], "curves": []} for policy in cfg.policies
    }
    for student in students:
        full_log = sorted(by_student_all[student], key=lambda r: r.order_index)
        theta_ref = fit_reference_ability(model, full_log, q_mask,
                                          cfg.reference_steps, cfg.reference_lr)
        # latest held-out response per item answers that item during replay
        answers: dict[int, int] = {}
        for rec in by_student_test[student]:
            answers[rec.item_id] = rec.correct
        pool = sorted(answers)
        if len(pool) < cfg.pool_size:
            filler_rng = np.random.default_rng((cfg.seed, student, 0xF00D))
            others = np.setdiff1d(np.arange(model.n_items), np.array(pool))
            extra = filler_rng.choice(
                others, size=min(cfg.pool_size - len(pool), len(others)),
                replace=False)
            pool = sorted(pool + [int(q) for q in extra])
        items_arr = np.asarray(pool)
        p, _, _ = ability_forward_backward(model, theta_ref, items_arr,
                                           q_mask[items_arr])
        p_ref = {int(q): float(pq) for q, pq in zip(pool, p)}
        for policy in cfg.policies:
            errors = _simulate_session(model, q_mask, bundle, policy, student,
                                       pool, answers, theta_ref, p_ref, cfg)
            results[policy]["final_errors"].append(errors[-1] if errors else 0.0)
            results[policy]["curves"].append(errors)

    report: dict = {
        "config": cfg.to_dict(),
        "n_students_simulated": len(students),
        "students": [bundle.id_maps.raw_student(s) for s in students],
        "policies": {},
    }
    for policy in cfg.policies:
        curves = results[policy]["curves"]
        max_len = max((len(c) for c in curves), default=0)
        mean_curve = [
            float(np.mean([c[i] for c in curves if len(c) > i]))
            for i in range(max_len)
        ]
        finals = results[policy]["final_errors"]
        report["policies"][policy] = {
            "mean_error_curve": mean_curve,
            "mean_final_error": float(np.mean(finals)) if finals else 0.0,
            "final_errors": finals,
        }

    if "becat" in cfg.policies and "random" in cfg.policies and students:
        becat = results["becat"]["final_errors"]
        random_ = results["random"]["final_errors"]
        wins = sum(b < r for b, r in zip(becat, random_))
        losses = sum(b > r for b, r in zip(becat, random_))
        p_value = (binomtest(wins, wins + losses, alternative="greater").pvalue
                   if wins + losses else 1.0)
        report["paired"] = {
            "becat_vs_random": {
                "wins": wins,
                "losses": losses,
                "ties": len(becat) - wins - losses,
                "sign_test_p_value": float(p_value),
            }
        }
    return report
