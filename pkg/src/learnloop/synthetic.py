"""Synthetic response-log generator.

Produces raw files in the same shape as a cleaned ASSISTments-style export
(per-row skill tags, separate item-skill mapping, knowledge graph, name and
text tables) from a planted mastery model, so the full pipeline can be
exercised and benchmarked without shipping a dataset.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from scipy.special import expit

TOPIC_NAMES = [
    "Fraction Addition", "Fraction Multiplication", "Decimal Comparison",
    "Percent Change", "Ratio Simplification", "Proportional Reasoning",
    "Integer Arithmetic", "Order of Operations", "Linear Equations",
    "Inequalities", "Exponents", "Square Roots", "Area of Polygons",
    "Circle Geometry", "Volume of Solids", "Angle Relationships",
    "Coordinate Graphing", "Slope and Intercept", "Probability of Events",
    "Mean Median Mode", "Scatter Plots", "Unit Conversion",
    "Scientific Notation", "Prime Factorization", "Greatest Common Factor",
    "Least Common Multiple", "Absolute Value", "Number Line Reasoning",
    "Pattern Recognition", "Word Problem Setup", "Estimation Strategies",
    "Data Tables",
]

ITEM_TEMPLATES = [
    "Solve the following {name} problem and enter your answer.",
    "Work through this exercise on {name}; show the final result.",
    "A short quiz question covering {name}.",
    "Apply {name} to find the unknown value.",
    "Practice task: use {name} to complete the statement.",
]


def skill_name(k: int) -> str:
    base = TOPIC_NAMES[k % len(TOPIC_NAMES)]
    suffix = k // len(TOPIC_NAMES)
    return base if suffix == 0 else f"{base} {suffix + 1}"


def generate(out_dir: str | Path, *, n_students: int = 200, n_items: int = 120,
             n_knowledge: int = 10, min_logs: int = 15, max_logs: int = 25,
             seed: int = 0, sharpness: float = 5.0) -> dict:
    """Write raw input files for the ingest stage; returns summary counts.

    Responses are drawn from a planted monotone model: each student has a
    general proficiency plus per-skill deviations, each item a per-skill
    difficulty and a discrimination, and the correctness probability is a
    logistic function of the discrimination-scaled mastery-difficulty gap.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    general = rng.normal(0.0, 1.1, size=n_students)
    deviation = rng.normal(0.0, 0.8, size=(n_students, n_knowledge))
    mastery = expit(general[:, None] + deviation)

    difficulty = expit(rng.normal(0.0, 1.0, size=(n_items, n_knowledge)))
    discrimination = rng.uniform(0.8, 2.0, size=n_items)
    item_skills = []
    for q in range(n_items):
        n_sk = 1 + int(rng.random() < 0.35) + int(rng.random() < 0.1)
        n_sk = min(n_sk, n_knowledge)
        skills = rng.choice(n_knowledge, size=n_sk, replace=False)
        item_skills.append(sorted(int(k) for k in skills))

    student_raw = [str(1000 + s) for s in range(n_students)]
    item_raw = [str(20000 + q) for q in range(n_items)]
    skill_raw = [str(300 + k) for k in range(n_knowledge)]

    n_rows = 0
    correct_total = 0
    with open(out / "raw_responses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "problem_id", "skill_id", "correct", "order_id"])
        for s in range(n_students):
            n_logs = int(rng.integers(min_logs, max_logs + 1))
            n_logs = min(n_logs, n_items)
            items = rng.choice(n_items, size=n_logs, replace=False)
            for order, q in enumerate(items):
                ks = item_skills[q]
                gap = float(np.mean(mastery[s, ks] - difficulty[q, ks]))
                p = expit(sharpness * discrimination[q] * gap)
                correct = int(rng.random() < p)
                correct_total += correct
                n_rows += 1
                w.writerow([student_raw[s], item_raw[q], skill_raw[ks[0]],
                            correct, order])

    with open(out / "raw_q_matrix.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["problem_id", "skill_id"])
        for q in range(n_items):
            for k in item_skills[q]:
                w.writerow([item_raw[q], skill_raw[k]])

    with open(out / "knowledge_graph.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src_skill_id", "dst_skill_id", "relation"])
        for k in range(1, n_knowledge):
            if rng.random() < 0.5:
                w.writerow([skill_raw[k - 1], skill_raw[k], "prerequisite"])

    with open(out / "knowledge_names.csv", "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_ALL)
        w.writerow(["skill_id", "name"])
        for k in range(n_knowledge):
            w.writerow([skill_raw[k], skill_name(k)])

    with open(out / "item_texts.csv", "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_ALL)
        w.writerow(["problem_id", "text"])
        for q in range(n_items):
            names = " and ".join(skill_name(k) for k in item_skills[q])
            template = ITEM_TEMPLATES[q % len(ITEM_TEMPLATES)]
            w.writerow([item_raw[q], template.format(name=names)])

    return {
        "n_students": n_students,
        "n_items": n_items,
        "n_knowledge": n_knowledge,
        "n_responses": n_rows,
        "overall_correct_rate": correct_total / max(1, n_rows),
    }
