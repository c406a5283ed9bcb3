"""Run manifests, delimited metric exports, and the matplotlib figures the
CLI drops next to them."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .diagnosis import EpochStats, MasteryTable
from .ingest import IdMaps

METRIC_KEYS = ("auc", "acc", "rmse", "mse", "loss")


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: str | Path, command: str, config: dict,
                   inputs: list[str | Path]) -> Path:
    """Effective configuration plus input checksums; no wall-clock values,
    so reruns on identical inputs are byte-identical."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "inputs": {
            str(p): _sha256(Path(p)) for p in inputs if Path(p).is_file()
        },
    }
    path = out / "run_manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_history(path: str | Path, history: list[EpochStats]) -> None:
    with open(path, "w") as fh:
        json.dump([e.to_dict() for e in history], fh, indent=2)
        fh.write("\n")


def write_history_csvs(history: list[EpochStats], out_dir: str | Path) -> list[Path]:
    """One CSV per metric (epoch,value), the machine-readable plot source."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    series: dict[str, list[tuple[int, float]]] = {"train_loss": []}
    for key in METRIC_KEYS:
        series[f"val_{key}"] = []
    for entry in history:
        series["train_loss"].append((entry.epoch, entry.train_loss))
        if entry.val is not None:
            for key in METRIC_KEYS:
                value = getattr(entry.val, key)
                if not math.isnan(value):
                    series[f"val_{key}"].append((entry.epoch, value))
    for name, rows in series.items():
        if not rows:
            continue
        path = out / f"metric_{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", name])
            w.writerows(rows)
        paths.append(path)
    return paths


def render_history_figure(history: list[EpochStats], path: str | Path) -> None:
    """Training dynamics: loss on one axis, validation metrics on the other."""
    epochs = [e.epoch for e in history]
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, [e.train_loss for e in history], marker="o",
                 label="train loss")
    val_losses = [(e.epoch, e.val.loss) for e in history if e.val]
    if val_losses:
        ax_loss.plot(*zip(*val_losses), marker="s", label="val loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("cross-entropy")
    ax_loss.legend()
    ax_loss.set_title("Optimization")

    for key in ("auc", "acc", "rmse"):
        points = [(e.epoch, getattr(e.val, key)) for e in history
                  if e.val and not math.isnan(getattr(e.val, key))]
        if points:
            ax_val.plot(*zip(*points), marker="o", label=key.upper())
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("metric")
    ax_val.legend()
    ax_val.set_title("Validation quality")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_simulation_figure(report: dict, path: str | Path) -> None:
    """Mean ability-error curves per selection policy."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for policy, stats in report["policies"].items():
        curve = stats["mean_error_curve"]
        ax.plot(range(1, len(curve) + 1), curve, marker="o", label=policy)
    ax.set_xlabel("items administered")
    ax.set_ylabel("mean ability error (L2)")
    ax.set_title("Policy comparison")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_mastery_csv(path: str | Path, table: MasteryTable,
                      id_maps: IdMaps) -> None:
    """Per-student, per-knowledge-point mastery with raw ids."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["student_id", "skill_id", "mastery"])
        for s in range(table.values.shape[0]):
            raw_student = id_maps.raw_student(s)
            for k in range(table.values.shape[1]):
                w.writerow([raw_student, id_maps.raw_knowledge(k),
                            f"{table.values[s, k]:.6f}"])
