"""CSV report writers and optional figure rendering.

CSV is the primary output.  Figures need matplotlib, installed through the
``plot`` extra; it is imported only when figures are requested.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable, Sequence

from .federation import ROUND_LOG_COLUMNS, RoundLog
from .io import write_csv
from .metrics import SCD_DEFINITION, MetricsReport

LABEL_COLUMNS = ["model", "aggregator", "split"]
METRICS_COLUMNS = LABEL_COLUMNS + MetricsReport.columns()
COMPARE_METRICS = ["dice", "bce_dice", "iou", "rmse", "ssim", "scd"]
COMPARE_COLUMNS = ["aggregator", "seed"] + COMPARE_METRICS
CURVE_COLUMNS = ["aggregator", "seed", "round", "loss", "dice", "accuracy", "iou"]


def round_log_rows(logs: Iterable[RoundLog]) -> list[dict]:
    return [row for entry in logs for row in entry.rows()]


def write_round_log(path: Path, logs: Iterable[RoundLog]) -> None:
    write_csv(path, ROUND_LOG_COLUMNS, round_log_rows(logs))


def metrics_row(report: MetricsReport, model: str, aggregator: str, split: str) -> dict:
    row = {"model": model, "aggregator": aggregator, "split": split}
    row.update(report.as_row())
    return row


def write_metrics(path: Path, rows: Sequence[dict]) -> None:
    write_csv(path, METRICS_COLUMNS, rows, comments=[SCD_DEFINITION])


def compare_rows(results: Sequence[tuple[str, int, MetricsReport]]) -> list[dict]:
    """One row per (aggregator, seed) run, then one ``seed=mean`` row per aggregator.

    Aggregators keep their first-appearance order.
    """
    rows = []
    order: list[str] = []
    for agg, seed, rep in results:
        if agg not in order:
            order.append(agg)
        rows.append({"aggregator": agg, "seed": seed, **{k: getattr(rep, k) for k in COMPARE_METRICS}})
    for agg in order:
        runs = [r for a, _, r in results if a == agg]
        mean = {k: math.fsum(getattr(r, k) for r in runs) / len(runs) for k in COMPARE_METRICS}
        rows.append({"aggregator": agg, "seed": "mean", **mean})
    return rows


def write_compare(path: Path, rows: Sequence[dict]) -> None:
    write_csv(path, COMPARE_COLUMNS, rows, comments=[SCD_DEFINITION])


def curve_rows(aggregator: str, seed: int, logs: Iterable[RoundLog]) -> list[dict]:
    return [{"aggregator": aggregator, "seed": seed, "round": e.round, "loss": e.loss,
             "dice": e.metrics.dice, "accuracy": e.metrics.accuracy, "iou": e.metrics.iou}
            for e in logs]


def write_curves(path: Path, rows: Sequence[dict]) -> None:
    write_csv(path, CURVE_COLUMNS, rows)


# --------------------------------------------------------------------------- figures


def require_matplotlib():
    """Import pyplot with a non-interactive backend, or raise ImportError with a hint."""
    try:
        import matplotlib
    except ImportError as exc:
        raise ImportError("figures need matplotlib: pip install 'artifact[plot]'") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_training_curves(path: Path, logs: Sequence[RoundLog]) -> Path:
    """Accuracy and loss per round, side by side."""
    plt = require_matplotlib()
    rounds = [e.round for e in logs]
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_acc.plot(rounds, [e.metrics.accuracy for e in logs], marker="o", label="accuracy")
    ax_acc.plot(rounds, [e.metrics.dice for e in logs], marker="s", label="dice")
    ax_acc.set_xlabel("round")
    ax_acc.set_ylim(0, 1)
    ax_acc.legend()
    ax_loss.plot(rounds, [e.loss for e in logs], marker="o", color="tab:red")
    ax_loss.set_xlabel("round")
    ax_loss.set_ylabel("bce + dice loss")
    fig.tight_layout()
    return _save(fig, path, plt)


def plot_compare(path: Path, rows: Sequence[dict]) -> Path:
    """Bar chart of the mean rows of a comparison table."""
    plt = require_matplotlib()
    means = [r for r in rows if r["seed"] == "mean"]
    fig, axes = plt.subplots(1, len(COMPARE_METRICS), figsize=(2.2 * len(COMPARE_METRICS), 3))
    names = [r["aggregator"] for r in means]
    for ax, metric in zip(axes, COMPARE_METRICS):
        ax.bar(names, [r[metric] for r in means])
        ax.set_title(metric)
        ax.tick_params(axis="x", labelrotation=45)
    fig.tight_layout()
    return _save(fig, path, plt)


def _save(fig, path: Path, plt) -> Path:
    # savefig writes directly; go through a temp name so readers never see a partial file
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    fig.savefig(tmp, format=path.suffix.lstrip(".") or "png", dpi=100)
    plt.close(fig)
    tmp.replace(path)
    return path
