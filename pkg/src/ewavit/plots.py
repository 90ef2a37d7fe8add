"""Figures for the report paths.  Rendering happens off the training loop, from
the CSV files it wrote."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k, v in row.items():
            try:
                row[k] = float(v)
            except (TypeError, ValueError):
                pass
    return rows


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training(run_dir: str | Path) -> list[Path]:
    """Loss/beta per step and accuracy/spread per epoch for one run directory."""
    run = Path(run_dir)
    out = []
    if (run / "steps.csv").exists():
        steps = read_csv(run / "steps.csv")
        fig, ax = plt.subplots(figsize=(6, 3.5))
        x = [r["step"] for r in steps]
        ax.plot(x, [r["loss"] for r in steps], lw=0.8, label="train loss")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        twin = ax.twinx()
        twin.plot(x, [r["beta"] for r in steps], color="tab:red", lw=1.0, label="beta")
        twin.set_ylabel("share rate beta")
        ax.legend(loc="upper right", frameon=False)
        out.append(_save(fig, run / "steps.png"))
    if (run / "epochs.csv").exists():
        epochs = read_csv(run / "epochs.csv")
        fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
        x = [r["epoch"] for r in epochs]
        a.plot(x, [r["eval_acc"] for r in epochs], marker="o", ms=3, label="converted")
        a.plot(x, [r["moe_eval_acc"] for r in epochs], ls="--", label="MoE form")
        a.set_xlabel("epoch")
        a.set_ylabel("eval accuracy")
        a.legend(frameon=False)
        b.plot(x, [r["expert_spread"] for r in epochs], color="tab:green")
        b.set_xlabel("epoch")
        b.set_ylabel("expert spread (rms)")
        out.append(_save(fig, run / "epochs.png"))
    return out


def plot_theory(rows: list[dict], history_weights: list[float], path: str | Path) -> Path:
    """Identity errors per step next to the cross-expert history weight profile."""
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    steps = [r["step"] for r in rows]
    floor = 1e-18
    a.semilogy(steps, [max(r["single_step_error"], floor) for r in rows], marker="o", ms=3, label="single step")
    a.semilogy(steps, [max(r["unrolled_error"], floor) for r in rows], marker="s", ms=3, label="unrolled")
    a.set_xlabel("steps m")
    a.set_ylabel("max abs error")
    a.legend(frameon=False)
    b.bar(range(len(history_weights)), history_weights, color="tab:gray")
    b.set_xlabel("history index k (oldest first)")
    b.set_ylabel("weight")
    return _save(fig, Path(path))


def plot_bench(report: dict, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    series = {**{f"train {k}": v for k, v in report["raw"]["train"].items()},
              **{f"infer {k}": v for k, v in report["raw"]["infer"].items()}}
    ax.boxplot([[1e3 * t for t in v] for v in series.values()], showfliers=False)
    ax.set_xticks(range(1, len(series) + 1), list(series), rotation=20, fontsize=8)
    ax.set_ylabel("ms per step")
    return _save(fig, Path(path))
