"""Static accuracy-vs-session plots from run reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _label_for(report: dict) -> str:
    method = report.get("method", "run")
    seed = report.get("seed")
    if "mean_session_accuracy" in report:
        return f"{method} (mean of {report.get('n_runs', '?')} seeds)"
    return f"{method} seed={seed}" if seed is not None else method


def accuracy_figure(reports: list[dict]) -> "plt.Figure":
    """One line per report: session index vs accuracy."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for report in reports:
        if "mean_session_accuracy" in report:
            ys = report["mean_session_accuracy"]
        else:
            ys = [s["accuracy"] for s in report["sessions"]]
        ax.plot(range(len(ys)), ys, marker="o", label=_label_for(report))
    ax.set_xlabel("session")
    ax.set_ylabel("accuracy")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return fig


def save_figure(fig: "plt.Figure", path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
