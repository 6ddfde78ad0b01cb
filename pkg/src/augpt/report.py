"""CSV tables and PNG figures for run directories.

Figures are drawn on a bare Agg canvas (no pyplot global state) and saved
without timestamp metadata, so identical inputs give identical bytes.
"""

from __future__ import annotations

import io
import os
from typing import Sequence

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .serialization import write_bytes_atomic, write_text_atomic

_PNG_META = {"Software": None}


def _save(fig: Figure, path) -> None:
    FigureCanvasAgg(fig)
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata=_PNG_META)
    write_bytes_atomic(path, buf.getvalue())


def _g(x) -> str:
    return "" if x is None else format(float(x), ".17g")


def training_csv(log) -> str:
    lines = ["epoch,mean_kl,acceptance_rate,raw_discard_rate,corrupted_acceptance_rate"]
    for e in log.epochs:
        lines.append(
            f"{e.epoch},{_g(e.mean_kl)},{_g(e.acceptance_rate)},{_g(e.raw_discard_rate)},{_g(e.corrupted_acceptance_rate)}"
        )
    return "\n".join(lines) + "\n"


def metrics_csv(report, teacher_report=None) -> str:
    lines = ["model,base,new,hm"]
    lines.append(f"student,{_g(report.base_acc)},{_g(report.new_acc)},{_g(report.hm)}")
    if teacher_report is not None:
        lines.append(f"teacher,{_g(teacher_report.base_acc)},{_g(teacher_report.new_acc)},{_g(teacher_report.hm)}")
    return "\n".join(lines) + "\n"


def plot_training(log, path) -> None:
    epochs = [e.epoch for e in log.epochs]
    fig = Figure(figsize=(6.4, 3.6))
    ax = fig.add_subplot(1, 1, 1)
    ax.plot(epochs, [e.mean_kl for e in log.epochs], marker="o", color="tab:blue", label="mean KL")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean KL (teacher || student)")
    ax2 = ax.twinx()
    ax2.plot(epochs, [e.acceptance_rate for e in log.epochs], marker="s", color="tab:orange", label="acceptance")
    ax2.set_ylabel("view acceptance rate")
    ax2.set_ylim(0.0, 1.05)
    handles = ax.get_legend_handles_labels()[0] + ax2.get_legend_handles_labels()[0]
    ax.legend(handles, [h.get_label() for h in handles], loc="upper right")
    fig.tight_layout()
    _save(fig, path)


def plot_ablation(rows: Sequence, sweep: str, path) -> None:
    """Base, new and HM accuracy per sweep value (categorical x axis)."""
    labels = [str(v) for v, _ in rows]
    xs = list(range(len(rows)))
    fig = Figure(figsize=(6.4, 3.6))
    ax = fig.add_subplot(1, 1, 1)
    for attr, style in (("base_acc", "o-"), ("new_acc", "s-"), ("hm", "^-")):
        ax.plot(xs, [getattr(rep, attr) for _, rep in rows], style, label=attr.replace("_acc", ""))
    ax.set_xticks(xs)
    ax.set_xticklabels(labels)
    ax.set_xlabel(sweep)
    ax.set_ylabel("accuracy (%)")
    ax.legend(loc="lower right")
    fig.tight_layout()
    _save(fig, path)


def write_training(log, directory) -> None:
    write_text_atomic(os.path.join(directory, "training.csv"), training_csv(log))
    plot_training(log, os.path.join(directory, "training.png"))
