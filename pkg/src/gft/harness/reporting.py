"""Report rendering: delimited outputs plus matplotlib figures.

Every report function writes a small CSV (the machine-readable artifact)
and, when asked, a PNG rendered from the same numbers so the two never
drift apart.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from ..model import GftModel, ParamLedger, gft_forward
from ..pointops import PointCloud

__all__ = [
    "attention_report",
    "write_metrics_csv",
    "plot_training_curves",
    "param_report_lines",
]


def _attention_weights(cloud: PointCloud, model: GftModel, layer: int,
                       direction: str):
    """Head-averaged attention between the class token and patch tokens.

    Returns (centers (L, 3), weights (L,), off_patch_mass). ``cls_to_patch``
    reads the class-token query row, so off_patch_mass is the probability
    assigned to the class token itself and the prompts. ``patch_to_cls``
    reads each patch's attention onto the class token; those weights do not
    sum to one and off_patch_mass is reported as 0.
    """
    out = gft_forward(cloud, model, attention_taps=(layer,))
    probs = out.attention[layer].mean(axis=0)  # (R, S) after head average
    first_patch = 1 + model.config.prompt_length
    if direction == "cls_to_patch":
        weights = probs[0, first_patch:]
        off_patch = 1.0 - float(weights.sum())
    elif direction == "patch_to_cls":
        weights = probs[first_patch:, 0]
        off_patch = 0.0
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return out.grouped.centers, np.asarray(weights, dtype=np.float64), off_patch


def attention_report(cloud: PointCloud, model: GftModel, layer: int,
                     out_csv, out_png=None,
                     direction: str = "cls_to_patch") -> Path:
    """Dump per-patch attention weights as CSV, optionally with a scatter.

    CSV columns are center_x,center_y,center_z,weight, one row per patch
    center, with the off-patch probability mass in a trailing comment line.
    The PNG colors each patch center by its weight.
    """
    centers, weights, off_patch = _attention_weights(cloud, model, layer,
                                                     direction)
    out_csv = Path(out_csv)
    lines = ["center_x,center_y,center_z,weight"]
    for (x, y, z), w in zip(centers, weights):
        lines.append(f"{x:.6f},{y:.6f},{z:.6f},{w:.8e}")
    lines.append(f"# layer={layer} direction={direction} "
                 f"off_patch_mass={off_patch:.8e}")
    out_csv.write_text("\n".join(lines) + "\n")

    if out_png is not None:
        fig = plt.figure(figsize=(6, 5))
        ax = fig.add_subplot(projection="3d")
        sc = ax.scatter(centers[:, 0], centers[:, 1], centers[:, 2],
                        c=weights, cmap="viridis", s=30)
        fig.colorbar(sc, ax=ax, shrink=0.7, label="attention weight")
        ax.set_title(f"layer {layer} {direction.replace('_', ' ')}")
        fig.tight_layout()
        fig.savefig(out_png, dpi=120)
        plt.close(fig)
    return out_csv


def write_metrics_csv(rows, path) -> Path:
    """One line per epoch: epoch,lr,train_loss,eval_metric."""
    path = Path(path)
    lines = ["epoch,lr,train_loss,eval_metric"]
    for r in rows:
        lines.append(f"{r.epoch},{r.lr:.8e},{r.train_loss:.6f},"
                     f"{r.eval_metric:.6f}")
    path.write_text("\n".join(lines) + "\n")
    return path


def plot_training_curves(rows, path) -> Path:
    """Loss and eval metric against epoch, twin y axes, one PNG."""
    path = Path(path)
    epochs = [r.epoch for r in rows]
    fig, ax_loss = plt.subplots(figsize=(7, 4.5))
    ax_loss.plot(epochs, [r.train_loss for r in rows],
                 color="tab:blue", label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss", color="tab:blue")
    ax_metric = ax_loss.twinx()
    ax_metric.plot(epochs, [r.eval_metric for r in rows],
                   color="tab:orange", label="eval metric")
    ax_metric.set_ylabel("eval metric", color="tab:orange")
    ax_metric.set_ylim(0.0, 1.0)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def param_report_lines(ledger: ParamLedger, detail: bool = False):
    """Human-readable parameter budget, one string per line.

    The summary line reads ``trainable A / total B (P%)``; with detail each
    tensor gets ``name,count,trainable|frozen`` in ledger order.
    """
    lines = []
    if detail:
        for name, count, frozen in ledger.entries:
            state = "frozen" if frozen else "trainable"
            lines.append(f"{name},{count},{state}")
    lines.append(f"trainable {ledger.trainable} / total {ledger.total} "
                 f"({ledger.percentage:.2f}%)")
    return lines
