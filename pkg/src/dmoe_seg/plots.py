"""Report figures. Display-only: never a test surface."""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def violin_figure(scores_by_attr, path, title="Per-subgroup Dice"):
    """Violin plot of per-sample scores, one violin per attribute group."""
    labels = [a for a, v in scores_by_attr.items() if len(v)]
    data = [np.asarray(scores_by_attr[a], dtype=float) for a in labels]
    fig, ax = plt.subplots(figsize=(1.8 + 1.2 * len(labels), 4.0))
    if data:
        parts = ax.violinplot(data, showmedians=True, showextrema=False)
        for body in parts["bodies"]:
            body.set_alpha(0.6)
        medians = [float(np.median(d)) for d in data]
        ax.plot(range(1, len(labels) + 1), medians, color="tab:blue", alpha=0.4)
        ax.set_xticks(range(1, len(labels) + 1))
        ax.set_xticklabels(labels)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("score")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def training_curve_figure(log, path):
    """Loss and held-out Dice across epochs."""
    epochs = [row["epoch"] for row in log]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [row["loss"] for row in log], label="train loss")
    if any("dice_overall" in row for row in log):
        ax2 = ax.twinx()
        ax2.plot(epochs, [row.get("dice_overall", np.nan) for row in log],
                 color="tab:green", label="val Dice")
        ax2.set_ylabel("Dice")
        ax2.set_ylim(0.0, 1.0)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
