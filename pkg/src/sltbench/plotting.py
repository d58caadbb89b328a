"""Static figures: training curves, two-stage BLEU-4 progression, method bars."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (5 ** 0.5 - 1) / 2
STYLE = {
    "figure.figsize": (4.8, 4.8 * GOLDEN),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "sltbench",
}
COLORS = ["#2b8cbe", "#e34a33", "#31a354", "#756bb1", "#636363", "#fdae6b", "#9ecae1"]


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_curves(record, out_dir) -> list[Path]:
    """loss.png (train and dev loss) and bleu4.png (dev BLEU-4) per epoch."""
    out_dir = Path(out_dir)
    epochs = [e.epoch for e in record.epochs]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(epochs, [e.train_loss for e in record.epochs], "o-", color=COLORS[0],
                label="train")
        ax.plot(epochs, [e.dev_loss for e in record.epochs], "s-", color=COLORS[1], label="dev")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_title(f"{record.preset} {record.stage} (seed {record.seed})")
        ax.legend(frameon=False)
        loss = _save(fig, out_dir / "loss.png")

        fig, ax = plt.subplots()
        ax.plot(epochs, [e.dev_bleu4 for e in record.epochs], "o-", color=COLORS[2])
        if record.best_epoch:
            ax.axvline(record.best_epoch, color=COLORS[4], ls=":", lw=0.8)
        ax.set_xlabel("epoch")
        ax.set_ylabel("dev BLEU-4")
        ax.set_title(f"{record.preset} {record.stage} (seed {record.seed})")
        bleu = _save(fig, out_dir / "bleu4.png")
    return [loss, bleu]


def plot_progression(pretrain, finetune, path) -> Path:
    """Dev BLEU-4 over both stages on one epoch axis, with the stage boundary marked."""
    pre = [e.dev_bleu4 for e in pretrain.epochs]
    fine = [e.dev_bleu4 for e in finetune.epochs]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(range(1, len(pre) + 1), pre, "o-", color=COLORS[0], label="pretraining")
        ax.plot(range(len(pre) + 1, len(pre) + len(fine) + 1), fine, "o-", color=COLORS[1],
                label="fine-tuning")
        ax.axvline(len(pre) + 0.5, color=COLORS[4], ls="--", lw=0.8)
        ax.set_xlabel("epoch (both stages)")
        ax.set_ylabel("dev BLEU-4")
        ax.legend(frameon=False)
        return _save(fig, Path(path))


def plot_report(rows, path, metric: str = "bleu4") -> Path:
    """Bar chart of one metric, mean with seed-std error bars, one bar per method.

    ``rows`` is a sequence of (method, {metric: Aggregate}).
    """
    names = [name for name, _ in rows]
    means = [agg[metric].mean for _, agg in rows]
    stds = [agg[metric].std for _, agg in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 1.0 + 0.9 * len(rows)), 3.0))
        ax.bar(range(len(rows)), means, yerr=stds, capsize=3,
               color=[COLORS[i % len(COLORS)] for i in range(len(rows))])
        ax.set_xticks(range(len(rows)), names, rotation=30, ha="right")
        ax.set_ylabel(metric.upper().replace("BLEU", "BLEU-").replace("ROUGE_L", "ROUGE-L"))
        return _save(fig, Path(path))
