"""Figure rendering for run artifacts.

Every report path that writes a delimited output also drops a rendered
figure next to it: training curves beside the JSONL log, per-group bars
beside metrics.json, and grid summaries beside sweep.csv. Uses the Agg
backend so runs work headless.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def training_curves(history, path):
    """Loss components per epoch, with validation recall on a twin axis."""
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key, label in (("bpr", "ranking"), ("infonce", "contrastive"),
                       ("reg", "regularizer"), ("total", "total")):
        ax.plot(epochs, [h[key] for h in history], label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch loss")
    ax.legend(loc="upper right", fontsize=8)
    recalls = [h.get("val_recall10") for h in history]
    if any(r is not None for r in recalls):
        ax2 = ax.twinx()
        ax2.plot(epochs, [r if r is not None else np.nan for r in recalls],
                 color="tab:red", linestyle="--", label="val recall@10")
        ax2.set_ylabel("validation recall@10", color="tab:red")
        ax2.tick_params(axis="y", labelcolor="tab:red")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def group_metrics(report, path):
    """Grouped bars of recall/NDCG per sparsity band, one panel per cutoff."""
    labels = list(report.group_counts)
    ks = list(report.ks)
    fig, axes = plt.subplots(1, len(ks), figsize=(3.2 * len(ks), 3.6), squeeze=False)
    x = np.arange(len(labels))
    for col, n in enumerate(ks):
        ax = axes[0][col]
        rec = [report.group_recall[g][n] for g in labels]
        ndc = [report.group_ndcg[g][n] for g in labels]
        ax.bar(x - 0.2, rec, width=0.4, label="recall")
        ax.bar(x + 0.2, ndc, width=0.4, label="ndcg")
        ax.set_xticks(x)
        ax.set_xticklabels(labels, fontsize=8)
        ax.set_xlabel("train interactions")
        ax.set_title(f"@{n}")
        if col == 0:
            ax.set_ylabel("metric")
            ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def sweep_summary(rows, varied, metric_key, path):
    """Metric spread against each swept hyperparameter.

    rows are the sweep's result dicts; varied names the parameters that took
    more than one value. Each panel scatters the metric over one parameter.
    """
    varied = [v for v in varied if len({r[v] for r in rows}) > 1] or list(varied)
    fig, axes = plt.subplots(1, max(1, len(varied)),
                             figsize=(3.4 * max(1, len(varied)), 3.4), squeeze=False)
    for col, name in enumerate(varied):
        ax = axes[0][col]
        xs = [r[name] for r in rows]
        ys = [r[metric_key] for r in rows]
        ax.scatter(xs, ys, s=18, alpha=0.8)
        ax.set_xlabel(name)
        if col == 0:
            ax.set_ylabel(metric_key)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
