"""Matplotlib figure output rendered next to the delimited/JSON reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

# fixed PNG metadata so repeated runs write byte-identical figures
_META = {"Software": "gsstyle"}


def save_trace_figure(trace: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    its = [row["iteration"] for row in trace]
    ax.plot(its, [row["style_loss"] for row in trace], label="style")
    ax.plot(its, [row["content_loss"] for row in trace], label="content")
    ax.plot(its, [row["total"] for row in trace], label="total", ls="--")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def save_consistency_figure(report: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    labels = ["short rmse", "short feat", "long rmse", "long feat"]
    vals = [report["short_range"]["rmse"], report["short_range"]["feature_rmse"],
            report["long_range"]["rmse"], report["long_range"]["feature_rmse"]]
    ax.bar(labels, vals, color=["C0", "C0", "C1", "C1"])
    ax.set_ylabel("masked RMSE")
    ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def save_ablation_figure(results: dict, path) -> None:
    """results: config name -> {"trace_drop": f, "region_consistency": f|None,
    "novel_view_rmse": f|None}."""
    names = list(results)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].bar(names, [results[n]["trace_drop"] for n in names], color="C2")
    axes[0].set_ylabel("loss drop fraction")
    axes[0].tick_params(axis="x", rotation=20)
    rc = [results[n].get("novel_view_rmse") or 0.0 for n in names]
    axes[1].bar(names, rc, color="C3")
    axes[1].set_ylabel("novel-view short-range RMSE")
    axes[1].tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
