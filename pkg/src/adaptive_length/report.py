"""Tabular outputs and static SVG plots."""

from __future__ import annotations

from pathlib import Path


def write_table(path, rows, columns=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(columns) + "\n")
        for r in rows:
            fh.write("\t".join(_cell(r.get(c, "")) for c in columns) + "\n")


def _cell(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "adaptive-length"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def plot_pareto(path, points):
    """Speedup (x) against accuracy (y); ``points`` are dicts with ``speedup``, ``accuracy``, ``label``."""
    plt = _pyplot()
    pts = sorted(points, key=lambda p: p["speedup"])
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot([p["speedup"] for p in pts], [100 * p["accuracy"] for p in pts], marker="o")
    for p in pts:
        ax.annotate(p.get("label", ""), (p["speedup"], 100 * p["accuracy"]), fontsize=7)
    ax.set_xlabel("FLOPs speedup (x)")
    ax.set_ylabel("accuracy (%)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_strategy_curves(path, curves):
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(7, 3))
    layers = list(range(curves.num_layers))
    for name in curves.ap:
        axes[0].plot(layers, curves.mean_ap(name), marker="o", label=name)
        axes[1].plot(layers, curves.mean_fpr(name), marker="o", label=name)
    axes[0].set_title("mAP")
    axes[1].set_title("FPR")
    for ax in axes:
        ax.set_xlabel("layer")
        ax.grid(alpha=0.3)
    axes[1].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
