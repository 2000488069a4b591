"""Matplotlib figures written next to the CSV/JSON outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def training_curve(rows, path, title: str = "") -> None:
    ep = [int(r["episode"]) for r in rows]
    wait = [float(r["avg_waiting_s"]) for r in rows]
    coll = [float(r["collisions"]) for r in rows]
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    a1.plot(ep, wait, lw=1)
    a1.set_ylabel("avg waiting (s)")
    a2.plot(ep, coll, lw=1, color="tab:red")
    a2.set_ylabel("collisions")
    a2.set_xlabel("episode")
    if title:
        a1.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def comparison_scatter(rows, path) -> None:
    """Mobility (x) against safety (y) per method; lower-left is better."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for r in rows:
        x, y = float(r["avg_waiting_s"]), float(r["collisions"])
        ax.scatter([x], [y], s=40)
        ax.annotate(r["method"], (x, y), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel("average waiting time (s)")
    ax.set_ylabel("collisions per episode")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def sweep_plot(rows, path) -> None:
    vals = [float(r["value"]) for r in rows]
    fig, a1 = plt.subplots(figsize=(6, 4))
    a1.plot(vals, [float(r["avg_waiting_s"]) for r in rows], "o-", label="avg waiting (s)")
    a1.set_xlabel(rows[0]["param"] if rows else "value")
    if vals and min(vals) > 0 and max(vals) / min(vals) > 20:
        a1.set_xscale("log")
    a1.set_ylabel("avg waiting (s)")
    a2 = a1.twinx()
    a2.plot(vals, [float(r["collisions"]) for r in rows], "s--", color="tab:red", label="collisions")
    a2.set_ylabel("collisions")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

