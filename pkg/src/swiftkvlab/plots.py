"""Figure rendering for the CLI report paths.

Every CSV the CLI writes gets a companion PNG from here.  All functions
take already-computed data, write one file, and return its path; nothing
in this module computes results.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def simscore_figure(scores: np.ndarray, path: str | Path) -> Path:
    """Per-layer similarity profile; the x axis is the boundary layer."""
    fig, ax = plt.subplots(figsize=(7, 4))
    layers = np.arange(1, len(scores) + 1)
    ax.plot(layers, scores, marker="o")
    best = int(np.argmax(scores)) + 1
    ax.axvline(best, color="tab:red", linestyle="--", alpha=0.6,
               label=f"max at layer {best}")
    ax.set_xlabel("boundary layer l")
    ax.set_ylabel("mean cosine similarity to deeper inputs")
    ax.set_title("SimScore profile")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def flops_figure(rows: list[tuple[str, dict]], path: str | Path) -> Path:
    """Stacked per-token flop columns; rows are (label, column dict)."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    labels = [label for label, _ in rows]
    parts = ("vocab", "kv", "qo", "mlp", "attn")
    bottom = np.zeros(len(rows))
    for part in parts:
        values = np.array([cols[part] for _, cols in rows]) / 1e9
        ax.bar(labels, values, bottom=bottom, label=part)
        bottom += values
    for i, (_, cols) in enumerate(rows):
        ax.text(i, bottom[i], f"{cols['rel'] * 100:.1f}%", ha="center", va="bottom")
    ax.set_ylabel("GFLOPs per prompt token")
    ax.set_title("Prefill flops per token")
    ax.legend()
    return _save(fig, path)


def loss_figure(history: list[tuple[int, float, float]], path: str | Path) -> Path:
    """Training loss per step with the learning-rate schedule alongside."""
    steps = [s for s, _, _ in history]
    lrs = [lr for _, lr, _ in history]
    losses = [loss for _, _, loss in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, color="tab:blue", label="batch loss")
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("distillation loss", color="tab:blue")
    ax.set_yscale("log")
    twin = ax.twinx()
    twin.plot(steps, lrs, color="tab:orange", alpha=0.6, label="learning rate")
    twin.set_ylabel("learning rate", color="tab:orange")
    ax.set_title("Distillation loss")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def latency_figure(requests: list, path: str | Path) -> Path:
    """Per-request TTFT and TPOT panels for one simulation run."""
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    ids = [r.request_id for r in requests]
    top.bar(ids, [r.ttft_s for r in requests], color="tab:blue")
    top.set_ylabel("TTFT (s)")
    top.set_title("Per-request latency")
    bottom.bar(ids, [r.tpot_s * 1e3 for r in requests], color="tab:orange")
    bottom.set_ylabel("TPOT (ms)")
    bottom.set_xlabel("request id")
    return _save(fig, path)


def sweep_figure(
    sweeps: dict[str, list[tuple[float, float]]], path: str | Path
) -> Path:
    """Mean TTFT vs arrival rate, one line per engine."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, points in sweeps.items():
        rates = [r for r, _ in points]
        ttfts = [t for _, t in points]
        ax.plot(rates, ttfts, marker="o", label=label)
    ax.set_xlabel("arrival rate (requests/s)")
    ax.set_ylabel("mean TTFT (s)")
    ax.set_yscale("log")
    ax.set_title("Latency vs load")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def memory_figure(rows: list, path: str | Path) -> Path:
    """Grouped throughput bars by memory capacity; variants side by side."""
    capacities = sorted({r.capacity_bytes for r in rows}, reverse=True)
    variants = list(dict.fromkeys(r.variant for r in rows))
    by_key = {(r.capacity_bytes, r.variant): r for r in rows}
    width = 0.8 / len(variants)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    x = np.arange(len(capacities))
    for i, variant in enumerate(variants):
        heights = [
            by_key[(cap, variant)].throughput_tokens_per_s for cap in capacities
        ]
        ax.bar(x + (i - (len(variants) - 1) / 2) * width, heights, width,
               label=variant)
    ax.set_xticks(x)
    ax.set_xticklabels([f"{cap / 1e9:.0f} GB" for cap in capacities])
    ax.set_ylabel("combined throughput (tokens/s)")
    ax.set_title("Throughput under memory caps")
    ax.legend(fontsize=8)
    return _save(fig, path)


def alignment_figure(stats, path: str | Path) -> Path:
    """Histogram of exit-head confidence with the agreement rate overlaid."""
    edges = np.asarray(stats.bin_edges)
    centers = (edges[:-1] + edges[1:]) / 2
    width = edges[1] - edges[0]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(centers, stats.counts, width=width * 0.9, color="tab:blue",
           alpha=0.6, label="positions")
    ax.set_xlabel("exit-head max probability")
    ax.set_ylabel("positions", color="tab:blue")
    twin = ax.twinx()
    mask = ~np.isnan(stats.agreement)
    twin.plot(centers[mask], stats.agreement[mask], color="tab:red",
              marker="o", label="agreement")
    twin.set_ylabel("agreement with full depth", color="tab:red")
    twin.set_ylim(0, 1.05)
    ax.set_title(f"Early-exit alignment (overall {stats.overall_rate * 100:.1f}%)")
    return _save(fig, path)
