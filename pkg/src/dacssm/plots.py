"""Figure emission.  Every function is a pure view of already-recorded data:
it takes plain arrays/dicts (or the JSON file they were saved to) and writes
an SVG.  Rendering twice from the same data yields byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# pin every source of nondeterminism in the SVG backend
matplotlib.rcParams["svg.hashsalt"] = "dacssm"
matplotlib.rcParams["svg.fonttype"] = "path"

_SAVE_KW = {"format": "svg", "metadata": {"Date": None}}


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def _dump_raw(data, path) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))


def plot_returns(report: dict, path) -> Path:
    """Per-seed return distributions with the pooled 5/95 percentile band."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    by_seed = {int(k): v for k, v in report["returns_by_seed"].items()}
    seeds = sorted(by_seed)
    for i, seed in enumerate(seeds):
        vals = by_seed[seed]
        ax.plot([i] * len(vals), vals, "o", ms=3, alpha=0.6, color="tab:blue")
    ax.axhspan(report["p5"], report["p95"], color="tab:orange", alpha=0.15,
               label="5th-95th percentile")
    ax.axhline(report["mean"], color="tab:orange", lw=1.2, label="mean")
    ax.set_xticks(range(len(seeds)))
    ax.set_xticklabels([str(s) for s in seeds])
    ax.set_xlabel("seed")
    ax.set_ylabel("episode return")
    ax.set_title(f"returns ({report['reward_mode']})")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    out = _finish(fig, path)
    _dump_raw(report, out.with_suffix(".json"))
    return out


def plot_reward_traces(traces: dict, path) -> Path:
    """Overlay per-step imitation-reward traces; traces maps name -> list."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name in sorted(traces):
        ax.plot(traces[name], lw=1.2, label=name)
    ax.set_xlabel("control step")
    ax.set_ylabel("ln D_O(h, a)")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    out = _finish(fig, path)
    _dump_raw({k: list(map(float, v)) for k, v in traces.items()},
              out.with_suffix(".json"))
    return out


def plot_lambda_sweep(summary: dict, path) -> Path:
    """Bar chart of mean return per confusion coefficient.

    Error bars span one standard deviation.
    """
    lambdas = summary["lambdas"]
    means = [summary["per_lambda"][f"{l:g}"]["mean"] for l in lambdas]
    stds = [summary["per_lambda"][f"{l:g}"]["std"] for l in lambdas]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs = range(len(lambdas))
    ax.bar(xs, means, yerr=stds, capsize=3, color="tab:blue", alpha=0.8)
    ax.set_xticks(list(xs))
    ax.set_xticklabels([f"{l:g}" for l in lambdas])
    ax.set_xlabel("domain confusion coefficient")
    ax.set_ylabel("mean return")
    fig.tight_layout()
    out = _finish(fig, path)
    _dump_raw(summary, out.with_suffix(".json"))
    return out


def plot_reconstruction_grid(rows: dict, path, max_cols: int = 12) -> Path:
    """Image grid: one row per reconstruction variant, one column per frame."""
    names = list(rows)
    T = min(len(rows[names[0]]), max_cols)
    step = max(len(rows[names[0]]) // T, 1)
    cols = list(range(0, step * T, step))[:T]
    fig, axes = plt.subplots(len(names), T, figsize=(T * 0.9, len(names) * 1.0),
                             squeeze=False)
    for r, name in enumerate(names):
        for c, t in enumerate(cols):
            ax = axes[r][c]
            ax.imshow(rows[name][t], interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if c == 0:
                ax.set_ylabel(name, fontsize=7)
    fig.tight_layout(pad=0.2)
    return _finish(fig, path)


def plot_metrics(metrics_path, path, keys=("l_rssm", "l_dd", "l_do", "acc_domain")) -> Path:
    """Training curves from a metrics.jsonl file."""
    rows = [json.loads(line) for line in Path(metrics_path).read_text().splitlines()]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for key in keys:
        ax.plot([r["step"] for r in rows], [r[key] for r in rows], lw=1.0, label=key)
    ax.set_xlabel("gradient step")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    return _finish(fig, path)
