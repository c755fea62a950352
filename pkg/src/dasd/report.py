"""Static report rendering: loss curves and metric tables as SVG/CSV."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_KEYS = ("loss", "cl", "sc", "adv", "d", "cm")


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(ln) for ln in path.read_text().splitlines() if ln.strip()]


def plot_traces(traces: dict[str, list[dict]], path) -> None:
    stages = [s for s, t in traces.items() if t]
    fig, axes = plt.subplots(1, max(1, len(stages)), figsize=(5 * max(1, len(stages)), 3.5), squeeze=False)
    for ax, stage in zip(axes[0], stages):
        recs = traces[stage]
        steps = [r["step"] for r in recs]
        for key in LOSS_KEYS:
            if key in recs[0]:
                ax.plot(steps, [r[key] for r in recs], label=key, lw=1)
        ax.set_title(stage)
        ax.set_xlabel("step")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_ablation(rows: list[dict], path) -> None:
    arms = list(dict.fromkeys(r["arm"] for r in rows))
    means = [sum(float(r["mAR"]) for r in rows if r["arm"] == a) / sum(r["arm"] == a for r in rows) for a in arms]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(arms, means, color="0.5")
    for a_i, a in enumerate(arms):
        ax.scatter([a_i] * sum(r["arm"] == a for r in rows),
                   [float(r["mAR"]) for r in rows if r["arm"] == a], color="k", s=8, zorder=3)
    lo = min(float(r["mAR"]) for r in rows)
    ax.set_ylim(max(0.0, lo - 0.05), 1.0)
    ax.set_ylabel("mAR")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def write_metrics_csv(metrics: dict, path) -> None:
    """Flatten a (possibly nested) metrics mapping into ``key,value`` rows."""
    flat = []

    def walk(prefix, obj):
        if isinstance(obj, dict):
            for k in sorted(obj):
                walk(f"{prefix}.{k}" if prefix else k, obj[k])
        else:
            flat.append((prefix, obj))

    walk("", metrics)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerows(flat)


def render_run(run_dir) -> list[str]:
    """Render whatever a run directory holds; returns the written file names."""
    run = Path(run_dir)
    if not run.is_dir():
        raise FileNotFoundError(f"no run directory at {run}")
    written = []
    traces = {}
    for name in ("pretrain", "cross_lingual", "cross_modal"):
        p = run / f"trace_{name}.jsonl"
        if p.exists():
            traces[name] = _read_jsonl(p)
    if traces:
        plot_traces(traces, run / "loss_curves.svg")
        written.append("loss_curves.svg")
    for name in ("metrics", "eval"):
        p = run / f"{name}.json"
        if p.exists():
            write_metrics_csv(json.loads(p.read_text()), run / f"{name}_table.csv")
            written.append(f"{name}_table.csv")
    abl = run / "ablation.csv"
    if abl.exists():
        with open(abl) as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            plot_ablation(rows, run / "ablation.svg")
            written.append("ablation.svg")
    return written
