"""Result aggregation across runs: accuracy table cells with
parenthesized seed-spread digits, CSV + aligned text output, and an
accuracy-vs-shots figure rendered alongside them.

Cell format: seed means are averaged (x100). The parenthesized digit is
the population standard deviation over seed means expressed in units of
the last displayed digit: below one accuracy point the mean is shown
with one decimal and the digit is the std in tenths rounded up;
otherwise the mean is shown as an integer and the digit is the std
rounded to the nearest point. A single seed shows "(-)".
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path

import numpy as np


class MissingRuns(ValueError):
    pass


def format_cell(seed_means) -> str:
    vals = [m * 100.0 for m in seed_means]
    mu = float(np.mean(vals))
    if len(vals) == 1:
        return f"{mu:.1f}(-)"
    sd = float(np.std(vals))
    if sd < 1.0:
        digits = max(1, math.ceil(sd * 10.0 - 1e-9))
        return f"{mu:.1f}({digits})"
    digits = max(1, int(math.floor(sd + 0.5)))
    return f"{int(math.floor(mu + 0.5))}({digits})"


def collect_results(paths) -> list[dict]:
    """All result.json files under the given files/directories."""
    results = []
    for p in paths:
        p = Path(p)
        if p.is_file() and p.name == "result.json":
            files = [p]
        elif p.is_dir():
            files = sorted(p.rglob("result.json"))
        else:
            files = []
        for f in files:
            results.append(json.loads(f.read_text()))
    return results


def aggregate(results) -> dict[tuple[str, int], list[dict]]:
    cells = defaultdict(list)
    for r in results:
        cells[(r["algo"], int(r["shots"]))].append(r)
    return dict(cells)


def _cell_stats(runs):
    # recompute each seed mean from its stored per-task vector so the
    # report is a pure function of the run artifacts
    means = [float(np.mean(r["per_task_acc"])) for r in runs]
    pct = [m * 100 for m in means]
    return {
        "seed_means": means,
        "mean": float(np.mean(pct)),
        "std": float(np.std(pct)) if len(pct) > 1 else 0.0,
        "n_seeds": len(means),
        "cell": format_cell(means),
    }


def build_table(results, strict: bool = False):
    cells = aggregate(results)
    if not cells:
        raise MissingRuns("no result.json files found")
    algos = sorted({a for a, _ in cells})
    shots = sorted({s for _, s in cells})
    if strict:
        missing = [(a, s) for a in algos for s in shots if (a, s) not in cells]
        if missing:
            raise MissingRuns(f"missing cells: {missing}")
    table = {}
    for key, runs in cells.items():
        table[key] = _cell_stats(runs)
    return algos, shots, table


def render_text(algos, shots, table) -> str:
    header = ["model"] + [f"{s}-shot" for s in shots]
    rows = [header]
    for a in algos:
        row = [a]
        for s in shots:
            row.append(table[(a, s)]["cell"] if (a, s) in table else "-")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    return "\n".join(lines) + "\n"


def write_csv(path, algos, shots, table) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["algo", "shots", "mean", "std", "n_seeds"])
        for a in algos:
            for s in shots:
                if (a, s) not in table:
                    continue
                st = table[(a, s)]
                writer.writerow([a, s, f"{st['mean']:.6f}", f"{st['std']:.6f}", st["n_seeds"]])


def render_figure(path, algos, shots, table) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for a in algos:
        xs = [s for s in shots if (a, s) in table]
        if not xs:
            continue
        ys = [table[(a, s)]["mean"] for s in xs]
        es = [table[(a, s)]["std"] for s in xs]
        ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=a)
    ax.set_xlabel("shots")
    ax.set_ylabel("test accuracy (%)")
    ax.set_xticks(shots)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def run_report(paths, out_dir, strict: bool = False, figure: bool = True) -> dict:
    results = collect_results(paths)
    algos, shots, table = build_table(results, strict=strict)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = render_text(algos, shots, table)
    (out / "report.txt").write_text(text)
    write_csv(out / "report.csv", algos, shots, table)
    artifacts = {"text": str(out / "report.txt"), "csv": str(out / "report.csv")}
    if figure:
        render_figure(out / "report.png", algos, shots, table)
        artifacts["figure"] = str(out / "report.png")
    artifacts["table"] = text
    return artifacts
