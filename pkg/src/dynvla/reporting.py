"""Artifact emission: matrices as CSV+JSON, heatmaps, sweep curves, and
text comparison reports with (method - baseline) improvements.

Every file is a pure function of its inputs: figures carry no timestamps,
JSON is key-sorted, floats are rendered with repr so CSV round-trips are
exact.
"""

import hashlib
import json
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "dynvla"  # deterministic element ids
import matplotlib.pyplot as plt

from .harness import ASRMatrix, MethodComparison, SweepCurve

CSV_CORNER = "surrogate\\target"


def matrix_to_csv(matrix: ASRMatrix) -> str:
    lines = [",".join([CSV_CORNER, *matrix.target_ids])]
    for i, s in enumerate(matrix.surrogate_ids):
        cells = [repr(float(v)) for v in matrix.rates[i]]
        lines.append(",".join([s, *cells]))
    return "\n".join(lines) + "\n"


def csv_to_rates(text: str):
    """Inverse of matrix_to_csv: (surrogate_ids, target_ids, rates)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split(",")
    if header[0] != CSV_CORNER:
        raise ValueError(f"not an ASR matrix csv: corner {header[0]!r}")
    targets = tuple(header[1:])
    surrogates = []
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        surrogates.append(cells[0])
        rows.append([float(v) for v in cells[1:]])
    return tuple(surrogates), targets, np.array(rows)


def matrix_sidecar(matrix: ASRMatrix) -> dict:
    return {
        "method": matrix.method,
        "task": matrix.task,
        "target_text": matrix.target_text,
        "sample_count": matrix.sample_count,
        "run_seeds": list(matrix.run_seeds),
        "surrogate_ids": list(matrix.surrogate_ids),
        "target_ids": list(matrix.target_ids),
        "per_run_rates": matrix.per_run_rates.tolist(),
        "white_box_cells": [
            [s, t]
            for s in matrix.surrogate_ids
            for t in matrix.target_ids
            if s == t
        ],
    }


def save_matrix(matrix: ASRMatrix, out_dir, stem: str) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    csv_path.write_text(matrix_to_csv(matrix), encoding="utf-8")
    json_path.write_text(
        json.dumps(matrix_sidecar(matrix), indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return [csv_path, json_path]


def _stable_savefig(fig, path):
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def heatmap(matrix: ASRMatrix, path) -> None:
    """Surrogate rows x target columns, annotated, white-box cells marked."""
    rates = matrix.rates
    fig, ax = plt.subplots(figsize=(1.2 * len(matrix.target_ids) + 2, 1.0 * len(matrix.surrogate_ids) + 2))
    im = ax.imshow(rates, cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(matrix.target_ids)), matrix.target_ids, rotation=45, ha="right")
    ax.set_yticks(range(len(matrix.surrogate_ids)), matrix.surrogate_ids)
    ax.set_xlabel("target model")
    ax.set_ylabel("surrogate model")
    ax.set_title(f"ASR, method={matrix.method}, target={matrix.target_text!r}")
    wb = matrix.white_box_mask
    for i in range(rates.shape[0]):
        for j in range(rates.shape[1]):
            label = f"{100 * rates[i, j]:.1f}"
            if wb[i, j]:
                label += "*"
            ax.text(j, i, label, ha="center", va="center",
                    color="white" if rates[i, j] < 0.6 else "black", fontsize=8)
    fig.colorbar(im, ax=ax, label="attack success rate")
    fig.tight_layout()
    _stable_savefig(fig, path)


def _fmt_pct(v: float) -> str:
    return f"{100 * v:.1f}"


def comparison_report(comparison: MethodComparison) -> str:
    """Text table: one block per surrogate, one line per method, improvements
    over the baseline in parentheses; diagonal (white-box) cells marked *."""
    baseline = comparison.baseline
    methods = list(comparison.matrices)
    any_matrix = comparison.matrices[baseline]
    lines = []
    lines.append(f"ASR (%) by surrogate -> target; baseline = {baseline}")
    lines.append(f"target text: {any_matrix.target_text!r}; "
                 f"samples/cell: {any_matrix.sample_count}; "
                 f"runs: {len(any_matrix.run_seeds)}")
    lines.append("* marks white-box (diagonal) cells")
    lines.append("")
    header = ["surrogate", "method", *any_matrix.target_ids]
    widths = [max(18, len(header[0])), max(10, len(header[1]))]
    col_w = max(16, max(len(t) for t in any_matrix.target_ids) + 2)
    lines.append(
        header[0].ljust(widths[0]) + header[1].ljust(widths[1])
        + "".join(t.rjust(col_w) for t in any_matrix.target_ids)
    )
    wb = any_matrix.white_box_mask
    for i, s in enumerate(any_matrix.surrogate_ids):
        for method in methods:
            rates = comparison.matrices[method].rates
            deltas = comparison.delta(method)
            cells = []
            for j in range(len(any_matrix.target_ids)):
                text = _fmt_pct(rates[i, j])
                if method != baseline:
                    d = deltas[i, j]
                    text += f" ({'+' if d >= 0 else ''}{100 * d:.1f})"
                if wb[i, j]:
                    text += "*"
                cells.append(text.rjust(col_w))
            lines.append(s.ljust(widths[0]) + method.ljust(widths[1]) + "".join(cells))
        lines.append("")
    for method in methods:
        if method == baseline:
            continue
        stats = comparison.sign_test(method)
        lines.append(
            f"off-diagonal mean delta {method} - {baseline}: "
            f"{100 * stats['mean_delta']:+.2f} pts; sign test "
            f"{stats['positives']}+/{stats['negatives']}- ({stats['ties']} ties), "
            f"one-sided p = {stats['p_value']:.4g}"
        )
    return "\n".join(lines) + "\n"


def delta_csv(comparison: MethodComparison, method: str) -> str:
    base = comparison.matrices[comparison.baseline]
    delta = comparison.delta(method)
    lines = [",".join([CSV_CORNER, *base.target_ids])]
    for i, s in enumerate(base.surrogate_ids):
        lines.append(",".join([s, *[repr(float(v)) for v in delta[i]]]))
    return "\n".join(lines) + "\n"


def curve_plot(curves: dict, path, xlabel: str, title: str) -> None:
    """One line per method: {label: SweepCurve}."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, curve in curves.items():
        xs = sorted(curve.points)
        ys = [100 * curve.points[x] for x in xs]
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("mean transfer ASR (%)")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _stable_savefig(fig, path)


def sweep_sidecar(curve: SweepCurve) -> dict:
    payload = {
        "parameter": curve.parameter,
        "surrogate": curve.surrogate,
        "method": curve.method,
        "points": {str(k): v for k, v in curve.points.items()},
        "per_target": {str(k): v for k, v in curve.per_target.items()},
    }
    if curve.note:
        payload["note"] = curve.note
    return payload


def save_sweep(curve: SweepCurve, out_dir, stem: str) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    svg_path = out_dir / f"{stem}.svg"
    json_path.write_text(
        json.dumps(sweep_sidecar(curve), indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    curve_plot({curve.method: curve}, svg_path, curve.parameter, f"ablation: {curve.parameter}")
    return [json_path, svg_path]


def write_output_manifest(run_dir) -> Path:
    """List every artifact in the run directory with its sha256."""
    run_dir = Path(run_dir)
    entries = {}
    for path in sorted(run_dir.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            entries[str(path.relative_to(run_dir))] = hashlib.sha256(
                path.read_bytes()
            ).hexdigest()
    manifest_path = run_dir / "manifest.json"
    manifest_path.write_text(
        json.dumps({"files": entries}, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest_path
