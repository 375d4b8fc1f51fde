"""Metric files: JSON, confusion-matrix CSV, SVG heatmaps and scatters, and
an aggregated markdown summary. All output is byte-stable for equal input."""

from __future__ import annotations

import json
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .formats import atomic_write_text
from .metrics import MetricsReport

_RAMP_LO = (247, 251, 255)
_RAMP_HI = (8, 48, 107)
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, dumps(obj))


def confusion_csv(confusion) -> str:
    cm = np.asarray(confusion, dtype=np.int64)
    return "".join(",".join(str(int(v)) for v in row) + "\n" for row in cm)


def _ramp(t: float) -> str:
    rgb = [round(lo + (hi - lo) * t) for lo, hi in zip(_RAMP_LO, _RAMP_HI)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def confusion_svg(confusion, labels=None, title: str = "Confusion matrix") -> str:
    cm = np.asarray(confusion, dtype=np.int64)
    k = cm.shape[0]
    labels = labels or [str(i) for i in range(k)]
    cell, left, top = 48, 70, 60
    width, height = left + k * cell + 20, top + k * cell + 50
    peak = max(int(cm.max()), 1)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<text x="{width // 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{left + k * cell // 2}" y="{top - 22}" text-anchor="middle">predicted</text>',
        f'<text x="16" y="{top + k * cell // 2}" text-anchor="middle" '
        f'transform="rotate(-90 16 {top + k * cell // 2})">true</text>',
    ]
    for j in range(k):
        out.append(f'<text x="{left + j * cell + cell // 2}" y="{top - 6}" text-anchor="middle">'
                   f'{escape(labels[j])}</text>')
    for i in range(k):
        y = top + i * cell
        out.append(f'<text x="{left - 6}" y="{y + cell // 2 + 4}" text-anchor="end">{escape(labels[i])}</text>')
        for j in range(k):
            t = cm[i, j] / peak
            x = left + j * cell
            fg = "#ffffff" if t > 0.5 else "#000000"
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{_ramp(t)}" stroke="#888888"/>')
            out.append(f'<text x="{x + cell // 2}" y="{y + cell // 2 + 4}" text-anchor="middle" '
                       f'fill="{fg}">{int(cm[i, j])}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def scatter_svg(points, labels, title: str = "t-SNE", size: int = 480) -> str:
    pts = np.asarray(points, dtype=np.float64)
    labels = [str(lab) for lab in labels]
    classes = sorted(set(labels))
    pad = 30
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    scaled = pad + (pts - lo) / span * (size - 2 * pad)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 30}" '
        f'viewBox="0 0 {size} {size + 30}" font-family="sans-serif" font-size="12">',
        f'<text x="{size // 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    for (x, y), lab in zip(scaled, labels):
        color = _PALETTE[classes.index(lab) % len(_PALETTE)]
        out.append(f'<circle cx="{x:.2f}" cy="{size - y + 20:.2f}" r="3" fill="{color}" fill-opacity="0.8"/>')
    for i, lab in enumerate(classes):
        color = _PALETTE[i % len(_PALETTE)]
        out.append(f'<rect x="{10 + 110 * i}" y="{size + 12}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{24 + 110 * i}" y="{size + 21}">{escape(lab)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def report_emit(metrics, path, extra: dict | None = None, labels=None, title: str | None = None) -> list[Path]:
    """Write ``<path>.json``, ``<path>.confusion.csv`` and ``<path>.confusion.svg``.

    ``metrics`` is a MetricsReport; its fields become the top-level JSON keys
    (accuracy, auroc_macro, auroc_per_class, confusion, n) next to ``extra``.
    """
    base = Path(path)
    if isinstance(metrics, MetricsReport):
        payload = metrics.to_dict()
    else:
        payload = dict(metrics)
    if extra:
        payload.update(extra)
    files = [base.with_name(base.name + ".json"), base.with_name(base.name + ".confusion.csv"),
             base.with_name(base.name + ".confusion.svg")]
    write_json(files[0], payload)
    atomic_write_text(files[1], confusion_csv(payload["confusion"]))
    atomic_write_text(files[2], confusion_svg(payload["confusion"], labels, title or base.name))
    return files


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def aggregate(metric_files) -> tuple[str, dict]:
    """Collect metric JSON files into one markdown table plus a JSON index."""
    rows = []
    for path in sorted(Path(p) for p in metric_files):
        data = json.loads(path.read_text(encoding="utf-8"))
        rows.append({
            "file": f"{path.parent.name}/{path.name}",
            "kind": data.get("kind", "unknown"),
            "strategy": data.get("strategy"),
            "n": data.get("n"),
            "accuracy": data.get("accuracy"),
            "auroc_macro": data.get("auroc_macro"),
            "fold_val_accuracy": (data.get("fold_val_mean") or {}).get("accuracy"),
            "fold_train_accuracy": (data.get("fold_train_mean") or {}).get("accuracy"),
            "deferral_rate": data.get("deferral_rate"),
        })
    lines = [
        "# Run report",
        "",
        "| file | kind | strategy | n | accuracy | macro AUROC | fold-train acc | fold-val acc |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for r in rows:
        lines.append(
            f"| {r['file']} | {r['kind']} | {r['strategy'] or '-'} | {r['n'] if r['n'] is not None else '-'} "
            f"| {_fmt(r['accuracy'])} | {_fmt(r['auroc_macro'])} | {_fmt(r['fold_train_accuracy'])} "
            f"| {_fmt(r['fold_val_accuracy'])} |"
        )
    return "\n".join(lines) + "\n", {"runs": rows}
