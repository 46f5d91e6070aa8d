"""mIoU and Acc@kIoU with Unique / Multiple / Overall aggregation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .augment import identity_view
from .losses import mask_iou
from .model import ParamVector, forward_batch

SPLITS = ("Unique", "Multiple", "Overall")
THRESHOLDS = (0.25, 0.5)


@dataclass(frozen=True)
class SplitMetrics:
    miou: float
    acc_25: float
    acc_50: float
    n: int


@dataclass(frozen=True)
class MetricsReport:
    unique: SplitMetrics
    multiple: SplitMetrics
    overall: SplitMetrics

    def split(self, name: str) -> SplitMetrics:
        return {"Unique": self.unique, "Multiple": self.multiple, "Overall": self.overall}[name]


def _summarize(ious: np.ndarray) -> SplitMetrics:
    if len(ious) == 0:
        return SplitMetrics(0.0, 0.0, 0.0, 0)
    return SplitMetrics(
        miou=float(np.mean(ious)),
        acc_25=float(np.mean(ious > 0.25)),
        acc_50=float(np.mean(ious > 0.5)),
        n=len(ious),
    )


def report_from_ious(ious, is_unique) -> MetricsReport:
    ious = np.asarray(ious, dtype=float)
    if len(ious) == 0:
        raise ValueError("cannot evaluate an empty sample set")
    uniq = np.asarray(is_unique, dtype=bool)
    return MetricsReport(_summarize(ious[uniq]), _summarize(ious[~uniq]), _summarize(ious))


def sample_ious(params: ParamVector, samples, scenes, chunk: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(samples), chunk):
        part = samples[i : i + chunk]
        preds, _ = forward_batch(params, [(identity_view(scenes[s.scene_id]), s.tokens) for s in part])
        for s, p in zip(part, preds):
            if s.gt_mask is None:
                raise ValueError(f"sample {s.sample_id} has no ground-truth mask")
            out.append(mask_iou(p.hard_mask, s.gt_mask))
    return np.array(out)


def evaluate(params: ParamVector, samples, scenes) -> MetricsReport:
    """Score un-augmented predictions against ground truth."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate an empty sample set")
    ious = sample_ious(params, samples, scenes)
    return report_from_ious(ious, [s.is_unique for s in samples])


# ---------------------------------------------------------------------------
# Comparison tables

_COLUMNS = [("miou", "mIoU"), ("acc_25", "Acc@0.25"), ("acc_50", "Acc@0.5")]


def compare_runs(reports: dict, baseline=None) -> list:
    """Rows of ``{run, split, metric..., delta_metric...}`` in percentage points.

    Deltas are only emitted when there is more than one run.
    """
    if not reports:
        raise ValueError("need at least one report")
    names = list(reports)
    if baseline is None:
        baseline = names[0]
    with_delta = len(reports) > 1
    rows = []
    for name in names:
        for split in SPLITS:
            m = reports[name].split(split)
            row = {"run": name, "split": split, "n": m.n}
            for key, _ in _COLUMNS:
                row[key] = round(100.0 * getattr(m, key), 2)
            if with_delta:
                b = reports[baseline].split(split)
                for key, _ in _COLUMNS:
                    row["delta_" + key] = round(100.0 * getattr(m, key), 2) - round(100.0 * getattr(b, key), 2)
            rows.append(row)
    return rows


def format_delta(value: float) -> str:
    value = round(value, 2) + 0.0  # normalise -0.0
    return f"{value:+.2f}"


def format_table(rows: list) -> str:
    """Aligned text table with ``+X.XX`` delta annotations."""
    has_delta = any("delta_miou" in r for r in rows)
    header = ["run", "split"] + [label for _, label in _COLUMNS]
    body = []
    for r in rows:
        cells = [str(r["run"]), r["split"]]
        for key, _ in _COLUMNS:
            cell = f"{r[key]:.2f}"
            if has_delta:
                cell += f" ({format_delta(r['delta_' + key])})"
            cells.append(cell)
        body.append(cells)
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(cells, widths)) for cells in body]
    return "\n".join(lines) + "\n"


def rows_to_csv(rows: list) -> str:
    if not rows:
        return ""
    fields = list(rows[0].keys())
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
