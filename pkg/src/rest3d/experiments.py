"""Experiment grid: labeled ratio x mode x TSCS period x seed.

Each cell trains in its own directory and leaves ``manifest.json`` (resolved
config, seed, dataset checksum) and ``result.json`` behind. A rerun skips any
cell whose result exists under an identical manifest, so an interrupted
ablation resumes where it stopped. Aggregates are medians over seeds.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import tempfile
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .metrics import SPLITS, MetricsReport, SplitMetrics
from .scenes import Dataset, SplitSpec, make_splits, save_dataset
from .trainer import MODES, TrainConfig, run

log = logging.getLogger(__name__)

TSCS_MODES = ("ssl_tscs", "ssl_full")
TABLE2_ROWS = [("ssl_plain", False, False), ("ssl_qdw", True, False), ("ssl_tscs", False, True), ("ssl_full", True, True)]


@dataclass(frozen=True)
class ExperimentPlan:
    label_ratios: tuple = (0.01, 0.02, 0.05, 0.10)
    modes: tuple = ("supervised", "ssl_plain", "ssl_qdw", "ssl_tscs", "ssl_full")
    tscs_periods: tuple = ("mid",)
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if not self.label_ratios or not self.modes or not self.seeds:
            raise ValueError("plan needs at least one ratio, mode and seed")
        for m in self.modes:
            if m not in MODES:
                raise ValueError(f"unknown mode {m!r}")

    def cells(self) -> list:
        out = []
        for ratio in self.label_ratios:
            for mode in self.modes:
                periods = self.tscs_periods if mode in TSCS_MODES else ("-",)
                for period in periods:
                    for seed in self.seeds:
                        out.append((ratio, mode, period, seed))
        return out


def dataset_checksum(dataset: Dataset) -> str:
    """sha256 of the serialized dataset (equals the checksum of its file)."""
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "dataset.txt"
        save_dataset(dataset, p)
        return file_checksum(p)


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cell_config(base: TrainConfig, ratio: float, mode: str, period: str, seed: int) -> TrainConfig:
    cfg = replace(base, **MODES[mode], labeled_ratio=ratio, seed=seed)
    if period != "-":
        cfg = replace(cfg, tscs_period=period)
    return cfg


def cell_name(ratio, mode, period, seed) -> str:
    tag = f"r{ratio:g}_{mode}"
    if period != "-":
        tag += f"_{period}"
    return f"{tag}_s{seed}"


def _report_to_dict(rep: MetricsReport) -> dict:
    return {s: asdict(rep.split(s)) for s in SPLITS}


def _report_from_dict(d: dict) -> MetricsReport:
    return MetricsReport(SplitMetrics(**d["Unique"]), SplitMetrics(**d["Multiple"]), SplitMetrics(**d["Overall"]))


def manifest_for(cfg: TrainConfig, checksum: str) -> dict:
    return {"config": asdict(cfg), "seed": cfg.seed, "dataset_sha256": checksum}


def run_key(cfg: TrainConfig, checksum: str) -> str:
    """Hash of everything that affects training; TSCS settings collapse when no promotion can happen."""
    d = asdict(cfg)
    if not (cfg.ssl_enabled and cfg.enable_tscs) or cfg.tscs_period == "never":
        d.update(enable_tscs=False, tscs_period="-", tscs_threshold=None)
    d.pop("eval_every")
    blob = json.dumps({"config": d, "dataset_sha256": checksum}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def run_cell(cfg: TrainConfig, dataset: Dataset, out_dir, checksum: str, save_log: bool = True, known: dict = None) -> MetricsReport:
    """Train one cell unless its result is already on disk.

    ``known`` maps run keys to finished payloads; a cell whose training is
    provably identical to one already run (e.g. TSCS period "never" versus
    TSCS disabled) reuses that payload instead of retraining.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = manifest_for(cfg, checksum)
    key = run_key(cfg, checksum)
    result_path = out / "result.json"
    man_path = out / "manifest.json"
    if result_path.exists() and man_path.exists() and json.loads(man_path.read_text()) == manifest:
        payload = json.loads(result_path.read_text())
        if known is not None:
            known.setdefault(key, payload)
        return _report_from_dict(payload["report"])
    man_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    if known is not None and key in known and not save_log:
        payload = dict(known[key])
    else:
        split = make_splits(dataset.samples, SplitSpec(cfg.labeled_ratio, cfg.seed))
        res = run(cfg, dataset, split=split, out_dir=out if save_log else None)
        payload = {
            "report": _report_to_dict(res.report),
            "promotions": len(res.state.promotion_log),
            "final_labeled": len(res.state.labeled),
            "run_key": key,
        }
        if known is not None:
            known[key] = payload
    # written last: its presence marks the cell complete
    result_path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return _report_from_dict(payload["report"])


def median_report(reports: list) -> MetricsReport:
    def med(split):
        ms = [r.split(split) for r in reports]
        return SplitMetrics(
            miou=float(np.median([m.miou for m in ms])),
            acc_25=float(np.median([m.acc_25 for m in ms])),
            acc_50=float(np.median([m.acc_50 for m in ms])),
            n=ms[0].n,
        )

    return MetricsReport(med("Unique"), med("Multiple"), med("Overall"))


def run_plan(plan: ExperimentPlan, base: TrainConfig, dataset: Dataset, out_dir, save_logs: bool = False) -> dict:
    """Run (or resume) every cell; returns ``{cell: report}``."""
    out = Path(out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    checksum = dataset_checksum(dataset)
    known = {}
    for done in sorted((out / "cells").glob("*/result.json")):
        payload = json.loads(done.read_text())
        if "run_key" in payload:
            known.setdefault(payload["run_key"], payload)
    results = {}
    for cell in plan.cells():
        cfg = cell_config(base, *cell)
        log.info("cell %s", cell_name(*cell))
        results[cell] = run_cell(cfg, dataset, out / "cells" / cell_name(*cell), checksum, save_log=save_logs, known=known)
    write_tables(plan, results, out)
    return results


# ---------------------------------------------------------------------------
# Tables and plot


def aggregate(plan: ExperimentPlan, results: dict) -> dict:
    """Median over seeds: ``{(ratio, mode, period): MetricsReport}``."""
    groups = {}
    for (ratio, mode, period, seed), rep in results.items():
        groups.setdefault((ratio, mode, period), []).append(rep)
    return {k: median_report(v) for k, v in groups.items()}


def _pct(x: float) -> str:
    return f"{100.0 * x:.4f}"


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _main_period(plan: ExperimentPlan) -> str:
    return "mid" if "mid" in plan.tscs_periods else plan.tscs_periods[0]


def write_tables(plan: ExperimentPlan, results: dict, out_dir) -> dict:
    out = Path(out_dir)
    agg = aggregate(plan, results)
    main = _main_period(plan)
    baseline = "supervised" if "supervised" in plan.modes else plan.modes[0]
    paths = {}

    # Table 1 shape: per ratio x mode, split-wise metrics with deltas against the baseline mode
    rows = []
    for ratio in plan.label_ratios:
        for mode in plan.modes:
            key = (ratio, mode, main if mode in TSCS_MODES else "-")
            base_key = (ratio, baseline, main if baseline in TSCS_MODES else "-")
            rep, brep = agg[key], agg[base_key]
            for split in SPLITS:
                m, b = rep.split(split), brep.split(split)
                rows.append(
                    [f"{ratio:g}", mode, split, _pct(m.miou), _pct(m.acc_25), _pct(m.acc_50),
                     f"{100 * (m.miou - b.miou):+.4f}", m.n]
                )
    paths["table1"] = out / "table1.csv"
    _write_csv(paths["table1"], ["ratio", "mode", "split", "miou", "acc_25", "acc_50", "delta_miou", "n"], rows)

    # Table 2 shape: QDW x TSCS grid at the smallest ratio
    r0 = min(plan.label_ratios)
    present = [row for row in TABLE2_ROWS if row[0] in plan.modes]
    if present:
        ref = agg.get((r0, present[0][0], main if present[0][0] in TSCS_MODES else "-"))
        rows = []
        for mode, qdw, tscs in present:
            rep = agg[(r0, mode, main if mode in TSCS_MODES else "-")]
            rows.append(
                [mode, "x" if qdw else "", "x" if tscs else ""]
                + [_pct(rep.split(s).miou) for s in SPLITS]
                + [f"{100 * (rep.overall.miou - ref.overall.miou):+.4f}"]
            )
        paths["table2"] = out / "table2.csv"
        _write_csv(paths["table2"], ["mode", "qdw", "tscs", "unique_miou", "multiple_miou", "overall_miou", "delta_overall"], rows)

    # Table 4 shape: TSCS period sweep at the smallest ratio
    sweep_mode = next((m for m in ("ssl_tscs", "ssl_full") if m in plan.modes), None)
    if sweep_mode and len(plan.tscs_periods) > 1:
        rows = []
        for period in plan.tscs_periods:
            rep = agg[(r0, sweep_mode, period)]
            rows.append([sweep_mode, period] + [_pct(rep.split(s).miou) for s in SPLITS])
        paths["table4"] = out / "table4.csv"
        _write_csv(paths["table4"], ["mode", "period", "unique_miou", "multiple_miou", "overall_miou"], rows)

    # mIoU vs labeled ratio, one line per mode
    series = {}
    for mode in plan.modes:
        pts = [(ratio, 100.0 * agg[(ratio, mode, main if mode in TSCS_MODES else "-")].overall.miou) for ratio in plan.label_ratios]
        series[mode] = sorted(pts)
    paths["curve"] = out / "miou_vs_ratio.csv"
    _write_csv(paths["curve"], ["mode", "ratio", "overall_miou"], [[m, f"{r:g}", repr(v)] for m, pts in series.items() for r, v in pts])
    paths["plot"] = out / "miou_vs_ratio.svg"
    Path(paths["plot"]).write_text(render_svg(series))
    return paths


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def render_svg(series: dict, width: int = 560, height: int = 360) -> str:
    """Self-contained line plot; every marker carries its exact value as data attributes."""
    pad_l, pad_r, pad_t, pad_b = 60, 150, 20, 45
    xs = sorted({r for pts in series.values() for r, _ in pts})
    ys = [v for pts in series.values() for _, v in pts]
    y_lo, y_hi = min(ys + [0.0]), max(ys + [1.0])
    y_hi = y_hi + 0.05 * (y_hi - y_lo)
    lx = np.log10(xs)
    x_lo, x_hi = (lx.min() - 0.1, lx.max() + 0.1) if len(xs) > 1 else (lx[0] - 1, lx[0] + 1)

    def px(r):
        return pad_l + (np.log10(r) - x_lo) / (x_hi - x_lo) * (width - pad_l - pad_r)

    def py(v):
        return pad_t + (1 - (v - y_lo) / (y_hi - y_lo)) * (height - pad_t - pad_b)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<line x1="{pad_l}" y1="{height - pad_b}" x2="{width - pad_r}" y2="{height - pad_b}" stroke="black"/>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{height - pad_b}" stroke="black"/>',
        f'<text x="{(width - pad_r + pad_l) / 2:.1f}" y="{height - 8}" font-size="12" text-anchor="middle">labeled ratio (log scale)</text>',
        f'<text x="14" y="{(height - pad_b + pad_t) / 2:.1f}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {(height - pad_b + pad_t) / 2:.1f})">Overall mIoU (%)</text>',
    ]
    for r in xs:
        parts.append(f'<text x="{px(r):.2f}" y="{height - pad_b + 16}" font-size="11" text-anchor="middle">{100 * r:g}%</text>')
    for t in np.linspace(y_lo, y_hi, 5):
        parts.append(f'<text x="{pad_l - 6}" y="{py(t) + 4:.2f}" font-size="11" text-anchor="end">{t:.1f}</text>')
    for i, (mode, pts) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        path = " ".join(f"{px(r):.2f},{py(v):.2f}" for r, v in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{path}"/>')
        for r, v in pts:
            parts.append(
                f'<circle cx="{px(r):.2f}" cy="{py(v):.2f}" r="3.5" fill="{color}" '
                f'data-mode="{mode}" data-ratio="{r!r}" data-miou="{v!r}"/>'
            )
        ly = pad_t + 18 * i + 10
        parts.append(f'<line x1="{width - pad_r + 10}" y1="{ly}" x2="{width - pad_r + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - pad_r + 36}" y="{ly + 4}" font-size="12">{mode}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def read_svg_points(path) -> list:
    """Recover ``(mode, ratio, miou)`` triples from a plot written by :func:`render_svg`."""
    import xml.etree.ElementTree as ET

    root = ET.parse(path).getroot()
    out = []
    for el in root.iter():
        if el.tag.endswith("circle") and "data-mode" in el.attrib:
            out.append((el.attrib["data-mode"], float(el.attrib["data-ratio"]), float(el.attrib["data-miou"])))
    return out
