"""``rest3d`` command line: gen, train, eval, ablate.

Failures print a single JSON object on stderr, e.g.
``{"error": "missing_key", "key": "lr", "message": "missing config key: lr"}``,
and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import config as cfgmod
from .config import ConfigError
from .experiments import ExperimentPlan, dataset_checksum, file_checksum, run_plan
from .metrics import compare_runs, evaluate, format_table, rows_to_csv
from .model import load_checkpoint
from .scenes import SplitSpec, generate_dataset, load_dataset, load_split, make_splits, save_dataset, save_split
from .trainer import MODES, run

DATASET_FILE = "dataset.txt"


class CLIError(Exception):
    def __init__(self, kind: str, message: str, key: str = "", code: int = 1):
        super().__init__(message)
        self.kind, self.key, self.code = kind, key, code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("usage", message, code=2)


def _values(args) -> dict:
    if args.config:
        values = cfgmod.load(args.config, args.set or ())
    else:
        values = cfgmod.apply_overrides(cfgmod.default_values(), args.set or ())
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return values


def _dataset(args, values):
    """Load ``--data`` (file or directory) or generate from the config."""
    if args.data:
        path = Path(args.data)
        if path.is_dir():
            path = path / DATASET_FILE
        if not path.exists():
            raise CLIError("missing_data", f"dataset not found: {path}")
        return load_dataset(path), file_checksum(path)
    ds = generate_dataset(cfgmod.dataset_config(values), seed=values["data_seed"])
    return ds, dataset_checksum(ds)


def _split_from_file(dataset, path):
    labeled, unlabeled = load_split(path)
    by_id = {s.sample_id: s for s in dataset.samples}
    try:
        return [by_id[i] for i in labeled], [by_id[i].without_mask() for i in unlabeled]
    except KeyError as exc:
        raise CLIError("bad_split", f"split references unknown sample {exc.args[0]}") from None


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CLIError("unwritable", f"cannot write to {out}: {exc.strerror}") from None
    return out


def cmd_gen(args) -> int:
    values = _values(args)
    out = _out_dir(args.out)
    ds = generate_dataset(cfgmod.dataset_config(values), seed=values["data_seed"])
    save_dataset(ds, out / DATASET_FILE)
    seed = values["seed"]
    for ratio in cfgmod.split_list(values["label_ratios"], float):
        d_l, d_u = make_splits(ds.samples, SplitSpec(ratio, seed))
        save_split(out / f"split_r{ratio:g}_s{seed}.txt", d_l, d_u, SplitSpec(ratio, seed))
        print(f"split ratio={ratio:g} seed={seed} labeled={len(d_l)} unlabeled={len(d_u)}")
    n_u = sum(s.is_unique for s in ds.samples)
    print(
        f"scenes={len(ds.scenes)} train_samples={len(ds.samples)} val_samples={len(ds.val_samples)} "
        f"unique_rate={n_u / len(ds.samples):.3f} vocab={len(ds.vocab)}"
    )
    return 0


def cmd_train(args) -> int:
    values = _values(args)
    cfg = cfgmod.train_config(values, args.mode)
    ds, checksum = _dataset(args, values)
    out = _out_dir(args.out)
    split = _split_from_file(ds, args.split) if args.split else None
    manifest = {"config": asdict(cfg), "mode": args.mode, "seed": cfg.seed, "dataset_sha256": checksum}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    res = run(cfg, ds, split=split, out_dir=out)
    rows = compare_runs({args.mode or "run": res.report})
    (out / "report.csv").write_text(rows_to_csv(rows))
    print(format_table(rows), end="")
    print(f"promotions={len(res.state.promotion_log)} labeled={len(res.state.labeled)} out={out}")
    return 0


def cmd_eval(args) -> int:
    values = _values(args)
    ds, _ = _dataset(args, values)
    reports = {}
    for path in args.checkpoint:
        try:
            params, _, _ = load_checkpoint(path)
        except OSError as exc:
            raise CLIError("io", f"cannot read checkpoint {path}: {exc.strerror}") from None
        if params["tok_emb"].shape[0] != len(ds.vocab):
            raise CLIError("mismatch", f"checkpoint {path} vocabulary does not match the dataset")
        reports[Path(path).stem] = evaluate(params, ds.val_samples, ds.scenes)
    rows = compare_runs(reports)
    print(format_table(rows), end="")
    if args.out:
        out = _out_dir(args.out)
        (out / "eval.csv").write_text(rows_to_csv(rows))
    return 0


def cmd_ablate(args) -> int:
    values = _values(args)
    plan = ExperimentPlan(
        label_ratios=tuple(cfgmod.split_list(values["label_ratios"], float)),
        modes=tuple(cfgmod.split_list(values["modes"])),
        tscs_periods=tuple(cfgmod.split_list(values["tscs_periods"])),
        seeds=tuple(cfgmod.split_list(values["seeds"], int)),
    )
    base = cfgmod.train_config(values)
    ds, _ = _dataset(args, values)
    out = _out_dir(args.out)
    run_plan(plan, base, ds, out)
    for name in ("table1.csv", "table2.csv", "table4.csv", "miou_vs_ratio.svg"):
        if (out / name).exists():
            print(out / name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rest3d", description="Semi-supervised 3D referring segmentation at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, need_out=True):
        sp.add_argument("--config", help="key = value config file (all keys required)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key; repeatable")
        sp.add_argument("--out", required=need_out, help="output directory")
        sp.add_argument("--seed", type=int, help="training / split seed")

    sp = sub.add_parser("gen", help="write the synthetic dataset and split files")
    common(sp)
    sp.set_defaults(fn=cmd_gen)

    sp = sub.add_parser("train", help="train one model")
    common(sp)
    sp.add_argument("--mode", choices=sorted(MODES))
    sp.add_argument("--data", help="dataset file or directory written by gen")
    sp.add_argument("--split", help="split file written by gen")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate checkpoints on the validation scenes")
    common(sp, need_out=False)
    sp.add_argument("--data", help="dataset file or directory written by gen")
    sp.add_argument("--checkpoint", action="append", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="run the ratio x mode x period x seed grid")
    common(sp)
    sp.add_argument("--data", help="dataset file or directory written by gen")
    sp.set_defaults(fn=cmd_ablate)
    return p


def _fail(kind: str, message: str, key: str = "", code: int = 1) -> int:
    payload = {"error": kind, "message": " ".join(str(message).split())}
    if key:
        payload["key"] = key
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CLIError as exc:
        return _fail(exc.kind, str(exc), exc.key, exc.code)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        return _fail(exc.kind, str(exc), exc.key, 2)
    except CLIError as exc:
        return _fail(exc.kind, str(exc), exc.key, exc.code)
    except (ValueError, RuntimeError, FloatingPointError) as exc:
        return _fail(type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
