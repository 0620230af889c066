"""Command-line interface.

Standard output carries only machine-readable results (CSV or key=value);
diagnostics go to standard error. Exit codes: 0 success, 1 runtime error,
2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from .data import generate_synthetic, load_arrays, load_cohort, split_cohort
from .errors import HnsurvError, SchemaError
from .metrics import CohortOutcome, ctd_index, harrell_c, kaplan_meier
from .survival import TimeGrid
from .training import (
    TrainConfig,
    evaluate,
    load_checkpoint,
    load_config,
    save_checkpoint,
    train,
)


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _dims(text: str) -> tuple:
    try:
        dims = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like 16x16x16, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 8:
        raise argparse.ArgumentTypeError(f"dims must be three extents >= 8, got {text!r}")
    return dims


def _censor_rate(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0 <= v < 1:
        raise argparse.ArgumentTypeError("censor rate must lie in [0, 1)")
    return v


def _nonneg(text: str) -> float:
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hnsurv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic cohort")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--n", required=True, type=int)
    g.add_argument("--dims", default=(32, 32, 32), type=_dims)
    g.add_argument("--signal", default=4.0, type=_nonneg)
    g.add_argument("--censor-rate", default=0.3, type=_censor_rate)
    g.add_argument("--seed", default=0, type=int)
    g.add_argument("--clinical-features", default=0, type=int)

    t = sub.add_parser("train", help="train and write the best checkpoint")
    t.add_argument("--manifest", required=True, type=Path)
    t.add_argument("--config", type=Path)
    t.add_argument("--out", required=True, type=Path)

    e = sub.add_parser("evaluate", help="print Ctd and Harrell's C for a split")
    e.add_argument("--manifest", required=True, type=Path)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--predictions", type=Path, help="survival CSV written by predict")
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--config", type=Path)

    pr = sub.add_parser("predict", help="write per-subject survival curves as CSV")
    pr.add_argument("--manifest", required=True, type=Path)
    pr.add_argument("--checkpoint", required=True, type=Path)
    pr.add_argument("--out", type=Path, help="default: standard output")
    pr.add_argument("--split", choices=("train", "val", "test", "all"), default="all")

    k = sub.add_parser("km", help="Kaplan-Meier step curve of a manifest's outcomes")
    k.add_argument("--manifest", required=True, type=Path)
    k.add_argument("--out", type=Path, help="default: standard output")
    return p


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text, encoding="utf-8")


def _select(records, seed: int, part: str):
    if part == "all":
        return list(records)
    keep = set(split_cohort(records, seed).ids(part))
    return [r for r in records if r.subject_id in keep]


def cmd_generate(args) -> int:
    if args.n < 2:
        raise SchemaError("--n must be at least 2")
    c = generate_synthetic(args.out, args.n, args.dims, args.signal, args.censor_rate,
                           args.seed, args.clinical_features)
    _err(f"wrote {len(c.records)} subjects to {args.out} (hidden risks in {c.truth.name})")
    return 0


def cmd_train(args) -> int:
    if args.config is None:
        cfg, defaulted = TrainConfig(), []
        _err("no config given; using defaults for every setting")
    else:
        cfg, defaulted = load_config(args.config)
        defaults = TrainConfig()
        for key in defaulted:
            _err(f"config: {key} not set, using default {getattr(defaults, key)!r}")
    records = load_cohort(args.manifest, require_clinical="clinical" in cfg.modalities)
    arrays = load_arrays(records, cfg.modalities, cfg.input_size, np.dtype(cfg.dtype))
    split = split_cohort(records, cfg.seed)

    def report(rec):
        print(f"{rec.epoch},{rec.train_loss!r},{rec.val_ctd!r}", flush=True)

    result = train(cfg, arrays, split, on_epoch=report)
    save_checkpoint(result.model, args.out)
    _err(f"best epoch {result.best_epoch}; checkpoint written to {args.out}")
    return 0


def _format_curves(ids, S, grid: TimeGrid) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject_id"] + [repr(t) for t in grid.edges])
    for sid, row in zip(ids, S):
        w.writerow([sid] + [repr(float(v)) for v in row])
    return buf.getvalue()


def read_curves(path) -> tuple[list, np.ndarray, TimeGrid]:
    """Parse a predict CSV: header subject_id,t_1..t_p; rows of S values."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "subject_id" or len(rows[0]) < 2:
        raise SchemaError(f"{path}: not a survival-curve CSV")
    try:
        grid = TimeGrid(tuple(float(x) for x in rows[0][1:]))
        ids = [r[0] for r in rows[1:] if r]
        S = np.array([[float(x) for x in r[1:]] for r in rows[1:] if r])
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from None
    return ids, S.reshape(len(ids), grid.p), grid


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    records = load_cohort(args.manifest, require_clinical="clinical" in model.cfg.modalities)
    records = _select(records, model.cfg.seed, args.split)
    arrays = load_arrays(records, model.cfg.modalities, model.cfg.input_size, model.dtype)
    S = model.predict(arrays)
    _emit(_format_curves(arrays.ids, S, model.grid), args.out)
    return 0


def _print_kv(values: dict) -> None:
    for k, v in values.items():
        print(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")


def cmd_evaluate(args) -> int:
    expect = load_config(args.config)[0] if args.config is not None else None
    if args.predictions is not None:
        ids, S, grid = read_curves(args.predictions)
        if expect is not None and expect.intervals != grid.p:
            raise SchemaError(
                f"predictions have {grid.p} intervals but config says {expect.intervals}")
        by_id = {r.subject_id: r for r in load_cohort(args.manifest)}
        missing = [s for s in ids if s not in by_id]
        if missing:
            raise SchemaError(f"subjects not in manifest: {missing[:5]}")
        out = CohortOutcome([by_id[s].time for s in ids], [by_id[s].event for s in ids])
        _print_kv({"ctd": ctd_index(S, out, grid),
                   "harrell_c": harrell_c(-S.mean(axis=1), out), "n": len(ids)})
        return 0
    model = load_checkpoint(args.checkpoint, expect=expect)
    records = load_cohort(args.manifest, require_clinical="clinical" in model.cfg.modalities)
    records = _select(records, model.cfg.seed, args.split)
    arrays = load_arrays(records, model.cfg.modalities, model.cfg.input_size, model.dtype)
    _print_kv(evaluate(model, arrays))
    return 0


def cmd_km(args) -> int:
    records = load_cohort(args.manifest)
    curve = kaplan_meier(CohortOutcome([r.time for r in records], [r.event for r in records]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", "survival"])
    for t, s in zip(curve.time, curve.survival):
        w.writerow([repr(float(t)), repr(float(s))])
    _emit(buf.getvalue(), args.out)
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "km": cmd_km,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (HnsurvError, OSError) as exc:
        _err(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
