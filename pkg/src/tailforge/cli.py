"""Command-line entry point: make-lt, train, sweep, ablate, gradcheck, report.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as C
from . import data as D
from . import metrics as M
from . import trainer as T
from .gradcheck import LOSS_NAMES, run_gradcheck

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
GRADCHECK_TOL = 1e-4
SWEEP_PARAMS = {"lambda": "lam", "temperature": "temperature", "margin": "margin"}
ABLATION_ROWS = [  # (CE, metric, cRW)
    (True, False, False),
    (True, True, False),
    (True, False, True),
    (False, True, True),
    (True, True, True),
]

log = logging.getLogger("tailforge")


class UsageError(Exception):
    pass


def _fail(msg: str, code: int) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("TAILFORGE_THREADS", "1")))
    except ValueError:
        return 1


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _parse_floats(text: str, flag: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise UsageError(f"{flag}: empty list")
    return vals


def _parse_ints(text: str, flag: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise UsageError(f"{flag}: empty list")
    return vals


# ---------------------------------------------------------------- make-lt


def cmd_make_lt(args) -> int:
    src = D.load_any(args.input)
    lt = D.make_long_tail(src, D.LongTailSpec(rho=args.rho, seed=args.seed), n_max=args.n_max)
    counts = lt.class_counts
    if args.output.endswith(".csv"):
        D.write_csv(lt, args.output)
    else:
        D.write_dataset(lt, args.output)
    print("counts:", " ".join(str(int(c)) for c in counts))
    print(f"N_max: {int(counts.max())}  N_min: {int(counts.min())}  rho: {D.compute_imbalance_ratio(counts):.2f}")
    return EXIT_OK


# ---------------------------------------------------------------- train


def _train_to(cfg: C.ExperimentConfig, out: Path) -> M.EvalReport:
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "config.json", cfg.to_dict())
    result = T.run_method(cfg.method, cfg, seed=cfg.seed, out_dir=out)
    T.write_record(out / "record.jsonl", result)
    _dump_json(out / "report.json", result.report.to_dict())
    return result.report


def cmd_train(args) -> int:
    cfg = C.load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    report = _train_to(cfg, Path(args.out))
    print(f"{cfg.method} seed {cfg.seed}: MCR all {report.mcr_all:.2f}  major {report.mcr_major:.2f}  "
          f"minor {report.mcr_minor:.2f}")
    return EXIT_OK


# ---------------------------------------------------------------- sweep


def _sweep_cell(payload: tuple[dict, str, float, int, str]) -> dict:
    cfg_dict, field, value, seed, cell_path = payload
    cfg = C.from_dict(cfg_dict).replace(seed=seed, stage1={field: value})
    result = T.run_method(cfg.method, cfg, seed=seed)
    row = {"param_value": value, "seed": seed, "mcr_all": result.report.mcr_all,
           "mcr_major": result.report.mcr_major, "mcr_minor": result.report.mcr_minor}
    Path(cell_path).write_text(json.dumps(row, sort_keys=True))
    return row


def _run_cells(fn, payloads: list) -> list:
    workers = min(_threads(), len(payloads))
    if workers <= 1:
        return [fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, payloads))


def _csv_text(header: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def cmd_sweep(args) -> int:
    cfg = C.load_config(args.config)
    field = SWEEP_PARAMS.get(args.param)
    if field is None:
        raise UsageError(f"--param must be one of {sorted(SWEEP_PARAMS)}")
    grid = sorted(set(_parse_floats(args.grid, "--grid")))
    seeds = _parse_ints(args.seeds, "--seeds") if args.seeds else [cfg.seed]
    plan = T.parse_method(cfg.method)
    if plan.metric is None:
        raise UsageError(f"method {cfg.method!r} has no metric loss to sweep")
    if field == "lam" and any(v < 0 for v in grid):
        raise UsageError("--grid: lambda values must be >= 0")
    out = Path(args.out)
    cells = out / "cells"
    cells.mkdir(parents=True, exist_ok=True)
    payloads = [(cfg.to_dict(), field, v, s, str(cells / f"{args.param}={v!r}_seed{s}.json"))
                for v in grid for s in seeds]
    rows = _run_cells(_sweep_cell, payloads)
    text = _csv_text(["param_value", "seed", "mcr_all", "mcr_major", "mcr_minor"], rows)
    (out / "sweep.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- ablate


def ablation_tag(ce: bool, metric: bool, crw: bool, metric_tag: str = "SC") -> str:
    parts = (["CE"] if ce else []) + ([metric_tag] if metric else [])
    return "+".join(parts) + ("->cRW" if crw else "")


def _ablate_seed(payload: tuple[dict, int, str, str]) -> list[dict]:
    cfg_dict, seed, metric_tag, cell_path = payload
    cfg = C.from_dict(cfg_dict).replace(seed=seed)
    ds = T.load_datasets(cfg)
    stage1_cache: dict[str, T.StageResult] = {}
    rows = []
    for ce, metric, crw in ABLATION_ROWS:
        tag = ablation_tag(ce, metric, crw, metric_tag)
        key = ablation_tag(ce, metric, False, metric_tag)
        result = T.run_method(tag, cfg, ds, seed, stage1=stage1_cache.get(key))
        stage1_cache[key] = result.stage1
        rows.append({"row": tag, "CE": int(ce), metric_tag: int(metric), "cRW": int(crw), "seed": seed,
                     "mcr_all": result.report.mcr_all, "mcr_major": result.report.mcr_major,
                     "mcr_minor": result.report.mcr_minor})
    Path(cell_path).write_text(json.dumps(rows, sort_keys=True))
    return rows


def cmd_ablate(args) -> int:
    cfg = C.load_config(args.config)
    metric_tag = args.metric
    seeds = _parse_ints(args.seeds, "--seeds") if args.seeds else [cfg.seed]
    out = Path(args.out)
    cells = out / "cells"
    cells.mkdir(parents=True, exist_ok=True)
    per_seed = _run_cells(_ablate_seed, [(cfg.to_dict(), s, metric_tag, str(cells / f"ablate_seed{s}.json"))
                                         for s in seeds])
    runs = [r for rows in per_seed for r in rows]
    cols = ["row", "CE", metric_tag, "cRW"]
    (out / "ablation_runs.csv").write_text(_csv_text([*cols, "seed", *M.METRIC_FIELDS], runs))
    table = []
    for ce, metric, crw in ABLATION_ROWS:
        tag = ablation_tag(ce, metric, crw, metric_tag)
        sel = [r for r in runs if r["row"] == tag]
        row = {"row": tag, "CE": int(ce), metric_tag: int(metric), "cRW": int(crw)}
        for name in M.METRIC_FIELDS:
            row[name] = float(np.mean([r[name] for r in sel]))
        table.append(row)
    text = _csv_text([*cols, *M.METRIC_FIELDS], table)
    (out / "ablation.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    names = list(LOSS_NAMES) if args.loss == "all" else [args.loss]
    if any(n not in LOSS_NAMES for n in names):
        raise UsageError(f"unknown loss {args.loss!r}; valid names: all, {', '.join(LOSS_NAMES)}")
    errors = run_gradcheck(names, args.trials, args.seed)
    ok = True
    for name, err in errors.items():
        passed = err < GRADCHECK_TOL
        ok &= passed
        print(f"{name:<20} {err:.3e}  {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------- report


def _collect_reports(paths: list[str]) -> list[M.EvalReport]:
    found = []
    for p in paths:
        path = Path(p)
        files = sorted(path.rglob("report.json")) if path.is_dir() else [path]
        for f in files:
            found.append(M.EvalReport.from_dict(json.loads(f.read_text())))
    if not found:
        raise UsageError("no report.json files found")
    return found


def cmd_report(args) -> int:
    reports = _collect_reports(args.inputs)
    rows = sorted(({"method": r.method, "seed": r.seed, "mcr_all": r.mcr_all, "mcr_major": r.mcr_major,
                    "mcr_minor": r.mcr_minor} for r in reports), key=lambda r: (str(r["method"]), r["seed"]))
    text = _csv_text(["method", "seed", *M.METRIC_FIELDS], rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    by_method: dict[str, list[M.EvalReport]] = {}
    for r in reports:
        by_method.setdefault(str(r.method), []).append(r)
    for method in sorted(by_method):
        agg = M.aggregate_runs(by_method[method])
        cells = "  ".join(f"{k.removeprefix('mcr_')} {agg.mean[k]:.2f}±{agg.std[k]:.2f}" for k in M.METRIC_FIELDS)
        print(f"{method:<16} n={agg.n}  {cells}", file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tailforge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-lt", help="subsample a balanced dataset into an exponential long tail")
    s.add_argument("--input", required=True)
    s.add_argument("--rho", type=float, required=True)
    s.add_argument("--n-max", type=int, default=None, help="head-class count (default: smallest input class)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", required=True)
    s.set_defaults(fn=cmd_make_lt)

    s = sub.add_parser("train", help="run one configured experiment")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("sweep", help="metric-loss coefficient sensitivity sweep")
    s.add_argument("--config", required=True)
    s.add_argument("--param", default="lambda", help="lambda, temperature or margin")
    s.add_argument("--grid", required=True, help="comma-separated values")
    s.add_argument("--seeds", default=None, help="comma-separated seeds (default: config seed)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("ablate", help="CE / metric / cRW on-off grid")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", default=None)
    s.add_argument("--metric", default="SC", choices=sorted(T.METRIC_TAGS))
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    s.add_argument("--loss", default="all")
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("report", help="collect report.json files into a CSV and per-method summary")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--out", default=None)
    s.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (UsageError, C.ConfigError, D.DatasetError, FileNotFoundError) as exc:
        return _fail(str(exc), EXIT_USAGE)
    except (T.NonFiniteLossError, ad.NonFiniteError) as exc:
        return _fail(str(exc), EXIT_NUMERIC)


if __name__ == "__main__":
    sys.exit(main())
