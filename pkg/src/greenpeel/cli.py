"""Command-line driver: check, sample, learn, evaluate, sweep, report.

Exit codes: 0 success, 1 validation error, 2 runtime failure.  Every command
writes a ``<command>_summary.json`` into the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import gp_sampling as gps
from .config import ConfigError, RunConfig, dump_config, load_config
from .dataset import DatasetFormatError, dataset_read, dataset_write
from .grid_pde import (
    CoefficientField, DenseCapError, EllipticityError, GridError, assemble, build_grid, dense_kernel, solve,
)
from .hierarchy import TreeError
from .peeling import (
    HierarchicalApprox, InsufficientDiversityError, RecordingOracle, TrainingSet, evaluate_exact,
    evaluate_sampled, expected_solves, gp_dataset, learn, learn_from_dataset, near_field_floor,
)
from .report import LEDGER_NOTE, medians, plot_svg, read_csv, sweep, text_table, write_csv

log = logging.getLogger("greenpeel")

VALIDATION_ERRORS = (ConfigError, GridError, TreeError, EllipticityError, DenseCapError, DatasetFormatError,
                     InsufficientDiversityError)


def _operator(cfg: RunConfig):
    grid = build_grid(cfg.problem.d, cfg.problem.n)
    return assemble(grid, CoefficientField.preset(cfg.problem.coefficient))


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _summary(cfg, name, payload):
    path = _outdir(cfg) / f"{name}_summary.json"
    payload = {"command": name, **payload}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable))
    print(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable))
    return path


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def cmd_check(cfg, args):
    """Solver self-tests on small problems."""
    results = {}
    op = assemble(build_grid(1, 3))
    u = solve(op, np.ones(3))
    results["poisson_1d_quadratic"] = float(np.abs(u - np.array([0.09375, 0.125, 0.09375])).max())
    G = dense_kernel(op)
    x = op.grid.coords()[:, 0]
    exact = np.minimum.outer(x, x) * (1 - np.maximum.outer(x, x))
    results["green_1d_exact"] = float(np.abs(G - exact).max())
    op = _operator(cfg)
    results["symmetric"] = bool((op.K != op.K.T).nnz == 0)
    rng = np.random.default_rng(cfg.sampling.seed)
    f = rng.standard_normal(op.size)
    u = solve(op, f)
    results["residual"] = float(np.linalg.norm(op.K @ u - f) / np.linalg.norm(f))
    ok = results["poisson_1d_quadratic"] < 1e-12 and results["green_1d_exact"] < 1e-12 and \
        results["symmetric"] and results["residual"] <= 1e-10
    _summary(cfg, "check", {"ok": ok, "results": results})
    return 0 if ok else 2


def cmd_sample(cfg, args):
    """Write a dataset: N global GP draws with --budget, else the pairs the active learner requests."""
    op = _operator(cfg)
    out = Path(args.out) if args.out else _outdir(cfg) / "dataset.gpde"
    if args.budget:
        data = gp_dataset(op, int(args.budget[0]), cfg.kernel(), seed=cfg.sampling.seed)
        data.meta["source"] = "gp"
    else:
        rec = RecordingOracle(op)
        learn(rec, cfg.peel_config())
        data = TrainingSet(op.grid, np.array(rec.forcings), np.array(rec.solutions),
                           {"kernel": cfg.sampling.kernel, "length_scale": cfg.sampling.length_scale,
                            "seed": cfg.sampling.seed, "source": "active"})
    data.meta["coefficient"] = cfg.problem.coefficient
    dataset_write(out, data)
    _summary(cfg, "sample", {"path": str(out), "pairs": len(data), "d": op.grid.d, "n": op.grid.n})
    return 0


def cmd_learn(cfg, args):
    out = _outdir(cfg)
    pc = cfg.peel_config()
    t0 = time.perf_counter()
    if cfg.algorithm.mode == "dataset":
        path = args.dataset or cfg.output.dataset
        if not path:
            raise ConfigError("output.dataset: dataset mode needs a dataset path (or --dataset)")
        data = dataset_read(path)
        approx, diag = learn_from_dataset(data, pc)
        info = {"mode": diag["mode"], "pairs": len(data)}
        if "ledger" in diag:
            info["ledger"] = diag["ledger"]
    else:
        op = _operator(cfg)
        approx, ledger = learn(op, pc)
        info = {"mode": "active", "N_train": ledger.training, "ledger": ledger.as_dict(),
                "expected_ledger": expected_solves(op.grid, pc)}
    path = Path(args.out) if args.out else out / "approx.npz"
    approx.save(path)
    ranks = approx.ranks()
    info.update({"approx": str(path), "wall_time": time.perf_counter() - t0,
                 "max_rank": {str(k): max(v, default=0) for k, v in ranks.items()},
                 "near_field": approx.near_policy, "note": LEDGER_NOTE})
    _summary(cfg, "learn", info)
    return 0


def cmd_evaluate(cfg, args):
    path = args.approx or str(_outdir(cfg) / "approx.npz")
    approx = HierarchicalApprox.load(path)
    op = _operator(cfg)
    if (approx.grid.d, approx.grid.n) != (op.grid.d, op.grid.n):
        raise ConfigError("problem.n: approximation grid does not match the config problem")
    info = {"approx": path}
    if cfg.evaluation.dense_oracle:
        G = dense_kernel(op, cfg.evaluation.dense_cap)
        ev = evaluate_exact(approx, G, cfg.evaluation.dense_cap)
        info.update({k: ev[k] for k in ("err_hs_rel", "err_op_rel", "err_far_hs_rel")})
        info["near_field_floor"] = near_field_floor(G, approx.tree)
    if cfg.evaluation.test_size:
        tests = gp_dataset(op, cfg.evaluation.test_size, cfg.kernel(), seed=cfg.sampling.seed, purpose=gps.TEST)
        info["sampled"] = evaluate_sampled(approx, tests.forcings, tests.solutions)
        info["evaluation_solves"] = cfg.evaluation.test_size
    _summary(cfg, "evaluate", info)
    return 0


def cmd_sweep(cfg, args):
    out = _outdir(cfg)
    data = None
    if cfg.algorithm.mode == "dataset":
        data = dataset_read(args.dataset or cfg.output.dataset)
    budgets = [float(b) if "." in b or "e" in b.lower() else int(b) for b in args.budget] if args.budget else None
    rows = sweep(cfg, budgets=budgets, workers=args.workers, dataset=data)
    csv_path = Path(args.out) if args.out else out / "sweep.csv"
    write_csv(rows, csv_path)
    svg_path = csv_path.with_suffix(".svg")
    plot_svg(rows, svg_path)
    _summary(cfg, "sweep", {"csv": str(csv_path), "svg": str(svg_path), "rows": len(rows),
                            "failed": sum(1 for r in rows if r.note), "medians": medians(rows),
                            "note": LEDGER_NOTE})
    return 0


def cmd_report(cfg, args):
    src = Path(args.csv) if args.csv else _outdir(cfg) / "sweep.csv"
    rows = read_csv(src)
    svg_path = Path(args.out) if args.out else src.with_suffix(".report.svg")
    plot_svg(rows, svg_path)
    table = text_table(rows)
    table_path = svg_path.with_suffix(".txt")
    table_path.write_text(table + "\n")
    print(table)
    _summary(cfg, "report", {"csv": str(src), "svg": str(svg_path), "table": str(table_path),
                             "medians": medians(rows)})
    return 0


COMMANDS = {"check": cmd_check, "sample": cmd_sample, "learn": cmd_learn, "evaluate": cmd_evaluate,
            "sweep": cmd_sweep, "report": cmd_report}


def build_parser():
    parser = argparse.ArgumentParser(prog="greenpeel", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output file (or directory for summaries)")
        p.add_argument("--budget", nargs="+", help="sweep budgets, or dataset size for `sample`")
        if name in ("learn", "sweep"):
            p.add_argument("--dataset")
        if name == "evaluate":
            p.add_argument("--approx")
        if name == "sweep":
            p.add_argument("--workers", type=int)
        if name == "report":
            p.add_argument("--csv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = {"sampling.seed": args.seed} if args.seed is not None else {}
        cfg = load_config(args.config, overrides)
        if args.out and args.command in ("check",):
            cfg.output.dir = args.out
        return COMMANDS[args.command](cfg, args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
