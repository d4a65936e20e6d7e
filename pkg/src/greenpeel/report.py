"""Convergence sweeps, CSV persistence, and hand-written SVG plots."""

from __future__ import annotations

import csv
import logging
import math
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
from scipy.optimize import minimize_scalar

from . import gp_sampling as gps
from .config import RunConfig
from .grid_pde import CoefficientField, assemble, build_grid, dense_kernel
from .peeling import (
    evaluate_exact, evaluate_sampled, gp_dataset, learn, learn_from_dataset, near_field_floor,
)
from .theory import eps_for_budget

log = logging.getLogger(__name__)

COLUMNS = ["N_train", "eps_or_k", "L", "err_hs_rel", "err_op_rel", "sampled_err", "gamma_hat",
           "seed", "wall_time", "note"]
LEDGER_NOTE = "N_train counts training solves (sketch, posterior, HS-estimate, near-field); evaluation solves excluded."


@dataclass
class SweepRow:
    N_train: int
    eps_or_k: float
    L: int
    err_hs_rel: float = float("nan")
    err_op_rel: float = float("nan")
    sampled_err: float = float("nan")
    gamma_hat: float = float("nan")
    seed: int = 0
    wall_time: float = 0.0
    note: str = ""
    extras: dict = field(default_factory=dict, repr=False)

    def as_csv(self):
        return [str(getattr(self, c)) if not isinstance(getattr(self, c), float) else repr(getattr(self, c))
                for c in COLUMNS]


class Problem:
    """Operator, dense kernel and quality proxy shared by every sweep point."""

    def __init__(self, cfg: RunConfig):
        p = cfg.problem
        self.cfg = cfg
        self.grid = build_grid(p.d, p.n)
        self.op = assemble(self.grid, CoefficientField.preset(p.coefficient))
        self.G = dense_kernel(self.op, cfg.evaluation.dense_cap) if cfg.evaluation.dense_oracle else None
        self.gamma_hat = float("nan")
        self.floor = None
        if self.G is not None:
            k = cfg.sweep.quality_modes
            _, vecs = np.linalg.eigh(self.G)
            kernel = cfg.peel_config(rank=1).level_kernel(cfg.hierarchy.L)
            C = gps.covariance_matrix(self.grid, kernel, cap=cfg.evaluation.dense_cap)
            self.gamma_hat = gps.quality_proxy(C, vecs[:, ::-1][:, :k]).gamma_hat
        self.tests = None
        if cfg.evaluation.test_size:
            self.tests = gp_dataset(self.op, cfg.evaluation.test_size, cfg.kernel(), seed=cfg.sampling.seed,
                                    purpose=gps.TEST)


def run_point(problem: Problem, budget, seed: int, kind: str, dataset=None) -> SweepRow:
    cfg = problem.cfg
    start = time.perf_counter()
    row = SweepRow(0, budget, cfg.hierarchy.L, seed=seed, gamma_hat=problem.gamma_hat)
    try:
        pc = cfg.peel_config(seed=seed, rank=int(budget)) if kind == "rank" else cfg.peel_config(seed=seed, eps=float(budget))
        if cfg.algorithm.mode == "dataset":
            approx, diag = learn_from_dataset(dataset, pc)
            row.N_train = len(dataset) if diag["mode"] == "least_squares" else sum(diag["ledger"].values())
        else:
            approx, ledger = learn(problem.op, pc)
            row.N_train = ledger.training
            row.extras["ledger"] = ledger.as_dict()
        if problem.G is not None:
            ev = evaluate_exact(approx, problem.G, cfg.evaluation.dense_cap)
            row.err_hs_rel, row.err_op_rel = ev["err_hs_rel"], ev["err_op_rel"]
            row.extras["err_far_hs_rel"] = ev["err_far_hs_rel"]
        if problem.tests is not None:
            row.sampled_err = evaluate_sampled(approx, problem.tests.forcings, problem.tests.solutions)["mean_rel"]
    except Exception as exc:  # recorded per row; the sweep keeps going
        log.debug("sweep point failed: %s", traceback.format_exc())
        row.note = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
    row.wall_time = time.perf_counter() - start
    return row


def sweep(cfg: RunConfig, budgets=None, seeds=None, workers: int | None = None, kind: str | None = None,
          dataset=None) -> list[SweepRow]:
    """One row per (budget, seed), ordered by (budget, seed) whatever the completion order."""
    budgets = list(cfg.sweep.budgets if budgets is None else budgets)
    seeds = list(cfg.sweep.seeds if seeds is None else seeds)
    if len(budgets) < 2:
        raise ValueError("a sweep needs at least two budget points")
    kind = kind or ("rank" if cfg.algorithm.rank is not None or all(float(b).is_integer() and b >= 1 for b in budgets) else "eps")
    problem = Problem(cfg)
    jobs = [(b, s) for b in sorted(budgets) for s in sorted(seeds)]
    workers = workers or cfg.sweep.workers
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(lambda j: run_point(problem, j[0], j[1], kind, dataset), jobs))
    else:
        rows = [run_point(problem, b, s, kind, dataset) for b, s in jobs]
    return rows


def write_csv(rows, path):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow(r.as_csv())
    return path


def read_csv(path) -> list[SweepRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = []
        for rec in reader:
            rows.append(SweepRow(
                int(rec["N_train"]), _budget(rec["eps_or_k"]), int(rec["L"]), float(rec["err_hs_rel"]),
                float(rec["err_op_rel"]), float(rec["sampled_err"]), float(rec["gamma_hat"]),
                int(rec["seed"]), float(rec["wall_time"]), rec["note"]))
    return rows


def _budget(text: str):
    """Ranks round-trip as int, tolerances as float."""
    return int(text) if text.lstrip("-").isdigit() else float(text)


def medians(rows):
    """Per budget: median N_train and errors over successful rows."""
    groups = {}
    for r in rows:
        if not r.note:
            groups.setdefault(r.eps_or_k, []).append(r)
    out = []
    for b in sorted(groups):
        g = groups[b]
        out.append({"eps_or_k": b, "N_train": float(np.median([r.N_train for r in g])),
                    "err_hs_rel": float(np.median([r.err_hs_rel for r in g])),
                    "err_op_rel": float(np.median([r.err_op_rel for r in g])),
                    "sampled_err": float(np.median([r.sampled_err for r in g])), "runs": len(g)})
    return out


def text_table(rows) -> str:
    lines = [f"{'eps_or_k':>10} {'N_train':>9} {'err_hs_rel':>12} {'err_op_rel':>12} {'sampled':>12} {'runs':>5}"]
    for m in medians(rows):
        lines.append(f"{m['eps_or_k']:>10g} {m['N_train']:>9.0f} {m['err_hs_rel']:>12.4e} "
                     f"{m['err_op_rel']:>12.4e} {m['sampled_err']:>12.4e} {m['runs']:>5d}")
    failed = sum(1 for r in rows if r.note)
    if failed:
        lines.append(f"{failed} run(s) failed; see the note column")
    lines.append(LEDGER_NOTE)
    return "\n".join(lines)


def fit_theory(ns, errs, gamma: float = 1.0) -> float:
    """Constant c0 making eps_for_budget(N) track the errors in log space."""
    ns, errs = np.asarray(ns, float), np.clip(np.asarray(errs, float), 1e-300, None)

    def loss(logc):
        pred = [math.log(eps_for_budget(n, gamma, math.exp(logc))) for n in ns]
        return float(np.sum((np.array(pred) - np.log(errs)) ** 2))

    res = minimize_scalar(loss, bounds=(-30.0, 30.0), method="bounded")
    return math.exp(res.x)


def plot_svg(rows, path=None, title="err_hs_rel vs training pairs", gamma=None) -> str:
    """Log-linear SVG: one series per seed, the median, and a dashed fitted theory curve."""
    good = [r for r in rows if not r.note and np.isfinite(r.err_hs_rel) and r.err_hs_rel > 0]
    W, H, ml, mr, mt, mb = 640, 420, 70, 20, 40, 50
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
             f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
             f'<text x="{W / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>']
    if good:
        xs = [r.N_train for r in good]
        ys = [math.log10(r.err_hs_rel) for r in good]
        x0, x1 = min(xs), max(xs)
        y0, y1 = math.floor(min(ys)), math.ceil(max(ys))
        if x1 == x0:
            x0, x1 = x0 - 1, x1 + 1
        if y1 == y0:
            y0, y1 = y0 - 1, y1 + 1
        px = lambda x: ml + (x - x0) / (x1 - x0) * (W - ml - mr)
        py = lambda y: mt + (y1 - y) / (y1 - y0) * (H - mt - mb)
        parts.append(f'<line x1="{ml}" y1="{H - mb}" x2="{W - mr}" y2="{H - mb}" stroke="black"/>')
        parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{H - mb}" stroke="black"/>')
        for e in range(y0, y1 + 1):
            parts.append(f'<text x="{ml - 6}" y="{py(e) + 4:.1f}" text-anchor="end" font-size="11">1e{e}</text>')
            parts.append(f'<line x1="{ml}" y1="{py(e):.1f}" x2="{W - mr}" y2="{py(e):.1f}" stroke="#ddd"/>')
        for x in np.linspace(x0, x1, 5):
            parts.append(f'<text x="{px(x):.1f}" y="{H - mb + 16}" text-anchor="middle" font-size="11">{x:.0f}</text>')
        parts.append(f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle" font-size="12">training pairs N</text>')
        for seed in sorted({r.seed for r in good}):
            pts = sorted((r.N_train, math.log10(r.err_hs_rel)) for r in good if r.seed == seed)
            parts.append(_polyline([(px(x), py(y)) for x, y in pts], "#8aa", 1))
            for x, y in pts:
                parts.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="2.5" fill="#8aa"/>')
        med = medians(good)
        mpts = [(m["N_train"], math.log10(m["err_hs_rel"])) for m in med]
        parts.append(_polyline([(px(x), py(y)) for x, y in mpts], "#c33", 2.5))
        if len(med) >= 2:
            g = gamma if gamma is not None else _median_gamma(good)
            try:
                c0 = fit_theory([m["N_train"] for m in med], [m["err_hs_rel"] for m in med], g)
                ns = np.linspace(x0, x1, 60)
                tpts = [(px(n), py(max(min(math.log10(eps_for_budget(n, g, c0)), y1), y0))) for n in ns]
                parts.append(_polyline(tpts, "#333", 1.5, dash=True))
            except (ValueError, OverflowError) as exc:
                log.debug("theory overlay skipped: %s", exc)
    parts.append("</svg>")
    svg = "\n".join(parts)
    if path is not None:
        Path(path).write_text(svg)
    return svg


def _median_gamma(rows):
    vals = [r.gamma_hat for r in rows if np.isfinite(r.gamma_hat) and r.gamma_hat > 0]
    return float(np.median(vals)) if vals else 1.0


def _polyline(points, color, width, dash=False):
    pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in points)
    extra = ' stroke-dasharray="6,4"' if dash else ""
    return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{extra}/>'
