"""Level-by-level recovery of a Green's operator from forcing/solution pairs.

The learner queries an oracle ``F -> U`` (columns are forcings/solutions,
``U ~ w * G @ F`` with quadrature weight ``w = h^d``).  At each level it probes
one color class of boxes at a time with masked GP samples, subtracts what the
coarser levels already explain, and compresses every admissible block with a
single-pass randomized SVD.  Near-diagonal blocks at the finest level are
neglected by default.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import gp_sampling as gps
from .grid_pde import DENSE_CAP, DenseCapError, DiscreteOperator, Grid, dense_kernel, hs_norm, op_norm
from .hierarchy import BoxTree, Coloring, block_lists, build_tree, coloring, first_admissible_level
from .lowrank import LowRankBlock, lowrank_from_sketches

log = logging.getLogger(__name__)

NEAR_POLICIES = ("neglect", "dense_probe")


class InsufficientDiversityError(ValueError):
    def __init__(self, level, starved):
        self.level = level
        self.starved = starved
        boxes = ", ".join(str(b) for b in starved[:20])
        more = "" if len(starved) <= 20 else f" (+{len(starved) - 20} more)"
        super().__init__(f"insufficient probe diversity at level {level}: starved target boxes {boxes}{more}")


class MissingPairError(KeyError):
    pass


@dataclass
class PeelConfig:
    """Algorithm settings.  ``rank`` set selects fixed-rank mode, else ``eps`` drives adaptivity."""

    L: int
    W: int = 7
    eps: float | None = 1e-2
    rank: int | None = None
    oversampling: int = 10
    posterior_probes: int | None = None
    k_max: int = 16
    k_step: int = 2
    near_field: str = "neglect"
    kernel: gps.KernelSpec = field(default_factory=gps.KernelSpec)
    seed: int = 0
    hs_probes: int = 10

    def __post_init__(self):
        if self.near_field not in NEAR_POLICIES:
            raise ValueError(f"near_field must be one of {NEAR_POLICIES}, got {self.near_field!r}")
        if self.rank is None and self.eps is None:
            raise ValueError("give either a fixed rank or a target eps")
        if self.rank is None and not 0 < self.eps < 1:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        if self.rank is not None and self.rank < 0:
            raise ValueError("rank must be nonnegative")

    @property
    def adaptive(self) -> bool:
        return self.rank is None

    @property
    def sketch_width(self) -> int:
        return (self.k_max if self.adaptive else self.rank) + self.oversampling

    @property
    def n_posterior(self) -> int:
        if self.posterior_probes is not None:
            return self.posterior_probes
        return 10 if self.adaptive else 0

    def level_kernel(self, level: int) -> gps.KernelSpec:
        return self.kernel.scaled(2.0**-level)


@dataclass
class LevelSchedule:
    eps: float
    L: int
    l_min: int
    tolerances: dict
    kind: str = "geometric"


def tolerance_schedule(eps: float, L: int, l_min: int) -> LevelSchedule:
    """eps_l = eps * 2^(l - L): coarse levels are learned most accurately."""
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if L < l_min:
        raise ValueError("L must be >= l_min")
    tols = {lev: eps * 2.0 ** (lev - L) for lev in range(l_min, L + 1)}
    return LevelSchedule(eps, L, l_min, tols)


class SolveLedger:
    """Oracle solves by purpose; ``training`` excludes evaluation solves."""

    def __init__(self):
        self.counts = Counter()

    def add(self, purpose: str, k: int):
        self.counts[purpose] += int(k)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def training(self) -> int:
        return self.total - self.counts.get("evaluation", 0)

    def as_dict(self):
        return dict(sorted(self.counts.items()))


# -- oracles -----------------------------------------------------------------

class KernelOracle:
    """Oracle backed by an explicit kernel matrix: U = w * G @ F."""

    def __init__(self, G, grid: Grid):
        self.G = np.asarray(G)
        self.grid = grid
        self.weight = grid.weight
        self.size = grid.total
        self.solves = 0

    def __call__(self, F):
        F = np.asarray(F, dtype=float)
        self.solves += 1 if F.ndim == 1 else F.shape[1]
        return self.weight * (self.G @ F)


class RecordingOracle:
    """Wraps an oracle and keeps every (f, u) pair it serves."""

    def __init__(self, oracle):
        self.oracle = oracle
        self.grid = oracle.grid
        self.weight = oracle.weight
        self.size = oracle.size
        self.forcings, self.solutions = [], []

    def __call__(self, F):
        U = self.oracle(F)
        F2 = F[:, None] if F.ndim == 1 else F
        U2 = U[:, None] if U.ndim == 1 else U
        self.forcings.extend(F2.T.copy())
        self.solutions.extend(U2.T.copy())
        return U


class ReplayOracle:
    """Serves solutions from a stored dataset by exact forcing lookup."""

    def __init__(self, data: "TrainingSet"):
        self.grid = data.grid
        self.weight = data.grid.weight
        self.size = data.grid.total
        self._index = {f.tobytes(): j for j, f in enumerate(data.forcings)}
        self._U = data.solutions

    def __call__(self, F):
        F2 = F[:, None] if F.ndim == 1 else F
        out = np.empty_like(F2)
        for j in range(F2.shape[1]):
            key = np.ascontiguousarray(F2[:, j]).tobytes()
            if key not in self._index:
                raise MissingPairError(j)
            out[:, j] = self._U[self._index[key]]
        return out[:, 0] if F.ndim == 1 else out


@dataclass
class TrainingSet:
    grid: Grid
    forcings: np.ndarray   # (N, n^d)
    solutions: np.ndarray  # (N, n^d)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.forcings = np.atleast_2d(np.asarray(self.forcings, dtype=np.float64))
        self.solutions = np.atleast_2d(np.asarray(self.solutions, dtype=np.float64))
        if self.forcings.shape != self.solutions.shape or self.forcings.shape[1] != self.grid.total:
            raise ValueError(
                f"pair arrays {self.forcings.shape}/{self.solutions.shape} do not match grid size {self.grid.total}")

    def __len__(self):
        return self.forcings.shape[0]

    def check_consistency(self, op: DiscreteOperator, count: int = 3, rtol: float = 1e-8):
        """Spot-check K u = f on the first ``count`` pairs."""
        for j in range(min(count, len(self))):
            f, u = self.forcings[j], self.solutions[j]
            r = np.linalg.norm(op.K @ u - f)
            if r > rtol * max(np.linalg.norm(f), 1e-300):
                raise ValueError(f"pair {j} is not consistent with the operator (residual {r:.2e})")


def gp_dataset(op, count: int, kernel: gps.KernelSpec, seed: int = 0, purpose: int = gps.DATASET) -> TrainingSet:
    """Globally supported GP forcings and their solutions."""
    C = gps.covariance_matrix(op.grid, kernel, cap=max(DENSE_CAP, op.size))
    factor = gps.factorize(C, seed=seed)
    Fs = gps.draw(factor, count, (purpose,))
    Us = op(Fs.T).T if count else np.zeros_like(Fs)
    meta = {"kernel": kernel.kind, "length_scale": kernel.length_scale, "seed": seed}
    return TrainingSet(op.grid, Fs, Us, meta)


# -- the learned operator ----------------------------------------------------

class HierarchicalApprox:
    """Low-rank admissible blocks per level plus an optional dense near field.

    Blocks live in kernel units; ``apply`` multiplies by the quadrature weight.
    """

    def __init__(self, tree: BoxTree, near_policy: str = "neglect"):
        self.tree = tree
        self.grid = tree.grid
        self.weight = tree.grid.weight
        self.near_policy = near_policy
        self.blocks: dict[int, list[LowRankBlock]] = {}
        self.near: dict[tuple, np.ndarray] = {}
        self.schedule = None
        self.hs_estimate = None  # kernel units, from the learner's global probes

    @property
    def size(self):
        return self.grid.total

    def apply_kernel(self, F, max_level: int | None = None):
        """sum of learned blocks applied to F (no quadrature weight)."""
        F = np.asarray(F, dtype=float)
        single = F.ndim == 1
        F2 = F[:, None] if single else F
        out = np.zeros_like(F2)
        for lev, blocks in sorted(self.blocks.items()):
            if max_level is not None and lev > max_level:
                continue
            nodes = self.tree.levels[lev].nodes
            for b in blocks:
                if b.rank == 0:
                    continue
                coef = b.V.T @ F2[nodes[b.source]]
                out[nodes[b.target]] += b.U @ (b.s[:, None] * coef)
        if self.near and (max_level is None or max_level >= self.tree.L):
            nodes = self.tree.levels[self.tree.L].nodes
            for (t, s), B in self.near.items():
                out[nodes[t]] += B @ F2[nodes[s]]
        return out[:, 0] if single else out

    def apply(self, f):
        f = np.asarray(f, dtype=float)
        if f.shape[0] != self.size:
            raise ValueError(f"input length {f.shape[0]} does not match grid size {self.size}")
        return self.weight * self.apply_kernel(f)

    __call__ = apply

    def to_dense(self, cap: int = DENSE_CAP) -> np.ndarray:
        if self.size > cap:
            raise DenseCapError(f"n^d = {self.size} exceeds the dense cap {cap}")
        A = np.zeros((self.size, self.size))
        for lev, blocks in self.blocks.items():
            nodes = self.tree.levels[lev].nodes
            for b in blocks:
                if b.rank:
                    A[np.ix_(nodes[b.target], nodes[b.source])] = b.dense()
        nodes = self.tree.levels[self.tree.L].nodes
        for (t, s), B in self.near.items():
            A[np.ix_(nodes[t], nodes[s])] = B
        return A

    def block(self, level, t, s) -> LowRankBlock:
        for b in self.blocks[level]:
            if b.target == t and b.source == s:
                return b
        raise KeyError((level, t, s))

    def ranks(self):
        return {lev: [b.rank for b in blocks] for lev, blocks in self.blocks.items()}

    def save(self, path):
        arrays = {"meta": np.array([self.grid.d, self.grid.n, self.tree.L])}
        arrays["near_policy"] = np.array(self.near_policy)
        if self.hs_estimate is not None:
            arrays["hs_estimate"] = np.array(self.hs_estimate)
        for lev, blocks in self.blocks.items():
            for i, b in enumerate(blocks):
                key = f"b_{lev}_{b.target}_{b.source}"
                arrays[key + "_U"], arrays[key + "_s"], arrays[key + "_V"] = b.U, b.s, b.V
        for (t, s), B in self.near.items():
            arrays[f"n_{t}_{s}"] = B
        np.savez_compressed(path, **arrays)

    @classmethod
    def load(cls, path):
        from .grid_pde import Grid
        with np.load(path) as z:
            d, n, L = (int(v) for v in z["meta"])
            approx = cls(build_tree(Grid(d, n), L), str(z["near_policy"]))
            if "hs_estimate" in z.files:
                approx.hs_estimate = float(z["hs_estimate"])
            for key in z.files:
                parts = key.split("_")
                if parts[0] == "b" and parts[-1] == "U":
                    lev, t, s = int(parts[1]), int(parts[2]), int(parts[3])
                    stem = key[:-2]
                    approx.blocks.setdefault(lev, []).append(
                        LowRankBlock(z[stem + "_U"], z[stem + "_s"], z[stem + "_V"], t, s))
                elif parts[0] == "n":
                    approx.near[(int(parts[1]), int(parts[2]))] = z[key]
        for blocks in approx.blocks.values():
            blocks.sort(key=lambda b: (b.target, b.source))
        return approx


# -- the algorithm -----------------------------------------------------------

@dataclass
class LevelPlan:
    level: int
    coloring: Coloring
    admissible: tuple
    near: tuple
    interactions: dict


def _plans(tree: BoxTree, W: int):
    lists = block_lists(tree)
    l_min = first_admissible_level(lists)
    plans = {}
    for bl in lists:
        if l_min is None or bl.level < l_min:
            continue
        plans[bl.level] = LevelPlan(bl.level, coloring(tree, bl.level, W), bl.admissible, bl.near, bl.interactions)
    return l_min, plans


def expected_solves(grid: Grid, config: PeelConfig) -> dict:
    """Closed-form ledger: colors x probes per level, plus HS and near-field probes."""
    tree = build_tree(grid, config.L)
    l_min, plans = _plans(tree, config.W)
    counts = Counter()
    if l_min is None:
        return dict(counts)
    if config.adaptive:
        counts["hs_estimate"] = config.hs_probes
    for lev, plan in plans.items():
        counts[f"level_{lev}_sketch"] = plan.coloring.ncolors * config.sketch_width
        if config.n_posterior:
            counts[f"level_{lev}_posterior"] = plan.coloring.ncolors * config.n_posterior
    if config.near_field == "dense_probe":
        counts["near_field"] = plans[config.L].coloring.ncolors * tree.levels[config.L].box_size
    return dict(sorted(counts.items()))


def _box_factor(tree: BoxTree, level: int, config: PeelConfig):
    nodes = tree.levels[level].nodes[0]
    C = gps.covariance_matrix(tree.grid, config.level_kernel(level), support=nodes)
    return gps.factorize(C, seed=config.seed)


def hs_estimate(oracle, config: PeelConfig, ledger: SolveLedger) -> float:
    """Frobenius norm of the kernel from a randomized trace estimate (counted solves)."""
    q = config.hs_probes
    Omega = gps.standard_normal(config.seed, (gps.HS_ESTIMATE,), q, oracle.size).T
    U = oracle(Omega) / oracle.weight
    ledger.add("hs_estimate", q)
    return float(np.sqrt(np.mean(np.sum(U**2, axis=0))))


def _level_probes(tree, plan: LevelPlan, config: PeelConfig):
    """Per-box probe content and the stacked masked forcing matrix for one level."""
    info = tree.levels[plan.level]
    factor = _box_factor(tree, plan.level, config)
    m, q = config.sketch_width, config.n_posterior
    sketch, post = {}, {}
    for s in range(info.nboxes):
        sketch[s] = gps.draw(factor, m, (gps.SKETCH, plan.level, s)).T
        post[s] = gps.draw(factor, q, (gps.POSTERIOR, plan.level, s)).T if q else np.zeros((info.box_size, 0))
    classes = plan.coloring.classes
    F = np.zeros((tree.grid.total, len(classes) * (m + q)))
    col_of = {}
    for ci, (c, boxes) in enumerate(classes.items()):
        base = ci * (m + q)
        col_of[c] = base
        for s in boxes:
            F[info.nodes[s], base:base + m] = sketch[s]
            F[info.nodes[s], base + m:base + m + q] = post[s]
    return sketch, post, F, col_of


def peel_level(approx: HierarchicalApprox, plan: LevelPlan, oracle, config: PeelConfig,
               ledger: SolveLedger, tol_block: float | None = None) -> list[LowRankBlock]:
    """Learn every admissible block of one level; coarser levels must already be in ``approx``."""
    tree = approx.tree
    lev = plan.level
    info = tree.levels[lev]
    m, q = config.sketch_width, config.n_posterior
    sketch, post, F, col_of = _level_probes(tree, plan, config)
    ncol = plan.coloring.ncolors
    U = oracle(F)
    ledger.add(f"level_{lev}_sketch", ncol * m)
    if q:
        ledger.add(f"level_{lev}_posterior", ncol * q)
    R = U / oracle.weight - approx.apply_kernel(F, max_level=lev - 1)
    colors = plan.coloring.colors

    def sketch_of(t, s):
        base = col_of[colors[s]]
        rows = R[info.nodes[t]]
        return rows[:, base:base + m], rows[:, base + m:base + m + q]

    k = config.k_max if config.adaptive else config.rank
    blocks = []
    for t, s in plan.admissible:
        Y, post_out = sketch_of(t, s)
        Z, _ = sketch_of(s, t)
        blk = lowrank_from_sketches(
            Y, Z.T, sketch[t].T, k, tol=tol_block, k_step=config.k_step,
            post_in=post[s] if q else None, post_out=post_out if q else None)
        blk.target, blk.source = t, s
        if tol_block is not None:
            blk.info["tol"] = tol_block
        blocks.append(blk)
    return blocks


def learn_near_field(approx: HierarchicalApprox, plan: LevelPlan, oracle, config: PeelConfig,
                     ledger: SolveLedger):
    """Dense finest-level near blocks from per-box indicator probes (beyond the neglect policy)."""
    tree = approx.tree
    info = tree.levels[plan.level]
    bs = info.box_size
    classes = plan.coloring.classes
    F = np.zeros((tree.grid.total, len(classes) * bs))
    col_of = {}
    for ci, (c, boxes) in enumerate(classes.items()):
        col_of[c] = ci * bs
        for s in boxes:
            F[info.nodes[s], ci * bs + np.arange(bs)] = 1.0
    U = oracle(F)
    ledger.add("near_field", F.shape[1])
    R = U / oracle.weight - approx.apply_kernel(F)
    for t, s in plan.near:
        base = col_of[plan.coloring.colors[s]]
        approx.near[(t, s)] = R[info.nodes[t], base:base + bs].copy()


def learn(oracle, config: PeelConfig, grid: Grid | None = None):
    """Run the peeling algorithm against ``oracle``; returns (approx, ledger)."""
    grid = grid or oracle.grid
    tree = build_tree(grid, config.L)
    l_min, plans = _plans(tree, config.W)
    approx = HierarchicalApprox(tree, config.near_field)
    ledger = SolveLedger()
    if l_min is None:
        log.warning("no admissible blocks with L=%d; nothing to learn", config.L)
        return approx, ledger
    schedule, hs = None, None
    if config.adaptive:
        hs = hs_estimate(oracle, config, ledger)
        schedule = tolerance_schedule(config.eps, config.L, l_min)
    for lev in range(l_min, config.L + 1):
        plan = plans[lev]
        tol_block = None
        if schedule is not None:
            tol_block = schedule.tolerances[lev] * hs / np.sqrt(max(len(plan.admissible), 1))
        approx.blocks[lev] = peel_level(approx, plan, oracle, config, ledger, tol_block)
        log.debug("level %d: %d blocks, max rank %d", lev, len(approx.blocks[lev]),
                  max((b.rank for b in approx.blocks[lev]), default=0))
    if config.near_field == "dense_probe":
        learn_near_field(approx, plans[config.L], oracle, config, ledger)
    approx.schedule = schedule
    approx.hs_estimate = hs
    return approx, ledger


# -- data-driven (passive) variant --------------------------------------------

def learn_from_dataset(data: TrainingSet, config: PeelConfig):
    """Learn from stored pairs.

    If the dataset holds every forcing the active algorithm would request, the
    run is replayed from it and matches :func:`learn` exactly.  Otherwise each
    target box's interaction row is recovered by least squares from the
    unmasked pairs, and admissible parts are truncated to low rank.
    """
    try:
        approx, ledger = learn(ReplayOracle(data), config, data.grid)
        return approx, {"mode": "replay", "ledger": ledger.as_dict(), "pairs": len(data)}
    except MissingPairError:
        pass
    return _learn_least_squares(data, config)


def _learn_least_squares(data: TrainingSet, config: PeelConfig, rank_rtol: float = 1e-10):
    grid = data.grid
    tree = build_tree(grid, config.L)
    l_min, plans = _plans(tree, config.W)
    approx = HierarchicalApprox(tree, config.near_field)
    F = data.forcings.T
    U = data.solutions.T / grid.weight
    fnorm2 = np.sum(F**2, axis=0)
    total_energy = float(fnorm2.sum())
    diagnostics = {"mode": "least_squares", "pairs": len(data), "box_energy": {}, "design_rank": {}}
    if l_min is None:
        return approx, diagnostics
    hs = float(np.sqrt(grid.total * np.mean(np.sum(U**2, axis=0) / np.where(fnorm2 > 0, fnorm2, np.inf))))
    schedule = tolerance_schedule(config.eps, config.L, l_min) if config.adaptive else None
    for lev in range(l_min, config.L + 1):
        plan = plans[lev]
        info = tree.levels[lev]
        energy = [float(np.sum(F[nodes] ** 2)) / total_energy if total_energy else 0.0 for nodes in info.nodes]
        diagnostics["box_energy"][lev] = energy
        R = U - approx.apply_kernel(F, max_level=lev - 1)
        tol = None
        if schedule is not None:
            tol = schedule.tolerances[lev] * hs / np.sqrt(max(len(plan.admissible), 1))
        starved, ranks, blocks = [], {}, []
        solved = {}
        for t in range(info.nboxes):
            sources = plan.interactions.get(t, [])
            cols = np.concatenate([info.nodes[s] for s, _ in sources])
            X = F[cols]
            sv = np.linalg.svd(X, compute_uv=False)
            r = int(np.sum(sv > rank_rtol * sv[0])) if sv.size and sv[0] > 0 else 0
            ranks[t] = r
            if r < len(cols):
                starved.append(t)
                continue
            M = sla.lstsq(X.T, R[info.nodes[t]].T)[0].T
            off = 0
            for s, _ in sources:
                w = len(info.nodes[s])
                solved[(t, s)] = M[:, off:off + w]
                off += w
        diagnostics["design_rank"][lev] = ranks
        if starved:
            raise InsufficientDiversityError(lev, starved)
        for t, s in plan.admissible:
            blocks.append(_truncate(solved[(t, s)], config, tol, t, s))
        approx.blocks[lev] = blocks
        if lev == config.L and config.near_field == "dense_probe":
            for t, s in plan.near:
                approx.near[(t, s)] = solved[(t, s)].copy()
    return approx, diagnostics


def _truncate(A, config: PeelConfig, tol, t, s) -> LowRankBlock:
    Ua, sa, Vta = sla.svd(A, full_matrices=False)
    if tol is None:
        k = min(config.rank, len(sa))
    else:
        k = int(np.sum(sa > tol))
        k = min(k, config.k_max)
    return LowRankBlock(Ua[:, :k], sa[:k], Vta[:k].T, t, s, tol_met=tol is None or k == len(sa) or sa[k] <= tol)


# -- evaluation ---------------------------------------------------------------

def evaluate_exact(approx: HierarchicalApprox, op_or_kernel, cap: int = DENSE_CAP) -> dict:
    """Relative HS and operator-norm errors against the exact discrete kernel."""
    grid = approx.grid
    G = dense_kernel(op_or_kernel, cap) if isinstance(op_or_kernel, DiscreteOperator) else np.asarray(op_or_kernel)
    if G.shape[0] > cap:
        raise DenseCapError(f"n^d = {G.shape[0]} exceeds the dense cap {cap}")
    E = G - approx.to_dense(cap)
    ref = hs_norm(G, grid)
    err_hs = hs_norm(E, grid) / ref
    err_op = op_norm(E, grid) / ref
    far = E * ~_near_mask(approx.tree)
    return {"err_hs_rel": err_hs, "err_op_rel": err_op, "err_far_hs_rel": hs_norm(far, grid) / ref,
            "norm_ratio_ok": err_op <= err_hs * (1 + 1e-8)}


def _near_mask(tree: BoxTree) -> np.ndarray:
    info = tree.levels[tree.L]
    mask = np.zeros((tree.grid.total,) * 2, dtype=bool)
    for t, s in block_lists(tree)[tree.L].near:
        mask[np.ix_(info.nodes[t], info.nodes[s])] = True
    return mask


def near_field_floor(G, tree: BoxTree) -> dict:
    """Error left by neglecting the finest near blocks, relative to ||G||_HS."""
    grid = tree.grid
    N = np.where(_near_mask(tree), G, 0.0)
    ref = hs_norm(G, grid)
    return {"hs": hs_norm(N, grid) / ref, "op": op_norm(N, grid) / ref}


def evaluate_sampled(approx, forcings, solutions) -> dict:
    """Test-set errors ||u - apply(f)|| / ||f||, raw and divided by an HS-norm estimate.

    Rows of ``forcings``/``solutions`` are test pairs.  The HS estimate is the
    learner's own (global Gaussian probes) when present, scaled by the
    quadrature weight so ``*_rel`` is on the same scale as ``err_op_rel``.
    Otherwise it falls back to sqrt(n * mean ||u||^2 / ||f||^2), which is
    unbiased only for white test forcings.
    """
    F = np.atleast_2d(forcings)
    Us = np.atleast_2d(solutions)
    if F.shape[0] == 0:
        raise ValueError("empty test set")
    pred = approx.apply(F.T).T
    fn = np.linalg.norm(F, axis=1)
    ratios = np.linalg.norm(Us - pred, axis=1) / fn
    if approx.hs_estimate:
        hs, source = approx.weight * approx.hs_estimate, "learner"
    else:
        hs = float(np.sqrt(F.shape[1] * np.mean((np.linalg.norm(Us, axis=1) / fn) ** 2)))
        source = "test-set"
    return {"mean": float(ratios.mean()), "max": float(ratios.max()), "hs_estimate": hs, "hs_source": source,
            "mean_rel": float(ratios.mean()) / hs, "max_rel": float(ratios.max()) / hs}


def symmetry_defect(approx: HierarchicalApprox) -> dict:
    """Per level, max ||B_ts - B_st^T||_F relative to the level tolerance (measured, not enforced)."""
    out = {}
    for lev, blocks in approx.blocks.items():
        index = {(b.target, b.source): b for b in blocks}
        worst = 0.0
        for (t, s), b in index.items():
            if t < s:
                worst = max(worst, float(np.linalg.norm(b.dense() - index[(s, t)].dense().T)))
        out[lev] = worst
    return out


def synthetic_operator(tree: BoxTree, rank: int, rng, near_scale: float = 0.0):
    """Symmetric kernel built from exact rank-``rank`` admissible blocks.

    Returns ``(G, blocks)`` where ``blocks[(level, t, s)]`` is the dense true
    block.  The finest near field is zero unless ``near_scale`` is nonzero.
    """
    n = tree.grid.total
    G = np.zeros((n, n))
    truth = {}
    for bl in block_lists(tree):
        nodes = tree.levels[bl.level].nodes
        for t, s in bl.admissible:
            if t > s:
                continue
            B = rng.standard_normal((len(nodes[t]), rank)) @ rng.standard_normal((rank, len(nodes[s])))
            G[np.ix_(nodes[t], nodes[s])] = B
            G[np.ix_(nodes[s], nodes[t])] = B.T
            truth[(bl.level, t, s)] = B
            truth[(bl.level, s, t)] = B.T
    if near_scale:
        nodes = tree.levels[tree.L].nodes
        for t, s in block_lists(tree)[tree.L].near:
            if t <= s:
                B = near_scale * rng.standard_normal((len(nodes[t]), len(nodes[s])))
                G[np.ix_(nodes[t], nodes[s])] = B
                G[np.ix_(nodes[s], nodes[t])] = B.T
    return G, truth
