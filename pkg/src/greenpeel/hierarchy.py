"""Dyadic box trees on the node lattice, admissible block lists, and colorings."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .grid_pde import Grid


class TreeError(ValueError):
    pass


@dataclass(frozen=True)
class Level:
    level: int
    per_dim: int           # boxes per dimension
    box_coords: np.ndarray  # (nboxes, d) integer box coordinates
    nodes: tuple            # node index arrays, one per box (sorted)

    @property
    def nboxes(self):
        return len(self.nodes)

    @property
    def box_size(self):
        return len(self.nodes[0])


class BoxTree:
    """Levels 0..L of dyadic boxes; box ids are C-order ravels of box coordinates."""

    def __init__(self, grid: Grid, L: int):
        if L < 0:
            raise TreeError(f"number of levels L={L} must be nonnegative")
        if 2**L > grid.n or grid.n % 2**L:
            raise TreeError(
                f"n={grid.n} must be divisible by 2^L={2**L} (dyadic split of {L} levels)")
        self.grid = grid
        self.L = L
        multi = grid.multi_index(np.arange(grid.total))
        levels = []
        for lev in range(L + 1):
            per_dim = 2**lev
            width = grid.n // per_dim
            bshape = (per_dim,) * grid.d
            owner = np.ravel_multi_index(tuple((multi // width).T), bshape)
            order = np.argsort(owner, kind="stable")
            counts = np.bincount(owner, minlength=per_dim**grid.d)
            nodes = tuple(np.split(order, np.cumsum(counts)[:-1]))
            coords = np.stack(np.unravel_index(np.arange(per_dim**grid.d), bshape), axis=-1)
            levels.append(Level(lev, per_dim, coords, nodes))
        self.levels = levels

    @property
    def d(self):
        return self.grid.d

    def parent(self, level: int, box: int) -> int:
        c = self.levels[level].box_coords[box] // 2
        return int(np.ravel_multi_index(tuple(c), (2 ** (level - 1),) * self.d))

    def distance(self, level: int, t: int, s: int) -> int:
        bc = self.levels[level].box_coords
        return int(np.abs(bc[t] - bc[s]).max())


def build_tree(grid: Grid, L: int) -> BoxTree:
    return BoxTree(grid, L)


@dataclass(frozen=True)
class BlockList:
    level: int
    admissible: tuple  # ((t, s), ...) sorted
    near: tuple

    @cached_property
    def interactions(self):
        """Map target -> sorted list of (source, is_admissible) with near parents."""
        out = {}
        for t, s in self.admissible:
            out.setdefault(t, []).append((s, True))
        for t, s in self.near:
            out.setdefault(t, []).append((s, False))
        return {t: sorted(v) for t, v in out.items()}


def block_lists(tree: BoxTree) -> list[BlockList]:
    """Admissible and near pairs per level (strong admissibility, Chebyshev distance >= 2)."""
    d = tree.d
    result = [BlockList(0, (), ((0, 0),))]
    offsets = np.stack(np.meshgrid(*[np.arange(-3, 4)] * d, indexing="ij"), -1).reshape(-1, d)
    for lev in range(1, tree.L + 1):
        info = tree.levels[lev]
        per_dim = info.per_dim
        bshape = (per_dim,) * d
        adm, near = [], []
        for t in range(info.nboxes):
            ct = info.box_coords[t]
            cand = ct + offsets
            ok = ((cand >= 0) & (cand < per_dim)).all(axis=1)
            cand = cand[ok]
            # parents near at the coarser level
            pnear = np.abs(cand // 2 - ct // 2).max(axis=1) <= 1
            cand = cand[pnear]
            dist = np.abs(cand - ct).max(axis=1)
            ids = np.ravel_multi_index(tuple(cand.T), bshape)
            for s, dd in sorted(zip(ids.tolist(), dist.tolist())):
                (adm if dd >= 2 else near).append((t, s))
        result.append(BlockList(lev, tuple(adm), tuple(near)))
    return result


def first_admissible_level(lists: list[BlockList]) -> int | None:
    for bl in lists:
        if bl.admissible:
            return bl.level
    return None


@dataclass(frozen=True)
class Coloring:
    level: int
    W: int
    colors: np.ndarray  # color per box

    @cached_property
    def classes(self):
        """Nonempty color classes as {color: array of boxes}, ascending colors."""
        out = {}
        for box, c in enumerate(self.colors.tolist()):
            out.setdefault(c, []).append(box)
        return {c: np.array(v) for c, v in sorted(out.items())}

    @property
    def ncolors(self):
        return len(self.classes)


def coloring(tree: BoxTree, level: int, W: int = 7) -> Coloring:
    """Color boxes by per-dimension box coordinate mod W."""
    if W < 1:
        raise ValueError("coloring window W must be positive")
    coords = tree.levels[level].box_coords
    colors = np.ravel_multi_index(tuple((coords % W).T), (W,) * tree.d)
    return Coloring(level, W, colors)


def coloring_is_valid(tree: BoxTree, col: Coloring, radius: int = 3) -> bool:
    """Every target sees at most one box of each color within Chebyshev distance ``radius``."""
    coords = tree.levels[col.level].box_coords
    for t in range(len(coords)):
        close = np.abs(coords - coords[t]).max(axis=1) <= radius
        seen = col.colors[close]
        if len(np.unique(seen)) != len(seen):
            return False
    return True
