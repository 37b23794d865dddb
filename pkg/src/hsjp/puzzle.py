"""Patch grids, Fisher-Yates permutations and shuffled mosaics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imaging import check_image, resize
from .rng import Rng


@dataclass(frozen=True)
class PatchGrid:
    n: int
    patch_side: int
    padded_size: int
    working_size: int

    @property
    def cells(self) -> int:
        return self.n * self.n


def make_grid(working_size: int, n: int) -> PatchGrid:
    """N x N grid of ``ceil(working_size / n)``-pixel cells over a zero-padded image."""
    if n < 1:
        raise ValueError(f"patches per side must be >= 1, got {n}")
    if n > working_size:
        raise ValueError(f"cannot split {working_size} px into {n} patches per side")
    side = -(-working_size // n)
    return PatchGrid(n=n, patch_side=side, padded_size=n * side, working_size=working_size)


@dataclass(frozen=True)
class Permutation:
    """``mapping[i]`` is the destination grid cell of original patch ``i``."""

    mapping: np.ndarray
    seed: int = 0

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        if m.ndim != 1 or not np.array_equal(np.sort(m), np.arange(m.size)):
            raise ValueError("mapping is not a bijection on [0, len)")
        m.setflags(write=False)
        object.__setattr__(self, "mapping", m)

    def __len__(self):
        return self.mapping.size

    @classmethod
    def identity(cls, n_items: int) -> "Permutation":
        return cls(np.arange(n_items))

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.mapping)
        inv[self.mapping] = np.arange(self.mapping.size)
        return Permutation(inv, self.seed)

    @property
    def side(self) -> int:
        side = math.isqrt(self.mapping.size)
        if side * side != self.mapping.size:
            raise ValueError(f"{self.mapping.size} items do not form a square grid")
        return side

    def to_record(self) -> str:
        """``perm N seed m0 m1 ...`` with N patches per side."""
        return " ".join(["perm", str(self.side), str(self.seed)] + [str(int(v)) for v in self.mapping])

    @classmethod
    def from_record(cls, line: str) -> "Permutation":
        parts = line.split()
        if len(parts) < 3 or parts[0] != "perm":
            raise ValueError(f"not a permutation record: {line!r}")
        n, seed = int(parts[1]), int(parts[2])
        mapping = [int(v) for v in parts[3:]]
        if len(mapping) != n * n:
            raise ValueError(f"record declares N={n} but carries {len(mapping)} entries")
        return cls(np.array(mapping), seed)


def fisher_yates(n_items: int, rng: Rng) -> Permutation:
    """Knuth-Durstenfeld shuffle: for j = n-1 .. 1 swap j with uniform k in [0, j]."""
    if n_items < 1:
        raise ValueError(f"need at least one item, got {n_items}")
    items = list(range(n_items))
    for j in range(n_items - 1, 0, -1):
        k = rng.randbelow(j + 1)
        items[j], items[k] = items[k], items[j]
    return Permutation(np.array(items), rng.seed)


def pad_to_grid(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Zero-pad right/bottom up to ``grid.padded_size``."""
    image = check_image(image)
    h, w, _ = image.shape
    if h != grid.working_size or w != grid.working_size:
        raise ValueError(f"image is {h}x{w}, grid expects {grid.working_size}x{grid.working_size}")
    pad = grid.padded_size - grid.working_size
    if pad == 0:
        return image
    return np.pad(image, ((0, pad), (0, pad), (0, 0)))


def assemble_shuffled(padded: np.ndarray, grid: PatchGrid, perm: Permutation) -> np.ndarray:
    """Move original patch ``i`` into grid cell ``perm.mapping[i]``."""
    padded = check_image(padded)
    size = grid.padded_size
    if padded.shape[:2] != (size, size):
        raise ValueError(f"padded image is {padded.shape[:2]}, grid expects {size}x{size}")
    if len(perm) != grid.cells:
        raise ValueError(f"permutation has {len(perm)} items, grid has {grid.cells} cells")
    n, side = grid.n, grid.patch_side
    c = padded.shape[2]
    # (row, py, col, px, c) -> (row, col, py, px, c) -> cells
    blocks = padded.reshape(n, side, n, side, c).transpose(0, 2, 1, 3, 4).reshape(n * n, side, side, c)
    out_blocks = np.empty_like(blocks)
    out_blocks[perm.mapping] = blocks
    return out_blocks.reshape(n, n, side, side, c).transpose(0, 2, 1, 3, 4).reshape(size, size, c)


def shuffle_image(image: np.ndarray, grid: PatchGrid, perm: Permutation) -> np.ndarray:
    """Pad, assemble, and resize the mosaic back to the working size."""
    mosaic = assemble_shuffled(pad_to_grid(image, grid), grid, perm)
    if grid.padded_size != grid.working_size:
        mosaic = resize(mosaic, grid.working_size, grid.working_size)
    return mosaic


def cell_centers(n: int, working_size: float) -> np.ndarray:
    """Centres of all grid cells in row-major order, shape ``(n*n, 2)`` as (x, y)."""
    idx = np.arange(n * n)
    col, row = idx % n, idx // n
    return np.stack([(2 * col + 1) * working_size / (2 * n),
                     (2 * row + 1) * working_size / (2 * n)], axis=1).astype(np.float64)


def shuffled_centers(grid: PatchGrid, perm: Permutation, working_size: float | None = None) -> np.ndarray:
    """Centre of the cell holding each original patch, ordered by original index."""
    if working_size is None:
        working_size = grid.working_size
    return cell_centers(grid.n, working_size)[perm.mapping]
