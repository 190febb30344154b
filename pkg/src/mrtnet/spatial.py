"""Point-cloud normalization and locality-preserving orderings.

All sorters build a complete binary space-partitioning tree level by level:
at each level every block of ``2**(D - level)`` consecutive indices is sorted
along its split direction and cut in half. Leaf order is the point order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

TREE_KINDS = ("kd", "prob_kd", "rp")


def is_power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def log2_exact(n: int) -> int:
    if not is_power_of_two(n):
        raise ValueError(f"point count {n} is not a power of two")
    return n.bit_length() - 1


def normalize_cloud(points) -> np.ndarray:
    """Center the bounding box at the origin and scale its longest side to 1."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError(f"expected a non-empty N x 3 array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = float((hi - lo).max())
    if extent == 0.0:
        return np.zeros_like(pts)
    return (pts - (lo + hi) / 2) / extent


@dataclass
class AxisSet:
    """Split directions for rp-trees.

    In shared mode level ``l`` of every tree uses ``axes[l % len(axes)]``.
    Otherwise each split draws one of the axes from the tree's seeded generator.
    """

    axes: np.ndarray
    shared: bool = True
    seed: Optional[int] = None

    def __post_init__(self):
        self.axes = np.atleast_2d(np.asarray(self.axes, dtype=np.float64))
        if self.axes.shape[1] != 3 or len(self.axes) == 0:
            raise ValueError("axes must be a non-empty list of 3-vectors")
        norms = np.linalg.norm(self.axes, axis=1)
        if np.any(np.abs(norms - 1) > 1e-9):
            raise ValueError("split axes must be unit vectors")

    @classmethod
    def random(cls, count: int, seed: int, shared: bool = True) -> "AxisSet":
        """``count`` directions uniform on the unit sphere."""
        rng = np.random.default_rng(seed)
        v = rng.normal(size=(count, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return cls(v, shared=shared, seed=seed)

    @classmethod
    def canonical(cls) -> "AxisSet":
        return cls(np.eye(3), shared=True)


@dataclass
class SortedCloud:
    points: np.ndarray
    order: np.ndarray
    tree_kind: str
    seed: Optional[int] = None

    @property
    def sorted_points(self) -> np.ndarray:
        return self.points[self.order]

    def __len__(self) -> int:
        return len(self.order)


def _build_order(points: np.ndarray, pick_direction: Callable[[int, np.ndarray], np.ndarray]) -> np.ndarray:
    """Generic level-wise tree construction.

    ``pick_direction(level, blocks)`` receives the points of every block at
    a level as ``[n_blocks, block_size, 3]`` and returns two projection arrays
    of that leading shape: the split key and the tie-break key.
    """
    n = len(points)
    depth = log2_exact(n)
    order = np.arange(n)
    for level in range(depth):
        size = n >> level
        blocks = points[order].reshape(-1, size, 3)
        key, tie = pick_direction(level, blocks)
        block_id = np.repeat(np.arange(n // size), size)
        perm = np.lexsort((order, tie.reshape(-1), key.reshape(-1), block_id))
        order = order[perm]
    return order


def kd_sort(points) -> SortedCloud:
    """Vanilla kd-tree: split axis cycles x, y, z with depth.

    Ties on the split axis fall back to the next cyclic axis, then to the
    original index.
    """
    pts = np.asarray(points, dtype=np.float64)

    def pick(level, blocks):
        axis = level % 3
        return blocks[..., axis], blocks[..., (axis + 1) % 3]

    return SortedCloud(pts, _build_order(pts, pick), "kd")


def split_axis_pdf(spans) -> np.ndarray:
    """Softmax of per-axis spans: the probabilistic kd-tree's split distribution."""
    s = np.asarray(spans, dtype=np.float64)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def prob_kd_sort(points, seed: int) -> SortedCloud:
    """kd-tree whose split axis is drawn from :func:`split_axis_pdf` per split."""
    pts = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)

    def pick(level, blocks):
        spans = blocks.max(axis=1) - blocks.min(axis=1)
        probs = split_axis_pdf(spans)
        u = rng.random(len(blocks))
        axes = np.minimum((probs.cumsum(axis=1) < u[:, None]).sum(axis=1), 2)
        rows = np.arange(len(blocks))
        key = blocks[rows, :, axes]
        tie = blocks[rows, :, (axes + 1) % 3]
        return key, tie

    return SortedCloud(pts, _build_order(pts, pick), "prob_kd", seed)


def rp_sort(points, axes: AxisSet, seed: int = 0) -> SortedCloud:
    """Random-projection tree over the directions in ``axes``.

    Ties on the projection fall back to the projection onto the next axis in
    the set, then to the original index; with canonical axes in shared mode
    this is exactly :func:`kd_sort`.
    """
    pts = np.asarray(points, dtype=np.float64)
    dirs = axes.axes
    rng = np.random.default_rng(seed)

    def pick(level, blocks):
        if axes.shared:
            a = dirs[level % len(dirs)]
            b = dirs[(level + 1) % len(dirs)]
            return blocks @ a, blocks @ b
        choice = rng.integers(len(dirs), size=len(blocks))
        a = dirs[choice]
        b = dirs[(choice + 1) % len(dirs)]
        return np.einsum("bsi,bi->bs", blocks, a), np.einsum("bsi,bi->bs", blocks, b)

    return SortedCloud(pts, _build_order(pts, pick), "rp", seed)


def gaussian_scale_sampler(std: float = 0.5) -> Callable[[np.random.Generator], np.ndarray]:
    """Per-axis factors from N(1, std**2), redrawing non-positive values."""

    def sample(rng: np.random.Generator) -> np.ndarray:
        f = rng.normal(1.0, std, size=3)
        while np.any(f <= 0):
            bad = f <= 0
            f[bad] = rng.normal(1.0, std, size=int(bad.sum()))
        return f

    return sample


def uniform_scale_sampler(low: float = 0.8, high: float = 1.2) -> Callable[[np.random.Generator], np.ndarray]:
    def sample(rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(low, high, size=3)

    return sample


def identity_scale_sampler(rng: np.random.Generator) -> np.ndarray:
    return np.ones(3)


def tta_orderings(
    points,
    count: int = 16,
    scale_sampler: Callable[[np.random.Generator], np.ndarray] = gaussian_scale_sampler(),
    seed: int = 0,
) -> list[tuple[np.ndarray, SortedCloud]]:
    """Test-time versions: scale, re-normalize, then sort with a fresh seed.

    Each version ``i`` uses its own generator seeded with ``(seed, i)``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    pts = np.asarray(points, dtype=np.float64)
    versions = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        scaled = normalize_cloud(pts * scale_sampler(rng))
        tree_seed = int(rng.integers(2**31))
        versions.append((scaled, prob_kd_sort(scaled, tree_seed)))
    return versions


def sort_cloud(points, kind: str, seed: int = 0, axes: Optional[AxisSet] = None) -> SortedCloud:
    if kind == "kd":
        return kd_sort(points)
    if kind == "prob_kd":
        return prob_kd_sort(points, seed)
    if kind == "rp":
        if axes is None:
            raise ValueError("rp sorting needs an AxisSet")
        return rp_sort(points, axes, seed)
    raise ValueError(f"unknown tree kind {kind!r}; expected one of {TREE_KINDS}")
