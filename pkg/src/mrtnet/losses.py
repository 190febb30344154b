"""Chamfer distance, the MR-VAE regularizer and evaluation metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .layers import softmax
from .tensor import Tensor, record

BACKENDS = ("brute", "tree")


@dataclass
class VAELossConfig:
    lam: float = 0.1
    delta_scale: float = 0.01
    latent_dim: int = 512
    mean_term: str = "norm"  # "norm" or "sum" of the batch-mean components
    cov_divisor: str = "n"  # "n" or "n-1"

    def __post_init__(self):
        if self.lam < 0 or self.delta_scale < 0:
            raise ValueError("lambda and delta scale must be non-negative")
        if self.mean_term not in ("norm", "sum"):
            raise ValueError(f"unknown mean term {self.mean_term!r}")
        if self.cov_divisor not in ("n", "n-1"):
            raise ValueError(f"unknown covariance divisor {self.cov_divisor!r}")


# -- nearest neighbours ------------------------------------------------------

def _brute_nn(queries: np.ndarray, targets: np.ndarray, chunk: int = 1024) -> np.ndarray:
    idx = np.empty(len(queries), dtype=np.int64)
    t2 = (targets * targets).sum(axis=1)
    for s in range(0, len(queries), chunk):
        q = queries[s:s + chunk]
        d2 = (q * q).sum(axis=1)[:, None] - 2 * q @ targets.T + t2[None, :]
        cand = np.argmin(d2, axis=1)
        # re-rank exactly among near-ties of the expanded form
        best = d2[np.arange(len(q)), cand]
        near = d2 <= best[:, None] + 1e-9 * (1 + np.abs(best[:, None]))
        for row in np.nonzero(near.sum(axis=1) > 1)[0]:
            cols = np.nonzero(near[row])[0]
            exact = ((targets[cols] - q[row]) ** 2).sum(axis=1)
            cand[row] = cols[np.argmin(exact)]
        idx[s:s + chunk] = cand
    return idx


class NNIndex:
    """Exact nearest-neighbour queries against a fixed target set.

    ``kind="brute"`` scans every target; ``kind="tree"`` uses a kd-tree over
    the distinct targets. Among duplicate targets the lowest index wins.
    """

    def __init__(self, targets, kind: str = "tree"):
        if kind not in BACKENDS:
            raise ValueError(f"unknown backend {kind!r}")
        self.targets = np.asarray(targets, dtype=np.float64)
        if self.targets.ndim != 2 or len(self.targets) == 0:
            raise ValueError("nearest-neighbour targets must be a non-empty 2-D array")
        self.kind = kind
        if kind == "tree":
            uniq, first = np.unique(self.targets, axis=0, return_index=True)
            self._first = first
            self._tree = cKDTree(uniq)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(queries, dtype=np.float64)
        if self.kind == "brute":
            idx = _brute_nn(q, self.targets)
        else:
            _, j = self._tree.query(q, k=1)
            idx = self._first[j]
        dist = np.sqrt(((q - self.targets[idx]) ** 2).sum(axis=1))
        return dist, idx


def exact_mean(values: np.ndarray) -> float:
    """Correctly rounded mean, independent of element order."""
    return math.fsum(values) / len(values)


def nn_distances(queries, targets, backend: str = "tree") -> tuple[np.ndarray, np.ndarray]:
    return NNIndex(targets, backend).query(queries)


# -- chamfer -----------------------------------------------------------------

def _as_batch(a) -> tuple[np.ndarray, bool]:
    arr = a.data if isinstance(a, Tensor) else np.asarray(a)
    if arr.ndim == 2:
        return arr[None], False
    return arr, True


def chamfer(x, y, backend: str = "tree") -> Tensor:
    """Symmetric mean nearest-neighbour Euclidean distance.

    ``x`` and ``y`` are ``[N, 3]`` or batched ``[B, N, 3]`` (Tensor or
    array). Batched inputs return the mean over the batch. The gradient
    reaches each point through its matched partner only.
    """
    xs, _ = _as_batch(x)
    ys, _ = _as_batch(y)
    if xs.shape[0] != ys.shape[0]:
        raise ValueError("chamfer: batch sizes differ")
    if xs.shape[1] == 0 or ys.shape[1] == 0:
        raise ValueError("chamfer: point sets must be non-empty")
    B = xs.shape[0]
    dtype = xs.dtype if np.issubdtype(xs.dtype, np.floating) else np.float64
    total = 0.0
    saved = []
    for b in range(B):
        xb = xs[b].astype(np.float64)
        yb = ys[b].astype(np.float64)
        dxy, ixy = nn_distances(xb, yb, backend)
        dyx, iyx = nn_distances(yb, xb, backend)
        total += exact_mean(dxy) + exact_mean(dyx)
        saved.append((xb, yb, dxy, ixy, dyx, iyx))
    value = np.asarray(total / B, dtype=dtype)

    def backward(g):
        gx = np.zeros(xs.shape)
        gy = np.zeros(ys.shape)
        for b, (xb, yb, dxy, ixy, dyx, iyx) in enumerate(saved):
            diff = xb - yb[ixy]
            with np.errstate(invalid="ignore", divide="ignore"):
                u = np.where(dxy[:, None] > 0, diff / dxy[:, None], 0.0) / len(xb)
            gx[b] += u
            np.add.at(gy[b], ixy, -u)
            diff = yb - xb[iyx]
            with np.errstate(invalid="ignore", divide="ignore"):
                u = np.where(dyx[:, None] > 0, diff / dyx[:, None], 0.0) / len(yb)
            gy[b] += u
            np.add.at(gx[b], iyx, -u)
        scale_ = float(g) / B
        out = []
        for t, grad in ((x, gx), (y, gy)):
            if isinstance(t, Tensor):
                out.append((grad * scale_).reshape(t.shape).astype(t.dtype))
            else:
                out.append(None)
        return out

    parents = tuple(t if isinstance(t, Tensor) else Tensor(np.asarray(t)) for t in (x, y))
    return record(value, parents, backward, "chamfer")


def directional_error(x, y, backend: str = "tree") -> float:
    """Mean distance from each point of ``x`` to its nearest point of ``y``.

    ``directional_error(pred, gt)`` is pred->GT; swap arguments for GT->pred.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) == 0 or len(y) == 0:
        raise ValueError("directional_error: point sets must be non-empty")
    return exact_mean(nn_distances(x, y, backend)[0])


def chamfer_value(x, y, backend: str = "tree") -> float:
    return directional_error(x, y, backend) + directional_error(y, x, backend)


# -- VAE regularizer ---------------------------------------------------------

def vae_reg(z: Tensor, cfg: VAELossConfig = VAELossConfig(), seed: Optional[int] = 0,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Moment-matching penalty ``||cov(z + d) - I||_F + ||mean(z + d)||``.

    ``d`` is Gaussian noise with variance ``cfg.delta_scale`` per element.
    With ``cfg.mean_term == "sum"`` the second term is the sum of the mean's
    components instead of its norm.
    """
    if z.ndim != 2:
        raise ValueError("vae_reg expects a [B, latent] batch")
    B, d = z.shape
    if B < 2:
        raise ValueError("vae_reg needs a batch of at least 2 encodings")
    w = z.data.astype(np.float64)
    if cfg.delta_scale > 0:
        rng = rng if rng is not None else np.random.default_rng(seed)
        w = w + rng.normal(0.0, np.sqrt(cfg.delta_scale), size=w.shape)
    mean = w.mean(axis=0)
    centered = w - mean
    div = B if cfg.cov_divisor == "n" else B - 1
    cov = centered.T @ centered / div
    resid = cov - np.eye(d)
    cov_term = np.sqrt((resid * resid).sum())
    if cfg.mean_term == "norm":
        mean_norm = np.sqrt((mean * mean).sum())
        mean_term = mean_norm
    else:
        mean_term = mean.sum()
    value = np.asarray(cov_term + mean_term, dtype=z.dtype)

    def backward(g):
        g = float(g)
        grad = np.zeros_like(w)
        if cov_term > 0:
            grad += 2.0 * centered @ (resid / cov_term) / div
        if cfg.mean_term == "norm":
            if mean_norm > 0:
                grad += (mean / mean_norm) / B
        else:
            grad += 1.0 / B
        return ((grad * g).astype(z.dtype),)

    return record(value, (z,), backward, "vae_reg")


@dataclass
class LossReport:
    total: float
    chamfer: float
    reg: float = 0.0


def vae_total_loss(x, reconstruction: Tensor, z: Tensor, cfg: VAELossConfig = VAELossConfig(),
                   seed: Optional[int] = 0, backend: str = "tree",
                   rng: Optional[np.random.Generator] = None) -> tuple[Tensor, LossReport]:
    """``Ch(x, D(Q(x))) + lambda * L_reg`` with both terms reported."""
    ch = chamfer(x, reconstruction, backend)
    if cfg.lam == 0:
        return ch, LossReport(float(ch.data), float(ch.data), 0.0)
    reg = vae_reg(z, cfg, seed=seed, rng=rng)
    total = ch + reg * cfg.lam
    return total, LossReport(float(total.data), float(ch.data), float(reg.data))


# -- classification and segmentation metrics --------------------------------

def accuracy(scores, labels) -> float:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    return float((scores.argmax(axis=-1) == labels).mean())


def tta_average(version_logits: Sequence[np.ndarray]) -> np.ndarray:
    """Mean class probabilities over test-time versions (``[V, B, K]`` -> ``[B, K]``)."""
    return np.mean([softmax(np.asarray(v, dtype=np.float64)) for v in version_logits], axis=0)


@dataclass
class MIoUReport:
    per_category: dict
    mean_class: float
    mean_instance: float
    shape_ious: list


def shape_iou(pred: np.ndarray, gt: np.ndarray, parts: Sequence[int]) -> float:
    """Mean IoU over ``parts``; parts absent from both prediction and truth are skipped."""
    ious = []
    for p in parts:
        inter = np.sum((pred == p) & (gt == p))
        union = np.sum((pred == p) | (gt == p))
        if union == 0:
            continue
        ious.append(inter / union)
    return float(np.mean(ious)) if ious else 1.0


def restrict_to_category(scores: np.ndarray, parts: Sequence[int]) -> np.ndarray:
    """Argmax over the category's own part labels only."""
    parts = np.asarray(sorted(parts))
    if parts.size == 0:
        raise ValueError("category label set is empty")
    return parts[np.asarray(scores)[..., parts].argmax(axis=-1)]


def miou(scores: Sequence[np.ndarray], labels: Sequence[np.ndarray], categories: Sequence,
         category_parts: Mapping) -> MIoUReport:
    """Part-segmentation IoU averaged per shape, then per category.

    ``scores[i]`` is ``[N_i, P]`` (or already-decided integer labels
    ``[N_i]``), ``categories[i]`` keys into ``category_parts``.
    """
    per_cat: dict = {}
    shape_ious = []
    for s, gt, cat in zip(scores, labels, categories):
        parts = category_parts[cat]
        if len(parts) == 0:
            raise ValueError(f"category {cat!r} has an empty label set")
        s = np.asarray(s)
        pred = s if s.ndim == 1 else restrict_to_category(s, parts)
        iou = shape_iou(pred, np.asarray(gt), parts)
        per_cat.setdefault(cat, []).append(iou)
        shape_ious.append(iou)
    per_category = {c: float(np.mean(v)) for c, v in per_cat.items()}
    return MIoUReport(
        per_category=per_category,
        mean_class=float(np.mean(list(per_category.values()))),
        mean_instance=float(np.mean(shape_ious)),
        shape_ious=shape_ious,
    )
