"""Mesh and point-cloud I/O, surface sampling, synthetic shapes and augmentation."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .spatial import gaussian_scale_sampler, is_power_of_two, normalize_cloud, uniform_scale_sampler

SYNTH_KINDS = ("sphere", "cube", "torus", "two-part-chair")
CHAIR_PARTS = {"seat": 0, "back": 1}


class FormatError(ValueError):
    """Malformed mesh or point file; the message names the offending line."""


@dataclass
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class LabeledCloud:
    points: np.ndarray
    label: int
    category: str
    part_labels: Optional[np.ndarray] = None
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))


# -- mesh parsing ------------------------------------------------------------

def _content_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def _parse_off(text: str) -> Mesh:
    lines = list(_content_lines(text))
    if not lines:
        raise FormatError("line 1: empty OFF file")
    lineno, tokens = lines[0]
    head = tokens[0]
    if not head.startswith("OFF"):
        raise FormatError(f"line {lineno}: expected OFF header, got {head!r}")
    # counts may share the header line ("OFF 8 12 0")
    rest = tokens[1:] if len(tokens) > 1 else None
    pos = 1
    if rest is None:
        if len(lines) < 2:
            raise FormatError(f"line {lineno}: missing vertex/face counts")
        lineno, rest = lines[1]
        pos = 2
    try:
        nv, nf = int(rest[0]), int(rest[1])
    except (ValueError, IndexError):
        raise FormatError(f"line {lineno}: malformed counts {' '.join(rest)!r}") from None
    if len(lines) < pos + nv + nf:
        raise FormatError(f"line {lines[-1][0]}: file ends before {nv} vertices and {nf} faces")
    verts = []
    for lineno, tokens in lines[pos:pos + nv]:
        try:
            verts.append([float(t) for t in tokens[:3]])
        except ValueError:
            raise FormatError(f"line {lineno}: malformed vertex") from None
        if len(tokens) < 3:
            raise FormatError(f"line {lineno}: vertex needs 3 coordinates")
    tris = []
    for lineno, tokens in lines[pos + nv:pos + nv + nf]:
        try:
            n = int(tokens[0])
            idx = [int(t) for t in tokens[1:1 + n]]
        except ValueError:
            raise FormatError(f"line {lineno}: malformed face") from None
        if len(idx) != n or n < 3:
            raise FormatError(f"line {lineno}: face declares {n} vertices")
        if min(idx) < 0 or max(idx) >= nv:
            raise FormatError(f"line {lineno}: face index out of range (0..{nv - 1})")
        tris.extend([idx[0], idx[i], idx[i + 1]] for i in range(1, n - 1))
    return Mesh(np.array(verts), np.array(tris, dtype=np.int64).reshape(-1, 3))


def _parse_obj(text: str) -> Mesh:
    verts: list = []
    faces: list = []
    for lineno, tokens in _content_lines(text):
        kind = tokens[0]
        if kind == "v":
            try:
                verts.append([float(t) for t in tokens[1:4]])
            except ValueError:
                raise FormatError(f"line {lineno}: malformed vertex") from None
            if len(tokens) < 4:
                raise FormatError(f"line {lineno}: vertex needs 3 coordinates")
        elif kind == "f":
            try:
                idx = [int(t.split("/")[0]) for t in tokens[1:]]
            except ValueError:
                raise FormatError(f"line {lineno}: malformed face") from None
            if len(idx) < 3:
                raise FormatError(f"line {lineno}: face needs at least 3 vertices")
            # OBJ is 1-based; negative indices count back from the latest vertex
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            if min(idx) < 0 or max(idx) >= len(verts):
                raise FormatError(f"line {lineno}: face index out of range")
            faces.extend([idx[0], idx[i], idx[i + 1]] for i in range(1, len(idx) - 1))
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def load_mesh(path, fmt: Optional[str] = None) -> Mesh:
    """Read an OFF or OBJ (``v``/``f`` records only) mesh; polygons are fan-triangulated."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    text = path.read_text()
    if fmt == "off":
        return _parse_off(text)
    if fmt == "obj":
        return _parse_obj(text)
    raise ValueError(f"unsupported mesh format {fmt!r}")


# -- sampling ----------------------------------------------------------------

def sample_triangles(vertices: np.ndarray, triangles: np.ndarray, n: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform surface samples and the triangle each came from."""
    mesh = Mesh(vertices, triangles)
    areas = mesh.areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    return a + u[:, None] * (b - a) + v[:, None] * (c - a), tri


def farthest_point_subsample(points: np.ndarray, n: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point selection; returns indices into ``points``."""
    if n > len(points):
        raise ValueError(f"cannot pick {n} of {len(points)} points")
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start
    dist = np.linalg.norm(points - points[start], axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def sample_surface(mesh: Mesh, n: int, seed: int = 0, oversample: int = 4) -> np.ndarray:
    """Evenly spread surface points: ``oversample * n`` area-weighted candidates,
    thinned to ``n`` by farthest-point selection."""
    if not is_power_of_two(n):
        raise ValueError(f"sample count {n} must be a power of two")
    rng = np.random.default_rng(seed)
    cand, _ = sample_triangles(mesh.vertices, mesh.triangles, oversample * n, rng)
    return cand[farthest_point_subsample(cand, n)]


# -- synthetic shapes --------------------------------------------------------

def _rotation_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _sphere(n, rng, radius=1.0):
    v = rng.normal(size=(n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True), None


def _cube(n, rng):
    face = rng.integers(6, size=n)
    axis, sign = face // 2, np.where(face % 2 == 0, -1.0, 1.0)
    pts = rng.uniform(-1, 1, size=(n, 3))
    pts[np.arange(n), axis] = sign
    return pts, None


def _torus(n, rng, major=1.0, minor=0.35):
    out = np.empty((0, 3))
    while len(out) < n:
        u = rng.uniform(0, 2 * np.pi, size=2 * n)
        v = rng.uniform(0, 2 * np.pi, size=2 * n)
        # accept with probability proportional to the local area element
        keep = rng.random(2 * n) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        out = np.vstack([out, np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)])
    return out[:n], None


def _chair(n, rng, seat_height=0.0, back_height=1.0):
    """Square seat at z = seat_height plus a back panel rising from its rear edge."""
    seat_area, back_area = 4.0, 2.0 * back_height
    is_back = rng.random(n) < back_area / (seat_area + back_area)
    pts = np.empty((n, 3))
    m = int(is_back.sum())
    pts[~is_back] = np.column_stack([rng.uniform(-1, 1, n - m), rng.uniform(-1, 1, n - m),
                                     np.full(n - m, seat_height)])
    pts[is_back] = np.column_stack([rng.uniform(-1, 1, m), np.full(m, 1.0),
                                    seat_height + rng.uniform(0, back_height, m)])
    labels = np.where(pts[:, 2] > seat_height, CHAIR_PARTS["back"], CHAIR_PARTS["seat"])
    return pts, labels


_GENERATORS = {"sphere": _sphere, "cube": _cube, "torus": _torus, "two-part-chair": _chair}


def synth_shape(kind: str, n: int, rng: np.random.Generator, jitter: tuple = (0.8, 1.2),
                rotate: bool = True, normalize: bool = True, oversample: int = 4) -> LabeledCloud:
    """One analytic surface, rotated about the up (z) axis, then scaled per axis.

    Like ``sample_surface``, ``oversample * n`` uniform candidates are thinned
    to ``n`` evenly spread points by farthest-point selection
    (``oversample=1`` keeps plain uniform samples).
    """
    if kind not in _GENERATORS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    pts, parts = _GENERATORS[kind](max(1, oversample) * n, rng)
    if oversample > 1:
        keep = farthest_point_subsample(pts, n, start=int(rng.integers(len(pts))))
        pts = pts[keep]
        parts = None if parts is None else parts[keep]
    if rotate:
        pts = pts @ _rotation_z(rng.uniform(0, 2 * np.pi)).T
    s = rng.uniform(jitter[0], jitter[1], size=3)
    pts = pts * s
    if normalize:
        pts = normalize_cloud(pts)
    return LabeledCloud(pts, SYNTH_KINDS.index(kind), kind, parts, s)


def synth_dataset(kinds: Sequence[str], count: int, n: int, seed: int = 0, **kw) -> list[LabeledCloud]:
    """``count`` shapes cycling through ``kinds`` (balanced when divisible).

    ``label`` is the position of the kind within ``kinds``.
    """
    if not is_power_of_two(n):
        raise ValueError(f"point count {n} must be a power of two")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        shape = synth_shape(kind, n, rng, **kw)
        shape.label = i % len(kinds)
        out.append(shape)
    return out


def pad_duplicate(points, target: int, seed: int = 0, labels=None):
    """Append uniformly chosen copies of existing points until ``target`` points.

    Returns ``(points, labels)``; ``labels`` is ``None`` when not given.
    """
    pts = np.asarray(points)
    n = len(pts)
    if n < 1:
        raise ValueError("cannot pad an empty cloud")
    if n > target:
        raise ValueError(f"cloud has {n} points, more than the target {target}")
    rng = np.random.default_rng(seed)
    extra = rng.integers(n, size=target - n)
    idx = np.concatenate([np.arange(n), extra])
    return pts[idx], (None if labels is None else np.asarray(labels)[idx])


def augment_scale(points, mode: str = "gaussian", seed: int = 0, std: float = 0.5,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Anisotropic scaling, then re-normalization.

    ``gaussian`` draws per-axis factors from N(1, std^2) (redrawing
    non-positive ones); ``uniform`` draws from [0.8, 1.2].
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    if mode == "gaussian":
        f = gaussian_scale_sampler(std)(rng)
    elif mode == "uniform":
        f = uniform_scale_sampler()(rng)
    elif mode == "none":
        f = np.ones(3)
    else:
        raise ValueError(f"unknown augmentation mode {mode!r}")
    return normalize_cloud(np.asarray(points) * f)


# -- XYZ text files ----------------------------------------------------------

def write_xyz(path, points, labels=None) -> None:
    """One ``x y z [label]`` line per point, 9 significant digits."""
    pts = np.asarray(points, dtype=np.float64)
    lines = []
    for i, p in enumerate(pts):
        row = f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}"
        if labels is not None:
            row += f" {int(labels[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_xyz(path) -> tuple[np.ndarray, Optional[np.ndarray]]:
    pts, labels = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        tokens = raw.split()
        if not tokens:
            continue
        if len(tokens) not in (3, 4):
            raise FormatError(f"line {lineno}: expected 'x y z [label]', got {raw!r}")
        try:
            pts.append([float(t) for t in tokens[:3]])
            if len(tokens) == 4:
                labels.append(int(tokens[3]))
        except ValueError:
            raise FormatError(f"line {lineno}: malformed value in {raw!r}") from None
    if not pts:
        raise FormatError("line 1: empty point file")
    if labels and len(labels) != len(pts):
        raise FormatError("labels present on some lines only")
    return np.array(pts), (np.array(labels) if labels else None)
