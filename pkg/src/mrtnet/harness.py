"""Training, evaluation, generation, probing and ablation runs."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .config import TRAINABLE_TASKS, ConfigError, RunConfig
from .data import LabeledCloud, augment_scale, load_mesh, read_xyz, sample_surface, synth_dataset, write_xyz
from .layers import Adam, Linear, Module, lr_schedule, softmax, softmax_cross_entropy
from .losses import VAELossConfig, accuracy, chamfer, directional_error, miou, vae_total_loss
from .multires import NetworkSpec, build_network, cloud_batch, extract_unsup_features
from .spatial import (
    AxisSet,
    gaussian_scale_sampler,
    identity_scale_sampler,
    kd_sort,
    log2_exact,
    normalize_cloud,
    rp_sort,
    sort_cloud,
    tta_orderings,
    uniform_scale_sampler,
)
from .tensor import Tensor, backward, no_grad, precision

TREE_FOR_TASK = {"classifier": "prob_kd", "vae": "kd", "decoder": "kd", "segmenter": "rp"}
MESH_SUFFIXES = (".off", ".obj")


class TrainingDiverged(RuntimeError):
    """A non-finite loss; ``epoch``, ``step`` and ``seed`` locate the batch."""

    def __init__(self, epoch: int, step: int, seed: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch} step {step} (batch seed {seed})")
        self.epoch, self.step, self.seed, self.value = epoch, step, seed, value


# -- datasets ----------------------------------------------------------------

@dataclass
class Dataset:
    clouds: list
    classes: list
    category_parts: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.clouds)


def _mesh_split(root: Path, split: str, n: int, seed: int) -> Dataset:
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ConfigError(f"[data] no class directories under {root}")
    clouds = []
    for label, name in enumerate(classes):
        folder = root / name / split
        for i, path in enumerate(sorted(folder.glob("*")) if folder.is_dir() else []):
            if path.suffix.lower() not in MESH_SUFFIXES:
                continue
            pts = normalize_cloud(sample_surface(load_mesh(path), n, seed=seed + i))
            clouds.append(LabeledCloud(pts, label, name))
    return Dataset(clouds, classes)


def load_dataset(cfg: RunConfig, split: str) -> Dataset:
    """Synthetic shapes, or ``<dir>/<class>/{train,test}/*.off|obj`` meshes."""
    d = cfg.data
    count = d.train_count if split == "train" else d.test_count
    if d.source == "synthetic":
        seed = int(np.random.SeedSequence([cfg.seeds.data, 0 if split == "train" else 1]).generate_state(1)[0])
        clouds = synth_dataset(d.kinds, count, d.n_points, seed=seed, jitter=(d.jitter_low, d.jitter_high))
        parts = {"two-part-chair": [0, 1]} if "two-part-chair" in d.kinds else {}
        return Dataset(clouds, list(d.kinds), parts)
    if cfg.run.task == "segmenter":
        raise ConfigError("[data] segmentation needs per-point labels; only synthetic chairs provide them")
    ds = _mesh_split(Path(d.source), split, d.n_points, cfg.seeds.data)
    return Dataset(ds.clouds[:count] if count else ds.clouds, ds.classes)


def output_dim(cfg: RunConfig, ds: Dataset) -> int:
    if cfg.run.task == "classifier":
        return len(ds.classes)
    if cfg.run.task == "segmenter":
        return 1 + max(max(p) for p in ds.category_parts.values())
    return 3


# -- per-batch preparation ---------------------------------------------------

def shared_axes(cfg: RunConfig) -> Optional[AxisSet]:
    if cfg.run.task != "segmenter":
        return None
    return AxisSet.random(log2_exact(cfg.data.n_points), seed=cfg.seeds.tree)


def _augment(points: np.ndarray, cfg: RunConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.aug.mode == "none":
        return points
    return augment_scale(points, cfg.aug.mode, std=cfg.aug.std, rng=rng)


def prepare_cloud(cloud: LabeledCloud, cfg: RunConfig, rng: np.random.Generator,
                  axes: Optional[AxisSet]) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Augment and spatially sort one training cloud; part labels follow the order."""
    pts = _augment(cloud.points, cfg, rng)
    kind = TREE_FOR_TASK[cfg.run.task]
    sc = sort_cloud(pts, kind, seed=int(rng.integers(2**31)), axes=axes)
    parts = None if cloud.part_labels is None else cloud.part_labels[sc.order]
    return sc.sorted_points, parts


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing singleton joins the previous batch (BN needs 2)."""
    perm = rng.permutation(n)
    out = [perm[i:i + size] for i in range(0, n, size)]
    if len(out) > 1 and len(out[-1]) == 1:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


# -- model construction ------------------------------------------------------

def build_model(cfg: RunConfig, out_dim: int) -> tuple[Module, NetworkSpec]:
    spec = cfg.network_spec(out_dim)
    return build_network(spec, np.random.default_rng(cfg.seeds.init)), spec


def model_from_checkpoint(ckpt: Checkpoint) -> Module:
    model = build_network(ckpt.spec, np.random.default_rng(0))
    ckpt.restore(model)
    return model.eval()


def config_from_checkpoint(ckpt: Checkpoint) -> RunConfig:
    if not ckpt.config_text:
        raise ConfigError("checkpoint carries no run manifest")
    return RunConfig.from_text(ckpt.config_text)


def _dtype(cfg: RunConfig):
    return np.float64 if cfg.run.precision == "float64" else np.float32


def _ckpt_dtype(ckpt: Checkpoint):
    return _dtype(config_from_checkpoint(ckpt)) if ckpt.config_text else np.float32


# -- training ----------------------------------------------------------------

def epoch_lr(cfg: RunConfig, epoch: int) -> float:
    if cfg.optim.halve_every == 0:
        return cfg.optim.base_lr
    return lr_schedule(epoch, cfg.optim.base_lr, cfg.optim.halve_every)


@dataclass
class EpochReport:
    epoch: int
    lr: float
    loss: float
    components: dict
    seconds: float


@dataclass
class TrainResult:
    model: Module
    spec: NetworkSpec
    history: list
    checkpoint: Optional[Path]
    adam: object
    axes: Optional[AxisSet] = None

    def column(self, name: str) -> list:
        return [h.loss if name == "loss" else h.components[name] for h in self.history]


def _batch_loss(model: Module, task: str, x: Tensor, batch: Sequence[LabeledCloud],
                parts: Sequence, sorted_pts: Sequence, cfg: RunConfig,
                noise_rng: np.random.Generator) -> tuple[Tensor, dict]:
    if task == "classifier":
        logits = model(x)
        labels = [c.label for c in batch]
        loss = softmax_cross_entropy(logits, labels)
        return loss, {"cross_entropy": loss.item(), "accuracy": accuracy(logits.data, labels)}
    if task == "segmenter":
        scores = model(x)
        labels = np.stack(parts)
        loss = softmax_cross_entropy(scores, labels)
        return loss, {"cross_entropy": loss.item(), "accuracy": accuracy(scores.data, labels)}
    recon, z = model(x)
    lc = cfg.loss
    loss_cfg = VAELossConfig(lam=lc.lam, delta_scale=lc.delta_scale, latent_dim=z.shape[1],
                             mean_term=lc.mean_term, cov_divisor=lc.cov_divisor)
    target = np.stack(sorted_pts)
    loss, rep = vae_total_loss(target, recon, z, loss_cfg, backend=lc.chamfer_backend, rng=noise_rng)
    return loss, {"chamfer": rep.chamfer, "reg": rep.reg}


def _write_curves(out: Path, history: Sequence[EpochReport]) -> None:
    keys = sorted({k for h in history for k in h.components})
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "loss", *keys, "seconds"])
        for h in history:
            w.writerow([h.epoch, repr(h.lr), repr(h.loss), *(repr(h.components.get(k, "")) for k in keys),
                        f"{h.seconds:.3f}"])
    header = ["epoch", "lr", "loss", *keys]
    rows = [[str(h.epoch), f"{h.lr:.3g}", f"{h.loss:.6f}", *(f"{h.components.get(k, float('nan')):.6f}" for k in keys)]
            for h in history]
    (out / "loss_table.txt").write_text(format_table(header, rows))


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    fmt = lambda r: "  ".join(str(c).rjust(w) for c, w in zip(r, widths))
    return "\n".join([fmt(header), fmt(["-" * w for w in widths]), *map(fmt, rows)]) + "\n"


def train(cfg: RunConfig, out_dir=None, train_set: Optional[Dataset] = None,
          test_set: Optional[Dataset] = None,
          on_epoch: Optional[Callable[[EpochReport, Module], None]] = None) -> TrainResult:
    """Run ``cfg.optim.epochs`` epochs of shuffled mini-batch Adam training.

    Writes the manifest, per-epoch checkpoints and the loss curve into
    ``out_dir`` (default ``cfg.run.output_dir``; ``False`` disables output).
    With ``test_set`` given, classifier epochs also record the test-time
    averaged accuracy (``test_accuracy``, ``cfg.aug.tta`` versions) and the
    single-version accuracy (``test_accuracy_single``).
    """
    task = cfg.run.task
    if task not in TRAINABLE_TASKS:
        raise ConfigError(f"[run] task {task!r} cannot be trained here (image encoders are out of scope)")
    out = None if out_dir is False else Path(out_dir or cfg.run.output_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "manifest.ini")
    with precision(_dtype(cfg)):
        train_set = train_set or load_dataset(cfg, "train")
        model, spec = build_model(cfg, output_dim(cfg, train_set))
        axes = shared_axes(cfg)
        opt = Adam(model.parameters(), lr=cfg.optim.base_lr, beta1=cfg.optim.beta1,
                   beta2=cfg.optim.beta2, eps=cfg.optim.eps)
        history = []
        ckpt_path = None
        for epoch in range(cfg.optim.epochs):
            t0 = time.perf_counter()
            opt.lr = epoch_lr(cfg, epoch)
            model.train()
            sums: dict = {}
            total, weight = 0.0, 0
            order_rng = np.random.default_rng([cfg.seeds.data, epoch])
            for step, idx in enumerate(_batches(len(train_set), cfg.optim.batch_size, order_rng)):
                batch_seed = int(np.random.SeedSequence([cfg.seeds.tree, epoch, step]).generate_state(1)[0])
                rng = np.random.default_rng(batch_seed)
                batch = [train_set.clouds[i] for i in idx]
                prepared = [prepare_cloud(c, cfg, rng, axes) for c in batch]
                sorted_pts = [p for p, _ in prepared]
                x = cloud_batch(sorted_pts)
                noise_rng = np.random.default_rng([cfg.seeds.noise, epoch, step])
                loss, comps = _batch_loss(model, task, x, batch, [q for _, q in prepared], sorted_pts,
                                          cfg, noise_rng)
                value = loss.item()
                if not math.isfinite(value):
                    if out is not None:
                        (out / "abort.txt").write_text(
                            f"epoch={epoch} step={step} batch_seed={batch_seed} loss={value}\n")
                    raise TrainingDiverged(epoch, step, batch_seed, value)
                opt.zero_grad()
                backward(loss)
                opt.step()
                n = len(idx)
                total += value * n
                weight += n
                for k, v in comps.items():
                    sums[k] = sums.get(k, 0.0) + v * n
            comps = {k: v / weight for k, v in sums.items()}
            if test_set is not None and task == "classifier":
                comps["test_accuracy"] = classify(model, test_set, cfg).accuracy
                if cfg.aug.tta > 1:
                    comps["test_accuracy_single"] = classify(model, test_set, cfg, tta=1).accuracy
            report = EpochReport(epoch, opt.lr, total / weight, comps, time.perf_counter() - t0)
            history.append(report)
            if on_epoch is not None:
                on_epoch(report, model)
            last = epoch == cfg.optim.epochs - 1
            if out is not None and (last or (cfg.run.checkpoint_every and (epoch + 1) % cfg.run.checkpoint_every == 0)):
                ckpt = Checkpoint.capture(model, spec, opt.state, epoch + 1,
                                          None if axes is None else axes.axes, cfg.to_text())
                ckpt_path = out / "checkpoint.ckpt"
                ckpt.save(ckpt_path)
                _write_curves(out, history)
        if out is not None and not history:
            ckpt_path = out / "checkpoint.ckpt"
            Checkpoint.capture(model, spec, opt.state, 0, None if axes is None else axes.axes,
                               cfg.to_text()).save(ckpt_path)
        model.eval()
    return TrainResult(model, spec, history, ckpt_path, opt.state, axes)


# -- evaluation --------------------------------------------------------------

def _scale_sampler(cfg: RunConfig):
    if cfg.aug.mode == "gaussian":
        return gaussian_scale_sampler(cfg.aug.std)
    if cfg.aug.mode == "uniform":
        return uniform_scale_sampler()
    return identity_scale_sampler


def _shape_seed(cfg: RunConfig, index: int) -> int:
    return int(np.random.SeedSequence([cfg.seeds.tree, 7, index]).generate_state(1)[0])


def _forward_eval(model: Module, clouds: Sequence[np.ndarray], batch_size: int) -> list[np.ndarray]:
    outs = []
    with no_grad():
        for s in range(0, len(clouds), batch_size):
            y = model(cloud_batch(clouds[s:s + batch_size]))
            if isinstance(y, tuple):
                y = y[0]
            outs.extend(np.asarray(y.data, dtype=np.float64))
    return outs


@dataclass
class ClassifyReport:
    accuracy: float
    probabilities: np.ndarray
    predictions: np.ndarray


def classify(model: Module, ds: Dataset, cfg: RunConfig, tta: Optional[int] = None,
             sampler=None) -> ClassifyReport:
    """Mean softmax over ``tta`` scaled and re-sorted versions of each test shape."""
    tta = cfg.aug.tta if tta is None else tta
    sampler = sampler or (_scale_sampler(cfg) if tta > 1 else identity_scale_sampler)
    was_training = model.training
    model.eval()
    versions = []
    for i, c in enumerate(ds.clouds):
        versions.extend(sc.sorted_points for _, sc in tta_orderings(c.points, tta, sampler, _shape_seed(cfg, i)))
    logits = np.stack(_forward_eval(model, versions, max(cfg.optim.batch_size, 1)))
    probs = softmax(logits).reshape(len(ds), tta, -1).mean(axis=1)
    model.train(was_training)
    labels = np.array([c.label for c in ds.clouds])
    return ClassifyReport(accuracy(probs, labels), probs, probs.argmax(axis=1))


@dataclass
class ReconstructionReport:
    rows: list  # (category, pred->GT x100, GT->pred x100, chamfer x100, shapes)
    per_shape: list

    def table(self) -> str:
        header = ["category", "pred->GT x100", "GT->pred x100", "chamfer x100", "shapes"]
        body = [[r[0], f"{r[1]:.4f}", f"{r[2]:.4f}", f"{r[3]:.4f}", str(r[4])] for r in self.rows]
        return format_table(header, body)

    @property
    def mean_chamfer(self) -> float:
        return float(np.mean([s[3] for s in self.per_shape]))


def reconstruct(model: Module, ds: Dataset, cfg: RunConfig) -> ReconstructionReport:
    model.eval()
    targets = [kd_sort(c.points).sorted_points for c in ds.clouds]
    preds = _forward_eval(model, targets, max(cfg.optim.batch_size, 1))
    backend = cfg.loss.chamfer_backend
    per_shape = []
    for c, t, p in zip(ds.clouds, targets, preds):
        a = directional_error(p, t, backend) * 100
        b = directional_error(t, p, backend) * 100
        per_shape.append((c.category, a, b, a + b))
    rows = []
    for cat in sorted({s[0] for s in per_shape}):
        sel = np.array([s[1:] for s in per_shape if s[0] == cat])
        rows.append((cat, *sel.mean(axis=0), len(sel)))
    return ReconstructionReport(rows, per_shape)


def segment(model: Module, ds: Dataset, cfg: RunConfig, axes: AxisSet, tta: Optional[int] = None):
    """Per-point scores averaged over scaled versions, mapped back to input order."""
    tta = cfg.aug.tta if tta is None else tta
    sampler = _scale_sampler(cfg) if tta > 1 else identity_scale_sampler
    model.eval()
    scores, labels, cats = [], [], []
    for i, c in enumerate(ds.clouds):
        orders, clouds = [], []
        for v in range(tta):
            rng = np.random.default_rng([_shape_seed(cfg, i), v])
            scaled = normalize_cloud(c.points * sampler(rng))
            sc = rp_sort(scaled, axes, seed=int(rng.integers(2**31)))
            orders.append(sc.order)
            clouds.append(sc.sorted_points)
        outs = _forward_eval(model, clouds, max(cfg.optim.batch_size, 1))
        acc = np.zeros_like(outs[0])
        for order, out in zip(orders, outs):
            acc[order] += softmax(out)
        scores.append(acc / tta)
        labels.append(c.part_labels)
        cats.append(c.category)
    return miou(scores, labels, cats, ds.category_parts)


def _checkpoint_axes(ckpt: Checkpoint, cfg: RunConfig) -> AxisSet:
    """Rebuild the run's shared split directions from its tree seed.

    The stored float32 copy is only a cross-check: rounding it breaks the
    unit-norm contract, while the seed reproduces the float64 originals.
    """
    axes = shared_axes(cfg)
    stored = ckpt.axes
    if stored is not None and (stored.shape != axes.axes.shape or not np.allclose(stored, axes.axes, atol=1e-6)):
        raise ConfigError("checkpoint split axes do not match the manifest's tree seed")
    return axes


@dataclass
class MetricReport:
    task: str
    values: dict
    table: str = ""


def evaluate(checkpoint_path, tta: Optional[int] = None, test_set: Optional[Dataset] = None) -> MetricReport:
    """Score a checkpoint on its run's test split. The checkpoint is only read."""
    ckpt = Checkpoint.load(checkpoint_path)
    cfg = config_from_checkpoint(ckpt)
    if cfg.run.task != ckpt.spec.task:
        raise ConfigError(f"checkpoint task {ckpt.spec.task!r} does not match manifest task {cfg.run.task!r}")
    with precision(_dtype(cfg)):
        model = model_from_checkpoint(ckpt)
        ds = test_set or load_dataset(cfg, "test")
        task = ckpt.spec.task
        if task == "classifier":
            if ckpt.spec.output_dim != len(ds.classes):
                raise ConfigError("dataset class count does not match the checkpoint")
            single = classify(model, ds, cfg, tta=1)
            multi = classify(model, ds, cfg, tta=tta)
            n = cfg.aug.tta if tta is None else tta
            values = {"accuracy": multi.accuracy, "accuracy_single": single.accuracy, "tta": n}
            table = format_table(["metric", "value"], [["accuracy (tta=%d)" % n, f"{multi.accuracy:.4f}"],
                                                       ["accuracy (tta=1)", f"{single.accuracy:.4f}"]])
            return MetricReport(task, values, table)
        if task in ("vae", "decoder"):
            if task == "decoder":
                raise ConfigError("decoder checkpoints have no encoder to reconstruct with; use generate")
            rep = reconstruct(model, ds, cfg)
            values = {"chamfer_x100": rep.mean_chamfer, "rows": rep.rows}
            return MetricReport(task, values, rep.table())
        axes = _checkpoint_axes(ckpt, cfg)
        rep = segment(model, ds, cfg, axes, tta)
        rows = [[c, f"{v:.4f}"] for c, v in sorted(rep.per_category.items())]
        rows += [["mean (class)", f"{rep.mean_class:.4f}"], ["mean (instance)", f"{rep.mean_instance:.4f}"]]
        return MetricReport(task, {"miou_class": rep.mean_class, "miou_instance": rep.mean_instance,
                                   "per_category": rep.per_category}, format_table(["category", "mIoU"], rows))


# -- generation and interpolation -------------------------------------------

def _decoder_of(model: Module) -> Module:
    return getattr(model, "decoder", model)


def generate(checkpoint_path, count: int, seed: int, out_dir) -> list[Path]:
    """Decode ``count`` draws of ``z ~ N(0, I)``; each XYZ line carries its output index."""
    ckpt = Checkpoint.load(checkpoint_path)
    if ckpt.spec.task not in ("vae", "decoder"):
        raise ConfigError(f"generate needs a vae or decoder checkpoint, got {ckpt.spec.task!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = _ckpt_dtype(ckpt)
    with precision(dtype):
        decoder = _decoder_of(model_from_checkpoint(ckpt))
        z = np.random.default_rng(seed).normal(size=(count, ckpt.spec.latent_dim))
        with no_grad():
            pts = decoder(Tensor(z.astype(dtype))).data
    paths = []
    for i, p in enumerate(pts):
        path = out / f"generated_{i:04d}.xyz"
        write_xyz(path, p, np.arange(len(p)))
        paths.append(path)
    return paths


def _encode(model: Module, points: np.ndarray) -> np.ndarray:
    with no_grad():
        return model.encoder(cloud_batch([kd_sort(normalize_cloud(points)).sorted_points])).data


def interpolate(checkpoint_path, shape_a: np.ndarray, shape_b: np.ndarray, steps: int,
                out_dir=None) -> tuple[list[np.ndarray], list[float]]:
    """Decode ``(1 - t) Q(A) + t Q(B)`` for ``steps`` evenly spaced ``t``.

    Returns the decoded clouds and, for reporting only, the Chamfer distance
    of each to the reconstruction of ``A``.
    """
    if steps < 2:
        raise ValueError("interpolate needs steps >= 2")
    ckpt = Checkpoint.load(checkpoint_path)
    if ckpt.spec.task != "vae":
        raise ConfigError("interpolate needs a vae checkpoint")
    dtype = _ckpt_dtype(ckpt)
    with precision(dtype):
        model = model_from_checkpoint(ckpt)
        za, zb = _encode(model, shape_a), _encode(model, shape_b)
        ts = np.linspace(0.0, 1.0, steps)
        zs = np.concatenate([(1 - t) * za + t * zb for t in ts])
        with no_grad():
            clouds = list(model.decoder(Tensor(zs.astype(dtype))).data.astype(np.float64))
    distances = [chamfer(c, clouds[0]).item() for c in clouds]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, c in enumerate(clouds):
            write_xyz(out / f"interp_{i:03d}.xyz", c, np.arange(len(c)))
    return clouds, distances


# -- linear probe ------------------------------------------------------------

@dataclass
class ProbeRow:
    encoder: str
    train_accuracy: float
    test_accuracy: float
    feature_dim: int


def _features(encoder: Module, ds: Dataset, batch: int) -> np.ndarray:
    pts = [kd_sort(c.points).sorted_points for c in ds.clouds]
    out = []
    for s in range(0, len(pts), batch):
        out.append(extract_unsup_features(encoder, cloud_batch(pts[s:s + batch])))
    return np.concatenate(out)


def linear_probe(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
                 classes: int, epochs: int, batch_size: int, seed: int) -> tuple[float, float]:
    """One linear layer, Adam 1e-3 halved every 5 epochs, cross-entropy."""
    rng = np.random.default_rng(seed)
    layer = Linear(train_x.shape[1], classes, rng)
    opt = Adam(layer.parameters(), lr=1e-3)
    dtype = layer.weight.data.dtype
    for epoch in range(epochs):
        opt.lr = lr_schedule(epoch, 1e-3, 5)
        for idx in _batches(len(train_x), batch_size, rng):
            loss = softmax_cross_entropy(layer(Tensor(train_x[idx].astype(dtype))), train_y[idx])
            opt.zero_grad()
            backward(loss)
            opt.step()
    with no_grad():
        tr = accuracy(layer(Tensor(train_x.astype(dtype))).data, train_y)
        te = accuracy(layer(Tensor(test_x.astype(dtype))).data, test_y)
    return tr, te


def probe(checkpoint_path, cfg: Optional[RunConfig] = None, epochs: int = 30,
          train_set: Optional[Dataset] = None, test_set: Optional[Dataset] = None) -> list[ProbeRow]:
    """Linear probe on frozen VAE-encoder features, with an untrained-encoder baseline row.

    ``cfg`` describes the labeled dataset (default: the checkpoint's manifest
    switched to the classifier task).
    """
    ckpt = Checkpoint.load(checkpoint_path)
    if ckpt.spec.task != "vae":
        raise ConfigError("probe needs a vae checkpoint")
    cfg = cfg or config_from_checkpoint(ckpt).with_overrides({"run.task": "classifier"})
    rows = []
    with precision(_dtype(cfg)):
        train_set = train_set or load_dataset(cfg, "train")
        test_set = test_set or load_dataset(cfg, "test")
        trained = model_from_checkpoint(ckpt)
        untrained = build_network(ckpt.spec, np.random.default_rng(cfg.seeds.init + 1)).eval()
        ytr = np.array([c.label for c in train_set.clouds])
        yte = np.array([c.label for c in test_set.clouds])
        for name, model in (("trained", trained), ("untrained", untrained)):
            ftr = _features(model.encoder, train_set, cfg.optim.batch_size)
            fte = _features(model.encoder, test_set, cfg.optim.batch_size)
            tr, te = linear_probe(ftr, ytr, fte, yte, len(train_set.classes), epochs,
                                  cfg.optim.batch_size, cfg.seeds.init)
            rows.append(ProbeRow(name, tr, te, ftr.shape[1]))
    return rows


def probe_table(rows: Sequence[ProbeRow]) -> str:
    return format_table(["encoder", "train acc", "test acc", "features"],
                        [[r.encoder, f"{r.train_accuracy:.4f}", f"{r.test_accuracy:.4f}", str(r.feature_dim)]
                         for r in rows])


# -- ablation ----------------------------------------------------------------

ABLATION_VARIANTS = ("full", "single-res", "filters/4", "fc-decoder")


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    if variant == "full":
        return cfg.with_overrides({"model.variant": "full"})
    if variant == "single-res":
        return cfg.with_overrides({"model.variant": "single-res"})
    if variant == "filters/4":
        return cfg.with_overrides({"model.variant": "full", "model.quarter_filters": True})
    if variant == "fc-decoder":
        if cfg.run.task != "vae":
            raise ConfigError("the fc-decoder variant applies to the vae task only")
        return cfg.with_overrides({"model.variant": "fc-decoder"})
    raise ConfigError(f"unknown ablation variant {variant!r}; choose from {ABLATION_VARIANTS}")


@dataclass
class AblationRow:
    variant: str
    parameters: int
    final_loss: float
    metric: float
    metric_name: str
    epochs_to_95: Optional[int]
    seeds: tuple
    curve: list


def ablate(cfg: RunConfig, variants: Sequence[str] = ("full", "single-res"), out_dir=None) -> list[AblationRow]:
    """Train each variant with identical data and seeds and compare."""
    rows = []
    with precision(_dtype(cfg)):
        train_set = load_dataset(cfg, "train")
        test_set = load_dataset(cfg, "test")
    for variant in variants:
        vcfg = variant_config(cfg, variant)
        sub = False if out_dir is None else Path(out_dir) / variant.replace("/", "-")
        res = train(vcfg, sub, train_set, test_set if cfg.run.task == "classifier" else None)
        seeds = (cfg.seeds.data, cfg.seeds.init, cfg.seeds.tree, cfg.seeds.noise)
        key = "cross_entropy" if cfg.run.task in ("classifier", "segmenter") else "chamfer"
        curve = [h.components[key] for h in res.history]
        with precision(_dtype(cfg)):
            if cfg.run.task == "classifier":
                metric, name = classify(res.model, test_set, vcfg).accuracy, "test accuracy"
                reached = [h.epoch + 1 for h in res.history if h.components.get("test_accuracy", 0) >= 0.95]
            elif cfg.run.task == "vae":
                metric, name = reconstruct(res.model, test_set, vcfg).mean_chamfer, "chamfer x100"
                reached = []
            else:
                metric, name = segment(res.model, test_set, vcfg, res.axes).mean_instance, "mIoU"
                reached = []
        rows.append(AblationRow(variant, res.model.num_parameters(), curve[-1] if curve else float("nan"),
                                metric, name, reached[0] if reached else None, seeds, curve))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.txt").write_text(ablation_table(rows))
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> str:
    header = ["variant", "params", "final train loss", "metric", "value", "epochs to 95%", "seeds"]
    body = [[r.variant, str(r.parameters), f"{r.final_loss:.6f}", r.metric_name, f"{r.metric:.4f}",
             "-" if r.epochs_to_95 is None else str(r.epochs_to_95), "/".join(map(str, r.seeds))] for r in rows]
    return format_table(header, body)


# -- sort dump ---------------------------------------------------------------

def read_points(path, n: Optional[int] = None, seed: int = 0) -> np.ndarray:
    """XYZ points as-is, or ``n`` surface samples from an OFF/OBJ mesh."""
    path = Path(path)
    if path.suffix.lower() in MESH_SUFFIXES:
        return sample_surface(load_mesh(path), n or 1024, seed=seed)
    pts, _ = read_xyz(path)
    return pts


def sort_dump(points: np.ndarray, kind: str, seed: int, out_path, axes_seed: Optional[int] = None) -> np.ndarray:
    """Write the normalized cloud in tree order; each line's label is its input index."""
    pts = normalize_cloud(points)
    axes = None
    if kind == "rp":
        axes = AxisSet.random(log2_exact(len(pts)), seed=seed if axes_seed is None else axes_seed)
    sc = sort_cloud(pts, kind, seed=seed, axes=axes)
    write_xyz(out_path, sc.sorted_points, sc.order)
    return sc.order
