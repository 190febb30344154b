"""Multiresolution features, MR-CONV blocks and the assembled networks."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .layers import BatchNorm, Conv1d, Linear, Module, pool_to, upsample_to
from .spatial import is_power_of_two, log2_exact
from .tensor import Tensor, concat_channels, get_default_dtype, no_grad, record, relu, reshape, tanh, transpose

TASKS = ("classifier", "vae", "decoder", "segmenter")
VARIANTS = ("full", "single-res")
DECODER_SCHEDULE = (512, 512, 256, 256, 128, 64, 64, 64)


def filter_schedule(depth: int, base: int = 16, cap: int = 1024) -> list[int]:
    """``base`` filters, doubling per layer until ``cap`` is reached."""
    out = []
    c = base
    for _ in range(depth):
        out.append(c)
        c = min(c * 2, cap)
    return out


def segmenter_schedule(depth: int, cap: int = 1024) -> list[int]:
    """Three layers of 32, three of 64, then doubling up to ``cap``."""
    head = [32, 32, 32, 64, 64, 64][:depth]
    tail = filter_schedule(depth - len(head), base=min(128, cap), cap=cap) if depth > 6 else []
    return head + tail


@dataclass
class MultiResFeature:
    f0: Tensor
    f1: Tensor
    f2: Tensor
    k: int

    @property
    def streams(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.f0, self.f1, self.f2

    @property
    def lengths(self) -> tuple[int, int, int]:
        return tuple(f.shape[2] for f in self.streams)

    @property
    def channels(self) -> tuple[int, int, int]:
        return tuple(f.shape[1] for f in self.streams)


def stream_lengths(length: int, k: int) -> tuple[int, int, int]:
    if length % (k * k):
        raise ValueError(f"length {length} is not divisible by k^2 = {k * k}")
    return length, length // k, length // (k * k)


def lift_to_multires(x: Tensor, k: int) -> MultiResFeature:
    """Three resolutions of a sorted point list by average pooling."""
    L0, L1, L2 = stream_lengths(x.shape[2], k)
    return MultiResFeature(x, pool_to(x, L1), pool_to(x, L2), k)


def mr_combine(f: MultiResFeature) -> tuple[Tensor, Tensor, Tensor]:
    """Cross-feed the three resolutions.

    ``f0' = f0 + up(f1)``, ``f1' = pool(f0) + f1 + up(f2)``,
    ``f2' = pool(f1) + f2`` where ``+`` is channel concatenation. The
    pool/upsample factors follow the actual stream lengths, so a stream
    frozen at length 1 receives a global average.
    """
    f0, f1, f2 = f.streams
    L0, L1, L2 = f.lengths
    g0 = concat_channels([f0, upsample_to(f1, L0)])
    g1 = concat_channels([pool_to(f0, L1), f1, upsample_to(f2, L1)])
    g2 = concat_channels([pool_to(f1, L2), f2])
    return g0, g1, g2


def _next_lengths(lengths: Sequence[int], transposed: bool) -> tuple[int, ...]:
    if transposed:
        return tuple(2 * L for L in lengths)
    # a stream already at length 1 stays frozen there
    return tuple(max(L // 2, 1) for L in lengths)


class MRConvBlock(Module):
    """mr_combine, then conv + batch norm + ReLU on each resolution.

    The convolution per stream is kernel-2/stride-2 when its length halves,
    transposed kernel-2/stride-2 when it doubles, and kernel-1 when it is
    frozen.
    """

    def __init__(self, c_in: int, c_out: int, in_lengths: Sequence[int], out_lengths: Sequence[int],
                 rng: np.random.Generator):
        super().__init__()
        self.in_lengths = tuple(in_lengths)
        self.out_lengths = tuple(out_lengths)
        self.convs = []
        for i, (mult, lin, lout) in enumerate(zip((2, 3, 2), in_lengths, out_lengths)):
            if lout == lin // 2 and lin > 1:
                conv = Conv1d(mult * c_in, c_out, 2, rng)
            elif lout == 2 * lin:
                conv = Conv1d(mult * c_in, c_out, 2, rng, transposed=True)
            elif lout == lin:
                conv = Conv1d(mult * c_in, c_out, 1, rng)
            else:
                raise ValueError(f"stream {i}: cannot map length {lin} to {lout}")
            self.convs.append(conv)
        self.norms = [BatchNorm(c_out) for _ in range(3)]

    def forward(self, f: MultiResFeature) -> MultiResFeature:
        if f.lengths != self.in_lengths:
            raise ValueError(f"block expects lengths {self.in_lengths}, got {f.lengths}")
        outs = [relu(bn(conv(g))) for g, conv, bn in zip(mr_combine(f), self.convs, self.norms)]
        return MultiResFeature(*outs, k=f.k)


def mr_conv_block(f: MultiResFeature, block: MRConvBlock) -> MultiResFeature:
    return block(f)


def mr_conv_t_block(f: MultiResFeature, block: MRConvBlock) -> MultiResFeature:
    if any(o != 2 * i for i, o in zip(block.in_lengths, block.out_lengths)):
        raise ValueError("mr_conv_t_block needs a block whose streams all double")
    return block(f)


@dataclass
class NetworkSpec:
    """Declarative description of one network.

    ``filters`` is the encoder schedule (one entry per MR-CONV block);
    ``decoder_filters`` the MR-CONV-T schedule. Empty schedules are filled
    with the defaults for ``task`` and ``n_points``.
    """

    task: str = "classifier"
    n_points: int = 1024
    k: int = 8
    filters: list = field(default_factory=list)
    decoder_filters: list = field(default_factory=list)
    head_channels: int = 128
    latent_dim: int = 512
    output_dim: int = 40
    tanh_output: bool = True
    variant: str = "full"
    skip_connections: bool = True
    base_filters: int = 16
    max_filters: int = 1024
    fc_hidden: int = 4096
    seed_length: int = 16

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.variant not in VARIANTS + ("fc-decoder",):
            raise ValueError(f"unknown variant {self.variant!r}")
        depth = log2_exact(self.n_points)
        if not self.filters:
            if self.task == "segmenter":
                self.filters = segmenter_schedule(depth, self.max_filters)
            else:
                self.filters = filter_schedule(depth, self.base_filters, self.max_filters)
        self.filters = [int(c) for c in self.filters]
        if not self.decoder_filters and self.task in ("vae", "decoder"):
            n = self.decoder_depth
            sched = list(DECODER_SCHEDULE)
            self.decoder_filters = (sched + [sched[-1]] * n)[:n]
        self.decoder_filters = [int(c) for c in self.decoder_filters]

    @property
    def depth(self) -> int:
        return log2_exact(self.n_points)

    @property
    def decoder_depth(self) -> int:
        if self.n_points < self.seed_length:
            raise ValueError("decoder output is smaller than its seed")
        return log2_exact(self.n_points // self.seed_length)

    @classmethod
    def classifier(cls, n_points: int = 1024, classes: int = 40, **kw) -> "NetworkSpec":
        return cls(task="classifier", n_points=n_points, k=kw.pop("k", 8), output_dim=classes, **kw)

    @classmethod
    def vae(cls, n_points: int = 4096, **kw) -> "NetworkSpec":
        return cls(task="vae", n_points=n_points, k=kw.pop("k", 4), output_dim=3, **kw)

    @classmethod
    def decoder(cls, n_points: int = 4096, **kw) -> "NetworkSpec":
        return cls(task="decoder", n_points=n_points, k=kw.pop("k", 4), output_dim=3, **kw)

    @classmethod
    def segmenter(cls, n_points: int = 4096, parts: int = 50, **kw) -> "NetworkSpec":
        kw.setdefault("tanh_output", False)
        return cls(task="segmenter", n_points=n_points, k=kw.pop("k", 4), output_dim=parts, **kw)

    def quartered(self) -> "NetworkSpec":
        """The ``Filters/4`` variant: every channel schedule divided by 4."""
        return replace(
            self,
            filters=[max(1, c // 4) for c in self.filters],
            decoder_filters=[max(1, c // 4) for c in self.decoder_filters],
            head_channels=max(1, self.head_channels // 4),
        )

    def to_dict(self) -> dict:
        return {
            "task": self.task, "n_points": self.n_points, "k": self.k,
            "filters": list(self.filters), "decoder_filters": list(self.decoder_filters),
            "head_channels": self.head_channels, "latent_dim": self.latent_dim,
            "output_dim": self.output_dim, "tanh_output": self.tanh_output,
            "variant": self.variant, "skip_connections": self.skip_connections,
            "base_filters": self.base_filters, "max_filters": self.max_filters,
            "fc_hidden": self.fc_hidden, "seed_length": self.seed_length,
        }


# -- encoders ----------------------------------------------------------------

class MREncoder(Module):
    """D MR-CONV blocks from ``N`` points down to length 1, fused into ``z``."""

    def __init__(self, n_points: int, k: int, filters: Sequence[int], latent_dim: int,
                 rng: np.random.Generator, in_channels: int = 3, fuse: bool = True):
        super().__init__()
        depth = log2_exact(n_points)
        if len(filters) != depth:
            raise ValueError(f"{n_points} points need {depth} encoder layers, got {len(filters)} filters")
        self.k = k
        self.n_points = n_points
        lengths = stream_lengths(n_points, k)
        if lengths[2] < 1:
            raise ValueError(f"{n_points} points are too few for k={k}")
        self.lengths = [lengths]
        self.blocks = []
        c = in_channels
        for c_out in filters:
            nxt = _next_lengths(lengths, transposed=False)
            self.blocks.append(MRConvBlock(c, c_out, lengths, nxt, rng))
            self.lengths.append(nxt)
            lengths, c = nxt, c_out
        self.fuse = Conv1d(3 * c, latent_dim, 1, rng) if fuse else None

    def features(self, x: Tensor) -> list[MultiResFeature]:
        """Input lift followed by every block's output."""
        if x.shape[2] != self.n_points:
            raise ValueError(f"encoder built for {self.n_points} points, got {x.shape[2]}")
        feats = [lift_to_multires(x, self.k)]
        for block in self.blocks:
            feats.append(block(feats[-1]))
        return feats

    def encode(self, feats: Sequence[MultiResFeature]) -> Tensor:
        bottom = concat_channels(list(feats[-1].streams))
        z = self.fuse(bottom)
        return reshape(z, (z.shape[0], z.shape[1]))

    def forward(self, x: Tensor) -> Tensor:
        return self.encode(self.features(x))


class SingleResEncoder(Module):
    """One stream of conv + BN + ReLU blocks with the same layer count."""

    def __init__(self, n_points: int, filters: Sequence[int], latent_dim: int,
                 rng: np.random.Generator, in_channels: int = 3):
        super().__init__()
        depth = log2_exact(n_points)
        if len(filters) != depth:
            raise ValueError(f"{n_points} points need {depth} encoder layers")
        self.n_points = n_points
        self.convs, self.norms = [], []
        c = in_channels
        for c_out in filters:
            self.convs.append(Conv1d(c, c_out, 2, rng))
            self.norms.append(BatchNorm(c_out))
            c = c_out
        self.fuse = Conv1d(c, latent_dim, 1, rng)

    def features(self, x: Tensor) -> list[Tensor]:
        feats = [x]
        for conv, bn in zip(self.convs, self.norms):
            feats.append(relu(bn(conv(feats[-1]))))
        return feats

    def forward(self, x: Tensor) -> Tensor:
        z = self.fuse(self.features(x)[-1])
        return reshape(z, (z.shape[0], z.shape[1]))


# -- decoders ----------------------------------------------------------------

class _PointHead(Module):
    """Two kernel-1 layers mapping features to per-point outputs ``[B, N, out]``."""

    def __init__(self, c_in: int, hidden: int, out_dim: int, rng: np.random.Generator, use_tanh: bool):
        super().__init__()
        self.hidden = Conv1d(c_in, hidden, 1, rng)
        self.norm = BatchNorm(hidden)
        self.out = Conv1d(hidden, out_dim, 1, rng)
        self.use_tanh = use_tanh

    def forward(self, x: Tensor) -> Tensor:
        y = self.out(relu(self.norm(self.hidden(x))))
        if self.use_tanh:
            y = tanh(y)
        return transpose(y, (0, 2, 1))


class MRDecoder(Module):
    """``z`` to a seed feature (lengths s, s/k, s/k^2), MR-CONV-T blocks, point head."""

    def __init__(self, latent_dim: int, n_out: int, k: int, filters: Sequence[int],
                 rng: np.random.Generator, head_channels: int = 128, out_dim: int = 3,
                 use_tanh: bool = True, seed_length: int = 16):
        super().__init__()
        if not is_power_of_two(n_out) or n_out < seed_length:
            raise ValueError(f"decoder output size {n_out} must be a power of two >= {seed_length}")
        depth = log2_exact(n_out // seed_length)
        if len(filters) < depth:
            raise ValueError(f"{n_out} output points need {depth} decoder layers")
        filters = list(filters)[:depth]
        self.k = k
        self.seed_lengths = stream_lengths(seed_length, k)
        self.seed_channels = filters[0]
        self.seed = Linear(latent_dim, self.seed_channels * sum(self.seed_lengths), rng)
        self.blocks = []
        lengths, c = self.seed_lengths, self.seed_channels
        for c_out in filters:
            nxt = _next_lengths(lengths, transposed=True)
            self.blocks.append(MRConvBlock(c, c_out, lengths, nxt, rng))
            lengths, c = nxt, c_out
        self.head = _PointHead(c, head_channels, out_dim, rng, use_tanh)

    def seed_feature(self, z: Tensor) -> MultiResFeature:
        B = z.shape[0]
        flat = reshape(self.seed(z), (B, self.seed_channels, sum(self.seed_lengths)))
        flat_t = transpose(flat, (2, 0, 1))  # [L, B, C] so streams are leading slices
        parts, start = [], 0
        for L in self.seed_lengths:
            parts.append(transpose(_rows(flat_t, start, start + L), (1, 2, 0)))
            start += L
        return MultiResFeature(*parts, k=self.k)

    def forward(self, z: Tensor) -> Tensor:
        f = self.seed_feature(z)
        for block in self.blocks:
            f = block(f)
        return self.head(f.f0)


def _rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Differentiable slice ``x[start:stop]`` along the leading axis."""
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return record(x.data[start:stop], (x,), backward, "slice")


class SingleResDecoder(Module):
    def __init__(self, latent_dim: int, n_out: int, filters: Sequence[int], rng: np.random.Generator,
                 head_channels: int = 128, out_dim: int = 3, use_tanh: bool = True, seed_length: int = 16):
        super().__init__()
        depth = log2_exact(n_out // seed_length)
        filters = list(filters)[:depth]
        if len(filters) < depth:
            raise ValueError(f"{n_out} output points need {depth} decoder layers")
        self.seed_length = seed_length
        self.seed_channels = filters[0]
        self.seed = Linear(latent_dim, self.seed_channels * seed_length, rng)
        self.convs, self.norms = [], []
        c = self.seed_channels
        for c_out in filters:
            self.convs.append(Conv1d(c, c_out, 2, rng, transposed=True))
            self.norms.append(BatchNorm(c_out))
            c = c_out
        self.head = _PointHead(c, head_channels, out_dim, rng, use_tanh)

    def forward(self, z: Tensor) -> Tensor:
        h = reshape(self.seed(z), (z.shape[0], self.seed_channels, self.seed_length))
        for conv, bn in zip(self.convs, self.norms):
            h = relu(bn(conv(h)))
        return self.head(h)


class FCDecoder(Module):
    """Three hidden linear layers with BN + ReLU, then ``N x 3`` values and tanh."""

    def __init__(self, latent_dim: int, n_out: int, rng: np.random.Generator, hidden: int = 4096,
                 out_dim: int = 3):
        super().__init__()
        self.n_out, self.out_dim = n_out, out_dim
        dims = [latent_dim, hidden, hidden, hidden]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.norms = [BatchNorm(hidden) for _ in range(3)]
        self.out = Linear(hidden, n_out * out_dim, rng)

    def forward(self, z: Tensor) -> Tensor:
        h = z
        for layer, bn in zip(self.layers, self.norms):
            h = relu(bn(layer(h)))
        return reshape(tanh(self.out(h)), (z.shape[0], self.n_out, self.out_dim))


# -- assembled networks ------------------------------------------------------

def _encoder_for(spec: NetworkSpec, rng: np.random.Generator) -> Module:
    if spec.variant == "single-res":
        return SingleResEncoder(spec.n_points, spec.filters, spec.latent_dim, rng)
    return MREncoder(spec.n_points, spec.k, spec.filters, spec.latent_dim, rng)


def _decoder_for(spec: NetworkSpec, rng: np.random.Generator) -> Module:
    if spec.variant == "fc-decoder":
        return FCDecoder(spec.latent_dim, spec.n_points, rng, hidden=spec.fc_hidden, out_dim=spec.output_dim)
    if spec.variant == "single-res":
        return SingleResDecoder(spec.latent_dim, spec.n_points, spec.decoder_filters, rng,
                                spec.head_channels, spec.output_dim, spec.tanh_output, spec.seed_length)
    return MRDecoder(spec.latent_dim, spec.n_points, spec.k, spec.decoder_filters, rng,
                     spec.head_channels, spec.output_dim, spec.tanh_output, spec.seed_length)


class Classifier(Module):
    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.encoder = _encoder_for(spec, rng)
        self.fc = Linear(spec.latent_dim, spec.output_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(self.encoder(x))


class VAE(Module):
    """Encoder ``Q`` and decoder ``D``; the encoder is deterministic."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        enc_spec = spec if spec.variant != "fc-decoder" else replace(spec, variant="full")
        self.encoder = _encoder_for(enc_spec, rng)
        self.decoder = _decoder_for(spec, rng)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        z = self.encoder(x)
        return self.decoder(z), z


class Segmenter(Module):
    """MR encoder/decoder with skip connections and per-point part scores.

    Decoder block ``j`` mirrors encoder block ``j``: it maps that block's
    output lengths back to its input lengths. With skip connections on, the
    encoder output of block ``j`` is concatenated channel-wise to the decoder
    input of the same lengths (except at the bottleneck, which is that input).
    """

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.skip = spec.skip_connections
        self.encoder = MREncoder(spec.n_points, spec.k, spec.filters, spec.latent_dim, rng, fuse=False)
        lengths = self.encoder.lengths
        chans = spec.filters
        depth = len(chans)
        self.dec_blocks = []
        c = chans[-1]
        for j in range(depth - 1, -1, -1):
            c_in = c + (chans[j] if self.skip and j < depth - 1 else 0)
            c_out = chans[j - 1] if j > 0 else chans[0]
            self.dec_blocks.append(MRConvBlock(c_in, c_out, lengths[j + 1], lengths[j], rng))
            c = c_out
        self.head = _PointHead(c, spec.head_channels, spec.output_dim, rng, spec.tanh_output)

    def forward(self, x: Tensor) -> Tensor:
        feats = self.encoder.features(x)
        depth = len(self.dec_blocks)
        h = feats[-1]
        for step, block in enumerate(self.dec_blocks):
            j = depth - 1 - step
            if self.skip and j < depth - 1:
                skip = feats[j + 1]
                h = MultiResFeature(
                    *(concat_channels([a, b]) for a, b in zip(h.streams, skip.streams)), k=h.k
                )
            h = block(h)
        return self.head(h.f0)


def build_classifier(spec: NetworkSpec, rng: np.random.Generator) -> Classifier:
    if spec.task != "classifier":
        raise ValueError(f"expected a classifier spec, got task {spec.task!r}")
    return Classifier(spec, rng)


def build_decoder(spec: NetworkSpec, rng: np.random.Generator) -> Module:
    if spec.task not in ("decoder", "vae"):
        raise ValueError(f"expected a decoder or vae spec, got task {spec.task!r}")
    return _decoder_for(spec, rng)


def build_vae(spec: NetworkSpec, rng: np.random.Generator) -> VAE:
    if spec.task != "vae":
        raise ValueError(f"expected a vae spec, got task {spec.task!r}")
    return VAE(spec, rng)


def build_segmenter(spec: NetworkSpec, rng: np.random.Generator) -> Segmenter:
    if spec.task != "segmenter":
        raise ValueError(f"expected a segmenter spec, got task {spec.task!r}")
    return Segmenter(spec, rng)


def build_network(spec: NetworkSpec, rng: np.random.Generator) -> Module:
    builders = {
        "classifier": build_classifier,
        "vae": build_vae,
        "decoder": build_decoder,
        "segmenter": build_segmenter,
    }
    return builders[spec.task](spec, rng)


def extract_unsup_features(encoder: MREncoder, x: Tensor, layers: int = 3, length: int = 16) -> np.ndarray:
    """Frozen-encoder features for a linear probe.

    For each of the first ``layers`` MR-CONV outputs, every resolution is
    average-pooled to ``length`` (or kept, if shorter) and NN-upsampled back to
    ``length``; everything is concatenated. At 4096 points this is pooling by
    128, 64 and 32. Output size: ``3 * length' * sum(filters[:layers])`` with
    ``length' = min(length, N / 2)``.
    """
    with no_grad():
        feats = encoder.features(x)[1:layers + 1]
        target = min(length, feats[0].lengths[0])
        parts = []
        for f in feats:
            for s in f.streams:
                L = s.shape[2]
                pooled = pool_to(s, min(target, L))
                parts.append(upsample_to(pooled, target).data.reshape(x.shape[0], -1))
    return np.concatenate(parts, axis=1)


def cloud_batch(sorted_points: Sequence[np.ndarray]) -> Tensor:
    """Stack sorted ``[N, 3]`` clouds as a ``[B, 3, N]`` network input."""
    arr = np.stack([np.asarray(p) for p in sorted_points]).transpose(0, 2, 1)
    return Tensor(np.ascontiguousarray(arr, dtype=get_default_dtype()))
