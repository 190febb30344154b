"""Checkpoint files.

Layout: a UTF-8 text header, a blank line, then the payload.

    MRTNET-CHECKPOINT <version>
    spec <NetworkSpec as JSON>
    config <run manifest as a JSON string>
    meta <key>=<value> ...
    tensor <name> <offset> <shape>
    ...
    <blank line>
    <little-endian float32 payload>

Offsets and sizes count float32 elements from the start of the payload.
Shapes are comma-separated (``-`` for a scalar). Tensor names are prefixed
by their role: ``param:``, ``buffer:``, ``adam.m:``, ``adam.v:`` and
``axes`` for shared rp-tree directions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .layers import AdamState, Module
from .multires import NetworkSpec

MAGIC = "MRTNET-CHECKPOINT"
VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: NetworkSpec
    tensors: dict  # name -> float32 array, insertion-ordered
    meta: dict = field(default_factory=dict)
    config_text: str = ""

    # -- construction from live objects -----------------------------------

    @classmethod
    def capture(cls, model: Module, spec: NetworkSpec, adam: Optional[AdamState] = None,
                epoch: int = 0, axes: Optional[np.ndarray] = None, config_text: str = "",
                extra_meta: Optional[dict] = None) -> "Checkpoint":
        tensors = {}
        names = []
        for name, p in model.named_parameters():
            tensors[f"param:{name}"] = p.data
            names.append(name)
        for name, b in model.named_buffers():
            tensors[f"buffer:{name}"] = b
        meta = {"epoch": int(epoch)}
        if adam is not None:
            meta.update(adam_step=adam.step_count, lr=float(adam.lr), beta1=float(adam.beta1),
                        beta2=float(adam.beta2), eps=float(adam.eps))
            if adam.m:
                for name, m, v in zip(names, adam.m, adam.v):
                    tensors[f"adam.m:{name}"] = m
                    tensors[f"adam.v:{name}"] = v
        if axes is not None:
            tensors["axes"] = np.asarray(axes)
        meta.update(extra_meta or {})
        tensors = {k: np.asarray(v, dtype=_DTYPE).copy() for k, v in tensors.items()}
        return cls(spec, tensors, meta, config_text)

    def restore(self, model: Module, adam: Optional[AdamState] = None) -> None:
        """Copy stored values into ``model`` (and ``adam``) in place."""
        params = dict(model.named_parameters())
        buffers = dict(model.named_buffers())
        want = {f"param:{n}" for n in params} | {f"buffer:{n}" for n in buffers}
        have = {k for k in self.tensors if k.startswith(("param:", "buffer:"))}
        if want != have:
            missing, extra = sorted(want - have), sorted(have - want)
            raise CheckpointError(f"checkpoint does not match the model (missing {missing[:3]}, extra {extra[:3]})")
        for name, p in params.items():
            src = self.tensors[f"param:{name}"]
            if src.shape != p.data.shape:
                raise CheckpointError(f"shape mismatch for {name}: {src.shape} vs {p.data.shape}")
            p.data[...] = src
        for name, b in buffers.items():
            b[...] = self.tensors[f"buffer:{name}"]
        if adam is not None and "adam_step" in self.meta:
            adam.step_count = int(self.meta["adam_step"])
            adam.lr = float(self.meta["lr"])
            adam.beta1, adam.beta2 = float(self.meta["beta1"]), float(self.meta["beta2"])
            adam.eps = float(self.meta["eps"])
            if f"adam.m:{next(iter(params))}" in self.tensors:
                adam.m = [self.tensors[f"adam.m:{n}"].astype(p.data.dtype) for n, p in params.items()]
                adam.v = [self.tensors[f"adam.v:{n}"].astype(p.data.dtype) for n, p in params.items()]

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))

    @property
    def axes(self) -> Optional[np.ndarray]:
        a = self.tensors.get("axes")
        return None if a is None else a.astype(np.float64)

    # -- bytes -------------------------------------------------------------

    def to_bytes(self) -> bytes:
        lines = [f"{MAGIC} {VERSION}",
                 "spec " + json.dumps(self.spec.to_dict(), sort_keys=True),
                 "config " + json.dumps(self.config_text),
                 "meta " + " ".join(f"{k}={_meta_str(v)}" for k, v in sorted(self.meta.items()))]
        offset = 0
        chunks = []
        for name, arr in self.tensors.items():
            if any(c.isspace() for c in name):
                raise CheckpointError(f"tensor name {name!r} contains whitespace")
            shape = ",".join(str(s) for s in arr.shape) or "-"
            lines.append(f"tensor {name} {offset} {shape}")
            chunks.append(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
            offset += arr.size
        header = ("\n".join(lines) + "\n\n").encode("utf-8")
        return header + b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        end = blob.find(b"\n\n")
        if end < 0:
            raise CheckpointError("line 1: no header terminator")
        header = blob[:end].decode("utf-8").split("\n")
        payload = blob[end + 2:]
        first = header[0].split()
        if len(first) != 2 or first[0] != MAGIC:
            raise CheckpointError("line 1: not an MRTNet checkpoint")
        if int(first[1]) != VERSION:
            raise CheckpointError(f"line 1: unsupported checkpoint version {first[1]}")
        spec = None
        config_text = ""
        meta: dict = {}
        index = []
        for lineno, line in enumerate(header[1:], start=2):
            kind, _, rest = line.partition(" ")
            if kind == "spec":
                spec = NetworkSpec(**json.loads(rest))
            elif kind == "config":
                config_text = json.loads(rest)
            elif kind == "meta":
                for item in rest.split():
                    k, _, v = item.partition("=")
                    meta[k] = _meta_value(v)
            elif kind == "tensor":
                parts = rest.split()
                if len(parts) != 3:
                    raise CheckpointError(f"line {lineno}: malformed tensor entry")
                shape = () if parts[2] == "-" else tuple(int(s) for s in parts[2].split(","))
                index.append((parts[0], int(parts[1]), shape))
            else:
                raise CheckpointError(f"line {lineno}: unknown header record {kind!r}")
        if spec is None:
            raise CheckpointError("header has no spec record")
        total = sum(int(np.prod(shape)) for _, _, shape in index)
        if len(payload) != total * _DTYPE.itemsize:
            raise CheckpointError(
                f"payload is {len(payload)} bytes but the index describes {total * _DTYPE.itemsize}")
        data = np.frombuffer(payload, dtype=_DTYPE)
        tensors = {}
        expected = 0
        for name, offset, shape in index:
            if offset != expected:
                raise CheckpointError(f"tensor {name} starts at {offset}, expected {expected}")
            size = int(np.prod(shape))
            tensors[name] = data[offset:offset + size].reshape(shape).copy()
            expected += size
        return cls(spec, tensors, meta, config_text)

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def _meta_str(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _meta_value(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v
