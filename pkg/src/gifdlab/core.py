"""Shared numeric types, seeded randomness and the portable checkpoint format."""

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np
import torch

MAGIC = b"GLNS"
FORMAT_VERSION = 1

# model math runs in float32; metrics accumulate in float64
DTYPE = torch.float32

GradientSet = Dict[str, torch.Tensor]


class CheckpointError(Exception):
    """Base class for checkpoint read/write failures."""


class MalformedHeaderError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


@dataclass
class ImageBatch:
    """A batch of images in [0, 1] with shape [B, C, H, W] and optional labels."""

    pixels: torch.Tensor
    labels: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.pixels.dim() != 4:
            raise ValueError(f"expected pixels of rank 4 [B, C, H, W], got shape {tuple(self.pixels.shape)}")
        if self.labels is not None:
            self.labels = torch.as_tensor(self.labels, dtype=torch.long)
            if self.labels.shape != (self.pixels.shape[0],):
                raise ValueError(
                    f"labels must have length {self.pixels.shape[0]}, got shape {tuple(self.labels.shape)}"
                )

    def __len__(self):
        return self.pixels.shape[0]

    def validate(self):
        px = self.pixels
        if not torch.isfinite(px).all():
            raise ValueError("image batch contains non-finite values")
        if px.min() < 0 or px.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        return self


@dataclass
class Checkpoint:
    tensors: Dict[str, torch.Tensor] = field(default_factory=dict)
    metadata: Dict[str, str] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.version != other.version or self.metadata != other.metadata:
            return False
        if list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.shape == b.shape and torch.equal(a.to(DTYPE), b.to(DTYPE))
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


# ---------------------------------------------------------------------------
# randomness


def derive_seed(seed: int, *keys) -> int:
    """Derive an independent 64-bit sub-seed from ``seed`` and a path of keys.

    Keys may be ints or strings; the derivation goes through numpy's
    SeedSequence so sibling streams (clients, trials) never overlap.
    """
    words = []
    for k in keys:
        if isinstance(k, str):
            words.append(int.from_bytes(hashlib.sha256(k.encode()).digest()[:4], "little"))
        else:
            words.append(int(k) & 0xFFFFFFFF)
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(words))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic numpy stream (PCG64) for uniform and normal draws."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed) & (2**64 - 1))))


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    # torch only accepts seeds below 2**63
    g.manual_seed(int(seed) % (2**63))
    return g


# ---------------------------------------------------------------------------
# checkpoint file format
#
#   "GLNS" | version u32 | count u32
#   per tensor: name_len u32 | name utf8 | rank u32 | dims u32*rank | f32 payload
#   meta_count u32 | per entry: key_len u32 | key | val_len u32 | val
# all integers little-endian


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(ckpt.tensors))]
    for name, t in ckpt.tensors.items():
        # np.ascontiguousarray would promote rank-0 tensors to rank 1
        arr = np.asarray(torch.as_tensor(t).detach().cpu().numpy(), dtype="<f4", order="C")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    parts.append(struct.pack("<I", len(ckpt.metadata)))
    for k, v in ckpt.metadata.items():
        parts.append(_pack_str(str(k)))
        parts.append(_pack_str(str(v)))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(
                f"truncated payload: need {n} bytes at offset {self.pos}, file has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise MalformedHeaderError(f"malformed header: expected magic {MAGIC!r}, got {buf[:4]!r}")
    r = _Reader(buf)
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    count = r.u32()
    tensors = {}
    for _ in range(count):
        name = r.string()
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    metadata = {}
    for _ in range(r.u32()):
        k = r.string()
        metadata[k] = r.string()
    if r.pos != len(buf):
        raise MalformedHeaderError(f"{len(buf) - r.pos} trailing bytes after metadata")
    return Checkpoint(tensors=tensors, metadata=metadata, version=version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(ckpt))
    except OSError as e:
        raise CheckpointError(f"could not write checkpoint to {path}: {e}") from e


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"could not read checkpoint {path}: {e}") from e
    try:
        return decode_checkpoint(buf)
    except CheckpointError as e:
        raise type(e)(f"{path}: {e}") from None


def gradients_to_checkpoint(grads: GradientSet, metadata: Optional[Mapping[str, str]] = None) -> Checkpoint:
    return Checkpoint(tensors={k: v.detach().clone() for k, v in grads.items()}, metadata=dict(metadata or {}))


def config_hash(obj) -> str:
    """Stable short hash of a JSON-serialisable object."""
    import json

    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
