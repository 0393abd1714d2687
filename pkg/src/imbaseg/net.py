"""A compact point-wise classifier with hand-derived gradients.

Layout: a shared per-point MLP encoder, a channel-wise max over points as
global context, and a per-point MLP decoder fed ``[point feature, context]``.
Hidden layers use ReLU; the output layer is linear (logits).

Parameters are stored as float32 and promoted to float64 for all arithmetic.
"""
from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import BadMagic, ChecksumError, EmptyCloudError, TruncatedFile, VersionMismatch
from .geom import ClassCatalog


@dataclass(frozen=True)
class Architecture:
    input_dim: int = 4
    encoder: tuple[int, ...] = (32, 64)
    decoder: tuple[int, ...] = (64,)
    output_dim: int = 6
    # per-feature multiplier applied to (x, y, z, intensity) before the first layer
    input_scale: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "encoder", tuple(int(w) for w in self.encoder))
        object.__setattr__(self, "decoder", tuple(int(w) for w in self.decoder))
        if self.input_dim not in (3, 4):
            raise ValueError(f"input_dim must be 3 or 4, got {self.input_dim}")
        if not self.encoder:
            raise ValueError("encoder needs at least one layer")
        if min(self.encoder + self.decoder + (self.output_dim,)) < 1:
            raise ValueError("all layer widths must be >= 1")
        scale = self.input_scale
        scale = (1.0,) * self.input_dim if scale is None else tuple(float(s) for s in scale)
        if len(scale) != self.input_dim:
            raise ValueError("input_scale length must equal input_dim")
        object.__setattr__(self, "input_scale", scale)

    @property
    def context_dim(self) -> int:
        return self.encoder[-1]

    def layer_shapes(self) -> list[tuple[int, int]]:
        shapes = []
        fan_in = self.input_dim
        for w in self.encoder:
            shapes.append((fan_in, w))
            fan_in = w
        fan_in = 2 * self.context_dim
        for w in self.decoder:
            shapes.append((fan_in, w))
            fan_in = w
        shapes.append((fan_in, self.output_dim))
        return shapes

    def param_shapes(self) -> list[tuple[int, ...]]:
        out = []
        for fan_in, fan_out in self.layer_shapes():
            out += [(fan_in, fan_out), (fan_out,)]
        return out


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Weights and biases in layer order ``[W0, b0, W1, b1, ...]``; ``x @ W + b``."""

    arch: Architecture
    arrays: tuple[np.ndarray, ...]

    def __post_init__(self):
        arrays = tuple(np.asarray(a) for a in self.arrays)
        expected = self.arch.param_shapes()
        if [a.shape for a in arrays] != expected:
            raise ValueError(f"parameter shapes {[a.shape for a in arrays]} do not match {expected}")
        object.__setattr__(self, "arrays", arrays)

    def __len__(self):
        return len(self.arrays)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.arch, tuple(a.astype(dtype) for a in self.arrays))

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in self.arrays:
            h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
        return h.hexdigest()


def init_params(arch: Architecture, seed: int) -> ModelParams:
    """Uniform ``±sqrt(6 / fan_in)`` weights, zero biases, PCG64-seeded."""
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    arrays = []
    for fan_in, fan_out in arch.layer_shapes():
        limit = np.sqrt(6.0 / fan_in)
        arrays.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32))
        arrays.append(np.zeros(fan_out, dtype=np.float32))
    return ModelParams(arch, tuple(arrays))


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)  # pre-activation of each hidden layer
    argmax: np.ndarray | None = None


def _features(arch: Architecture, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < arch.input_dim:
        raise ValueError(f"points must have at least {arch.input_dim} columns, got shape {pts.shape}")
    if len(pts) == 0:
        raise EmptyCloudError("forward pass needs at least one point")
    return pts[:, : arch.input_dim] * np.asarray(arch.input_scale)


def forward(params: ModelParams, points, return_cache: bool = False):
    arch = params.arch
    x = _features(arch, points)
    w = [a.astype(np.float64, copy=False) for a in params.arrays]
    cache = ForwardCache()
    n_enc = len(arch.encoder)
    h = x
    for k in range(n_enc):
        cache.inputs.append(h)
        a = h @ w[2 * k] + w[2 * k + 1]
        cache.pre.append(a)
        h = np.maximum(a, 0.0)
    argmax = np.argmax(h, axis=0)  # first occurrence: ties go to the lowest point index
    context = h[argmax, np.arange(h.shape[1])]
    z = np.concatenate([h, np.broadcast_to(context, h.shape)], axis=1)
    for k in range(len(arch.decoder)):
        i = n_enc + k
        cache.inputs.append(z)
        u = z @ w[2 * i] + w[2 * i + 1]
        cache.pre.append(u)
        z = np.maximum(u, 0.0)
    cache.inputs.append(z)
    logits = z @ w[-2] + w[-1]
    cache.argmax = argmax
    return (logits, cache) if return_cache else logits


def backward(params: ModelParams, points, dlogits, cache: ForwardCache | None = None) -> list[np.ndarray]:
    """Gradients of ``sum(logits * dlogits)`` with respect to every parameter array."""
    arch = params.arch
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if cache is None:
        logits, cache = forward(params, points, return_cache=True)
        expected = logits.shape
    else:
        expected = (cache.inputs[0].shape[0], arch.output_dim)
    if dlogits.shape != expected:
        raise ValueError(f"dlogits shape {dlogits.shape} does not match logits {expected}")
    w = [a.astype(np.float64, copy=False) for a in params.arrays]
    grads: list[np.ndarray] = [None] * len(w)  # type: ignore[list-item]
    n_enc = len(arch.encoder)
    n_layers = n_enc + len(arch.decoder) + 1

    dz = dlogits
    for i in range(n_layers - 1, n_enc - 1, -1):
        inp = cache.inputs[i]
        if i < n_layers - 1:
            dz = dz * (cache.pre[i] > 0)
        grads[2 * i] = inp.T @ dz
        grads[2 * i + 1] = dz.sum(axis=0)
        dz = dz @ w[2 * i].T

    c = arch.context_dim
    dh = dz[:, :c].copy()
    dcontext = dz[:, c:].sum(axis=0)
    np.add.at(dh, (cache.argmax, np.arange(c)), dcontext)

    for k in range(n_enc - 1, -1, -1):
        da = dh * (cache.pre[k] > 0)
        grads[2 * k] = cache.inputs[k].T @ da
        grads[2 * k + 1] = da.sum(axis=0)
        if k:
            dh = da @ w[2 * k].T
    return grads


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(params: ModelParams, points) -> np.ndarray:
    return np.argmax(forward(params, points), axis=1)


# --------------------------------------------------------------------- checkpoint

MAGIC = b"IMBSCKPT"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Provenance:
    phase: int = 0
    epoch: int = 0
    seed: int = 0
    parent_checksum: int = 0  # checksum of the checkpoint this phase started from; 0 = fresh init


@dataclass(frozen=True, eq=False)
class Checkpoint:
    params: ModelParams
    catalog: ClassCatalog
    provenance: Provenance = Provenance()

    @property
    def arch(self) -> Architecture:
        return self.params.arch

    def __post_init__(self):
        if self.params.arch.output_dim != len(self.catalog):
            raise ValueError("output_dim must equal the catalog size")


def checksum64(data: bytes) -> int:
    """64-bit BLAKE2b digest as an unsigned integer."""
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    arch = ckpt.arch
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<II", arch.input_dim, len(arch.encoder)))
    buf.write(struct.pack(f"<{len(arch.encoder)}I", *arch.encoder))
    buf.write(struct.pack("<I", len(arch.decoder)))
    buf.write(struct.pack(f"<{len(arch.decoder)}I", *arch.decoder))
    buf.write(struct.pack("<I", arch.output_dim))
    buf.write(struct.pack(f"<{arch.input_dim}d", *arch.input_scale))
    buf.write(struct.pack("<I", len(ckpt.catalog)))
    for name in ckpt.catalog:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
    p = ckpt.provenance
    buf.write(struct.pack("<IIQQ", p.phase, p.epoch, p.seed, p.parent_checksum))
    arrays = ckpt.params.arrays
    buf.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    for a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<Q", checksum64(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"checkpoint ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    data = bytes(data)
    if len(data) < len(MAGIC):
        if MAGIC.startswith(data):
            raise TruncatedFile("checkpoint shorter than its magic string")
        raise BadMagic("not a checkpoint file")
    if data[: len(MAGIC)] != MAGIC:
        raise BadMagic(f"bad magic {data[:len(MAGIC)]!r}")
    r = _Reader(data)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    try:
        ckpt, end = _parse_body(r)
    except TruncatedFile:
        raise
    except Exception as exc:  # corrupt header fields
        if checksum64(data[:-8]) != int.from_bytes(data[-8:], "little"):
            raise ChecksumError(f"checkpoint corrupted ({exc})") from None
        raise
    if len(data) < end + 8:
        raise TruncatedFile(f"checkpoint is {len(data)} bytes, expected {end + 8}")
    stored = int.from_bytes(data[end : end + 8], "little")
    if len(data) != end + 8 or checksum64(data[:end]) != stored:
        raise ChecksumError("checkpoint checksum mismatch")
    return ckpt


def _parse_body(r: _Reader) -> tuple[Checkpoint, int]:
    input_dim, n_enc = r.unpack("<II")
    encoder = r.unpack(f"<{n_enc}I")
    (n_dec,) = r.unpack("<I")
    decoder = r.unpack(f"<{n_dec}I")
    (output_dim,) = r.unpack("<I")
    if input_dim not in (3, 4):
        raise ValueError(f"bad input_dim {input_dim}")
    scale = r.unpack(f"<{input_dim}d")
    arch = Architecture(input_dim, encoder, decoder, output_dim, scale)
    (n_cls,) = r.unpack("<I")
    names = []
    for _ in range(n_cls):
        (ln,) = r.unpack("<H")
        names.append(r.take(ln).decode("utf-8"))
    catalog = ClassCatalog(tuple(names))
    phase, epoch, seed, parent = r.unpack("<IIQQ")
    (n_arr,) = r.unpack("<I")
    shapes = []
    for _ in range(n_arr):
        (ndim,) = r.unpack("<I")
        shapes.append(tuple(r.unpack(f"<{ndim}I")))
    if shapes != arch.param_shapes():
        raise ValueError("shape table does not match architecture")
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32))
    ckpt = Checkpoint(ModelParams(arch, tuple(arrays)), catalog, Provenance(phase, epoch, seed, parent))
    return ckpt, r.pos


def save_checkpoint(ckpt: Checkpoint, sink: str | os.PathLike | BinaryIO) -> int:
    """Write the checkpoint; returns its checksum. Paths are written atomically."""
    data = checkpoint_to_bytes(ckpt)
    if isinstance(sink, (str, os.PathLike)):
        atomic_write_bytes(sink, data)
    else:
        sink.write(data)
    return int.from_bytes(data[-8:], "little")


def load_checkpoint(source: str | os.PathLike | BinaryIO | bytes) -> Checkpoint:
    if isinstance(source, (bytes, bytearray, memoryview)):
        data = bytes(source)
    elif isinstance(source, (str, os.PathLike)):
        data = Path(source).read_bytes()
    else:
        data = source.read()
    return checkpoint_from_bytes(data)


def checkpoint_checksum(ckpt: Checkpoint) -> int:
    return int.from_bytes(checkpoint_to_bytes(ckpt)[-8:], "little")


def checkpoint_sidecar(ckpt: Checkpoint, checksum: int | None = None) -> str:
    a, p = ckpt.arch, ckpt.provenance
    checksum = checkpoint_checksum(ckpt) if checksum is None else checksum
    lines = [
        f"format_version: {FORMAT_VERSION}",
        f"checksum: {checksum:016x}",
        f"input_dim: {a.input_dim}",
        f"input_scale: {' '.join(repr(s) for s in a.input_scale)}",
        f"encoder: {' '.join(map(str, a.encoder))}",
        f"decoder: {' '.join(map(str, a.decoder))}",
        f"output_dim: {a.output_dim}",
        f"catalog: {' '.join(ckpt.catalog)}",
        f"phase: {p.phase}",
        f"epoch: {p.epoch}",
        f"seed: {p.seed}",
        f"parent_checksum: {p.parent_checksum:016x}",
        f"params_sha256: {ckpt.params.digest()}",
    ]
    return "\n".join(lines) + "\n"


def with_provenance(ckpt: Checkpoint, **changes) -> Checkpoint:
    return Checkpoint(ckpt.params, ckpt.catalog, replace(ckpt.provenance, **changes))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
