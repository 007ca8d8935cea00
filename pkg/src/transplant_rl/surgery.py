"""Checkpoint files and layer transplant between networks.

Binary layout (all integers little-endian)::

    b"RTL1"                         magic
    u32                             metadata length
    bytes                           UTF-8 JSON metadata
    repeated, sorted by name:
        u16 name length, name bytes
        u8 ndim, ndim x u32 dims
        prod(dims) x f32 payload
    u64                             FNV-1a 64 of every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Network

MAGIC = b"RTL1"
FORMAT_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic, truncated or otherwise malformed file."""


class CheckpointVersionError(CheckpointError):
    pass


class ChecksumMismatchError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    def __init__(self, expected: str, found: str, what: str = "checkpoint"):
        super().__init__(f"{what} architecture hash {found} does not match expected {expected}")
        self.expected = expected
        self.found = found


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def to_f32(arr) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype="<f4")


@dataclass
class Checkpoint:
    metadata: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def architecture_hash(self) -> str:
        return self.metadata["architecture_hash"]

    def network(self) -> Network:
        """Rebuild the network and load these parameters into it (widened to float64)."""
        net = Network.from_description(self.metadata["architecture"])
        if net.architecture_hash != self.architecture_hash:
            raise ArchitectureMismatchError(self.architecture_hash, net.architecture_hash, "rebuilt network")
        net.set_parameters({k: v.astype(np.float64) for k, v in self.tensors.items()})
        return net

    @classmethod
    def from_network(cls, net: Network, **metadata) -> "Checkpoint":
        meta = {
            "format_version": FORMAT_VERSION,
            "env": None,
            "training_steps": 0,
            "seed": None,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            **metadata,
            "architecture_hash": net.architecture_hash,
            "architecture": net.describe(),
        }
        return cls(meta, {k: to_f32(v) for k, v in net.parameters().items()})


def round_to_f32(net: Network) -> Network:
    """Round parameters in place to what a checkpoint will store."""
    net.set_parameters({k: to_f32(v).astype(np.float64) for k, v in net.parameters().items()})
    return net


def encode(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.metadata, n_tensors=len(ckpt.tensors))
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes]
    for name in sorted(ckpt.tensors):
        arr = to_f32(ckpt.tensors[name])
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def decode(data: bytes, expected_hash: str | None = None) -> Checkpoint:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data) - 8:
            raise CheckpointFormatError(f"truncated checkpoint while reading {what} at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if len(data) < len(MAGIC) or data[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    pos = 4
    (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
    try:
        meta = json.loads(take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable metadata: {exc}") from None
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version!r}, this reader supports {FORMAT_VERSION}")
    tensors = {}
    for _ in range(int(meta.get("n_tensors", 0))):
        (name_len,) = struct.unpack("<H", take(2, "tensor name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, f"{name} ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} dims"))
        count = int(np.prod(dims, dtype=np.int64))
        payload = take(4 * count, f"{name} payload")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if len(data) - pos != 8:
        raise CheckpointFormatError(f"expected 8 checksum bytes after the tensors, found {len(data) - pos}")
    (stored,) = struct.unpack("<Q", data[pos:])
    actual = fnv1a64(data[:pos])
    if stored != actual:
        raise ChecksumMismatchError(f"checksum {stored:016x} != computed {actual:016x}")
    ckpt = Checkpoint(meta, tensors)
    if expected_hash is not None and ckpt.architecture_hash != expected_hash:
        raise ArchitectureMismatchError(expected_hash, ckpt.architecture_hash)
    return ckpt


def save(net_or_ckpt, path, **metadata) -> Checkpoint:
    """Write a checkpoint atomically (temp file + rename) and return it."""
    ckpt = net_or_ckpt if isinstance(net_or_ckpt, Checkpoint) else Checkpoint.from_network(net_or_ckpt, **metadata)
    if isinstance(net_or_ckpt, Checkpoint) and metadata:
        ckpt = Checkpoint({**ckpt.metadata, **metadata}, ckpt.tensors)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(encode(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return ckpt


def load(path, expected_hash: str | None = None) -> Checkpoint:
    return decode(Path(path).read_bytes(), expected_hash)


# -- transplant -------------------------------------------------------------

MODES = ("freeze", "finetune")


@dataclass(frozen=True)
class TransplantSpec:
    k: int
    mode: str = "finetune"
    reinit_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.k < 0:
            raise ValueError("k must be >= 0")


def transplant(parent: Checkpoint, spec: TransplantSpec) -> tuple[Network, frozenset[str]]:
    """Child network whose first ``k`` depth positions are copied from ``parent``.

    The remaining positions are freshly initialized from ``spec.reinit_seed``.
    The returned freeze mask holds the transplanted layer names in freeze mode
    and is empty in finetune mode.
    """
    child = Network.from_description(parent.metadata["architecture"])
    if child.architecture_hash != parent.architecture_hash:
        raise ArchitectureMismatchError(parent.architecture_hash, child.architecture_hash, "rebuilt network")
    names = child.layer_names
    if spec.k > len(names):
        raise ValueError(f"cannot transplant k={spec.k} layers from a network of depth {len(names)}")
    child.init_params(spec.reinit_seed)
    copied = names[: spec.k]
    values = {
        key: parent.tensors[key].astype(np.float64)
        for key in child.parameters()
        if key.split("/", 1)[0] in copied
    }
    child.set_parameters(values, strict=False)
    mask = frozenset(copied) if spec.mode == "freeze" else frozenset()
    return child, mask


@dataclass
class TransplantReport:
    k: int
    layers: dict[str, bool]  # layer name -> every tensor bitwise equal to the parent
    passed: bool

    def to_dict(self) -> dict:
        return {"k": self.k, "layers": dict(self.layers), "passed": self.passed}


def _as_tensors(x) -> tuple[str, dict[str, np.ndarray], list[str]]:
    if isinstance(x, Checkpoint):
        net = Network.from_description(x.metadata["architecture"])
        return x.architecture_hash, x.tensors, net.layer_names
    return x.architecture_hash, {k: to_f32(v) for k, v in x.parameters().items()}, x.layer_names


def layer_equality(parent, child) -> dict[str, bool]:
    """Per depth position: are all tensors bitwise equal at float32 precision?"""
    p_hash, p_tensors, names = _as_tensors(parent)
    c_hash, c_tensors, _ = _as_tensors(child)
    if p_hash != c_hash:
        raise ArchitectureMismatchError(p_hash, c_hash, "child")
    out = {}
    for name in names:
        keys = [k for k in p_tensors if k.split("/", 1)[0] == name]
        out[name] = all(np.array_equal(p_tensors[k].view(np.uint32), c_tensors[k].view(np.uint32)) for k in keys)
    return out


def verify_transplant(parent, child, k: int) -> TransplantReport:
    """Pass iff layers 1..k match the parent bitwise and every later layer differs somewhere.

    ``parent`` and ``child`` may be checkpoints or live networks.
    """
    equal = layer_equality(parent, child)
    names = list(equal)
    passed = all(equal[n] for n in names[:k]) and not any(equal[n] for n in names[k:])
    return TransplantReport(k, equal, passed)
