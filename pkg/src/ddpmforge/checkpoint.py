"""
Binary checkpoint format.

    magic            8 bytes  b"DDPMFRG1"
    format_version   u32
    header_len       u32, then header_len bytes of UTF-8 text: the run
                     config document plus ``checkpoint.*`` keys
    tensor_count     u32
    per tensor:      u32 name_len, name (UTF-8), u32 rank, rank x u64 dims,
                     prod(dims) x f64 payload

All integers and floats are little-endian.  Tensor names are ``params/<name>``
followed by ``ema/<name>`` in the same order.  Trailing bytes are an error.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_document
from .denoiser import DenoiserParams, param_shapes

MAGIC = b"DDPMFRG1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, position: int, message: str):
        super().__init__(f"byte {position}: {message}")
        self.position = position


@dataclass
class Checkpoint:
    run_config: RunConfig
    step_count: int
    params: DenoiserParams
    ema_shadow: DenoiserParams
    rng_note: str = ""
    format_version: int = FORMAT_VERSION

    @property
    def denoiser_config(self):
        return self.params.config

    @property
    def train_config(self):
        return self.run_config.train_config()


def _header_text(ckpt: Checkpoint) -> str:
    note = ckpt.rng_note.replace("\\", "\\\\").replace('"', '\\"')
    return (
        ckpt.run_config.to_text()
        + f"checkpoint.step_count = {ckpt.step_count}\n"
        + f'checkpoint.rng_note = "{note}"\n'
    )


def to_bytes(ckpt: Checkpoint) -> bytes:
    if ckpt.params.names() != ckpt.ema_shadow.names():
        raise ValueError("params and EMA shadow have different names")
    out = bytearray(MAGIC)
    out += struct.pack("<I", ckpt.format_version)
    header = _header_text(ckpt).encode("utf-8")
    out += struct.pack("<I", len(header)) + header
    tables = [("params", ckpt.params), ("ema", ckpt.ema_shadow)]
    out += struct.pack("<I", sum(len(p) for _, p in tables))
    for prefix, table in tables:
        for name, arr in table.items():
            encoded = f"{prefix}/{name}".encode("utf-8")
            out += struct.pack("<I", len(encoded)) + encoded
            out += struct.pack("<I", arr.ndim)
            out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
            out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return bytes(out)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(self.pos, f"truncated while reading {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(0, "bad magic bytes")
    version_pos = r.pos
    version = r.u32("format version")
    if version != FORMAT_VERSION:
        raise CheckpointError(version_pos, f"unsupported format version {version}")
    header_pos = r.pos
    header = r.take(r.u32("header length"), "header").decode("utf-8")

    types = {f: t for f, t in RunConfig.__annotations__.items()}
    types.update({"checkpoint.step_count": "int", "checkpoint.rng_note": "str"})
    try:
        values = parse_document(header, types)
        step_count = values.pop("checkpoint.step_count")
        rng_note = values.pop("checkpoint.rng_note")
        run_config = RunConfig(**values)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(header_pos, f"bad header: {exc}") from None

    count = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_pos = r.pos
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        rank = r.u32("rank")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, "dims"))
        size = int(np.prod(dims)) if rank else 1
        payload = r.take(8 * size, f"payload of {name}")
        if name in tensors:
            raise CheckpointError(name_pos, f"duplicate tensor {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(data):
        raise CheckpointError(r.pos, f"{len(data) - r.pos} trailing bytes")

    dcfg = run_config.denoiser_config()
    expected = param_shapes(dcfg)
    tables = {}
    for prefix in ("params", "ema"):
        arrays = {}
        for name, shape in expected.items():
            key = f"{prefix}/{name}"
            if key not in tensors:
                raise CheckpointError(r.pos, f"missing tensor {key}")
            if tensors[key].shape != shape:
                raise CheckpointError(r.pos, f"tensor {key} has shape {tensors[key].shape}, expected {shape}")
            arrays[name] = tensors[key]
        tables[prefix] = DenoiserParams(dcfg, arrays)
    if len(tensors) != 2 * len(expected):
        raise CheckpointError(r.pos, "unexpected extra tensors")
    return Checkpoint(run_config, step_count, tables["params"], tables["ema"], rng_note, version)


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
