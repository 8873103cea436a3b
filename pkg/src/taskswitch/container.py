"""Multi-task container files and the decoded sparse vector runtime form.

Layout: magic "TSWC", version byte, u16 task count; per task a
length-prefixed UTF-8 id, u16 module count, then the byte-aligned module
streams back to back; finally one u32-length-prefixed UTF-8 JSON metadata
block (module names, model layout, optional extras). Multi-byte framing
integers are little-endian; the module streams themselves are the MSB-first
bitstreams from codec.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import (BitReader, CodecError, DecodedModule, EncodedModule,
                    choose_format, decode_at, encode_dense)
from .model import MlpSpec
from .switch import TaskSwitch
from .vectors import ParamSet, StructureError

MAGIC = b"TSWC"
VERSION = 1


@dataclass
class SparseModule:
    """One decoded module: support indices and final (scale-applied) values."""

    length: int
    support: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.support.size)

    @property
    def sparsity(self) -> float:
        return 1.0 - self.nnz / self.length

    def dense(self) -> np.ndarray:
        out = np.zeros(self.length)
        out[self.support] = self.values
        return out


@dataclass
class SparseTaskVector:
    task_id: str
    modules: list[tuple[str, SparseModule]]

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.modules]

    def total_size(self) -> int:
        return sum(m.length for _, m in self.modules)

    def total_nnz(self) -> int:
        return sum(m.nnz for _, m in self.modules)

    def sparsity(self) -> float:
        return 1.0 - self.total_nnz() / self.total_size()


def streams_from_switch(sw: TaskSwitch) -> list[EncodedModule]:
    """Binary switches as 1-bit modules: centers -+1, the knob in the scale."""
    out = []
    for _, mod in sw.modules:
        vals = np.where(mod.mask, mod.polarity.astype(np.float64), 0.0)
        out.append(choose_format(vals, 1, 2.0, 2.0, mod.scale))
    return out


def streams_from_params(params: ParamSet) -> list[EncodedModule]:
    return [encode_dense(v) for _, v in params.modules]


def save_container(path, tasks: list[tuple[str, list[EncodedModule]]],
                   metadata: dict | None = None) -> None:
    buf = bytearray()
    buf += MAGIC
    buf.append(VERSION)
    buf += struct.pack("<H", len(tasks))
    for task_id, mods in tasks:
        ident = task_id.encode("utf-8")
        buf += struct.pack("<H", len(ident))
        buf += ident
        buf += struct.pack("<H", len(mods))
        for em in mods:
            buf += em.data
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(meta))
    buf += meta
    Path(path).write_bytes(bytes(buf))


def load_container(path) -> tuple[list[tuple[str, list[DecodedModule]]], dict]:
    data = Path(path).read_bytes()
    if len(data) < 7 or data[:4] != MAGIC:
        raise CodecError(f"{path}: not a task container")
    if data[4] != VERSION:
        raise CodecError(f"{path}: unsupported container version {data[4]}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    cursor = 5
    (n_tasks,) = struct.unpack_from("<H", data, cursor)
    cursor += 2
    tasks = []
    for _ in range(n_tasks):
        (id_len,) = struct.unpack_from("<H", data, cursor)
        cursor += 2
        task_id = data[cursor:cursor + id_len].decode("utf-8")
        cursor += id_len
        (n_mods,) = struct.unpack_from("<H", data, cursor)
        cursor += 2
        mods = []
        for _ in range(n_mods):
            reader = BitReader(bits, pos=cursor * 8)
            dm = decode_at(reader)
            mods.append(dm)
            cursor += dm.bits_consumed // 8
        tasks.append((task_id, mods))
    (meta_len,) = struct.unpack_from("<I", data, cursor)
    cursor += 4
    metadata = json.loads(data[cursor:cursor + meta_len].decode("utf-8")) \
        if meta_len else {}
    return tasks, metadata


def sparse_from_decoded(task_id: str, decoded: list[DecodedModule],
                        names: list[str] | None) -> SparseTaskVector:
    modules = []
    for i, dm in enumerate(decoded):
        name = names[i] if names else f"mod{i}"
        support = np.flatnonzero(dm.mask)
        modules.append((name, SparseModule(
            length=dm.header.count,
            support=support,
            values=dm.values[support] * dm.header.scale,
        )))
    return SparseTaskVector(task_id, modules)


def save_bundle(path, entries: list[tuple[str, list[EncodedModule]]],
                module_names: list[str],
                extra_metadata: dict | None = None) -> None:
    metadata = {"module_names": list(module_names)}
    if extra_metadata:
        metadata.update(extra_metadata)
    save_container(path, entries, metadata)


def load_bundle(path) -> tuple[list[SparseTaskVector], dict]:
    tasks, metadata = load_container(path)
    names = metadata.get("module_names")
    out = [sparse_from_decoded(tid, mods, names) for tid, mods in tasks]
    return out, metadata


def save_params(path, spec: MlpSpec, params: ParamSet,
                name: str = "model") -> None:
    """Store a parameter set densely (float32 at rest) with its layout."""
    metadata = {"model": spec.to_dict(), "module_names": params.names}
    save_container(path, [(name, streams_from_params(params))], metadata)


def load_params(path) -> tuple[MlpSpec, ParamSet, str]:
    tasks, metadata = load_container(path)
    if len(tasks) != 1:
        raise StructureError(f"{path}: expected one parameter set, "
                             f"found {len(tasks)} tasks")
    if "model" not in metadata:
        raise StructureError(f"{path}: container has no model layout")
    spec = MlpSpec.from_dict(metadata["model"])
    task_id, mods = tasks[0]
    names = metadata.get("module_names") or [f"mod{i}"
                                             for i in range(len(mods))]
    params = ParamSet([(names[i], dm.values * dm.header.scale)
                       for i, dm in enumerate(mods)])
    return spec, params, task_id
