"""Binary weight container.

Layout (all integers little-endian)::

    8 bytes   magic  b"VALCKPT\\0"
    uint32    format version
    uint64    manifest length in bytes
    ...       manifest, UTF-8 JSON
    ...       tensor payloads, row-major float64 ("<f8"), in manifest order

The manifest holds ``meta`` (model config and free-form metadata) and a
``tensors`` list of ``{name, dtype, shape, offset, nbytes, adapter}``.
Offsets are relative to the start of the payload section.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lora import LoraAdapter, LoraSet, parse_site, site_key
from .model import BackboneParams, ModelConfig
from .numerics import Tensor

MAGIC = b"VALCKPT\0"
VERSION = 1
TEACHER_PREFIX = "teacher."


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: BackboneParams
    adapters: LoraSet | None = None
    teacher_adapters: LoraSet | None = None
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.params.config


def _adapter_entries(lora_set: LoraSet | None, prefix: str = ""):
    if lora_set is None:
        return []
    out = []
    for site, ad in lora_set.items():
        key = prefix + site_key(site)
        out.append((f"{key}.lora_A", ad.A.data, {"scaling": ad.scaling}))
        out.append((f"{key}.lora_B", ad.B.data, {"scaling": ad.scaling}))
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    entries = [(name, t.data, None, False) for name, t in ckpt.params.named_tensors()]
    entries += [(n, d, extra, True) for n, d, extra in _adapter_entries(ckpt.adapters)]
    entries += [(n, d, extra, True) for n, d, extra in _adapter_entries(ckpt.teacher_adapters, TEACHER_PREFIX)]

    manifest = {"meta": {**ckpt.meta, "model": ckpt.config.to_dict()}, "tensors": []}
    payloads, offset = [], 0
    for name, data, extra, is_adapter in entries:
        raw = np.ascontiguousarray(data, dtype="<f8").tobytes()
        item = {"name": name, "dtype": "float64", "shape": list(data.shape),
                "offset": offset, "nbytes": len(raw), "adapter": is_adapter,
                "frozen": not is_adapter}
        if extra:
            item.update(extra)
        manifest["tensors"].append(item)
        payloads.append(raw)
        offset += len(raw)
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack_from("<IQ", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = 8 + struct.calcsize("<IQ")
    manifest = json.loads(buf[start:start + mlen].decode("utf-8"))
    payload = memoryview(buf)[start + mlen:]

    meta = dict(manifest["meta"])
    config = ModelConfig.from_dict(meta.pop("model"))
    base: dict[str, Tensor] = {}
    factors: dict[str, dict] = {}
    for item in manifest["tensors"]:
        if item["dtype"] != "float64":
            raise CheckpointError(f"unsupported dtype {item['dtype']}")
        raw = payload[item["offset"]:item["offset"] + item["nbytes"]]
        data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(item["shape"])
        name = item["name"]
        if not item["adapter"]:
            base[name] = Tensor(data, requires_grad=False, name=name)
            continue
        key, factor = name.rsplit(".", 1)
        slot = factors.setdefault(key, {"scaling": item.get("scaling", 1.0)})
        slot[factor] = data

    student, teacher = LoraSet(), LoraSet()
    for key, slot in factors.items():
        target = student
        if key.startswith(TEACHER_PREFIX):
            key, target = key[len(TEACHER_PREFIX):], teacher
        target[parse_site(key)] = LoraAdapter(
            Tensor(slot["lora_A"], requires_grad=target is student),
            Tensor(slot["lora_B"], requires_grad=target is student),
            slot["scaling"],
        )
    return Checkpoint(
        BackboneParams(base, config),
        student if len(student) else None,
        teacher if len(teacher) else None,
        meta,
    )
