"""Binary checkpoint format shared by the model and trainer.

Layout (little-endian): magic ``ZORD``, format version u32, entry count u32,
then per entry a u32 name length, the UTF-8 name, a u32 rank, u32 dims, and
the raw float32 tensor data. A JSON sidecar at ``<path>.json`` stores the
model and training configuration.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "sidecar_path"]

MAGIC = b"ZORD"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor], config: dict) -> None:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            data = tensors[name].detach().to(torch.float32).numpy()
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f4").tobytes())
    sidecar_path(path).write_text(json.dumps(config, indent=2, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = 12
    tensors: dict[str, torch.Tensor] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            numel = int(np.prod(shape, dtype=np.int64)) if rank else 1
            data = np.frombuffer(raw, dtype="<f4", count=numel, offset=offset).reshape(shape)
            offset += 4 * numel
            tensors[name] = torch.from_numpy(data.copy())
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path} is truncated or corrupt: {exc}") from exc
    sidecar = sidecar_path(path)
    if not sidecar.exists():
        raise CheckpointError(f"missing config sidecar {sidecar}")
    config = json.loads(sidecar.read_text())
    return tensors, config
