"""Versioned binary checkpoints.

Layout (all integers little-endian):

    magic   8 bytes  b"RTKCHKPT"
    version u32
    header  u32 length + UTF-8 JSON (model config, seed, stretch constants,
            whether a pretrained snapshot is present)
    count   u32, then per tensor:
        name  u16 length + UTF-8 (sections: theta/, theta0/, gates/)
        ndim  u8, dims u32 each
        data  float32 little-endian

Round-trips are bit-exact, which is why only float32 models are accepted.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from .hardconcrete import GateParams
from .model import MaskedTransformer, ModelConfig

MAGIC = b"RTKCHKPT"
VERSION = 1


def _write_tensor(fh, name: str, arr: np.ndarray):
    data = np.ascontiguousarray(arr, dtype="<f4")
    name_b = name.encode("utf-8")
    fh.write(struct.pack("<H", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<B", data.ndim))
    for d in data.shape:
        fh.write(struct.pack("<I", d))
    fh.write(data.tobytes())


def _read_tensor(fh):
    (name_len,) = struct.unpack("<H", fh.read(2))
    name = fh.read(name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
    return name, data


def save_checkpoint(model: MaskedTransformer, path):
    if model.dtype != torch.float32:
        raise ValueError("checkpoints store 32-bit floats; model dtype must be float32")
    header = {
        "config": model.config.to_dict(),
        "seed": model.seed,
        "has_theta0": model.theta0 is not None,
        "gate_gamma": model.gates.gamma,
        "gate_zeta": model.gates.zeta,
    }
    tensors: list[tuple[str, np.ndarray]] = []
    for name, t in model.params.items():
        tensors.append((f"theta/{name}", t.detach().numpy()))
    if model.theta0 is not None:
        for name, t in model.theta0.items():
            tensors.append((f"theta0/{name}", t.numpy()))
    tensors.append(("gates/log_alpha", model.gates.log_alpha))
    tensors.append(("gates/beta", model.gates.beta))

    header_b = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header_b)))
        fh.write(header_b)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(fh, name, arr)


def load_checkpoint(path) -> MaskedTransformer:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = dict(_read_tensor(fh) for _ in range(count))

    model = MaskedTransformer(ModelConfig(**header["config"]), seed=header["seed"])
    with torch.no_grad():
        for name, t in model.params.items():
            t.copy_(torch.from_numpy(tensors[f"theta/{name}"].copy()))
    if header["has_theta0"]:
        model.theta0 = {
            name: torch.from_numpy(tensors[f"theta0/{name}"].copy())
            for name in model.params
        }
    model.gates = GateParams(
        log_alpha=tensors["gates/log_alpha"].copy(),
        beta=tensors["gates/beta"].copy(),
        gamma=header["gate_gamma"],
        zeta=header["gate_zeta"],
    )
    return model
