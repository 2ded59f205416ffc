"""Binary checkpoint format.

Layout (little-endian)::

    b"DFRC"  | u32 version | u32 len + UTF-8 config (INI)
    then per tensor until EOF:
    u32 name_len | name bytes | u32 rank | u32 dim * rank | float32 payload

The iteration counter lives in the ``[checkpoint]`` section of the config text.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .config import TrainConfig

MAGIC = b"DFRC"
VERSION = 1


@dataclass
class Checkpoint:
    config: TrainConfig
    tensors: dict[str, np.ndarray]
    iteration: int = 0
    version: int = VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    text = ckpt.config.to_ini({"iteration": str(ckpt.iteration)}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        for name, arr in ckpt.tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> Checkpoint:
    import configparser

    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path} is not a DFR checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", blob, 8)
    pos = 12
    text = blob[pos : pos + clen].decode("utf-8")
    pos += clen
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    iteration = int(cp["checkpoint"]["iteration"]) if cp.has_section("checkpoint") else 0
    config = TrainConfig.from_mapping(dict(cp["dfr"]))
    tensors: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count
        tensors[name] = arr
    return Checkpoint(config, tensors, iteration, version)
