"""Checkpoint files and checkpoint averaging.

Byte layout (little-endian)::

    4 bytes    magic b"MSKC"
    u32        version (1)
    64 bytes   config fingerprint, ASCII hex SHA-256
    u32        length N of the metadata blob
    N bytes    UTF-8 JSON: {"step", "stage", "model", "opt_step"}
    u32        number of tensor entries
    entries, each:
        u16      name length, then the UTF-8 name
        u8       dtype code (0 = f32, 1 = f64)
        u8       ndim, then ndim x u32 shape
        data     row-major, prod(shape) elements

Entry names are ``param/<key>``, ``adam_m/<key>`` and ``adam_v/<key>``.
"""

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..nnet.model import ModelConfig
from .optim import AdamState

CKPT_MAGIC = b"MSKC"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    step: int
    fingerprint: str
    stage: str = ""
    model: Optional[ModelConfig] = None
    opt: AdamState = field(default_factory=AdamState)


def make_checkpoint(params, step: int, cfg: ModelConfig, stage: str,
                    opt: Optional[AdamState] = None) -> Checkpoint:
    return Checkpoint({k: v.copy() for k, v in params.items()}, step, cfg.fingerprint(), stage,
                      cfg, opt if opt is not None else AdamState())


def _pack_entry(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def save_checkpoint(path, ckpt: Checkpoint, overwrite: bool = False) -> None:
    """Write ``ckpt``; refuses to replace an existing file unless ``overwrite``."""
    path = Path(path)
    if path.exists() and not overwrite:
        raise CheckpointError(f"{path} already exists; artifact files are never overwritten")
    if len(ckpt.fingerprint) != 64:
        raise CheckpointError("fingerprint must be a 64-char hex digest")
    meta = {"step": ckpt.step, "stage": ckpt.stage, "opt_step": ckpt.opt.step,
            "model": asdict(ckpt.model) if ckpt.model is not None else None}
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    entries = [("param/" + k, v) for k, v in ckpt.params.items()]
    entries += [("adam_m/" + k, v) for k, v in ckpt.opt.m.items()]
    entries += [("adam_v/" + k, v) for k, v in ckpt.opt.v.items()]
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), ckpt.fingerprint.encode("ascii"),
             struct.pack("<I", len(meta_raw)), meta_raw, struct.pack("<I", len(entries))]
    parts += [_pack_entry(n, a) for n, a in entries]
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    fingerprint = take(64).decode("ascii")
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode("utf-8"))
    (n_entries,) = struct.unpack("<I", take(4))
    tables: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for _ in range(n_entries):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(count * dt.itemsize), dtype=dt).reshape(shape)
        kind, _, key = name.partition("/")
        tables[kind][key] = arr.astype(dt.newbyteorder("="))
    model = ModelConfig(**meta["model"]) if meta.get("model") else None
    return Checkpoint(tables["param"], meta["step"], fingerprint, meta.get("stage", ""), model,
                      AdamState(tables["adam_m"], tables["adam_v"], meta.get("opt_step", 0)))


def average_checkpoints(ckpts: Sequence[Checkpoint]) -> Dict[str, np.ndarray]:
    """Elementwise mean of the parameters (optimizer state is ignored)."""
    if not ckpts:
        raise CheckpointError("no checkpoints to average")
    fp = ckpts[0].fingerprint
    for c in ckpts[1:]:
        if c.fingerprint != fp:
            raise CheckpointError(
                f"fingerprint mismatch: step {c.step} ({c.fingerprint[:12]}) vs "
                f"step {ckpts[0].step} ({fp[:12]})")
        if set(c.params) != set(ckpts[0].params):
            raise CheckpointError(f"parameter keysets differ at step {c.step}")
    out = {}
    for k in ckpts[0].params:
        acc = np.zeros_like(ckpts[0].params[k], dtype=np.float64)
        for c in ckpts:
            acc += c.params[k]
        out[k] = (acc / len(ckpts)).astype(ckpts[0].params[k].dtype)
    return out


def list_checkpoints(ckpt_dir) -> List[Path]:
    """Checkpoint files in ``ckpt_dir`` ordered by step number."""
    paths = list(Path(ckpt_dir).glob("step_*.mskc"))
    return sorted(paths, key=lambda p: int(p.stem.split("_")[1]))
