"""CRC-guarded binary checkpoints.

File layout: 4-byte magic ``CBKP``, little-endian uint32 manifest length,
the manifest JSON (format version, run config, and a parameter index of
name -> shape/offset/dtype), the blob of concatenated little-endian
float64 arrays, and a trailing little-endian uint32 CRC32 of the blob.
A round-trip reproduces every parameter bit for bit.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import CheckpointError
from .model import ModelState, init_model_state

MAGIC = b"CBKP"
FORMAT_VERSION = 1
DTYPE = "<f8"


def save_checkpoint(state: ModelState, cfg: RunConfig, path) -> None:
    params = list(state.named_parameters())
    index = {}
    chunks = []
    offset = 0
    for name, p in params:
        if name in index:
            raise CheckpointError(f"duplicate parameter name {name!r}")
        raw = p.data.astype(DTYPE).tobytes()
        index[name] = {"shape": list(p.shape), "offset": offset, "dtype": DTYPE}
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = json.dumps({"format_version": FORMAT_VERSION,
                           "config": cfg.to_dict(),
                           "params": index},
                          sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        f.write(blob)
        f.write(struct.pack("<I", zlib.crc32(blob)))


def load_checkpoint(path) -> tuple[ModelState, RunConfig]:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (mlen,) = struct.unpack("<I", buf[4:8])
    mstart, mend = 8, 8 + mlen
    if mend + 4 > len(buf):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(buf[mstart:mend].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: invalid manifest: {e}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format_version {version!r}")

    blob = buf[mend:-4]
    (stored_crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(blob) != stored_crc:
        raise CheckpointError(f"{path}: blob CRC mismatch (corrupt checkpoint)")

    cfg = RunConfig.from_dict(manifest["config"])
    state = init_model_state(cfg)
    index = manifest["params"]
    claimed = []
    for name, p in state.named_parameters():
        entry = index.get(name)
        if entry is None:
            raise CheckpointError(f"{path}: checkpoint missing parameter {name!r}")
        if entry.get("dtype") != DTYPE:
            raise CheckpointError(f"{path}: parameter {name!r} has unsupported dtype "
                                  f"{entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        if shape != p.shape:
            raise CheckpointError(f"{path}: parameter {name!r} shape {shape} does not "
                                  f"match expected {p.shape}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        lo = int(entry["offset"])
        hi = lo + nbytes
        if lo < 0 or hi > len(blob):
            raise CheckpointError(f"{path}: parameter {name!r} offsets out of bounds")
        claimed.append((lo, hi, name))
        p.data[...] = np.frombuffer(blob[lo:hi], dtype=DTYPE).reshape(shape)
    extra = set(index) - {name for _, name in
                          ((None, n) for n, _ in state.named_parameters())}
    if extra:
        raise CheckpointError(f"{path}: unknown parameters in manifest: {sorted(extra)}")
    claimed.sort()
    for (lo1, hi1, n1), (lo2, hi2, n2) in zip(claimed, claimed[1:]):
        if hi1 > lo2:
            raise CheckpointError(f"{path}: overlapping blob ranges for {n1!r} and {n2!r}")
    return state, cfg
