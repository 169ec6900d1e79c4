"""Versioned binary checkpoint container.

Layout: magic, version, one JSON metadata block (configs, subject ids,
epoch/alpha counters, RNG state, A-pose constants), then named float64
blobs sorted by name (part-network layers, projections, per-subject shape
codes, both VAE parameter sets, Adam moments). Writing is byte-identical
for identical content.
"""

import json
import struct

import numpy as np

MAGIC = b"BSDFCKPT"
VERSION = 1


def save_checkpoint(path, meta, blobs):
    """meta: JSON-serializable dict; blobs: dict[str, ndarray(float64)]."""
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(blobs)))
        for name in sorted(blobs):
            arr = np.ascontiguousarray(blobs[name], dtype=np.float64)
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(meta_len).decode())
        (count,) = struct.unpack("<I", fh.read(4))
        blobs = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
            data = np.frombuffer(fh.read(8 * int(np.prod(shape, dtype=np.int64))),
                                 dtype="<f8")
            blobs[name] = data.reshape(shape).copy()
    return meta, blobs


def rng_state_to_json(rng):
    """PCG64 generator state as a JSON-safe dict (big ints -> strings)."""
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"],
            "state": {k: str(v) for k, v in st["state"].items()},
            "has_uint32": st["has_uint32"], "uinteger": st["uinteger"]}


def rng_state_from_json(d):
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": d["bit_generator"],
        "state": {k: int(v) for k, v in d["state"].items()},
        "has_uint32": d["has_uint32"], "uinteger": d["uinteger"]}
    return rng
