"""Binary tensor container shared by datasets and checkpoints.

Layout (little-endian)::

    b"MMLD" | u32 version | u32 count |
    count x ( u32 name_len | name utf-8 | u32 rank | rank x u64 dim | f64 payload )

Integer tensors are stored as exactly representable f64 values.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .nn import MlpParams

MAGIC = b"MMLD"
VERSION = 1


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind in "iub":
            if arr.size and np.max(np.abs(arr.astype(np.int64))) > 2**53:
                raise CheckpointError(f"{name}: integer too large for f64 storage")
        data = np.require(arr.astype("<f8"), requirements="C")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 12:
        raise CheckpointError("truncated header")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version} (expected {VERSION})")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise CheckpointError("truncated tensor name")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            end = pos + 8 * n
            if end > len(buf):
                raise CheckpointError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(dims)
            pos = end
    except struct.error as exc:
        raise CheckpointError(f"truncated container: {exc}") from exc
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes")
    return out


def save(path, tensors: dict[str, np.ndarray]) -> None:
    try:
        Path(path).write_bytes(dumps(tensors))
    except OSError as exc:
        raise CheckpointError(str(exc)) from exc


def load(path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(str(exc)) from exc
    return loads(buf)


def as_int(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr).astype(np.int64)


_ACT_CODES = {"silu": 0, "relu": 1, "tanh": 2, "square": 3, "identity": 4}


def mlp_tensors(prefix: str, params: MlpParams) -> dict[str, np.ndarray]:
    """Name the layers ``{prefix}.layer{k}.w|b`` plus structure tensors."""
    out = {}
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        out[f"{prefix}.layer{k}.w"] = w
        out[f"{prefix}.layer{k}.b"] = b
    out[f"{prefix}.acts"] = np.array(params.acts, dtype=np.int64)
    out[f"{prefix}.activation"] = np.array([_ACT_CODES[params.activation]])
    out[f"{prefix}.skips"] = np.array(params.skips, dtype=np.int64).reshape(-1, 2)
    return out


def mlp_from_tensors(prefix: str, tensors: dict[str, np.ndarray]) -> MlpParams:
    try:
        acts = [bool(a) for a in as_int(tensors[f"{prefix}.acts"])]
        code = int(tensors[f"{prefix}.activation"][0])
        activation = {v: k for k, v in _ACT_CODES.items()}[code]
        skips = [tuple(int(v) for v in row) for row in as_int(tensors[f"{prefix}.skips"])]
        weights = [tensors[f"{prefix}.layer{k}.w"].copy() for k in range(len(acts))]
        biases = [tensors[f"{prefix}.layer{k}.b"].copy() for k in range(len(acts))]
    except KeyError as exc:
        raise CheckpointError(f"missing tensor {exc.args[0]!r}") from exc
    return MlpParams(weights, biases, acts, activation, skips)
