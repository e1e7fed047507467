"""Binary checkpoint container.

Layout (all little-endian):

    magic   4 bytes  b"WISR"
    version u32      currently 1
    iteration u64
    records, back to back until end of file:
        name_len u32, name bytes (utf-8)
        rank u32, then rank extents as u64
        payload: prod(extents) float32 values

Records are written in sorted name order, so saving the same state
twice yields byte-identical files.  Model state is stored under
"param/", "buffer/", and "velocity/" name prefixes; two reserved
records make a file self-describing: "__spec__" holds the model
geometry as a small vector (see model.spec_to_vector) plus the eval
resize, and "__digest__" carries the 64-bit config digest bit-cast into
two float32 slots (its payload is raw bits, not numbers).
"""

from __future__ import annotations

import io
import struct
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .model import WiserModel, WiserModelSpec, spec_to_vector, spec_from_vector
from .optim import SgdState
from .tensor import Tensor

MAGIC = b"WISR"
VERSION = 1

SPEC_RECORD = "__spec__"
DIGEST_RECORD = "__digest__"


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint bytes."""


def write_records(path: str, iteration: int, records: Dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<Q", iteration))
    for name in sorted(records):
        arr = np.ascontiguousarray(records[name], dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<Q", d))
        buf.write(arr.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_records(path: str):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r} at offset 0")
    if len(data) < 16:
        raise CheckpointError("file too short for header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    (iteration,) = struct.unpack_from("<Q", data, 8)
    pos = 16
    records: Dict[str, np.ndarray] = {}
    while pos < len(data):
        if pos + 4 > len(data):
            raise CheckpointError(f"truncated record header at offset {pos}")
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + name_len > len(data):
            raise CheckpointError(f"truncated record name at offset {pos}")
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        if pos + 4 > len(data):
            raise CheckpointError(f"truncated record {name!r} at offset {pos}")
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + 8 * rank > len(data):
            raise CheckpointError(f"truncated extents of {name!r} at offset {pos}")
        shape = struct.unpack_from(f"<{rank}Q" if rank else "<0Q", data, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        nbytes = 4 * count
        if pos + nbytes > len(data):
            raise CheckpointError(f"truncated payload of {name!r} at offset {pos}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
        records[name] = arr.copy()
        pos += nbytes
    return iteration, records


# ---------------------------------------------------------------------------
# model-level save / load

@dataclass
class CheckpointState:
    iteration: int
    spec: WiserModelSpec
    params: Dict[str, Tensor]
    buffers: Dict[str, np.ndarray]
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    config_digest: Optional[int] = None
    eval_resize: int = 0

    def build_model(self) -> WiserModel:
        return WiserModel.from_state(self.spec, self.params, self.buffers)


def _digest_to_record(digest: int) -> np.ndarray:
    return np.frombuffer(struct.pack("<Q", digest & 0xFFFFFFFFFFFFFFFF), dtype="<f4").copy()


def _digest_from_record(arr: np.ndarray) -> int:
    (digest,) = struct.unpack("<Q", np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return digest


def save_checkpoint(path: str, iteration: int, model: WiserModel,
                    state: Optional[SgdState] = None,
                    config_digest: Optional[int] = None,
                    eval_resize: int = 0) -> None:
    records: Dict[str, np.ndarray] = {}
    for name, t in model.params.items():
        records[f"param/{name}"] = t.data
    for name, arr in model.buffers.items():
        records[f"buffer/{name}"] = arr
    if state is not None:
        for name, v in state.velocity.items():
            records[f"velocity/{name}"] = v
    vec = spec_to_vector(model.spec)
    vec[-1] = float(eval_resize)
    records[SPEC_RECORD] = vec
    if config_digest is not None:
        records[DIGEST_RECORD] = _digest_to_record(config_digest)
    write_records(path, iteration, records)


def load_checkpoint(path: str, expect_digest: Optional[int] = None) -> CheckpointState:
    """Read a checkpoint; warns when its config digest is not `expect_digest`."""
    iteration, records = read_records(path)
    if SPEC_RECORD not in records:
        raise CheckpointError(f"checkpoint lacks the {SPEC_RECORD} descriptor")
    vec = records.pop(SPEC_RECORD)
    spec = spec_from_vector(vec)
    eval_resize = int(round(float(np.asarray(vec).reshape(-1)[-1])))
    digest = None
    if DIGEST_RECORD in records:
        digest = _digest_from_record(records.pop(DIGEST_RECORD))
    if expect_digest is not None and digest != expect_digest:
        warnings.warn(f"checkpoint {path} was written under a different config "
                      f"(digest {digest} != expected {expect_digest})",
                      stacklevel=2)
    params: Dict[str, Tensor] = {}
    buffers: Dict[str, np.ndarray] = {}
    velocity: Dict[str, np.ndarray] = {}
    for name, arr in records.items():
        if name.startswith("param/"):
            params[name[len("param/"):]] = Tensor(arr)
        elif name.startswith("buffer/"):
            buffers[name[len("buffer/"):]] = arr
        elif name.startswith("velocity/"):
            velocity[name[len("velocity/"):]] = arr
        else:
            raise CheckpointError(f"unrecognized record {name!r}")
    return CheckpointState(iteration=iteration, spec=spec, params=params,
                           buffers=buffers, velocity=velocity,
                           config_digest=digest, eval_resize=eval_resize)
