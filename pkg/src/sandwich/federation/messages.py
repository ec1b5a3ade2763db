"""Cross-boundary messages and their binary frame encoding.

Frame layout (all integers little-endian)::

    u32 frame_length            # bytes that follow
    u32 header_length
    header                      # UTF-8 JSON
    tensor blobs                # concatenated, in header order

The header carries ``type``, ``step_id``, ``branch_id``, ``direction``,
``phase`` and a ``tensors`` list of ``{name, dtype, shape}``. Tensors are
``float32`` or ``int32``, little-endian, C-order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

FEATURE = "FeatureMessage"
GRADIENT = "GradientMessage"
NODE_TO_SERVER = "node_to_server"
SERVER_TO_NODE = "server_to_node"

HEADER_KEYS = frozenset({"type", "step_id", "branch_id", "direction", "phase", "tensors"})
# Tensor fields each message type may carry.
ALLOWED_TENSORS = {
    FEATURE: frozenset({"features", "set_index", "labels", "align_flags"}),
    GRADIENT: frozenset({"gradient"}),
}
REQUIRED_TENSORS = {
    FEATURE: frozenset({"features", "set_index"}),
    GRADIENT: frozenset({"gradient"}),
}

_DTYPES = {"float32": np.dtype("<f4"), "int32": np.dtype("<i4")}


class FrameError(ValueError):
    pass


@dataclass
class Message:
    type: str
    step_id: int
    branch_id: str
    direction: str
    tensors: dict = field(default_factory=dict)
    phase: str = "train"
    # Anything else a (misbehaving) sender adds to the header.
    extra_header: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]


def feature_message(step_id, branch_id, features, set_index, *, direction=NODE_TO_SERVER,
                    labels=None, align_flags=None, phase="train") -> Message:
    tensors = {"features": np.asarray(features, dtype=np.float32),
               "set_index": np.asarray(set_index, dtype=np.int32)}
    if labels is not None:
        tensors["labels"] = np.asarray(labels, dtype=np.int32)
    if align_flags is not None:
        tensors["align_flags"] = np.asarray(align_flags, dtype=np.int32)
    return Message(FEATURE, step_id, branch_id, direction, tensors, phase)


def gradient_message(step_id, branch_id, gradient, *, direction, phase="train") -> Message:
    return Message(GRADIENT, step_id, branch_id, direction,
                   {"gradient": np.asarray(gradient, dtype=np.float32)}, phase)


def encode(msg: Message) -> bytes:
    specs, blobs = [], []
    for name, arr in msg.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            dtype = "float32"
        elif arr.dtype.kind in "iub":
            dtype = "int32"
        else:
            raise FrameError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        specs.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        blobs.append(raw)
    header = {
        **msg.extra_header,
        "type": msg.type,
        "step_id": int(msg.step_id),
        "branch_id": msg.branch_id,
        "direction": msg.direction,
        "phase": msg.phase,
        "tensors": specs,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    body = struct.pack("<I", len(hb)) + hb + b"".join(blobs)
    return struct.pack("<I", len(body)) + body


def decode_header(frame: bytes) -> tuple[dict, int]:
    if len(frame) < 8:
        raise FrameError("frame too short")
    (length,) = struct.unpack_from("<I", frame, 0)
    if length != len(frame) - 4:
        raise FrameError(f"frame length prefix {length} != payload {len(frame) - 4}")
    (hlen,) = struct.unpack_from("<I", frame, 4)
    header = json.loads(frame[8:8 + hlen].decode())
    return header, 8 + hlen


def decode(frame: bytes) -> Message:
    header, offset = decode_header(frame)
    tensors = {}
    for spec in header["tensors"]:
        dtype = _DTYPES.get(spec["dtype"])
        if dtype is None:
            raise FrameError(f"unsupported tensor dtype {spec['dtype']!r}")
        n = int(np.prod(spec["shape"], dtype=np.int64)) * dtype.itemsize
        if offset + n > len(frame):
            raise FrameError(f"tensor {spec['name']!r} overruns frame")
        tensors[spec["name"]] = np.frombuffer(frame, dtype, count=n // dtype.itemsize,
                                              offset=offset).reshape(spec["shape"]).copy()
        offset += n
    if offset != len(frame):
        raise FrameError("trailing bytes after last tensor")
    extra = {k: v for k, v in header.items() if k not in HEADER_KEYS}
    return Message(header["type"], header["step_id"], header["branch_id"], header["direction"],
                   tensors, header.get("phase", "train"), extra)
