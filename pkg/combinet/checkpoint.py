"""
The ``CBN1`` checkpoint container.

Layout, all little-endian::

    b"CBN1"  u32 version  u32 header_length  header (UTF-8 JSON)
    b"PARM"  u32 count
             per tensor: u16 name_length  name  u8 ndim  u32 dims...  float32 data
    b"OPTS"  (optional) u32 step  u32 count
             per tensor: u16 name_length  name  float32 m  float32 v

The header echoes the architecture and training configs, the epoch and any
extra metadata (such as normalisation statistics).
"""
import json
import struct

import numpy as np

from .utils import CheckpointError, CombinetError, dumps, write_atomic

MAGIC = b"CBN1"
VERSION = 1
PARAMS_TAG = b"PARM"
OPTIMIZER_TAG = b"OPTS"


class Checkpoint:
    def __init__(self, graph, arch, train=None, epoch=0, meta=None, state=None):
        self.graph = graph
        self.arch = arch
        self.train = train or {}
        self.epoch = epoch
        self.meta = meta or {}
        self.state = state


def _pack_name(name):
    encoded = name.encode("utf8")
    return struct.pack("<H", len(encoded)) + encoded


def _pack_array(array):
    return np.ascontiguousarray(array, dtype="<f4").tobytes()


def encode_checkpoint(graph, epoch=0, train_config=None, state=None, meta=None):
    if graph.config is None:
        raise CheckpointError("Only graphs built from an ArchConfig can be checkpointed")
    header = dumps(
        {
            "arch": graph.config.to_dict(),
            "train": train_config.to_dict() if hasattr(train_config, "to_dict") else train_config or {},
            "epoch": int(epoch),
            "meta": meta or {},
        }
    ).encode("utf8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    params = graph.parameters()
    parts.append(PARAMS_TAG + struct.pack("<I", len(params)))
    for name, tensor in params.items():
        parts.append(_pack_name(name))
        parts.append(struct.pack("<B", tensor.ndim))
        parts.append(struct.pack("<{}I".format(tensor.ndim), *tensor.shape))
        parts.append(_pack_array(tensor.data))
    if state is not None:
        parts.append(OPTIMIZER_TAG + struct.pack("<II", state.step, len(state.m)))
        for name in state.m:
            parts.append(_pack_name(name))
            parts.append(_pack_array(state.m[name]))
            parts.append(_pack_array(state.v[name]))
    return b"".join(parts)


def save_checkpoint(path, graph, epoch=0, train_config=None, state=None, meta=None):
    write_atomic(path, encode_checkpoint(graph, epoch, train_config, state, meta))


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.data):
            raise CheckpointError("Checkpoint {} is truncated".format(self.path))
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self):
        (length,) = self.unpack("<H")
        return self.take(length).decode("utf8")

    def floats(self, shape):
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float64)

    @property
    def done(self):
        return self.offset == len(self.data)


def load_checkpoint(path):
    "Rebuild the graph described by the header and load the stored parameters"
    from .arch import ArchConfig, build_combinet
    from .trainer import OptimizerState

    try:
        with open(path, "rb") as fp:
            data = fp.read()
    except OSError as e:
        raise CheckpointError("Could not read checkpoint {}: {}".format(path, e.strerror))
    reader = _Reader(data, path)
    if reader.take(4) != MAGIC:
        raise CheckpointError("{} is not a CBN1 checkpoint".format(path))
    version, header_length = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointError("Checkpoint {} has unsupported version {}".format(path, version))
    try:
        header = json.loads(reader.take(header_length).decode("utf8"))
    except ValueError as e:
        raise CheckpointError("Checkpoint {} has a corrupt header: {}".format(path, e))
    if reader.take(4) != PARAMS_TAG:
        raise CheckpointError("Checkpoint {} has no parameter section".format(path))
    (count,) = reader.unpack("<I")
    state_dict = {}
    for _ in range(count):
        name = reader.name()
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack("<{}I".format(ndim))
        state_dict[name] = reader.floats(shape)
    try:
        graph = build_combinet(ArchConfig.from_dict(header["arch"]))
        graph.load_state_dict(state_dict)
    except (CombinetError, KeyError) as e:
        raise CheckpointError(
            "Checkpoint {} does not match its architecture: {}".format(path, getattr(e, "message", e))
        )
    state = None
    if not reader.done:
        if reader.take(4) != OPTIMIZER_TAG:
            raise CheckpointError("Checkpoint {} has an unknown trailing section".format(path))
        step, count = reader.unpack("<II")
        params = graph.parameters()
        state = OptimizerState(params)
        state.step = step
        for _ in range(count):
            name = reader.name()
            if name not in params:
                raise CheckpointError("Optimizer state names unknown parameter {}".format(name))
            shape = params[name].shape
            state.m[name] = reader.floats(shape)
            state.v[name] = reader.floats(shape)
    return Checkpoint(
        graph,
        header["arch"],
        train=header.get("train"),
        epoch=header.get("epoch", 0),
        meta=header.get("meta"),
        state=state,
    )
