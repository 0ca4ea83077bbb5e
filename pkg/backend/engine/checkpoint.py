"""
EDIV checkpoint format

Layout (all integers little-endian):
    b"EDIV"                  magic
    uint8                    version (1)
    uint32                   layer count
      per layer:  uint8 kind code, uint16 name length, name (utf-8), 4 x int32 fields
                  conv2d: in, out, kernel, padding (-1 = same); linear: in, out, 0, 0
    uint32                   parameter count
      per tensor: uint16 name length, name, uint8 ndim, ndim x uint32 dims, float64 data
    uint32                   mask count
      per mask:   uint16 name length, name, uint8 ndim, ndim x uint32 dims,
                  packed bits (little bit order, ceil(n / 8) bytes)
    uint32                   metadata length, then UTF-8 JSON (sorted keys)
"""

import io
import json
import logging
import struct
from pathlib import Path
from typing import Any, BinaryIO, Dict, Optional, Tuple, Union

import numpy as np

from .network import LAYER_KINDS, Conv2d, Layer, Linear, Network
from .tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"EDIV"
VERSION = 1
KIND_CODES = {"conv2d": 1, "linear": 2, "relu": 3, "maxpool2x2": 4, "global_avg_pool": 5,
              "flatten": 6}
CODE_KINDS = {code: kind for kind, code in KIND_CODES.items()}


class CheckpointError(ValueError):
    """Raised for malformed or incompatible checkpoint files"""


def _write_name(stream: BinaryIO, name: str):
    raw = name.encode("utf-8")
    stream.write(struct.pack("<H", len(raw)))
    stream.write(raw)


def _read_exact(stream: BinaryIO, count: int) -> bytes:
    data = stream.read(count)
    if len(data) != count:
        raise CheckpointError("Unexpected end of checkpoint data")
    return data


def _read_name(stream: BinaryIO) -> str:
    (length,) = struct.unpack("<H", _read_exact(stream, 2))
    return _read_exact(stream, length).decode("utf-8")


def _write_shape(stream: BinaryIO, shape: Tuple[int, ...]):
    stream.write(struct.pack("<B", len(shape)))
    stream.write(struct.pack(f"<{len(shape)}I", *shape))


def _read_shape(stream: BinaryIO) -> Tuple[int, ...]:
    (ndim,) = struct.unpack("<B", _read_exact(stream, 1))
    return tuple(struct.unpack(f"<{ndim}I", _read_exact(stream, 4 * ndim)))


def _layer_fields(layer: Layer) -> Tuple[int, int, int, int]:
    if isinstance(layer, Conv2d):
        padding = -1 if layer.padding is None else layer.padding
        return layer.in_channels, layer.out_channels, layer.kernel_size, padding
    if isinstance(layer, Linear):
        return layer.in_features, layer.out_features, 0, 0
    return 0, 0, 0, 0


def _make_layer(kind: str, name: str, fields: Tuple[int, int, int, int]) -> Layer:
    cls = LAYER_KINDS[kind]
    if kind == "conv2d":
        padding = None if fields[3] == -1 else fields[3]
        return cls(name, fields[0], fields[1], fields[2], padding)
    if kind == "linear":
        return cls(name, fields[0], fields[1])
    return cls(name)


def dumps(net: Network, metadata: Optional[Dict[str, Any]] = None) -> bytes:
    stream = io.BytesIO()
    stream.write(MAGIC)
    stream.write(struct.pack("<B", VERSION))

    stream.write(struct.pack("<I", len(net.layers)))
    for layer in net.layers:
        stream.write(struct.pack("<B", KIND_CODES[layer.kind]))
        _write_name(stream, layer.name)
        stream.write(struct.pack("<4i", *_layer_fields(layer)))

    stream.write(struct.pack("<I", len(net.params)))
    for name, tensor in net.params.items():
        _write_name(stream, name)
        _write_shape(stream, tensor.shape)
        stream.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())

    stream.write(struct.pack("<I", len(net.masks)))
    for name, mask in net.masks.items():
        _write_name(stream, name)
        _write_shape(stream, mask.shape)
        stream.write(np.packbits(mask.astype(bool).ravel(), bitorder="little").tobytes())

    meta = json.dumps(metadata or {}, sort_keys=True, default=str).encode("utf-8")
    stream.write(struct.pack("<I", len(meta)))
    stream.write(meta)
    return stream.getvalue()


def loads(data: bytes) -> Tuple[Network, Dict[str, Any]]:
    stream = io.BytesIO(data)
    if stream.read(4) != MAGIC:
        raise CheckpointError("Not an EDIV checkpoint (bad magic)")
    (version,) = struct.unpack("<B", _read_exact(stream, 1))
    if version != VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}")

    (layer_count,) = struct.unpack("<I", _read_exact(stream, 4))
    layers = []
    for _ in range(layer_count):
        (code,) = struct.unpack("<B", _read_exact(stream, 1))
        if code not in CODE_KINDS:
            raise CheckpointError(f"Unknown layer kind code {code}")
        name = _read_name(stream)
        fields = struct.unpack("<4i", _read_exact(stream, 16))
        layers.append(_make_layer(CODE_KINDS[code], name, fields))

    (param_count,) = struct.unpack("<I", _read_exact(stream, 4))
    params = {}
    for _ in range(param_count):
        name = _read_name(stream)
        shape = _read_shape(stream)
        count = int(np.prod(shape))
        values = np.frombuffer(_read_exact(stream, 8 * count), dtype="<f8").reshape(shape)
        params[name] = Tensor(values.astype(np.float64))

    (mask_count,) = struct.unpack("<I", _read_exact(stream, 4))
    masks = {}
    for _ in range(mask_count):
        name = _read_name(stream)
        shape = _read_shape(stream)
        count = int(np.prod(shape))
        packed = np.frombuffer(_read_exact(stream, (count + 7) // 8), dtype=np.uint8)
        bits = np.unpackbits(packed, count=count, bitorder="little")
        masks[name] = bits.reshape(shape).astype(np.float64)

    (meta_length,) = struct.unpack("<I", _read_exact(stream, 4))
    metadata = json.loads(_read_exact(stream, meta_length).decode("utf-8")) if meta_length else {}

    try:
        net = Network(layers, params, masks)
    except ValueError as e:
        raise CheckpointError(f"Checkpoint parameters do not match its layer table: {e}") from e
    return net, metadata


def save_checkpoint(net: Network, path: Union[str, Path],
                    metadata: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(net, metadata))
    logger.info(f"Saved checkpoint {path} ({net.num_parameters()} parameters, "
                f"{len(net.masks)} masks)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Network, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        return loads(path.read_bytes())
    except CheckpointError as e:
        raise CheckpointError(f"{path}: {e}") from e
