"""
Binary checkpoint format of the CNN.

All integers are little-endian::

    magic        4 bytes   b"SPL1"
    version      u32
    fingerprint  32 bytes  SHA-256 of the architecture string
    layer count  u32       parameterised layers, two tensors each
    per tensor:
        name length u16, UTF-8 name, rank u8, rank x u32 dims,
        float32 payload in row-major order

Tensors are stored kernel first, then bias, in layer order.
"""
import logging
import struct
from pathlib import Path
from typing import Dict, Sequence

import numpy as np

from spamlens.cnn_model import INPUT_SHAPE, SPAM_CNN_ARCHITECTURE, CnnModel, LayerSpec, build_model
from spamlens.errors import CheckpointError, ShapeError
from spamlens.files import atomic_write_bytes

log = logging.getLogger(__name__)

MAGIC = b"SPL1"
FORMAT_VERSION = 1
PAYLOAD_DTYPE = np.dtype("<f4")


def encode_checkpoint(model: CnnModel) -> bytes:
    params = model.parameters()
    chunks = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        model.fingerprint,
        struct.pack("<I", len(params) // 2),
    ]
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{tensor.ndim}I", tensor.ndim, *tensor.shape))
        chunks.append(np.ascontiguousarray(tensor, dtype=PAYLOAD_DTYPE).tobytes())
    return b"".join(chunks)


def save_checkpoint(model: CnnModel, path) -> Path:
    """Write ``model`` atomically to ``path``."""
    data = encode_checkpoint(model)
    path = atomic_write_bytes(path, data)
    log.info("wrote checkpoint %s (%d bytes, %d parameters)", path, len(data), model.param_count)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.data):
            raise CheckpointError(
                f"Checkpoint is truncated: needed {n} bytes for {what} at offset {self.offset}, "
                f"{len(self.data) - self.offset} left"
            )
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(
    data: bytes,
    architecture: Sequence[LayerSpec] = SPAM_CNN_ARCHITECTURE,
    input_shape=INPUT_SHAPE,
) -> CnnModel:
    """Rebuild a model from checkpoint bytes.

    Raises:
        CheckpointError: On bad magic, unsupported version, an architecture
            fingerprint that does not match ``architecture``, truncation,
            unexpected tensors or trailing bytes.
    """
    reader = _Reader(data)
    magic = reader.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError(f"Not a spamlens checkpoint: bad magic {magic!r}")
    (version,) = reader.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}, expected {FORMAT_VERSION}")

    model = build_model(seed=0, architecture=architecture, input_shape=input_shape)
    fingerprint = reader.take(32, "architecture fingerprint")
    if fingerprint != model.fingerprint:
        raise CheckpointError(
            "Checkpoint architecture fingerprint does not match the expected architecture "
            f"({fingerprint.hex()[:16]}... vs {model.fingerprint.hex()[:16]}...)"
        )
    (layer_count,) = reader.unpack("<I", "layer count")
    expected = model.parameters()
    if layer_count * 2 != len(expected):
        raise CheckpointError(
            f"Checkpoint holds {layer_count} parameterised layers, architecture has {len(expected) // 2}"
        )

    params: Dict[str, np.ndarray] = {}
    for _ in range(layer_count * 2):
        (name_length,) = reader.unpack("<H", "tensor name length")
        name = reader.take(name_length, "tensor name").decode("utf-8")
        if name not in expected or name in params:
            raise CheckpointError(f"Unexpected tensor {name!r} in checkpoint")
        (rank,) = reader.unpack("<B", f"rank of {name}")
        dims = reader.unpack(f"<{rank}I", f"dims of {name}")
        count = int(np.prod(dims, dtype=np.int64))
        payload = reader.take(count * PAYLOAD_DTYPE.itemsize, f"payload of {name}")
        params[name] = np.frombuffer(payload, dtype=PAYLOAD_DTYPE).reshape(dims).astype(np.float32)
    if reader.offset != len(data):
        raise CheckpointError(f"Checkpoint has {len(data) - reader.offset} trailing bytes")

    try:
        model.set_parameters(params)
    except ShapeError as e:
        raise CheckpointError(str(e)) from e
    return model


def load_checkpoint(
    path,
    architecture: Sequence[LayerSpec] = SPAM_CNN_ARCHITECTURE,
    input_shape=INPUT_SHAPE,
) -> CnnModel:
    """Load a model written by :func:`save_checkpoint`.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        CheckpointError: If the file is not a valid checkpoint for
            ``architecture``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    model = decode_checkpoint(path.read_bytes(), architecture, input_shape)
    log.info("loaded checkpoint %s", path)
    return model
