"""
Versioned binary checkpoint format.

Layout (little-endian)::

    b"SCENCKPT"            magic, 8 bytes
    u32                    format version
    u32                    header length N
    N bytes                JSON header: config, norm style, vocabulary, tensor manifest
    f32 blobs              one per tensor, in manifest order (parameter_names order)
"""

import hashlib
import json
import logging
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Union

import numpy as np

from src.scenlab.autodiff.tensor import Tensor
from src.scenlab.exceptions import CheckpointError
from src.scenlab.lm.model import NORM_STYLE, ModelConfig, TransformerLM, parameter_names, parameter_shapes
from src.scenlab.lm.tokenizer import SPECIAL_TOKENS, Tokenizer
from src.utils.files import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"SCENCKPT"
VERSION = 1


def checkpoint_bytes(model: TransformerLM) -> bytes:
    """Serialize ``model`` to the checkpoint byte layout."""
    names = parameter_names(model.config)
    header = {
        "config": asdict(model.config),
        "norm": NORM_STYLE,
        "vocab": model.tokenizer.vocab[len(SPECIAL_TOKENS) :],
        "tensors": [[name, list(model.params[name].shape)] for name in names],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(header_bytes)), header_bytes]
    parts += [model.params[name].data.astype("<f4").tobytes() for name in names]
    return b"".join(parts)


def checkpoint_fingerprint(model: TransformerLM) -> bytes:
    """64-bit BLAKE2b digest of the checkpoint bytes."""
    return hashlib.blake2b(checkpoint_bytes(model), digest_size=8).digest()


def save_checkpoint(model: TransformerLM, path: Union[str, Path]) -> Path:
    """
    Write ``model`` to ``path`` atomically.

    :return: the written path.
    """
    path = atomic_write_bytes(path, checkpoint_bytes(model))
    logger.info("checkpoint written to %s", path)
    return path


def parse_checkpoint(data: bytes) -> TransformerLM:
    """
    Rebuild a model from checkpoint bytes.

    :raises CheckpointError: bad magic, unsupported version or truncated data.
    """
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not a scenlab checkpoint")
    offset = len(MAGIC)
    if len(data) < offset + 8:
        raise CheckpointError("truncated checkpoint header")
    version, header_len = struct.unpack_from("<II", data, offset)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} (expected {VERSION})")
    offset += 8
    if len(data) < offset + header_len:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[offset : offset + header_len].decode("utf-8"))
        config = ModelConfig(**header["config"])
        entries = [(str(name), tuple(int(n) for n in shape)) for name, shape in header["tensors"]]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from e
    if header.get("norm") != NORM_STYLE:
        raise CheckpointError(f"unsupported norm style {header.get('norm')!r}")
    offset += header_len

    shapes = parameter_shapes(config)
    params = {}
    for name, shape in entries:
        if name not in shapes or shape != shapes[name]:
            raise CheckpointError(f"tensor {name} with shape {shape} does not fit the config")
        count = int(np.prod(shape))
        end = offset + 4 * count
        if len(data) < end:
            raise CheckpointError(f"truncated checkpoint: tensor {name} incomplete")
        params[name] = Tensor(np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape), name=name)
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes after the last tensor")
    if list(params) != parameter_names(config):
        raise CheckpointError("checkpoint tensors are missing or out of order")
    return TransformerLM(config, Tokenizer(header["vocab"]), params)


def load_checkpoint(path: Union[str, Path]) -> TransformerLM:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as f:
        data = f.read()
    return parse_checkpoint(data)
