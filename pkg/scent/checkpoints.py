"""
Checkpoint files.

Layout (little-endian):

    8 bytes   magic ``SCENTCKP``
    u32       format version
    u32       header length, then the header as sorted-key JSON
    u32       tensor count, then per tensor in lexicographic name order:
              u32 name length, UTF-8 name, u32 ndim, u32 * ndim extents,
              f32 values
    32 bytes  SHA-256 of everything before it
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from .exceptions import ConfigError, DataError
from .model import FeatureStats, ModelConfig, ScentModel
from .numerics import ParamStore


logger = logging.getLogger('scent.checkpoints')

CHECKPOINT_MAGIC = b'SCENTCKP'
CHECKPOINT_VERSION = 1
DIGEST_SIZE = 32


@dataclass
class Checkpoint:
    model_config: Dict[str, Any]
    params: ParamStore
    stats: FeatureStats
    train_config: Dict[str, Any] = field(default_factory=dict)
    loss_weights: Dict[str, Any] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    adam_step: int = 0
    best_val: Optional[float] = None
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)

    def header(self) -> Dict[str, Any]:
        return {
            'model_config': self.model_config,
            'train_config': self.train_config,
            'loss_weights': self.loss_weights,
            'epoch': self.epoch,
            'step': self.step,
            'adam_step': self.adam_step,
            'best_val': self.best_val,
        }

    def tensors(self) -> Dict[str, np.ndarray]:
        tensors = dict(self.params.items())
        tensors.update(self.stats.to_arrays())
        tensors.update({f"adam.m.{name}": value for name, value in self.adam_m.items()})
        tensors.update({f"adam.v.{name}": value for name, value in self.adam_v.items()})
        return tensors

    def model(self) -> ScentModel:
        try:
            cfg = ModelConfig(**self.model_config).validate()
        except (TypeError, ConfigError) as exc:
            raise DataError(f"Checkpoint holds an invalid model config: {exc}") from exc
        return ScentModel(cfg, params=self.params, stats=self.stats)


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    header = json.dumps(checkpoint.header(), sort_keys=True).encode('utf-8')
    chunks = [CHECKPOINT_MAGIC, struct.pack('<II', CHECKPOINT_VERSION, len(header)), header]
    tensors = checkpoint.tensors()
    chunks.append(struct.pack('<I', len(tensors)))
    for name in sorted(tensors):
        values = np.ascontiguousarray(tensors[name], dtype='<f4')
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(encoded)) + encoded)
        chunks.append(struct.pack(f'<I{values.ndim}I', values.ndim, *values.shape))
        chunks.append(values.tobytes())
    body = b''.join(chunks)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.payload):
            raise DataError(f"{self.source}: truncated checkpoint")
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(payload: bytes, source: str = '<bytes>', dtype=np.float64) -> Checkpoint:
    if len(payload) < len(CHECKPOINT_MAGIC) + DIGEST_SIZE or payload[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{source}: not a checkpoint")
    body, digest = payload[:-DIGEST_SIZE], payload[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise DataError(f"{source}: checksum mismatch")
    reader = _Reader(body, source)
    reader.take(len(CHECKPOINT_MAGIC))
    version, header_length = reader.unpack('<II')
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    try:
        header = json.loads(reader.take(header_length).decode('utf-8'))
    except ValueError as exc:
        raise DataError(f"{source}: unreadable header") from exc

    tensors: Dict[str, np.ndarray] = {}
    (count,) = reader.unpack('<I')
    for _ in range(count):
        (name_length,) = reader.unpack('<I')
        name = reader.take(name_length).decode('utf-8')
        (ndim,) = reader.unpack('<I')
        shape = reader.unpack(f'<{ndim}I')
        size = int(np.prod(shape)) * 4
        tensors[name] = np.frombuffer(reader.take(size), dtype='<f4').reshape(shape).astype(np.float64)
    if reader.offset != len(body):
        raise DataError(f"{source}: trailing bytes after tensors")

    params = ParamStore(dtype)
    adam_m: Dict[str, np.ndarray] = {}
    adam_v: Dict[str, np.ndarray] = {}
    stats = {}
    for name in sorted(tensors):
        if name.startswith('stats.'):
            stats[name] = tensors[name]
        elif name.startswith('adam.m.'):
            adam_m[name[len('adam.m.'):]] = tensors[name].astype(dtype)
        elif name.startswith('adam.v.'):
            adam_v[name[len('adam.v.'):]] = tensors[name].astype(dtype)
        else:
            params.add(name, tensors[name])
    try:
        return Checkpoint(
            model_config=header['model_config'],
            params=params,
            stats=FeatureStats.from_arrays(stats),
            train_config=header.get('train_config', {}),
            loss_weights=header.get('loss_weights', {}),
            epoch=int(header.get('epoch', 0)),
            step=int(header.get('step', 0)),
            adam_step=int(header.get('adam_step', 0)),
            best_val=header.get('best_val'),
            adam_m=adam_m,
            adam_v=adam_v,
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"{source}: incomplete checkpoint ({exc})") from exc


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> bytes:
    """Write atomically and return the bytes written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(checkpoint)
    staging = path.with_name(path.name + '.tmp')
    staging.write_bytes(payload)
    staging.replace(path)
    logger.info(
        "Checkpoint saved",
        extra={'event_type': 'checkpoint_saved', 'path': str(path), 'epoch': checkpoint.epoch}
    )
    return payload


def load_checkpoint(path: Union[str, Path], dtype=np.float64) -> Checkpoint:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise DataError(f"Cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(payload, str(path), dtype)
