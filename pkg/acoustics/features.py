"""
On-disk formats for per-utterance feature files and the corpus manifest.

Feature file layout (all little-endian):

    8 bytes   magic ``SCENTFEA``
    u32       format version
    u32       number of dimensions
    u32 * n   extents
    f32 * N   values, C order
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
from jsonschema import ValidationError, validate

from scent.exceptions import DataError


logger = logging.getLogger('acoustics.features')

FEATURE_MAGIC = b'SCENTFEA'
FEATURE_VERSION = 1

MANIFEST_HEADER = '# scent-manifest v1'
MANIFEST_COLUMNS = ('id', 'split', 'role', 'duration_s', 'frames', 'features', 'ground_truth')

SPLITS = ('train', 'val', 'test')
ROLES = ('source', 'target')

MANIFEST_ENTRY_SCHEMA = {
    'type': 'object',
    'properties': {
        'id': {'type': 'string', 'minLength': 1},
        'split': {'enum': list(SPLITS)},
        'role': {'enum': list(ROLES)},
        'duration_s': {'type': 'number', 'exclusiveMinimum': 0},
        'frames': {'type': 'integer', 'minimum': 1},
        'features': {
            'type': 'object',
            'properties': {'mel': {'type': 'string'}},
            'required': ['mel'],
            'additionalProperties': {'type': 'string'},
        },
        'ground_truth': {'type': 'object'},
    },
    'required': list(MANIFEST_COLUMNS),
}


def encode_features(array: np.ndarray) -> bytes:
    values = np.ascontiguousarray(array, dtype='<f4')
    if values.ndim == 0:
        values = values.reshape(1)
    header = FEATURE_MAGIC + struct.pack('<II', FEATURE_VERSION, values.ndim)
    header += struct.pack(f'<{values.ndim}I', *values.shape)
    return header + values.tobytes()


def decode_features(payload: bytes, source: str = '<bytes>') -> np.ndarray:
    if len(payload) < 16 or payload[:8] != FEATURE_MAGIC:
        raise DataError(f"{source}: not a feature file")
    version, ndim = struct.unpack_from('<II', payload, 8)
    if version != FEATURE_VERSION:
        raise DataError(f"{source}: unsupported feature file version {version}")
    offset = 16 + 4 * ndim
    if len(payload) < offset:
        raise DataError(f"{source}: truncated header")
    shape = struct.unpack_from(f'<{ndim}I', payload, 16)
    expected = int(np.prod(shape)) * 4
    if len(payload) - offset != expected:
        raise DataError(f"{source}: expected {expected} value bytes, found {len(payload) - offset}")
    return np.frombuffer(payload, dtype='<f4', offset=offset).reshape(shape).astype(np.float32)


def write_features(path: Union[str, Path], array: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_features(array))


def read_features(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise DataError(f"Cannot read feature file {path}: {exc}") from exc
    return decode_features(payload, str(path))


@dataclass
class ManifestEntry:
    id: str
    split: str
    role: str
    duration_s: float
    frames: int
    features: Dict[str, str]
    ground_truth: Dict[str, Any] = field(default_factory=dict)

    def to_row(self) -> str:
        cells = [
            self.id,
            self.split,
            self.role,
            f"{self.duration_s:.6f}",
            str(self.frames),
            json.dumps(self.features, sort_keys=True),
            json.dumps(self.ground_truth, sort_keys=True),
        ]
        return '\t'.join(cells)

    @classmethod
    def from_row(cls, line: str, line_number: int) -> 'ManifestEntry':
        cells = line.rstrip('\n').split('\t')
        if len(cells) != len(MANIFEST_COLUMNS):
            raise DataError(f"Manifest line {line_number}: expected {len(MANIFEST_COLUMNS)} columns")
        try:
            record = {
                'id': cells[0],
                'split': cells[1],
                'role': cells[2],
                'duration_s': float(cells[3]),
                'frames': int(cells[4]),
                'features': json.loads(cells[5]),
                'ground_truth': json.loads(cells[6]),
            }
            validate(instance=record, schema=MANIFEST_ENTRY_SCHEMA)
        except (ValueError, ValidationError) as exc:
            message = getattr(exc, 'message', str(exc))
            raise DataError(f"Manifest line {line_number}: {message}") from exc
        return cls(**record)


class Manifest:
    """
    Corpus index: one record per utterance and role.

    Feature paths are stored relative to the manifest's directory.
    """

    def __init__(self, entries: Optional[Iterable[ManifestEntry]] = None,
                 root: Optional[Path] = None, dsp: Optional[Dict[str, Any]] = None):
        self.entries: List[ManifestEntry] = list(entries or [])
        self.root = Path(root) if root is not None else Path('.')
        self.dsp = dict(dsp or {})

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def add(self, entry: ManifestEntry) -> None:
        self.entries.append(entry)

    def select(self, split: Optional[str] = None, role: Optional[str] = None) -> List[ManifestEntry]:
        return [
            entry for entry in self.entries
            if (split is None or entry.split == split) and (role is None or entry.role == role)
        ]

    def pairs(self, split: str) -> List[Tuple[ManifestEntry, ManifestEntry]]:
        """(source, target) entries of a split, ordered by id."""
        sources = {entry.id: entry for entry in self.select(split, 'source')}
        targets = {entry.id: entry for entry in self.select(split, 'target')}
        missing = sorted(set(sources) ^ set(targets))
        if missing:
            raise DataError(f"Unpaired manifest entries in split '{split}': {', '.join(missing)}")
        return [(sources[key], targets[key]) for key in sorted(sources)]

    def feature_path(self, entry: ManifestEntry, kind: str = 'mel') -> Path:
        try:
            return self.root / entry.features[kind]
        except KeyError:
            raise DataError(f"Entry '{entry.id}' ({entry.role}) has no '{kind}' features")

    def load(self, entry: ManifestEntry, kind: str = 'mel') -> np.ndarray:
        return read_features(self.feature_path(entry, kind))

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [
            MANIFEST_HEADER,
            '# dsp ' + json.dumps(self.dsp, sort_keys=True),
            '\t'.join(MANIFEST_COLUMNS),
        ]
        lines.extend(entry.to_row() for entry in self.entries)
        path.write_text('\n'.join(lines) + '\n', encoding='utf-8')

    @classmethod
    def read(cls, path: Union[str, Path]) -> 'Manifest':
        path = Path(path)
        try:
            lines = path.read_text(encoding='utf-8').splitlines()
        except OSError as exc:
            raise DataError(f"Cannot read manifest {path}: {exc}") from exc
        if not lines or lines[0].strip() != MANIFEST_HEADER:
            raise DataError(f"{path}: missing '{MANIFEST_HEADER}' header")
        dsp: Dict[str, Any] = {}
        entries = []
        for number, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            if line.startswith('# dsp '):
                dsp = json.loads(line[len('# dsp '):])
                continue
            if line.startswith('#') or line.split('\t')[0] == 'id':
                continue
            entries.append(ManifestEntry.from_row(line, number))
        return cls(entries, root=path.parent, dsp=dsp)
