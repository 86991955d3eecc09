"""
Dynamic time warping, warping to a target timeline and linear source
interpolation.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.spatial.distance import cdist

from .exceptions import DataError


logger = logging.getLogger('scent.align')

# Predecessor offsets in tie-break order: diagonal, target-only (0, 1), source-only (1, 0).
_STEPS = ((1, 1), (0, 1), (1, 0))


@dataclass
class DtwPath:
    """Monotone (source index, target index) pairs from (0, 0) to (T_x - 1, T_y - 1)."""

    pairs: np.ndarray
    cost: float

    @property
    def source(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def target(self) -> np.ndarray:
        return self.pairs[:, 1]

    def __len__(self) -> int:
        return int(self.pairs.shape[0])


def _as_sequence(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] == 0:
        raise DataError(f"{name} must be a nonempty (frames, dims) sequence")
    return a


def dtw(a: np.ndarray, b: np.ndarray, metric: str = 'euclidean') -> DtwPath:
    """
    Globally optimal monotone alignment of ``a`` (source) and ``b`` (target).

    The cost is the plain sum of frame distances along the path. Among equal
    predecessors the diagonal is preferred, then a target-only step, then a
    source-only step.
    """
    a = _as_sequence(a, 'source')
    b = _as_sequence(b, 'target')
    distance = cdist(a, b, metric=metric)
    rows, cols = distance.shape
    acc = np.full((rows, cols), np.inf)
    acc[0, 0] = distance[0, 0]
    for j in range(1, cols):
        acc[0, j] = acc[0, j - 1] + distance[0, j]
    for i in range(1, rows):
        acc[i, 0] = acc[i - 1, 0] + distance[i, 0]
        previous = acc[i - 1]
        current = acc[i]
        row_cost = distance[i]
        for j in range(1, cols):
            current[j] = row_cost[j] + min(previous[j - 1], current[j - 1], previous[j])

    i, j = rows - 1, cols - 1
    pairs = [(i, j)]
    while (i, j) != (0, 0):
        best = None
        for di, dj in _STEPS:
            pi, pj = i - di, j - dj
            if pi < 0 or pj < 0:
                continue
            if best is None or acc[pi, pj] < acc[best]:
                best = (pi, pj)
        i, j = best
        pairs.append((i, j))
    pairs.reverse()
    return DtwPath(np.asarray(pairs, dtype=np.int64), float(acc[-1, -1]))


def path_cost(a: np.ndarray, b: np.ndarray, pairs: np.ndarray, metric: str = 'euclidean') -> float:
    a = _as_sequence(a, 'source')
    b = _as_sequence(b, 'target')
    pairs = np.asarray(pairs)
    return float(cdist(a, b, metric=metric)[pairs[:, 0], pairs[:, 1]].sum())


def warp_to_target(a: np.ndarray, path: DtwPath, target_length: Optional[int] = None) -> np.ndarray:
    """
    Resample ``a`` onto the target timeline of ``path``.

    A target index paired with several source frames receives their mean.
    """
    a = np.asarray(a, dtype=np.float64)
    pairs = path.pairs
    if target_length is None:
        target_length = int(pairs[-1, 1]) + 1
    if len(pairs) == 0 or tuple(pairs[0]) != (0, 0) \
            or tuple(pairs[-1]) != (a.shape[0] - 1, target_length - 1):
        raise DataError("Path does not span the source sequence and the target length")
    sums = np.zeros((target_length,) + a.shape[1:])
    counts = np.zeros(target_length)
    np.add.at(sums, pairs[:, 1], a[pairs[:, 0]])
    np.add.at(counts, pairs[:, 1], 1.0)
    return sums / counts.reshape((-1,) + (1,) * (a.ndim - 1))


def interpolate_source(a: np.ndarray, ratio: float) -> np.ndarray:
    """Linear resampling of ``a`` to ``round(ratio * T_x)`` frames with both endpoints kept."""
    a = np.asarray(a, dtype=np.float64)
    if ratio <= 0:
        raise DataError("Interpolation ratio must be positive")
    length = int(round(ratio * a.shape[0]))
    if length < 1:
        raise DataError(f"Interpolating {a.shape[0]} frames by {ratio} leaves no frames")
    positions = np.linspace(0.0, a.shape[0] - 1, length)
    lower = np.floor(positions).astype(np.int64)
    upper = np.minimum(lower + 1, a.shape[0] - 1)
    weight = (positions - lower).reshape((-1,) + (1,) * (a.ndim - 1))
    return (1.0 - weight) * a[lower] + weight * a[upper]


def duration_ratio(manifest, split: str = 'train', reverse: bool = False) -> float:
    """Total target duration over total source duration of a split (inverse with ``reverse``)."""
    sources = manifest.select(split, 'source')
    targets = manifest.select(split, 'target')
    if not sources or not targets:
        raise DataError(f"Split '{split}' has no paired utterances")
    source_total = sum(entry.duration_s for entry in sources)
    target_total = sum(entry.duration_s for entry in targets)
    ratio = target_total / source_total
    return 1.0 / ratio if reverse else ratio


def target_to_source(path: Union[DtwPath, np.ndarray]) -> np.ndarray:
    """Per target frame, the first source frame it is paired with."""
    if isinstance(path, DtwPath):
        pairs = path.pairs
        length = int(pairs[-1, 1]) + 1
        mapping = np.full(length, -1, dtype=np.int64)
        for source, target in pairs[::-1]:
            mapping[target] = source
        return mapping
    return np.asarray(path, dtype=np.int64)


def downsample_path(path: Union[DtwPath, np.ndarray], M: int, r: int, n_steps: Optional[int] = None) -> np.ndarray:
    """
    One (decoder step, encoder state) point per decoder step.

    Decoder step ``t`` takes target frame ``t * r`` (clipped to the path);
    its source frame is mapped to encoder state ``source // M``.
    """
    mapping = target_to_source(path)
    if n_steps is None:
        n_steps = -(-mapping.size // r)
    frames = np.minimum(np.arange(n_steps) * r, mapping.size - 1)
    return np.stack([np.arange(n_steps), mapping[frames] // M], axis=1)


def export_path(points: np.ndarray, destination: Union[str, Path], header: str = 'x\ty') -> None:
    destination = Path(destination)
    destination.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(destination, np.asarray(points, dtype=np.int64), fmt='%d', delimiter='\t', header=header)
