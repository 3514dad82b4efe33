#!/usr/bin/env python3
"""
Voxel-Hash Spatial Index
Exact fixed-radius counting and bounded k-nearest-neighbor queries over world-frame points.

Points are bucketed by cell = floor(p / cell_size). Cell coordinates are packed into one
int64 key and kept sorted, so a cell lookup is a binary search and every query batch is
a handful of vectorized numpy passes over the (2m+1)^3 neighboring cells.
"""

import logging
import math
from typing import Dict, List, Optional, Tuple

import numpy as np

from mobile_labeler.errors import ContractError
from mobile_labeler.utils.parallel_execution import chunk_ranges, run_parallel

logger = logging.getLogger(__name__)

_AXIS_BITS = 21
_AXIS_OFFSET = 1 << (_AXIS_BITS - 1)
_AXIS_MASK = (1 << _AXIS_BITS) - 1
# upper bound on candidate (query, point) pairs materialized per chunk
CANDIDATE_BUDGET = 4_000_000


def _pack(cells: np.ndarray) -> np.ndarray:
    shifted = cells.astype(np.int64) + _AXIS_OFFSET
    return (shifted[:, 0] << (2 * _AXIS_BITS)) | (shifted[:, 1] << _AXIS_BITS) | shifted[:, 2]


def _in_key_range(cells: np.ndarray) -> np.ndarray:
    return ((cells >= -_AXIS_OFFSET) & (cells < _AXIS_OFFSET)).all(axis=1)


def _unpack(keys: np.ndarray) -> np.ndarray:
    return np.stack(
        [
            ((keys >> (2 * _AXIS_BITS)) & _AXIS_MASK) - _AXIS_OFFSET,
            ((keys >> _AXIS_BITS) & _AXIS_MASK) - _AXIS_OFFSET,
            (keys & _AXIS_MASK) - _AXIS_OFFSET,
        ],
        axis=1,
    )


def _neighbor_offsets(reach: int) -> np.ndarray:
    span = np.arange(-reach, reach + 1)
    return np.stack(np.meshgrid(span, span, span, indexing="ij"), axis=-1).reshape(-1, 3)


class VoxelGrid:
    """Immutable voxel hash over an (N, 3) point array; safe for concurrent readers"""

    def __init__(self, points: np.ndarray, cell_size: float):
        if not cell_size > 0:
            raise ValueError(f"cell_size must be > 0, got {cell_size}")
        points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        if not np.isfinite(points).all():
            raise ValueError("grid points must be finite")
        points.flags.writeable = False

        self.cell_size = float(cell_size)
        self.points = points

        cells = np.floor(points / self.cell_size).astype(np.int64)
        if len(cells) and not _in_key_range(cells).all():
            raise ValueError("point coordinates exceed the addressable grid extent")
        keys = _pack(cells) if len(cells) else np.empty(0, dtype=np.int64)

        # stable sort keeps point indices ascending inside each cell
        self._order = np.argsort(keys, kind="stable")
        self._keys, self._starts, self._counts = np.unique(keys[self._order], return_index=True, return_counts=True)
        self._cells: Optional[Dict[Tuple[int, int, int], np.ndarray]] = None

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n_cells(self) -> int:
        return len(self._keys)

    @property
    def cells(self) -> Dict[Tuple[int, int, int], np.ndarray]:
        """Cell coordinate -> point indices; materialized on first access"""
        if self._cells is None:
            coords = _unpack(self._keys)
            self._cells = {
                tuple(int(c) for c in coord): self._order[start:start + count]
                for coord, start, count in zip(coords, self._starts, self._counts)
            }
        return self._cells

    def _candidates(self, queries: np.ndarray, reach: int) -> Tuple[np.ndarray, np.ndarray]:
        """All (query index, point index) pairs whose cells are within `reach` cells of each other"""
        offsets = _neighbor_offsets(reach)
        qcells = np.floor(queries / self.cell_size).astype(np.int64)

        neighbor = (qcells[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
        valid = _in_key_range(neighbor)
        keys = np.zeros(len(neighbor), dtype=np.int64)
        keys[valid] = _pack(neighbor[valid])

        slot = np.searchsorted(self._keys, keys)
        slot = np.minimum(slot, max(len(self._keys) - 1, 0))
        found = valid & (self._keys[slot] == keys)

        owner = np.repeat(np.arange(len(queries)), len(offsets))[found]
        starts = self._starts[slot[found]]
        counts = self._counts[slot[found]]

        total = int(counts.sum())
        if total == 0:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        # expand each (start, count) run into consecutive positions of the sorted order
        run_begin = np.cumsum(counts) - counts
        positions = np.arange(total) - np.repeat(run_begin - starts, counts)
        return np.repeat(owner, counts), self._order[positions]

    def _chunk_size(self, reach: int) -> int:
        if not len(self._keys):
            return 65536
        per_query = (2 * reach + 1) ** 3 * max(1.0, len(self.points) / len(self._keys))
        return int(min(65536, max(64, CANDIDATE_BUDGET // per_query)))

    def _squared_distances(self, queries: np.ndarray, qidx: np.ndarray, pidx: np.ndarray) -> np.ndarray:
        diff = self.points[pidx] - queries[qidx]
        return np.sum(diff * diff, axis=1)

    # ------------------------------------------------------------ radius counting

    def count_within_batch(
        self,
        queries: np.ndarray,
        r: float,
        max_workers: Optional[int] = None,
        mask: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Per query, the number of points p with ||p - q|| < r (strict), counting only mask[p] points if given"""
        if not r > 0:
            raise ValueError(f"radius must be > 0, got {r}")
        if self.cell_size > r:
            raise ContractError(f"grid cell_size {self.cell_size} exceeds query radius {r}")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool).reshape(-1)
            if len(mask) != len(self.points):
                raise ValueError(f"mask covers {len(mask)} of {len(self.points)} grid points")
        if not len(self.points) or not len(queries):
            return np.zeros(len(queries), dtype=np.int64)

        reach = math.ceil(r / self.cell_size)
        r2 = r * r

        def count_chunk(bounds):
            start, stop = bounds
            chunk = queries[start:stop]
            qidx, pidx = self._candidates(chunk, reach)
            if mask is not None:
                keep = mask[pidx]
                qidx, pidx = qidx[keep], pidx[keep]
            hit = self._squared_distances(chunk, qidx, pidx) < r2
            return np.bincount(qidx[hit], minlength=len(chunk))

        chunks = chunk_ranges(len(queries), self._chunk_size(reach))
        return np.concatenate(run_parallel(count_chunk, chunks, max_workers=max_workers)).astype(np.int64)

    def count_within(self, q: np.ndarray, r: float) -> int:
        return int(self.count_within_batch(np.asarray(q, dtype=np.float64).reshape(1, 3), r, max_workers=1)[0])

    # ------------------------------------------------------------ bounded k-NN

    def knn_within_batch(
        self,
        queries: np.ndarray,
        k: int,
        r_max: float,
        exclude: Optional[np.ndarray] = None,
        max_workers: Optional[int] = None,
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        k nearest points with distance < r_max for every query, ordered by (distance, point index).

        exclude[i], when given, is a point index never returned for query i (-1 for none).
        Returns CSR arrays (indptr, indices, squared_distances).
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if not r_max > 0:
            raise ValueError(f"r_max must be > 0, got {r_max}")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if exclude is not None:
            exclude = np.asarray(exclude, dtype=np.int64).reshape(-1)
        if not len(self.points) or not len(queries):
            return np.zeros(len(queries) + 1, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty(0)

        reach = math.ceil(r_max / self.cell_size)
        r2 = r_max * r_max

        def knn_chunk(bounds):
            start, stop = bounds
            chunk = queries[start:stop]
            qidx, pidx = self._candidates(chunk, reach)
            d2 = self._squared_distances(chunk, qidx, pidx)
            keep = d2 < r2
            if exclude is not None:
                keep &= pidx != exclude[start:stop][qidx]
            qidx, pidx, d2 = qidx[keep], pidx[keep], d2[keep]

            order = np.lexsort((pidx, d2, qidx))
            qidx, pidx, d2 = qidx[order], pidx[order], d2[order]
            group_start = np.searchsorted(qidx, np.arange(len(chunk)))
            rank = np.arange(len(qidx)) - group_start[qidx]
            keep = rank < k
            counts = np.bincount(qidx[keep], minlength=len(chunk))
            return counts, pidx[keep], d2[keep]

        chunks = chunk_ranges(len(queries), self._chunk_size(reach))
        parts = run_parallel(knn_chunk, chunks, max_workers=max_workers)
        counts = np.concatenate([p[0] for p in parts])
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        indices = np.concatenate([p[1] for p in parts]).astype(np.int64)
        distances = np.concatenate([p[2] for p in parts])
        return indptr, indices, distances

    def knn_within(self, q: np.ndarray, k: int, r_max: float) -> np.ndarray:
        """Indices of the k nearest points closer than r_max, ascending distance then index"""
        _, indices, _ = self.knn_within_batch(np.asarray(q, dtype=np.float64).reshape(1, 3), k, r_max, max_workers=1)
        return indices


def build(points: np.ndarray, cell_size: float) -> VoxelGrid:
    grid = VoxelGrid(points, cell_size)
    logger.debug(f"Built voxel grid: {len(grid)} points in {grid.n_cells} cells (cell={cell_size})")
    return grid


def count_within(grid: VoxelGrid, q: np.ndarray, r: float) -> int:
    return grid.count_within(q, r)


def knn_within(grid: VoxelGrid, q: np.ndarray, k: int, r_max: float) -> np.ndarray:
    return grid.knn_within(q, k, r_max)


def split_csr(indptr: np.ndarray, values: np.ndarray) -> List[np.ndarray]:
    return [values[indptr[i]:indptr[i + 1]] for i in range(len(indptr) - 1)]
