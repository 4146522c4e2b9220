#!/usr/bin/env python3
"""
Key/value cache with a committed region and a staged token-tree region.

Rows are addressed by a single flat index shared by every layer. Rows
[0, committed_len) hold the accepted sequence; rows after that are staged
tree nodes whose parent is either another staged row or the committed tail.
Rotary positions of staged rows are their depth from the start of the
sequence, so siblings share a position.
"""
import copy
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from errors import PositionOverflowError, ShapeError, StructuralError

logger = logging.getLogger(__name__)

TAIL = -1  # parent sentinel: the last committed row


@dataclass
class TreeMask:
    """Boolean attention mask; allowed[i, j] means query row i may attend to key row j"""
    allowed: np.ndarray

    @property
    def size(self) -> int:
        """Number of rows covered"""
        return int(self.allowed.shape[0])

    def rows(self, indices: Sequence[int]) -> np.ndarray:
        """Mask rows for the given query rows"""
        return self.allowed[np.asarray(indices, dtype=np.int64)]


class KvCache:
    """Per-layer K/V store for one model instance; one writer at a time"""

    def __init__(self, n_layers: int, d_model: int, max_positions: int,
                 initial_rows: int = 64):
        self.n_layers = n_layers
        self.d_model = d_model
        self.max_positions = max_positions
        rows = max(1, initial_rows)
        self.keys = np.zeros((n_layers, rows, d_model), dtype=np.float32)
        self.values = np.zeros((n_layers, rows, d_model), dtype=np.float32)
        self.positions = np.zeros(rows, dtype=np.int64)
        self.parents = np.full(rows, TAIL, dtype=np.int64)
        self.fuzzy = np.zeros(rows, dtype=bool)
        self.committed_len = 0
        self.staged_len = 0

    # ------------------------------------------------------------------
    # bookkeeping
    # ------------------------------------------------------------------
    @property
    def total_len(self) -> int:
        """Committed plus staged rows"""
        return self.committed_len + self.staged_len

    @property
    def capacity(self) -> int:
        """Allocated rows"""
        return int(self.positions.shape[0])

    def fuzzy_rows(self) -> int:
        """Number of stored rows (committed or staged) last written by a fuzzy forward"""
        return int(np.count_nonzero(self.fuzzy[:self.total_len]))

    def _ensure_capacity(self, rows: int):
        if rows <= self.capacity:
            return
        new_cap = self.capacity
        while new_cap < rows:
            new_cap *= 2
        grow = new_cap - self.capacity
        self.keys = np.concatenate(
            [self.keys, np.zeros((self.n_layers, grow, self.d_model), dtype=np.float32)], axis=1)
        self.values = np.concatenate(
            [self.values, np.zeros((self.n_layers, grow, self.d_model), dtype=np.float32)], axis=1)
        self.positions = np.concatenate([self.positions, np.zeros(grow, dtype=np.int64)])
        self.parents = np.concatenate([self.parents, np.full(grow, TAIL, dtype=np.int64)])
        self.fuzzy = np.concatenate([self.fuzzy, np.zeros(grow, dtype=bool)])
        logger.debug(f"KV CACHE: Grew capacity to {new_cap} rows")

    # ------------------------------------------------------------------
    # staging
    # ------------------------------------------------------------------
    def stage_append(self, parents: Sequence[int], fuzzy: bool) -> List[int]:
        """
        Stage one row per entry of `parents`.
        A parent is TAIL or the flat index of an earlier staged row,
        including rows staged earlier in the same call.
        """
        new_indices = []
        self._ensure_capacity(self.total_len + len(parents))
        for parent in parents:
            idx = self.total_len
            parent = int(parent)
            if parent == TAIL:
                position = self.committed_len
            elif self.committed_len <= parent < idx:
                position = int(self.positions[parent]) + 1
            else:
                raise StructuralError(
                    f"invalid parent {parent} for staged row {idx} "
                    f"(committed_len={self.committed_len})")
            if position >= self.max_positions:
                raise PositionOverflowError(
                    f"position {position} exceeds max_positions {self.max_positions}")
            self.positions[idx] = position
            self.parents[idx] = parent
            self.fuzzy[idx] = fuzzy
            self.staged_len += 1
            new_indices.append(idx)
        return new_indices

    def ancestors(self, index: int) -> List[int]:
        """Staged ancestors of a staged row, nearest first"""
        out = []
        parent = int(self.parents[index])
        while parent != TAIL:
            out.append(parent)
            parent = int(self.parents[parent])
        return out

    def build_tree_mask(self) -> TreeMask:
        """Committed rows are causal; a staged row sees the committed prefix, its ancestors and itself"""
        n = self.total_len
        c = self.committed_len
        allowed = np.zeros((n, n), dtype=bool)
        allowed[:c, :c] = np.tril(np.ones((c, c), dtype=bool))
        for i in range(c, n):
            parent = int(self.parents[i])
            if parent == TAIL:
                allowed[i, :c] = True
            else:
                allowed[i] = allowed[parent]
            allowed[i, i] = True
        return TreeMask(allowed=allowed)

    # ------------------------------------------------------------------
    # writes
    # ------------------------------------------------------------------
    def write(self, layer: int, rows: Sequence[int], k: np.ndarray, v: np.ndarray):
        """Store K/V for existing rows of one layer"""
        rows = np.asarray(rows, dtype=np.int64)
        if k.shape != (len(rows), self.d_model) or v.shape != k.shape:
            raise ShapeError(f"K/V shape {k.shape} does not match {len(rows)} rows of width {self.d_model}")
        if len(rows) and (rows.min() < 0 or rows.max() >= self.total_len):
            raise StructuralError(f"write to rows outside [0, {self.total_len})")
        self.keys[layer, rows] = k
        self.values[layer, rows] = v

    def calibrate_overwrite(self, layer: int, positions: Sequence[int],
                            k: np.ndarray, v: np.ndarray):
        """Replace rows with precise K/V and clear their fuzzy flag"""
        if len(positions) == 0:
            return
        rows = np.asarray(positions, dtype=np.int64)
        if rows.min() < 0 or rows.max() >= self.total_len:
            raise StructuralError(
                f"calibration rows {rows.min()}..{rows.max()} outside [0, {self.total_len})")
        self.write(layer, rows, k, v)
        self.fuzzy[rows] = False

    def view(self, layer: int, calibrate: bool = False) -> "LayerCacheView":
        """Single-layer handle handed to the attention kernel"""
        return LayerCacheView(self, layer, calibrate)

    # ------------------------------------------------------------------
    # commit / discard
    # ------------------------------------------------------------------
    def _move_rows(self, sources: Sequence[int], start: int):
        src = np.asarray(sources, dtype=np.int64)
        dst = np.arange(start, start + len(src), dtype=np.int64)
        self.keys[:, dst] = self.keys[:, src]
        self.values[:, dst] = self.values[:, src]
        self.positions[dst] = self.positions[src]
        self.fuzzy[dst] = self.fuzzy[src]

    def commit_path(self, path: Sequence[int]):
        """Commit a root-to-node chain of staged rows, in order, and drop every other staged row"""
        path = [int(p) for p in path]
        expected_parent = TAIL
        for idx in path:
            if not (self.committed_len <= idx < self.total_len):
                raise StructuralError(f"row {idx} is not staged")
            if int(self.parents[idx]) != expected_parent:
                raise StructuralError(f"path is not a chain at row {idx}")
            expected_parent = idx
        if path:
            self._move_rows(path, self.committed_len)
            self.committed_len += len(path)
        self.staged_len = 0
        logger.debug(f"KV CACHE: Committed {len(path)} rows, committed_len={self.committed_len}")

    def discard_staged(self, keep_none: bool = True):
        """
        keep_none=True drops every staged row. Otherwise only fuzzy rows and
        their descendants are dropped; surviving rows are compacted.
        """
        if keep_none or self.staged_len == 0:
            self.staged_len = 0
            return
        survivors = []
        remap = {TAIL: TAIL}
        for i in range(self.committed_len, self.total_len):
            parent = int(self.parents[i])
            if self.fuzzy[i] or parent not in remap:
                continue
            remap[i] = self.committed_len + len(survivors)
            survivors.append((i, remap[parent]))
        sources = [s for s, _ in survivors]
        self._move_rows(sources, self.committed_len)
        for offset, (_, parent) in enumerate(survivors):
            self.parents[self.committed_len + offset] = parent
        self.staged_len = len(survivors)

    def truncate_committed(self, length: int):
        """Drop committed rows beyond `length` and every staged row"""
        if not (0 <= length <= self.committed_len):
            raise StructuralError(f"cannot truncate committed region to {length}")
        self.committed_len = length
        self.staged_len = 0
        logger.debug(f"KV CACHE: Truncated committed region to {length} rows")

    def clone(self) -> "KvCache":
        """Deep copy, used to replay a forward against a snapshot"""
        return copy.deepcopy(self)


class LayerCacheView:
    """Write handle for a single layer; calibrate mode routes writes through calibrate_overwrite"""

    def __init__(self, cache: KvCache, layer: int, calibrate: bool = False):
        self.cache = cache
        self.layer = layer
        self.calibrate = calibrate

    def write(self, rows: Sequence[int], k: np.ndarray, v: np.ndarray):
        """Store K/V for `rows`, as a calibration overwrite in calibrate mode"""
        if self.calibrate:
            self.cache.calibrate_overwrite(self.layer, rows, k, v)
        else:
            self.cache.write(self.layer, rows, k, v)

    def keys(self, n: Optional[int] = None) -> np.ndarray:
        """First n key rows of this layer (all stored rows by default)"""
        n = self.cache.total_len if n is None else n
        return self.cache.keys[self.layer, :n]

    def values(self, n: Optional[int] = None) -> np.ndarray:
        """First n value rows of this layer"""
        n = self.cache.total_len if n is None else n
        return self.cache.values[self.layer, :n]

    def positions(self, rows: Sequence[int]) -> np.ndarray:
        """Rotary positions of the given rows"""
        return self.cache.positions[np.asarray(rows, dtype=np.int64)]
