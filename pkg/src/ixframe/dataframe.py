"""Public indexed dataframe abstraction: hash-partitioned, multi-versioned.

A DataFrameVersion is immutable: create_index builds the first version,
append_rows derives a child that shares the parent's sealed batches and
trie nodes, and any number of divergent children may share one parent.
"""

from __future__ import annotations


import os
import threading
from dataclasses import dataclass, field

import numpy as np

from . import rowstore
from .errors import EmptySchema, SchemaMismatch, TypeMismatch
from .partition import (
    IndexedPartition,
    canonical_key,
    canonical_keys_u64,
    route,
    route_u64,
)
from .rowstore import ColumnType, Schema

_PYTYPES = {
    ColumnType.INT32: (int, np.integer),
    ColumnType.INT64: (int, np.integer),
    ColumnType.FLOAT64: (int, float, np.integer, np.floating),
    ColumnType.UTF8: (str,),
}

class _TouchCounter:
    """Instrumentation: partitions consulted by point lookups."""

    def __init__(self):
        self.value = 0

    def bump(self):
        self.value += 1


PARTITIONS_TOUCHED = _TouchCounter()


class _VersionAllocator:
    """Global monotonic version-number source."""

    def __init__(self):
        self._lock = threading.Lock()
        self._next = 1

    def take(self):
        with self._lock:
            v = self._next
            self._next += 1
            return v

    def reset(self):
        with self._lock:
            self._next = 1

    def ensure_past(self, version_no):
        """Keep allocations unique after loading externally recorded versions."""
        with self._lock:
            self._next = max(self._next, version_no + 1)


VERSIONS = _VersionAllocator()


def default_partitions():
    return max(1, (os.cpu_count() or 1) * 2)


@dataclass
class PlainTable:
    """Non-indexed table; columnar storage, one sequence per column."""

    schema: Schema
    columns: list = field(default_factory=list)

    def __post_init__(self):
        if not self.columns:
            self.columns = [[] for _ in self.schema.columns]
        lens = {len(c) for c in self.columns}
        if len(self.columns) != self.schema.num_columns or len(lens) > 1:
            raise SchemaMismatch("column arity/length mismatch")

    @classmethod
    def from_rows(cls, schema, rows):
        cols = [[] for _ in schema.columns]
        for row in rows:
            if len(row) != schema.num_columns:
                raise SchemaMismatch("row arity %d != %d"
                                     % (len(row), schema.num_columns))
            for c, v in zip(cols, row):
                c.append(v)
        return cls(schema, cols)

    @property
    def num_rows(self):
        return len(self.columns[0]) if self.columns else 0

    def row(self, i):
        return tuple(_pyvalue(c[i]) for c in self.columns)

    def rows(self):
        for i in range(self.num_rows):
            yield self.row(i)

    def column(self, i):
        return self.columns[i]

    def column_as_array(self, i):
        """Numpy view of a fixed-width column (fast paths only)."""
        ctype = self.schema.column_type(i)
        if not ctype.is_fixed:
            raise TypeMismatch("column %d is var-length" % i)
        dt = {"int32": np.int32, "int64": np.int64, "float64": np.float64}[ctype.value]
        return np.asarray(self.columns[i], dtype=dt)

    def estimated_bytes(self):
        """Encoded payload size of the whole table (exact, not a stats guess)."""
        n = self.num_rows
        fixed = self.schema.null_bitmap_bytes + self.schema.fixed_region_bytes
        total = n * fixed
        for i, (_, t) in enumerate(self.schema.columns):
            if t is ColumnType.UTF8:
                total += n * 2
                total += sum(len(v.encode("utf-8")) for v in self.columns[i]
                             if v is not None)
        return total

    def _fast_encodable(self):
        if self.schema.has_varlen:
            return False
        for c in self.columns:
            if isinstance(c, np.ndarray):
                continue
            if any(v is None for v in c):
                return False
        return True


def _pyvalue(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    return v


def _check_key_type(ctype, key):
    if isinstance(key, bool) or not isinstance(key, _PYTYPES[ctype]):
        raise TypeMismatch("key %r does not match index column type %s"
                           % (key, ctype.value))


def _route_and_insert(parts, table, index_col):
    """Distribute a table's rows over live partitions by key hash."""
    P = len(parts)
    ctype = table.schema.column_type(index_col)
    if table.num_rows == 0:
        return
    if table._fast_encodable():
        keys = canonical_keys_u64(ctype, table.columns[index_col])
        block = rowstore.encode_fixed_block(table.schema, table.columns)
        pids = route_u64(keys, P)
        for pid in range(P):
            mask = pids == pid
            if mask.any():
                parts[pid].insert_encoded(keys[mask], block[mask])
        return
    buckets = [[] for _ in range(P)]
    for row in table.rows():
        kv = row[index_col]
        if kv is None:
            raise TypeMismatch("null value in index column")
        ck = canonical_key(ctype, kv)
        payload = rowstore.encode_row(table.schema, row,
                                      parts[0].max_row_bytes)
        buckets[route(ck, P)].append((ck, payload))
    for pid, bucket in enumerate(buckets):
        if bucket:
            parts[pid].insert_rows(bucket)


class DataFrameVersion:
    """One immutable, queryable version of an indexed dataframe."""

    def __init__(self, version_no, schema, index_col, partitions, parent=None):
        self.version_no = version_no
        self.schema = schema
        self.index_col = index_col
        self.partitions = partitions  # PartitionSnapshots
        self.parent = parent

    @property
    def num_partitions(self):
        return len(self.partitions)

    @property
    def row_count(self):
        return sum(p.row_count for p in self.partitions)

    def cache(self):
        """API-fidelity no-op: everything already lives in memory."""
        return self

    def get_rows(self, key):
        """All rows whose index column equals the key, newest first."""
        ctype = self.schema.column_type(self.index_col)
        _check_key_type(ctype, key)
        ck = canonical_key(ctype, key)
        pid = route(ck, self.num_partitions)
        PARTITIONS_TOUCHED.bump()
        verify = (self.index_col, key) if ctype is ColumnType.UTF8 else None
        payloads = self.partitions[pid].lookup(ck, verify=verify)
        return PlainTable.from_rows(
            self.schema, (rowstore.decode_row(self.schema, p) for p in payloads))

    def append_rows(self, table):
        """Child version containing this version's rows plus the table's."""
        _check_schema_compatible(self.schema, table.schema)
        successors = [IndexedPartition.from_snapshot(s) for s in self.partitions]
        _route_and_insert(successors, table, self.index_col)
        return DataFrameVersion(VERSIONS.take(), self.schema, self.index_col,
                                [p.freeze() for p in successors], parent=self)

    def scan_rows(self):
        for snap in self.partitions:
            for payload in snap.scan():
                yield rowstore.decode_row(self.schema, payload)

    def scan(self):
        """Decode every row into a plain table (columnar fast path when
        the schema is fixed-width)."""
        if self.schema.fixed_payload_size is not None:
            blocks = [b for snap in self.partitions
                      for b in snap.scan_fixed_blocks()]
            if not blocks:
                return PlainTable(self.schema,
                                  [[] for _ in self.schema.columns])
            nb = self.schema.null_bitmap_bytes
            if any((b[:, :nb] != 0).any() for b in blocks):
                # null cells present: the columnar decode ignores bitmaps
                return PlainTable.from_rows(self.schema, self.scan_rows())
            per_block = [rowstore.decode_fixed_block(self.schema, b)
                         for b in blocks]
            cols = [np.concatenate([pb[i] for pb in per_block])
                    for i in range(self.schema.num_columns)]
            return PlainTable(self.schema, cols)
        return PlainTable.from_rows(self.schema, self.scan_rows())

    def stats(self):
        agg = {"data_bytes": 0, "index_bytes": 0, "backptr_bytes": 0}
        for snap in self.partitions:
            for k, v in snap.memory_stats().items():
                agg[k] += v
        agg["row_count"] = self.row_count
        agg["index_overhead_ratio"] = (
            agg["index_bytes"] / agg["data_bytes"] if agg["data_bytes"] else 0.0)
        return agg


def _check_schema_compatible(a, b):
    if tuple(a.columns) != tuple(b.columns):
        raise SchemaMismatch("schemas differ: %r vs %r" % (a.columns, b.columns))


def create_index(table, col, num_partitions=None, batch_capacity=None,
                 max_row_bytes=None):
    """Index a plain table on one column, hash-partitioned over P partitions."""
    if table.schema.num_columns == 0:
        raise EmptySchema("cannot index a table with no columns")
    if not 0 <= col < table.schema.num_columns:
        raise TypeMismatch("index column %d out of range" % col)
    P = num_partitions or default_partitions()
    if P < 1:
        raise TypeMismatch("partition count must be >= 1")
    schema = table.schema.with_index_col(col)
    kwargs = {}
    if batch_capacity is not None:
        kwargs["batch_capacity"] = batch_capacity
    if max_row_bytes is not None:
        kwargs["max_row_bytes"] = max_row_bytes
    parts = [IndexedPartition(pid, schema, **kwargs) for pid in range(P)]
    # retag the staged table with the indexed schema so routing sees it
    tagged = PlainTable(schema, table.columns)
    _route_and_insert(parts, tagged, col)
    return DataFrameVersion(VERSIONS.take(), schema, col,
                            [p.freeze() for p in parts])
