"""One hash partition: a key trie over packed row pointers plus its batches.

The key trie maps a canonical 64-bit key to the packed pointer of the
newest row with that key; each stored record carries an inline backward
pointer to the previous row with the same key, forming a newest-first
chain. A second trie (the batch directory) maps batch ids to batch
handles so that snapshots of both tries pin a partition's full state.
"""

from __future__ import annotations

import struct

import numpy as np

from . import rowstore
from .errors import PartitionSealed
from .rowstore import NO_PREDECESSOR, BACKPTR_BYTES, ColumnType, PtrLayout, RowBatch
from .trie import KeyTrie, mix64

_M64 = (1 << 64) - 1
_FNV_OFFSET = 0x811C9DC5
_FNV_PRIME = 0x01000193


def fnv1a32(data):
    """32-bit FNV-1a over raw bytes; the canonical string-key hash."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFF
    return h


def canonical_key(ctype, value):
    """Canonicalize a typed cell into the unsigned 64-bit index key."""
    if ctype in (ColumnType.INT32, ColumnType.INT64):
        return int(value) & _M64
    if ctype is ColumnType.FLOAT64:
        (bits,) = struct.unpack("<Q", struct.pack("<d", float(value)))
        # total-order trick: negative floats reverse, positives get the sign bit
        return (~bits & _M64) if bits >> 63 else (bits | (1 << 63))
    if ctype is ColumnType.UTF8:
        return fnv1a32(value.encode("utf-8"))
    raise TypeError("unsupported column type %r" % (ctype,))


def canonical_keys_u64(ctype, values):
    """Vectorized canonical_key for fixed-width column arrays."""
    if ctype in (ColumnType.INT32, ColumnType.INT64):
        return np.asarray(values, dtype=np.int64).astype(np.uint64)
    if ctype is ColumnType.FLOAT64:
        bits = np.asarray(values, dtype=np.float64).view(np.uint64)
        neg = (bits >> np.uint64(63)).astype(bool)
        out = bits | np.uint64(1 << 63)
        out[neg] = ~bits[neg]
        return out
    return np.array([canonical_key(ctype, v) for v in values], dtype=np.uint64)


def mix64_u64(keys):
    """Vectorized splitmix64 finalizer (matches trie.mix64)."""
    x = np.asarray(keys, dtype=np.uint64) + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def route(canon_key, num_partitions):
    """Partition ordinal for a canonical key."""
    return mix64(canon_key) % num_partitions


def route_u64(keys, num_partitions):
    return mix64_u64(keys) % np.uint64(num_partitions)


def _chain(key_map, batches, layout, canon_key):
    """Newest-first payloads for one canonical key."""
    ptr = key_map.get(int(canon_key))
    out = []
    while ptr is not None and ptr != NO_PREDECESSOR:
        bid, off, size = layout.unpack(ptr)
        backward, payload = batches.get(bid).read(off, size)
        out.append(payload)
        ptr = None if backward == NO_PREDECESSOR else backward
    return out


def _verified(schema, payloads, verify):
    if verify is None:
        return payloads
    col, expected = verify
    return [p for p in payloads
            if rowstore.decode_row(schema, p)[col] == expected]


class PartitionSnapshot:
    """Immutable view of one partition; shares sealed batches forever."""

    __slots__ = ("partition_id", "schema", "key_snap", "batch_snap",
                 "row_count", "byte_count", "layout", "tail_batch_id",
                 "batch_capacity", "max_row_bytes")

    def __init__(self, partition_id, schema, key_snap, batch_snap, row_count,
                 byte_count, layout, tail_batch_id, batch_capacity, max_row_bytes):
        self.partition_id = partition_id
        self.schema = schema
        self.key_snap = key_snap
        self.batch_snap = batch_snap
        self.row_count = row_count
        self.byte_count = byte_count
        self.layout = layout
        self.tail_batch_id = tail_batch_id
        self.batch_capacity = batch_capacity
        self.max_row_bytes = max_row_bytes

    def lookup(self, canon_key, verify=None):
        rows = _chain(self.key_snap, self.batch_snap, self.layout, canon_key)
        return _verified(self.schema, rows, verify)

    def batches(self):
        """(batch_id, RowBatch) pairs in ascending batch order."""
        return self.batch_snap.items()

    def scan(self):
        """Every payload exactly once, in (batch, record) order."""
        size = self.schema.fixed_payload_size
        if size is not None:
            rec = BACKPTR_BYTES + size
            for _, batch in self.batches():
                for off in range(0, batch.write_cursor, rec):
                    yield bytes(batch.data[off + BACKPTR_BYTES:off + rec])
            return
        # variable-size records carry no forward length, so recover record
        # boundaries from the index chains and replay them in arena order
        locs = []
        for key, _ in self.key_snap.items():
            ptr = self.key_snap.get(key)
            while ptr is not None and ptr != NO_PREDECESSOR:
                bid, off, sz = self.layout.unpack(ptr)
                locs.append((bid, off, sz))
                backward, _ = self.batch_snap.get(bid).read(off, sz)
                ptr = None if backward == NO_PREDECESSOR else backward
        locs.sort()
        for bid, off, sz in locs:
            _, payload = self.batch_snap.get(bid).read(off, sz)
            yield payload

    def scan_fixed_blocks(self):
        """(m, payload_size) uint8 matrices per batch; fixed-width schemas only."""
        size = self.schema.fixed_payload_size
        if size is None:
            raise TypeError("fixed block scan needs a fixed-width schema")
        rec = BACKPTR_BYTES + size
        for _, batch in self.batches():
            m = batch.write_cursor // rec
            if m == 0:
                continue
            block = np.frombuffer(batch.data, dtype=np.uint8,
                                  count=m * rec).reshape(m, rec)
            yield block[:, BACKPTR_BYTES:]

    def memory_stats(self):
        return {
            "data_bytes": self.byte_count,
            "index_bytes": self.key_snap.footprint_bytes(),
            "backptr_bytes": BACKPTR_BYTES * self.row_count,
        }


class IndexedPartition:
    """Single-owner mutable partition; freeze() yields an immutable snapshot."""

    def __init__(self, partition_id, schema, batch_capacity=rowstore.BATCH_CAPACITY,
                 max_row_bytes=rowstore.MAX_ROW_BYTES):
        self.partition_id = partition_id
        self.schema = schema
        self.batch_capacity = batch_capacity
        self.max_row_bytes = max_row_bytes
        self.layout = PtrLayout.for_capacity(batch_capacity, max_row_bytes)
        self.key_trie = KeyTrie()
        self.batch_dir = KeyTrie()
        self.row_count = 0
        self.byte_count = 0
        self._open_batch = None
        self._next_batch_id = 0
        self._frozen = False

    @classmethod
    def from_snapshot(cls, snap):
        """Successor partition: shares sealed batches, copies only the tail."""
        p = cls(snap.partition_id, snap.schema, snap.batch_capacity,
                snap.max_row_bytes)
        p.key_trie = KeyTrie.from_snapshot(snap.key_snap)
        p.batch_dir = KeyTrie.from_snapshot(snap.batch_snap)
        p.row_count = snap.row_count
        p.byte_count = snap.byte_count
        if snap.tail_batch_id is not None:
            tail = snap.batch_snap.get(snap.tail_batch_id)
            cow = tail.copy_unsealed()
            p.batch_dir.insert(snap.tail_batch_id, cow)
            p._open_batch = cow
            p._next_batch_id = snap.tail_batch_id + 1
        return p

    def _open_new(self, seal_prev=True):
        if seal_prev and self._open_batch is not None:
            self._open_batch.seal()
        batch = RowBatch(id=self._next_batch_id,
                         capacity_bytes=self.batch_capacity)
        self.batch_dir.insert(batch.id, batch)
        self._open_batch = batch
        self._next_batch_id += 1
        return batch

    def _require_open(self, record_bytes):
        if self._open_batch is None or self._open_batch.remaining < record_bytes:
            self._open_new()
        return self._open_batch

    def insert_rows(self, keyed_payloads):
        """Insert (canonical key, payload) pairs; returns the count inserted.

        Backward pointers chain through the partition's existing index state;
        the trie is updated to each key's newest pointer once per call.
        """
        if self._frozen:
            raise PartitionSealed("partition %d is frozen" % self.partition_id)
        staged = {}
        inserted = 0
        for canon_key, payload in keyed_payloads:
            canon_key = int(canon_key)
            size = len(payload)
            batch = self._require_open(BACKPTR_BYTES + size)
            prev = staged.get(canon_key)
            if prev is None:
                prev = self.key_trie.get(canon_key, NO_PREDECESSOR)
            off = batch.append(prev, payload)
            staged[canon_key] = self.layout.pack(batch.id, off, size)
            self.row_count += 1
            self.byte_count += size
            inserted += 1
        for canon_key, ptr in staged.items():
            self.key_trie.insert(canon_key, ptr)
        return inserted

    def insert_encoded(self, keys_u64, payload_matrix):
        """Vectorized insert of n equal-size payloads (fixed-width schemas)."""
        if self._frozen:
            raise PartitionSealed("partition %d is frozen" % self.partition_id)
        n, size = payload_matrix.shape
        if n == 0:
            return 0
        rec = BACKPTR_BYTES + size
        # plan arena placement; one planned segment per batch, so each
        # batch's write cursor is accurate at the time it is planned
        bids = np.empty(n, dtype=np.uint64)
        offs = np.empty(n, dtype=np.uint64)
        segments = []  # (start_row, end_row, batch)
        batch = self._require_open(rec)
        i = 0
        while i < n:
            fit = min(n - i, batch.remaining // rec)
            bids[i:i + fit] = batch.id
            offs[i:i + fit] = (batch.write_cursor
                               + np.arange(fit, dtype=np.uint64) * np.uint64(rec))
            segments.append((i, i + fit, batch))
            i += fit
            if i < n:
                # sealing is deferred until the segment's bytes are written
                batch = self._open_new(seal_prev=False)
        ptrs = self.layout.pack_u64(bids, offs, np.uint64(size))
        # backward chains: previous occurrence inside this block, else the trie
        keys_u64 = np.ascontiguousarray(keys_u64, dtype=np.uint64)
        order = np.argsort(keys_u64, kind="stable")
        ks = keys_u64[order]
        ps = ptrs[order]
        back_sorted = np.empty(n, dtype=np.uint64)
        same = np.empty(n, dtype=bool)
        same[0] = False
        same[1:] = ks[1:] == ks[:-1]
        back_sorted[1:][same[1:]] = ps[:-1][same[1:]]
        starts = np.flatnonzero(~same)
        get = self.key_trie.get
        for s in starts:
            back_sorted[s] = get(int(ks[s]), NO_PREDECESSOR)
        back = np.empty(n, dtype=np.uint64)
        back[order] = back_sorted
        # write arenas, then publish the newest pointer per key
        for seg, (lo, hi, batch) in enumerate(segments):
            batch.append_block(back[lo:hi], payload_matrix[lo:hi])
            if seg < len(segments) - 1:
                batch.seal()
        ends = np.append(starts[1:], n) - 1
        insert = self.key_trie.insert
        for s, e in zip(starts, ends):
            insert(int(ks[s]), int(ps[e]))
        self.row_count += n
        self.byte_count += n * size
        return n

    def lookup(self, canon_key, verify=None):
        rows = _chain(self.key_trie, self.batch_dir, self.layout, canon_key)
        return _verified(self.schema, rows, verify)

    def freeze(self):
        """Snapshot both tries atomically; the open batch is sealed first."""
        if self._open_batch is not None:
            self._open_batch.seal()
        key_snap = self.key_trie.snapshot()
        batch_snap = self.batch_dir.snapshot()
        tail = self._open_batch.id if self._open_batch is not None else None
        self._frozen = True
        self._open_batch = None
        return PartitionSnapshot(self.partition_id, self.schema, key_snap,
                                 batch_snap, self.row_count, self.byte_count,
                                 self.layout, tail, self.batch_capacity,
                                 self.max_row_bytes)

    def scan(self):
        return self.freeze_view().scan()

    def freeze_view(self):
        """Read-only snapshot view without sealing the partition."""
        tail = self._open_batch.id if self._open_batch is not None else None
        return PartitionSnapshot(self.partition_id, self.schema,
                                 self.key_trie.snapshot(),
                                 self.batch_dir.snapshot(),
                                 self.row_count, self.byte_count, self.layout,
                                 tail, self.batch_capacity, self.max_row_bytes)
