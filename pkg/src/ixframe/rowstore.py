"""Row encoding, packed 64-bit row pointers, and fixed-capacity batch arenas.

Byte layouts are frozen; see docs/format.md.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BatchFull,
    BatchSealed,
    CorruptPayload,
    FieldOverflow,
    OutOfBounds,
    RowTooLarge,
    TypeMismatch,
)

MAX_ROW_BYTES = 1024
BATCH_CAPACITY = 4 * 1024 * 1024  # 4 MiB sweet spot

# PackedRowPtr bit layout: [63:33] batch_id, [32:11] offset, [10:0] row size.
BATCH_BITS = 31
OFFSET_BITS = 22
SIZE_BITS = 11
_BATCH_MAX = (1 << BATCH_BITS) - 1
_OFFSET_MAX = (1 << OFFSET_BITS) - 1
_SIZE_MAX = (1 << SIZE_BITS) - 1

#: Reserved all-ones pointer: "no predecessor" in a backward chain.
NO_PREDECESSOR = (1 << 64) - 1

BACKPTR_BYTES = 8


class ColumnType(enum.Enum):
    INT32 = "int32"
    INT64 = "int64"
    FLOAT64 = "float64"
    UTF8 = "utf8"

    @property
    def fixed_width(self):
        return _FIXED_WIDTHS.get(self)

    @property
    def is_fixed(self):
        return self is not ColumnType.UTF8


_FIXED_WIDTHS = {
    ColumnType.INT32: 4,
    ColumnType.INT64: 8,
    ColumnType.FLOAT64: 8,
}

_STRUCT_FMT = {
    ColumnType.INT32: "<i",
    ColumnType.INT64: "<q",
    ColumnType.FLOAT64: "<d",
}

_NP_DTYPE = {
    ColumnType.INT32: "<i4",
    ColumnType.INT64: "<i8",
    ColumnType.FLOAT64: "<f8",
}


@dataclass(frozen=True)
class Schema:
    """Ordered column layout plus the optional indexed column ordinal."""

    columns: tuple
    index_col: int | None = None

    def __post_init__(self):
        cols = tuple((str(n), ColumnType(t) if not isinstance(t, ColumnType) else t)
                     for n, t in self.columns)
        object.__setattr__(self, "columns", cols)
        names = [n for n, _ in cols]
        if len(set(names)) != len(names):
            raise TypeMismatch("duplicate column names: %r" % (names,))
        if self.index_col is not None and not (0 <= self.index_col < len(cols)):
            raise TypeMismatch("index_col %r out of range" % (self.index_col,))

    @property
    def num_columns(self):
        return len(self.columns)

    def column_type(self, i):
        return self.columns[i][1]

    def column_names(self):
        return [n for n, _ in self.columns]

    def column_ordinal(self, name):
        for i, (n, _) in enumerate(self.columns):
            if n == name:
                return i
        raise TypeMismatch("no column named %r" % (name,))

    @property
    def null_bitmap_bytes(self):
        return (len(self.columns) + 7) // 8

    @property
    def fixed_region_bytes(self):
        return sum(t.fixed_width for _, t in self.columns if t.is_fixed)

    @property
    def has_varlen(self):
        return any(t is ColumnType.UTF8 for _, t in self.columns)

    @property
    def fixed_payload_size(self):
        """Encoded payload size when the schema has no var-length columns."""
        if self.has_varlen:
            return None
        return self.null_bitmap_bytes + self.fixed_region_bytes

    def with_index_col(self, col):
        return Schema(self.columns, col)

    def to_json(self):
        return {
            "columns": [[n, t.value] for n, t in self.columns],
            "index_col": self.index_col,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(tuple((n, ColumnType(t)) for n, t in obj["columns"]),
                   obj.get("index_col"))


def encode_row(schema, values, max_row_bytes=MAX_ROW_BYTES):
    """Encode one row of typed cells into its frozen byte layout."""
    if len(values) != schema.num_columns:
        raise TypeMismatch("expected %d cells, got %d"
                           % (schema.num_columns, len(values)))
    bitmap = bytearray(schema.null_bitmap_bytes)
    fixed = bytearray()
    var = bytearray()
    for i, ((_, ctype), v) in enumerate(zip(schema.columns, values)):
        if v is None:
            bitmap[i // 8] |= 1 << (i % 8)
            if ctype.is_fixed:
                fixed += b"\x00" * ctype.fixed_width
            else:
                var += struct.pack("<H", 0)
            continue
        if ctype is ColumnType.UTF8:
            if not isinstance(v, str):
                raise TypeMismatch("column %d expects str, got %r" % (i, type(v)))
            raw = v.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise RowTooLarge("utf8 cell of %d bytes" % len(raw))
            var += struct.pack("<H", len(raw)) + raw
        else:
            if ctype is ColumnType.FLOAT64:
                if not isinstance(v, (int, float)) or isinstance(v, bool):
                    raise TypeMismatch("column %d expects float, got %r" % (i, type(v)))
                fixed += struct.pack("<d", float(v))
            else:
                if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                    raise TypeMismatch("column %d expects int, got %r" % (i, type(v)))
                try:
                    fixed += struct.pack(_STRUCT_FMT[ctype], int(v))
                except struct.error:
                    raise TypeMismatch("column %d value %r out of range" % (i, v))
    payload = bytes(bitmap) + bytes(fixed) + bytes(var)
    if len(payload) > max_row_bytes:
        raise RowTooLarge("encoded row is %d bytes (limit %d)"
                          % (len(payload), max_row_bytes))
    return payload


def decode_row(schema, payload):
    """Invert encode_row; raises CorruptPayload on malformed bytes."""
    nb = schema.null_bitmap_bytes
    need = nb + schema.fixed_region_bytes
    if len(payload) < need:
        raise CorruptPayload("payload of %d bytes, need at least %d"
                             % (len(payload), need))
    bitmap = payload[:nb]
    pos = nb
    varpos = need
    out = []
    for i, (_, ctype) in enumerate(schema.columns):
        is_null = bool(bitmap[i // 8] >> (i % 8) & 1)
        if ctype.is_fixed:
            w = ctype.fixed_width
            cell = None if is_null else struct.unpack_from(_STRUCT_FMT[ctype],
                                                           payload, pos)[0]
            pos += w
        else:
            if varpos + 2 > len(payload):
                raise CorruptPayload("truncated var-length region")
            (ln,) = struct.unpack_from("<H", payload, varpos)
            varpos += 2
            if varpos + ln > len(payload):
                raise CorruptPayload("utf8 cell overruns payload")
            if is_null:
                cell = None
            else:
                try:
                    cell = payload[varpos:varpos + ln].decode("utf-8")
                except UnicodeDecodeError as e:
                    raise CorruptPayload("invalid utf-8: %s" % e)
            varpos += ln
        out.append(cell)
    if varpos != len(payload):
        raise CorruptPayload("%d trailing bytes" % (len(payload) - varpos))
    return tuple(out)


def encode_fixed_block(schema, columns):
    """Vectorized encode of n rows for a fixed-width, null-free schema.

    columns: one array-like per schema column. Returns an (n, payload_size)
    uint8 matrix whose rows are byte-identical to encode_row output.
    """
    size = schema.fixed_payload_size
    if size is None:
        raise TypeMismatch("fixed block encoding needs a fixed-width schema")
    arrays = [np.asarray(c, dtype=_NP_DTYPE[t]) for c, (_, t)
              in zip(columns, schema.columns)]
    n = len(arrays[0]) if arrays else 0
    out = np.zeros((n, size), dtype=np.uint8)
    pos = schema.null_bitmap_bytes
    for arr, (_, ctype) in zip(arrays, schema.columns):
        w = ctype.fixed_width
        out[:, pos:pos + w] = arr.view(np.uint8).reshape(n, w)
        pos += w
    return out


def decode_fixed_block(schema, block):
    """Invert encode_fixed_block: (n, size) uint8 matrix -> per-column arrays."""
    pos = schema.null_bitmap_bytes
    cols = []
    n = block.shape[0]
    for _, ctype in schema.columns:
        w = ctype.fixed_width
        cols.append(np.ascontiguousarray(block[:, pos:pos + w])
                    .view(_NP_DTYPE[ctype]).reshape(n))
        pos += w
    return cols


def pack_ptr(batch_id, offset_bytes, row_size_bytes):
    """Pack a row reference into one dense 64-bit integer."""
    if not 0 <= batch_id <= _BATCH_MAX:
        raise FieldOverflow("batch_id %d exceeds %d bits" % (batch_id, BATCH_BITS))
    if not 0 <= offset_bytes <= _OFFSET_MAX:
        raise FieldOverflow("offset %d exceeds %d bits" % (offset_bytes, OFFSET_BITS))
    if not 0 <= row_size_bytes <= _SIZE_MAX:
        raise FieldOverflow("row size %d exceeds %d bits" % (row_size_bytes, SIZE_BITS))
    return (batch_id << 33) | (offset_bytes << 11) | row_size_bytes


def unpack_ptr(ptr):
    """Invert pack_ptr: 64-bit value -> (batch_id, offset_bytes, row_size_bytes)."""
    return (ptr >> 33) & _BATCH_MAX, (ptr >> 11) & _OFFSET_MAX, ptr & _SIZE_MAX


def pack_ptrs_u64(batch_ids, offsets, sizes):
    """Vectorized pack_ptr over numpy arrays; returns uint64 array."""
    b = np.asarray(batch_ids, dtype=np.uint64)
    o = np.asarray(offsets, dtype=np.uint64)
    s = np.asarray(sizes, dtype=np.uint64)
    return (b << np.uint64(33)) | (o << np.uint64(11)) | s


@dataclass(frozen=True)
class PtrLayout:
    """Bit split of a packed row pointer.

    The default 31/22/11 split addresses 4 MiB batches and 1 KiB rows.
    Larger batch capacities borrow offset bits from the batch-id field so
    the pointer stays a single 64-bit word.
    """

    batch_bits: int = BATCH_BITS
    offset_bits: int = OFFSET_BITS
    size_bits: int = SIZE_BITS

    @classmethod
    def for_capacity(cls, capacity_bytes, max_row_bytes=MAX_ROW_BYTES):
        offset_bits = max(OFFSET_BITS, (capacity_bytes - 1).bit_length())
        size_bits = max(SIZE_BITS, max_row_bytes.bit_length())
        return cls(64 - offset_bits - size_bits, offset_bits, size_bits)

    @property
    def offset_max(self):
        return (1 << self.offset_bits) - 1

    def pack(self, batch_id, offset_bytes, row_size_bytes):
        if batch_id >> self.batch_bits:
            raise FieldOverflow("batch_id %d exceeds %d bits" % (batch_id, self.batch_bits))
        if offset_bytes >> self.offset_bits:
            raise FieldOverflow("offset %d exceeds %d bits" % (offset_bytes, self.offset_bits))
        if row_size_bytes >> self.size_bits:
            raise FieldOverflow("size %d exceeds %d bits" % (row_size_bytes, self.size_bits))
        return ((batch_id << (self.offset_bits + self.size_bits))
                | (offset_bytes << self.size_bits) | row_size_bytes)

    def unpack(self, ptr):
        return (ptr >> (self.offset_bits + self.size_bits),
                (ptr >> self.size_bits) & self.offset_max,
                ptr & ((1 << self.size_bits) - 1))

    def pack_u64(self, batch_ids, offsets, sizes):
        b = np.asarray(batch_ids, dtype=np.uint64)
        o = np.asarray(offsets, dtype=np.uint64)
        s = np.asarray(sizes, dtype=np.uint64)
        return ((b << np.uint64(self.offset_bits + self.size_bits))
                | (o << np.uint64(self.size_bits)) | s)


@dataclass
class RowBatch:
    """Fixed-capacity contiguous arena of back-to-back records.

    Record layout: [8-byte LE backward pointer][payload bytes].
    """

    id: int
    capacity_bytes: int = BATCH_CAPACITY
    data: bytearray = field(default=None, repr=False)
    write_cursor: int = 0
    sealed: bool = False

    def __post_init__(self):
        if self.data is None:
            self.data = bytearray(self.capacity_bytes)

    @property
    def remaining(self):
        return self.capacity_bytes - self.write_cursor

    def append(self, backward, payload):
        """Write one record; returns the record's start offset."""
        if self.sealed:
            raise BatchSealed("batch %d is sealed" % self.id)
        rec = BACKPTR_BYTES + len(payload)
        if rec > self.remaining:
            raise BatchFull("record of %d bytes, %d remaining" % (rec, self.remaining))
        off = self.write_cursor
        struct.pack_into("<Q", self.data, off, backward)
        self.data[off + BACKPTR_BYTES:off + rec] = payload
        self.write_cursor = off + rec
        return off

    def append_block(self, back_ptrs, payload_matrix):
        """Bulk append of m same-size records; returns the first offset.

        back_ptrs: uint64 array of length m; payload_matrix: (m, s) uint8.
        """
        if self.sealed:
            raise BatchSealed("batch %d is sealed" % self.id)
        m, s = payload_matrix.shape
        rec = BACKPTR_BYTES + s
        total = m * rec
        if total > self.remaining:
            raise BatchFull("block of %d bytes, %d remaining" % (total, self.remaining))
        block = np.empty((m, rec), dtype=np.uint8)
        block[:, :BACKPTR_BYTES] = (np.asarray(back_ptrs, dtype="<u8")
                                    .view(np.uint8).reshape(m, BACKPTR_BYTES))
        block[:, BACKPTR_BYTES:] = payload_matrix
        off = self.write_cursor
        self.data[off:off + total] = block.tobytes()
        self.write_cursor = off + total
        return off

    def read(self, offset_bytes, row_size_bytes):
        """Return (backward pointer, payload) of the record at the offset."""
        end = offset_bytes + BACKPTR_BYTES + row_size_bytes
        if offset_bytes < 0 or end > self.write_cursor:
            raise OutOfBounds("record [%d, %d) outside written region [0, %d)"
                              % (offset_bytes, end, self.write_cursor))
        (backward,) = struct.unpack_from("<Q", self.data, offset_bytes)
        payload = bytes(self.data[offset_bytes + BACKPTR_BYTES:end])
        return backward, payload

    def seal(self):
        self.sealed = True

    def copy_unsealed(self):
        """Copy-on-write duplicate used by a successor partition."""
        return RowBatch(id=self.id, capacity_bytes=self.capacity_bytes,
                        data=bytearray(self.data), write_cursor=self.write_cursor,
                        sealed=False)

    def arena_crc(self):
        """Checksum of the written region; sealed batches keep it constant."""
        return zlib.crc32(bytes(self.data[:self.write_cursor]))
