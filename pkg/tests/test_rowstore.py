import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ixframe import rowstore
from ixframe.errors import (
    BatchFull,
    BatchSealed,
    CorruptPayload,
    FieldOverflow,
    OutOfBounds,
    RowTooLarge,
    TypeMismatch,
)
from ixframe.rowstore import (
    NO_PREDECESSOR,
    ColumnType,
    PtrLayout,
    RowBatch,
    Schema,
    decode_row,
    encode_fixed_block,
    encode_row,
    pack_ptr,
    unpack_ptr,
)

INT64 = Schema((("k", ColumnType.INT64),))
MIXED = Schema((("k", ColumnType.INT64), ("s", ColumnType.UTF8)))
ALL4 = Schema((
    ("a", ColumnType.INT32),
    ("b", ColumnType.INT64),
    ("c", ColumnType.FLOAT64),
    ("d", ColumnType.UTF8),
))


class TestEncodeDecode:
    def test_int64_zero_roundtrip(self):
        payload = encode_row(INT64, (0,))
        assert len(payload) == 9  # 1 bitmap byte + 8 value bytes
        assert decode_row(INT64, payload) == (0,)

    def test_mixed_roundtrip(self):
        payload = encode_row(MIXED, (7, "ab"))
        assert decode_row(MIXED, payload) == (7, "ab")

    def test_row_too_large(self):
        with pytest.raises(RowTooLarge):
            encode_row(MIXED, (1, "x" * 1025), max_row_bytes=1024)

    def test_empty_string_roundtrip(self):
        assert decode_row(MIXED, encode_row(MIXED, (0, "")))[1] == ""

    def test_none_cells_roundtrip(self):
        row = (None, 5, None, None)
        assert decode_row(ALL4, encode_row(ALL4, row)) == row

    def test_truncated_payload(self):
        payload = encode_row(ALL4, (1, 2, 3.0, "hello"))
        with pytest.raises(CorruptPayload):
            decode_row(ALL4, payload[:-3])

    def test_trailing_bytes(self):
        payload = encode_row(INT64, (1,))
        with pytest.raises(CorruptPayload):
            decode_row(INT64, payload + b"\x00")

    def test_arity_mismatch(self):
        with pytest.raises(TypeMismatch):
            encode_row(INT64, (1, 2))

    def test_type_mismatch(self):
        with pytest.raises(TypeMismatch):
            encode_row(INT64, ("no",))
        with pytest.raises(TypeMismatch):
            encode_row(MIXED, (1, 2))

    def test_out_of_range_int32(self):
        s = Schema((("a", ColumnType.INT32),))
        with pytest.raises(TypeMismatch):
            encode_row(s, (2**31,))

    @settings(max_examples=500, deadline=None)
    @given(st.tuples(
        st.integers(-2**31, 2**31 - 1),
        st.integers(-2**63, 2**63 - 1),
        st.floats(allow_nan=False),
        st.text(max_size=40),
    ))
    def test_roundtrip_property(self, row):
        assert decode_row(ALL4, encode_row(ALL4, row)) == row

    def test_nan_roundtrip(self):
        s = Schema((("c", ColumnType.FLOAT64),))
        got = decode_row(s, encode_row(s, (float("nan"),)))[0]
        assert got != got

    def test_golden_layout(self):
        # frozen byte layout: bitmap | int64 LE | u16 len | utf8 bytes
        payload = encode_row(MIXED, (258, "hi"))
        assert payload == b"\x00" + struct.pack("<q", 258) + b"\x02\x00hi"

    def test_golden_null_bitmap(self):
        payload = encode_row(MIXED, (None, "hi"))
        assert payload[0] == 0b01


class TestFixedBlock:
    def test_matches_row_encoder(self):
        s = Schema((("a", ColumnType.INT32), ("b", ColumnType.INT64),
                    ("c", ColumnType.FLOAT64)))
        cols = [np.array([1, -2, 3], np.int32),
                np.array([10, 20, -30], np.int64),
                np.array([0.5, -1.5, 2.25])]
        block = encode_fixed_block(s, cols)
        for i in range(3):
            expect = encode_row(s, (int(cols[0][i]), int(cols[1][i]),
                                    float(cols[2][i])))
            assert bytes(block[i]) == expect

    def test_decode_fixed_block(self):
        s = Schema((("a", ColumnType.INT64),))
        cols = [np.arange(10, dtype=np.int64)]
        back = rowstore.decode_fixed_block(s, encode_fixed_block(s, cols))
        assert np.array_equal(back[0], cols[0])

    def test_rejects_varlen_schema(self):
        with pytest.raises(TypeMismatch):
            encode_fixed_block(MIXED, [[1], ["a"]])


class TestPackPtr:
    def test_zero(self):
        assert pack_ptr(0, 0, 0) == 0

    def test_roundtrip_example(self):
        # independent shift-or oracle
        raw = (5 << 33) | (1024 << 11) | 64
        assert pack_ptr(5, 1024, 64) == raw
        assert unpack_ptr(raw) == (5, 1024, 64)

    def test_field_overflow(self):
        with pytest.raises(FieldOverflow):
            pack_ptr(2**31, 0, 0)
        with pytest.raises(FieldOverflow):
            pack_ptr(0, 2**22, 0)
        with pytest.raises(FieldOverflow):
            pack_ptr(0, 0, 2**11)
        with pytest.raises(FieldOverflow):
            pack_ptr(-1, 0, 0)

    @given(st.integers(0, 2**31 - 1), st.integers(0, 2**22 - 1),
           st.integers(0, 2**11 - 1))
    def test_bijection_property(self, b, o, s):
        assert unpack_ptr(pack_ptr(b, o, s)) == (b, o, s)

    def test_boundaries_exhaustive(self):
        for b in (0, 1, 2**31 - 1):
            for o in (0, 1, 2**22 - 1):
                for s in (0, 1, 2**11 - 1):
                    assert unpack_ptr(pack_ptr(b, o, s)) == (b, o, s)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(7)
        b = rng.integers(0, 2**31, 100, dtype=np.uint64)
        o = rng.integers(0, 2**22, 100, dtype=np.uint64)
        s = rng.integers(0, 2**11, 100, dtype=np.uint64)
        packed = rowstore.pack_ptrs_u64(b, o, s)
        for i in range(100):
            assert int(packed[i]) == pack_ptr(int(b[i]), int(o[i]), int(s[i]))

    def test_layout_for_large_capacity(self):
        layout = PtrLayout.for_capacity(32 * 1024 * 1024)
        assert layout.offset_bits == 25
        assert layout.unpack(layout.pack(3, 2**24, 100)) == (3, 2**24, 100)

    def test_default_layout_matches_module_funcs(self):
        layout = PtrLayout.for_capacity(rowstore.BATCH_CAPACITY)
        assert (layout.batch_bits, layout.offset_bits, layout.size_bits) == (31, 22, 11)
        assert layout.pack(5, 1024, 64) == pack_ptr(5, 1024, 64)


class TestRowBatch:
    def test_first_append_offset_zero(self):
        b = RowBatch(id=0, capacity_bytes=1024)
        assert b.append(NO_PREDECESSOR, b"x" * 10) == 0

    def test_cursor_arithmetic(self):
        # two records of 8-byte backptr + 56-byte payload land at 0 and 64
        b = RowBatch(id=0, capacity_bytes=1024)
        assert b.append(NO_PREDECESSOR, b"a" * 56) == 0
        assert b.append(NO_PREDECESSOR, b"b" * 56) == 64
        assert b.write_cursor == 128

    def test_batch_full(self):
        b = RowBatch(id=0, capacity_bytes=32)
        b.append(0, b"x" * 20)
        with pytest.raises(BatchFull):
            b.append(0, b"y" * 20)

    def test_sealed_rejects_writes(self):
        b = RowBatch(id=0, capacity_bytes=64)
        b.seal()
        with pytest.raises(BatchSealed):
            b.append(0, b"x")

    def test_read_back(self):
        b = RowBatch(id=0, capacity_bytes=1024)
        off = b.append(12345, b"payload")
        assert b.read(off, 7) == (12345, b"payload")

    def test_read_out_of_bounds(self):
        b = RowBatch(id=0, capacity_bytes=1024)
        b.append(0, b"xy")
        with pytest.raises(OutOfBounds):
            b.read(64, 2)

    def test_shadow_interleaving(self):
        rng = np.random.default_rng(42)
        b = RowBatch(id=0, capacity_bytes=8192)
        shadow = []
        for i in range(100):
            payload = bytes(rng.integers(0, 256, int(rng.integers(1, 40)),
                                         dtype=np.uint8))
            back = int(rng.integers(0, 2**63))
            off = b.append(back, payload)
            shadow.append((off, back, payload))
            j = int(rng.integers(0, len(shadow)))
            o, bk, p = shadow[j]
            assert b.read(o, len(p)) == (bk, p)
        for o, bk, p in shadow:
            assert b.read(o, len(p)) == (bk, p)

    def test_cursor_equals_sum_of_records(self):
        b = RowBatch(id=0, capacity_bytes=4096)
        sizes = [3, 17, 40, 1]
        for s in sizes:
            b.append(0, b"z" * s)
        assert b.write_cursor == sum(8 + s for s in sizes)

    def test_append_block_matches_scalar(self):
        scalar = RowBatch(id=0, capacity_bytes=4096)
        bulk = RowBatch(id=0, capacity_bytes=4096)
        backs = np.arange(5, dtype=np.uint64) * 1000
        payloads = np.arange(5 * 12, dtype=np.uint8).reshape(5, 12)
        for i in range(5):
            scalar.append(int(backs[i]), bytes(payloads[i]))
        bulk.append_block(backs, payloads)
        assert scalar.data[:scalar.write_cursor] == bulk.data[:bulk.write_cursor]
        assert scalar.write_cursor == bulk.write_cursor

    def test_sealed_arena_crc_stable(self):
        b = RowBatch(id=0, capacity_bytes=128)
        b.append(0, b"stable")
        b.seal()
        crc = b.arena_crc()
        cow = b.copy_unsealed()
        cow.append(0, b"more")
        assert b.arena_crc() == crc
