from collections import Counter

import numpy as np
import pytest
from scipy import stats

from ixframe.datagen import (
    GenSpec,
    Sequential,
    Uniform,
    Zipf,
    generate,
    read_csv,
    write_csv,
)
from ixframe.dataframe import PlainTable, create_index
from ixframe.errors import InvalidSpec, ParseError
from ixframe.rowstore import ColumnType, Schema


class TestGenerate:
    def test_zero_rows(self):
        t = generate(GenSpec(0))
        assert t.num_rows == 0

    def test_row_count_exact(self):
        assert generate(GenSpec(1234)).num_rows == 1234

    def test_determinism(self):
        spec = GenSpec(5000, Zipf(1.2, 400), seed=77)
        a, b = generate(spec), generate(spec)
        assert list(a.rows()) == list(b.rows())

    def test_different_seeds_differ(self):
        a = generate(GenSpec(1000, seed=1))
        b = generate(GenSpec(1000, seed=2))
        assert list(a.rows()) != list(b.rows())

    def test_uniform_chi_square(self):
        t = generate(GenSpec(100_000, Uniform(0, 99), seed=3))
        counts = np.bincount(np.asarray(t.columns[0]), minlength=100)
        _, p = stats.chisquare(counts)
        assert p > 0.01

    def test_zipf_top_rank_ratio(self):
        # analytic check: freq(rank 1) / freq(rank 2) = 2^s for Zipf(s)
        t = generate(GenSpec(1_000_000, Zipf(1.0, 10_000), seed=5))
        freq = Counter(np.asarray(t.columns[0]).tolist())
        ratio = freq[1] / freq[2]
        assert abs(ratio - 2.0) / 2.0 < 0.10

    def test_zipf_rank_frequency_slope(self):
        s = 1.3
        t = generate(GenSpec(500_000, Zipf(s, 2000), seed=8))
        freq = Counter(np.asarray(t.columns[0]).tolist())
        ranks = np.arange(1, 51, dtype=float)
        f = np.array([freq[int(r)] for r in ranks], dtype=float)
        slope = np.polyfit(np.log(ranks), np.log(f), 1)[0]
        assert abs(-slope - s) / s < 0.10

    def test_sequential_keys(self):
        t = generate(GenSpec(100, Sequential(start=10)))
        assert list(t.columns[0]) == list(range(10, 110))

    def test_all_key_types_render(self):
        for ktype in ColumnType:
            t = generate(GenSpec(50, Uniform(0, 1000), key_type=ktype, seed=4))
            assert t.num_rows == 50
            # generated keys are indexable end to end
            df = create_index(t, 0, 2)
            k = t.row(0)[0]
            assert any(r[0] == k for r in df.get_rows(k).rows())

    def test_invalid_specs(self):
        with pytest.raises(InvalidSpec):
            generate(GenSpec(-1))
        with pytest.raises(InvalidSpec):
            generate(GenSpec(10, Zipf(0.0, 10)))
        with pytest.raises(InvalidSpec):
            generate(GenSpec(10, Zipf(1.0, 0)))
        with pytest.raises(InvalidSpec):
            generate(GenSpec(10, Uniform(5, 4)))
        with pytest.raises(InvalidSpec):
            generate(GenSpec(10, key_dist="zipf"))


MIXED = Schema((("k", ColumnType.INT64), ("name", ColumnType.UTF8),
                ("score", ColumnType.FLOAT64), ("n", ColumnType.INT32)))


class TestCsv:
    def test_round_trip_identity(self, tmp_path):
        rows = [(1, "alice", 1.5, 7), (2, "bob,with comma", -0.25, -3),
                (3, 'quote "here"', 2.0, 0), (4, None, None, None)]
        t = PlainTable.from_rows(MIXED, rows)
        path = tmp_path / "t.csv"
        write_csv(t, path)
        back = read_csv(path, MIXED)
        assert list(back.rows()) == rows

    def test_sidecar_schema(self, tmp_path):
        t = PlainTable.from_rows(MIXED, [(1, "x", 0.5, 2)])
        path = tmp_path / "t.csv"
        write_csv(t, path)
        back = read_csv(path)          # schema from sidecar
        assert back.schema == MIXED
        assert list(back.rows()) == [(1, "x", 0.5, 2)]

    def test_large_random_round_trip(self, tmp_path):
        t = generate(GenSpec(100_000, Zipf(0.8, 5000), seed=13,
                             payload=(("v", ColumnType.INT64),
                                      ("s", ColumnType.UTF8))))
        path = tmp_path / "big.csv"
        write_csv(t, path)
        back = read_csv(path)
        assert Counter(back.rows()) == Counter(t.rows())

    def test_malformed_row_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("k,v\n1,2\nnot_an_int,3\n")
        schema = Schema((("k", ColumnType.INT64), ("v", ColumnType.INT64)))
        with pytest.raises(ParseError) as e:
            read_csv(path, schema)
        assert e.value.line == 3

    def test_wrong_arity_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("k,v\n1,2,3\n")
        schema = Schema((("k", ColumnType.INT64), ("v", ColumnType.INT64)))
        with pytest.raises(ParseError) as e:
            read_csv(path, schema)
        assert e.value.line == 2

    def test_header_mismatch(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        schema = Schema((("k", ColumnType.INT64), ("v", ColumnType.INT64)))
        with pytest.raises(ParseError) as e:
            read_csv(path, schema)
        assert e.value.line == 1

    def test_missing_sidecar(self, tmp_path):
        path = tmp_path / "nosidecar.csv"
        path.write_text("k\n1\n")
        with pytest.raises(ParseError):
            read_csv(path)
