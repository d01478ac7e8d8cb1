import json
import pathlib
import random
from collections import Counter

import pytest

from ixframe import engine
from ixframe.dataframe import PlainTable, create_index
from ixframe.engine import (
    Aggregate,
    BroadcastHashJoin,
    EquiJoin,
    ExecContext,
    Filter,
    FilterExec,
    FullScan,
    IndexedBroadcastEquiJoin,
    IndexedShuffledEquiJoin,
    IndexLookup,
    Lookup,
    Project,
    Scan,
    ShuffleHashJoin,
    SortMergeJoin,
    load_plan,
    plan,
)
from ixframe.errors import UnresolvedColumn
from ixframe.rowstore import ColumnType, Schema

GOLDEN = pathlib.Path(__file__).parent / "golden"

KV = Schema((("k", ColumnType.INT64), ("v", ColumnType.INT64)))
KW = Schema((("k", ColumnType.INT64), ("w", ColumnType.INT64)))
KF = Schema((("k", ColumnType.FLOAT64), ("v", ColumnType.INT64)))
KS = Schema((("k", ColumnType.UTF8), ("v", ColumnType.INT64)))


def tab(rows, schema=KV):
    return PlainTable.from_rows(schema, rows)


def nested_loop_join(lt, rt, lc, rc, ctype):
    """Oracle: quadratic scan using canonical-key equality."""
    out = []
    for a in lt.rows():
        for b in rt.rows():
            if a[lc] is None or b[rc] is None:
                continue
            if engine._join_match(ctype, a[lc], b[rc]):
                out.append(a + b)
    return out


def run_join(physical, catalog=None, **ctx_kw):
    ctx = ExecContext(**ctx_kw)
    return physical.execute(ctx), ctx


# ---------------------------------------------------------------------------
# planner rules

class TestPlannerRules:
    def setup_method(self):
        self.build = create_index(tab([(i % 50, i) for i in range(1000)]), 0, 4)
        self.probe = tab([(i, i * 2) for i in range(30)], KW)
        self.catalog = {"big": self.build, "small": self.probe}

    def test_r1_broadcast_when_probe_small(self):
        lp = EquiJoin(Scan("big"), Scan("small"), "k", "k")
        pp = plan(lp, self.catalog)
        assert isinstance(pp, IndexedBroadcastEquiJoin)
        assert pp.build_on_left

    def test_r1_shuffle_when_probe_large(self):
        lp = EquiJoin(Scan("big"), Scan("small"), "k", "k")
        pp = plan(lp, self.catalog, broadcast_threshold=1)
        assert isinstance(pp, IndexedShuffledEquiJoin)

    def test_r1_build_side_follows_index(self):
        lp = EquiJoin(Scan("small"), Scan("big"), "k", "k")
        pp = plan(lp, self.catalog)
        assert isinstance(pp, IndexedBroadcastEquiJoin)
        assert not pp.build_on_left

    def test_r1_tiebreak_prefers_left_build(self):
        other = create_index(tab([(i, i) for i in range(20)], KW), 0, 2)
        catalog = dict(self.catalog, other=other)
        pp = plan(EquiJoin(Scan("big"), Scan("other"), "k", "k"), catalog)
        assert pp.name == "big" and pp.build_on_left

    def test_r1_needs_index_on_join_column(self):
        # index is on column 0 ("k"); joining on "v" must not trigger R1
        lp = EquiJoin(Scan("big"), Scan("small"), "v", "w")
        pp = plan(lp, self.catalog)
        assert isinstance(pp, ShuffleHashJoin)

    def test_r2_eq_filter_becomes_lookup(self):
        pp = plan(Filter(Scan("big"), "k", "eq", 7), self.catalog)
        assert isinstance(pp, IndexLookup)
        assert pp.key == 7

    def test_r2_only_on_index_column(self):
        pp = plan(Filter(Scan("big"), "v", "eq", 7), self.catalog)
        assert isinstance(pp, FilterExec)

    def test_r2_only_for_eq(self):
        pp = plan(Filter(Scan("big"), "k", "lt", 7), self.catalog)
        assert isinstance(pp, FilterExec)

    def test_r3_plain_tables_fall_back(self):
        catalog = {"a": tab([(1, 2)]), "b": tab([(1, 3)], KW)}
        pp = plan(EquiJoin(Scan("a"), Scan("b"), "k", "k"), catalog)
        assert isinstance(pp, ShuffleHashJoin)

    def test_rules_disabled_gives_baselines(self):
        lp = EquiJoin(Scan("big"), Scan("small"), "k", "k")
        pp = plan(lp, self.catalog, rules_enabled=False)
        assert isinstance(pp, ShuffleHashJoin)
        pp = plan(Filter(Scan("big"), "k", "eq", 7), self.catalog,
                  rules_enabled=False)
        assert isinstance(pp, FilterExec)

    def test_unknown_table(self):
        with pytest.raises(UnresolvedColumn):
            plan(Scan("nope"), self.catalog)

    def test_unknown_column(self):
        with pytest.raises(UnresolvedColumn):
            plan(EquiJoin(Scan("big"), Scan("small"), "zzz", "k"), self.catalog)

    def test_lookup_on_plain_table_rejected(self):
        with pytest.raises(UnresolvedColumn):
            plan(Lookup("small", 3), self.catalog)


# ---------------------------------------------------------------------------
# golden explain renderings

class TestGoldenExplain:
    def check(self, pp, fname):
        expect = (GOLDEN / fname).read_text().rstrip("\n")
        assert engine.explain(pp) == expect

    def setup_method(self):
        build = create_index(tab([(i, i) for i in range(100)]), 0, 4)
        self.catalog = {"orders": build,
                        "batch": tab([(i, i) for i in range(10)], KW)}

    def test_broadcast_join_plan(self):
        pp = plan(EquiJoin(Scan("orders"), Scan("batch"), "k", "k"),
                  self.catalog)
        self.check(pp, "explain_broadcast_join.txt")

    def test_shuffled_join_plan(self):
        pp = plan(EquiJoin(Scan("orders"), Scan("batch"), "k", "k"),
                  self.catalog, broadcast_threshold=1)
        self.check(pp, "explain_shuffled_join.txt")

    def test_lookup_rewrite_plan(self):
        pp = plan(Project(Filter(Scan("orders"), "k", "eq", 3), ("v",)),
                  self.catalog)
        self.check(pp, "explain_lookup.txt")

    def test_baseline_join_plan(self):
        pp = plan(EquiJoin(Scan("orders"), Scan("batch"), "v", "w"),
                  self.catalog)
        self.check(pp, "explain_baseline_join.txt")


# ---------------------------------------------------------------------------
# join correctness against the nested-loop oracle

def make_join_ops(lt, rt, build_version, probe_plan_table, cls):
    out_schema = engine._joined_schema(lt.schema, rt.schema)
    return cls(build_version, FullScan("probe", probe_plan_table), 0, True,
               out_schema, lt.schema, rt.schema, "build")


class TestJoinOracle:
    @pytest.mark.parametrize("threads", [1, 4])
    @pytest.mark.parametrize("cls", [IndexedShuffledEquiJoin,
                                     IndexedBroadcastEquiJoin])
    def test_indexed_join_matches_oracle(self, cls, threads):
        rng = random.Random(42)
        lt = tab([(rng.randrange(40), rng.randrange(100)) for _ in range(400)])
        rt = tab([(rng.randrange(60), rng.randrange(100)) for _ in range(150)],
                 KW)
        expect = Counter(nested_loop_join(lt, rt, 0, 0, ColumnType.INT64))
        build = create_index(lt, 0, 4)
        op = make_join_ops(lt, rt, build, rt, cls)
        got, _ = run_join(op, num_threads=threads)
        assert Counter(got.rows()) == expect

    def test_baseline_joins_match_oracle(self):
        rng = random.Random(7)
        lt = tab([(rng.randrange(30), rng.randrange(50)) for _ in range(200)])
        rt = tab([(rng.randrange(30), rng.randrange(50)) for _ in range(180)],
                 KW)
        expect = Counter(nested_loop_join(lt, rt, 0, 0, ColumnType.INT64))
        out_schema = engine._joined_schema(lt.schema, rt.schema)
        for cls in (ShuffleHashJoin, BroadcastHashJoin, SortMergeJoin):
            op = cls(FullScan("l", lt), FullScan("r", rt), "k", "k",
                     out_schema, lt.schema, rt.schema)
            got, _ = run_join(op, num_threads=2)
            assert Counter(got.rows()) == expect, cls.__name__

    def test_string_keys_verify_hash(self):
        lt = tab([("a", 1), ("bb", 2), ("a", 3)], KS)
        rt = tab([("a", 9), ("ccc", 8)],
                 Schema((("k", ColumnType.UTF8), ("w", ColumnType.INT64))))
        expect = Counter(nested_loop_join(lt, rt, 0, 0, ColumnType.UTF8))
        build = create_index(lt, 0, 4)
        op = make_join_ops(lt, rt, build, rt, IndexedShuffledEquiJoin)
        got, _ = run_join(op)
        assert Counter(got.rows()) == expect

    def test_float_keys_bitwise_everywhere(self):
        nan = float("nan")
        lt = tab([(0.0, 1), (-0.0, 2), (nan, 3), (1.5, 4)], KF)
        rt = tab([(0.0, 10), (nan, 11)],
                 Schema((("k", ColumnType.FLOAT64), ("w", ColumnType.INT64))))
        expect = nested_loop_join(lt, rt, 0, 0, ColumnType.FLOAT64)
        # -0.0 joins nothing; NaN matches itself bitwise
        assert Counter((a, c) for (_, a, _, c) in expect) == Counter(
            [(1, 10), (3, 11)])
        build = create_index(lt, 0, 2)
        op = make_join_ops(lt, rt, build, rt, IndexedBroadcastEquiJoin)
        got, _ = run_join(op)
        key = lambda rows: Counter(
            tuple("nan" if v != v else v for v in r) for r in rows)
        assert key(got.rows()) == key(expect)
        out_schema = engine._joined_schema(lt.schema, rt.schema)
        base = ShuffleHashJoin(FullScan("l", lt), FullScan("r", rt), "k", "k",
                               out_schema, lt.schema, rt.schema)
        got2, _ = run_join(base)
        assert key(got2.rows()) == key(expect)

    def test_plan_equivalence_random(self):
        """Random join instances: planned-with-rules == planned-without."""
        rng = random.Random(99)
        for trial in range(25):
            n1, n2 = rng.randrange(1, 120), rng.randrange(1, 120)
            ks = rng.randrange(1, 40)
            lt = tab([(rng.randrange(ks), rng.randrange(9)) for _ in range(n1)])
            rt = tab([(rng.randrange(ks), rng.randrange(9)) for _ in range(n2)],
                     KW)
            catalog = {"l": create_index(lt, 0, rng.randrange(1, 5)), "r": rt}
            lp = EquiJoin(Scan("l"), Scan("r"), "k", "k")
            thresh = rng.choice([1, engine.BROADCAST_THRESHOLD])
            fast, _ = run_join(plan(lp, catalog, broadcast_threshold=thresh))
            slow, _ = run_join(plan(lp, catalog, rules_enabled=False))
            assert Counter(fast.rows()) == Counter(slow.rows()), trial


# ---------------------------------------------------------------------------
# shuffle accounting invariants

class TestShuffleAccounting:
    def setup_method(self):
        self.build = create_index(tab([(i % 100, i) for i in range(2000)]), 0, 8)
        self.probe = tab([(i, i) for i in range(50)], KW)
        self.catalog = {"b": self.build, "p": self.probe}
        self.lp = EquiJoin(Scan("b"), Scan("p"), "k", "k")

    def test_build_side_never_shuffled(self):
        for thresh in (1, engine.BROADCAST_THRESHOLD):
            _, ctx = run_join(plan(self.lp, self.catalog,
                                   broadcast_threshold=thresh))
            assert ctx.build_shuffle_bytes == 0

    def test_broadcast_sends_full_probe_everywhere(self):
        _, ctx = run_join(plan(self.lp, self.catalog))
        probe_bytes = self.probe.estimated_bytes()
        assert len(ctx.per_partition_shuffle_bytes) == self.build.num_partitions
        for v in ctx.per_partition_shuffle_bytes.values():
            assert v == probe_bytes
        assert ctx.probe_shuffle_bytes == probe_bytes * self.build.num_partitions

    def test_shuffle_sends_each_probe_row_once(self):
        _, ctx = run_join(plan(self.lp, self.catalog, broadcast_threshold=1))
        probe_bytes = self.probe.estimated_bytes()
        # per-row rounding only; every probe row crosses the wire exactly once
        assert abs(ctx.probe_shuffle_bytes - probe_bytes) <= self.probe.num_rows
        assert ctx.probe_shuffle_bytes < probe_bytes * 2

    def test_lookup_probes_one_partition(self):
        _, ctx = run_join(plan(Filter(Scan("b"), "k", "eq", 5), self.catalog))
        assert ctx.partitions_probed == 1
        assert ctx.probe_shuffle_bytes == 0


# ---------------------------------------------------------------------------
# scalar operators against simple oracles

class TestOperators:
    def setup_method(self):
        rng = random.Random(5)
        self.rows = [(rng.randrange(20), rng.randrange(100))
                     for _ in range(300)]
        self.catalog = {"t": tab(self.rows)}

    def run(self, lp):
        return plan(lp, self.catalog).execute()

    def test_filter_predicates(self):
        for pred, ok in (("eq", lambda v: v == 7), ("lt", lambda v: v < 7),
                         ("gt", lambda v: v > 7)):
            got = sorted(self.run(Filter(Scan("t"), "k", pred, 7)).rows())
            assert got == sorted(r for r in self.rows if ok(r[0]))
        got = sorted(self.run(Filter(Scan("t"), "v", "range",
                                     lo=10, hi=20)).rows())
        assert got == sorted(r for r in self.rows if 10 <= r[1] <= 20)

    def test_project(self):
        got = self.run(Project(Scan("t"), ("v",)))
        assert tuple(got.schema.column_names()) == ("v",)
        assert list(got.column(0)) == [r[1] for r in self.rows]

    def test_aggregate_oracle(self):
        groups = {}
        for k, v in self.rows:
            groups.setdefault(k, []).append(v)
        for agg, f in (("count", len), ("sum", sum), ("min", min),
                       ("max", max)):
            got = self.run(Aggregate(Scan("t"), ("k",), agg, "v"))
            expect = sorted((k, f(vs)) for k, vs in groups.items())
            assert list(got.rows()) == expect, agg

    def test_global_count(self):
        got = self.run(Aggregate(Scan("t"), (), "count"))
        assert list(got.rows()) == [(len(self.rows),)]

    def test_join_duplicate_names_suffixed(self):
        catalog = {"a": tab([(1, 2)]), "b": tab([(1, 3)])}
        got = plan(EquiJoin(Scan("a"), Scan("b"), "k", "k"), catalog).execute()
        assert tuple(got.schema.column_names()) == ("k", "v", "k_r", "v_r")


# ---------------------------------------------------------------------------
# JSON plan documents

class TestPlanJson:
    def test_round_trip(self):
        doc = {
            "op": "join",
            "left": {"op": "scan", "table": "a"},
            "right": {"op": "filter", "predicate": "eq", "column": "k",
                      "value": 3, "input": {"op": "scan", "table": "b"}},
            "left_col": "k", "right_col": "k",
        }
        lp = load_plan(json.dumps(doc))
        assert lp == EquiJoin(Scan("a"),
                              Filter(Scan("b"), "k", "eq", 3), "k", "k")

    def test_all_ops(self):
        doc = {"op": "aggregate", "agg": "sum", "agg_col": "v",
               "group_by": ["k"],
               "input": {"op": "project", "columns": ["k", "v"],
                         "input": {"op": "lookup", "table": "t", "key": 9}}}
        lp = load_plan(json.dumps(doc))
        assert lp == Aggregate(Project(Lookup("t", 9), ("k", "v")),
                               ("k",), "sum", "v")

    def test_unknown_op(self):
        with pytest.raises(UnresolvedColumn):
            load_plan('{"op": "cartesian"}')

    def test_executes_end_to_end(self):
        catalog = {"t": create_index(tab([(i % 5, i) for i in range(100)]),
                                     0, 4)}
        lp = load_plan(json.dumps(
            {"op": "aggregate", "agg": "count", "group_by": [],
             "input": {"op": "filter", "predicate": "eq", "column": "k",
                       "value": 2, "input": {"op": "scan", "table": "t"}}}))
        pp = plan(lp, catalog)
        assert isinstance(pp.child, IndexLookup)
        assert list(pp.execute().rows()) == [(20,)]
