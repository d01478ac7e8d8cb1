"""Logical plans, index-aware rewrite rules, and physical operators.

The planner applies three deterministic rules:

  R1  an equi-join with one side indexed on its join column becomes an
      indexed join with that side as build; the probe side is shuffled,
      or broadcast when its exact encoded size is under the threshold
  R2  an equality filter on an indexed table's index column becomes a
      point lookup
  R3  everything else falls back to baseline operators

Join key equality is canonical-key equality: bitwise for floats, raw
value comparison for strings (the 32-bit string hash is verified against
the stored column). Baselines use the same equivalence so rule rewrites
never change results.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field


from .dataframe import DataFrameVersion, PlainTable
from .errors import ExecFailure, TypeMismatch, UnresolvedColumn
import numpy as np

from .partition import canonical_key, canonical_keys_u64, route, route_u64
from .rowstore import ColumnType, Schema

BROADCAST_THRESHOLD = 10 * 1024 * 1024  # Spark's "less than 10 MB" rule


# ---------------------------------------------------------------------------
# logical plan

@dataclass(frozen=True)
class Scan:
    table: str


@dataclass(frozen=True)
class Lookup:
    table: str
    key: object


@dataclass(frozen=True)
class Filter:
    child: object
    column: str
    predicate: str  # eq | lt | gt | range
    value: object = None
    lo: object = None
    hi: object = None


@dataclass(frozen=True)
class Project:
    child: object
    columns: tuple


@dataclass(frozen=True)
class EquiJoin:
    left: object
    right: object
    left_col: str
    right_col: str


@dataclass(frozen=True)
class Aggregate:
    child: object
    group_cols: tuple
    agg: str  # count | sum | min | max
    agg_col: str = None


def parse_plan_json(obj):
    """Build a logical plan from the JSON document format in docs/plan.md."""
    op = obj["op"]
    if op == "scan":
        return Scan(obj["table"])
    if op == "lookup":
        return Lookup(obj["table"], obj["key"])
    if op == "filter":
        return Filter(parse_plan_json(obj["input"]), obj["column"],
                      obj["predicate"], obj.get("value"),
                      obj.get("lo"), obj.get("hi"))
    if op == "project":
        return Project(parse_plan_json(obj["input"]), tuple(obj["columns"]))
    if op == "join":
        return EquiJoin(parse_plan_json(obj["left"]),
                        parse_plan_json(obj["right"]),
                        obj["left_col"], obj["right_col"])
    if op == "aggregate":
        return Aggregate(parse_plan_json(obj["input"]),
                         tuple(obj.get("group_by", ())),
                         obj["agg"], obj.get("agg_col"))
    raise UnresolvedColumn("unknown plan op %r" % op)


def load_plan(text):
    return parse_plan_json(json.loads(text))


# ---------------------------------------------------------------------------
# execution context and instrumentation

@dataclass
class ExecContext:
    broadcast_threshold: int = BROADCAST_THRESHOLD
    num_threads: int = 1
    probe_shuffle_bytes: int = 0
    build_shuffle_bytes: int = 0
    per_partition_shuffle_bytes: dict = field(default_factory=dict)
    partitions_probed: int = 0

    def count_shuffle(self, pid, nbytes):
        self.probe_shuffle_bytes += nbytes
        self.per_partition_shuffle_bytes[pid] = (
            self.per_partition_shuffle_bytes.get(pid, 0) + nbytes)


def _dict_key(ctype, v):
    """Join-equality key: bitwise for floats, the raw value otherwise."""
    if ctype is ColumnType.FLOAT64:
        return struct.unpack("<Q", struct.pack("<d", float(v)))[0]
    return v


def _schema_of(source):
    return source.schema


def _resolve(schema, col):
    if isinstance(col, int):
        if not 0 <= col < schema.num_columns:
            raise UnresolvedColumn("ordinal %d out of range" % col)
        return col
    try:
        return schema.column_ordinal(col)
    except TypeMismatch:
        raise UnresolvedColumn("no column %r in %r"
                               % (col, schema.column_names()))


def _joined_schema(left, right):
    names = list(left.column_names())
    cols = list(left.columns)
    for n, t in right.columns:
        nn = n
        while nn in names:
            nn += "_r"
        names.append(nn)
        cols.append((nn, t))
    return Schema(tuple(cols))


def _materialize(source):
    """PlainTable view of a catalog entry."""
    if isinstance(source, DataFrameVersion):
        return source.scan()
    return source


# ---------------------------------------------------------------------------
# physical operators

class PhysicalOp:
    """Base physical operator; subclasses implement run(ctx) -> PlainTable."""

    def execute(self, ctx=None):
        ctx = ctx or ExecContext()
        try:
            return self.run(ctx)
        except ExecFailure:
            raise
        except Exception as e:
            raise ExecFailure("%s failed: %s" % (type(self).__name__, e)) from e

    def children(self):
        return ()

    def describe(self):
        return type(self).__name__

    def explain(self, indent=0):
        lines = ["%s%s" % ("  " * indent, self.describe())]
        for c in self.children():
            lines.append(c.explain(indent + 1))
        return "\n".join(lines)


class FullScan(PhysicalOp):
    def __init__(self, name, source):
        self.name = name
        self.source = source

    def describe(self):
        kind = "indexed" if isinstance(self.source, DataFrameVersion) else "plain"
        return "FullScan(%s, %s)" % (self.name, kind)

    def run(self, ctx):
        return _materialize(self.source)


class IndexLookup(PhysicalOp):
    def __init__(self, name, version, key):
        self.name = name
        self.version = version
        self.key = key
        ctype = version.schema.column_type(version.index_col)
        self.partition_id = route(canonical_key(ctype, key),
                                  version.num_partitions)

    def describe(self):
        return "IndexLookup(%s, key=%r, partition=%d)" % (
            self.name, self.key, self.partition_id)

    def run(self, ctx):
        ctx.partitions_probed += 1
        return self.version.get_rows(self.key)


class FilterExec(PhysicalOp):
    def __init__(self, child, column, predicate, value=None, lo=None, hi=None):
        self.child = child
        self.column = column
        self.predicate = predicate
        self.value = value
        self.lo = lo
        self.hi = hi

    def children(self):
        return (self.child,)

    def describe(self):
        if self.predicate == "range":
            return "FilterExec(%s in [%r, %r])" % (self.column, self.lo, self.hi)
        return "FilterExec(%s %s %r)" % (self.column, self.predicate, self.value)

    def run(self, ctx):
        t = self.child.run(ctx)
        c = _resolve(t.schema, self.column)
        pred = {
            "eq": lambda v: v == self.value,
            "lt": lambda v: v < self.value,
            "gt": lambda v: v > self.value,
            "range": lambda v: self.lo <= v <= self.hi,
        }[self.predicate]
        return PlainTable.from_rows(
            t.schema, (r for r in t.rows() if r[c] is not None and pred(r[c])))


class ProjectExec(PhysicalOp):
    def __init__(self, child, columns):
        self.child = child
        self.columns = tuple(columns)

    def children(self):
        return (self.child,)

    def describe(self):
        return "ProjectExec(%s)" % (", ".join(map(str, self.columns)))

    def run(self, ctx):
        t = self.child.run(ctx)
        idx = [_resolve(t.schema, c) for c in self.columns]
        schema = Schema(tuple(t.schema.columns[i] for i in idx))
        return PlainTable(schema, [t.columns[i] for i in idx])


class AggregateExec(PhysicalOp):
    def __init__(self, child, group_cols, agg, agg_col=None):
        self.child = child
        self.group_cols = tuple(group_cols)
        self.agg = agg
        self.agg_col = agg_col

    def children(self):
        return (self.child,)

    def describe(self):
        return "AggregateExec(group=[%s], %s(%s))" % (
            ", ".join(map(str, self.group_cols)), self.agg, self.agg_col or "*")

    def run(self, ctx):
        t = self.child.run(ctx)
        gidx = [_resolve(t.schema, c) for c in self.group_cols]
        aidx = _resolve(t.schema, self.agg_col) if self.agg_col is not None else None
        groups = {}
        for r in t.rows():
            gk = tuple(r[i] for i in gidx)
            cell = r[aidx] if aidx is not None else None
            acc = groups.get(gk)
            if acc is None:
                groups[gk] = [1, cell, cell, cell]  # count, sum, min, max
            else:
                acc[0] += 1
                if cell is not None:
                    acc[1] = cell if acc[1] is None else acc[1] + cell
                    acc[2] = cell if acc[2] is None else min(acc[2], cell)
                    acc[3] = cell if acc[3] is None else max(acc[3], cell)
        slot = {"count": 0, "sum": 1, "min": 2, "max": 3}[self.agg]
        out_cols = tuple(t.schema.columns[i] for i in gidx)
        if self.agg == "count":
            out_type = ColumnType.INT64
        elif aidx is None:
            raise UnresolvedColumn("aggregate %r needs agg_col" % self.agg)
        else:
            out_type = t.schema.column_type(aidx)
            if self.agg == "sum" and out_type is ColumnType.INT32:
                out_type = ColumnType.INT64
        schema = Schema(out_cols + (("%s_%s" % (self.agg, self.agg_col or "all"),
                                     out_type),))
        rows = sorted(gk + (acc[slot],) for gk, acc in groups.items()
                      if not any(v is None for v in gk))
        return PlainTable.from_rows(schema, rows)


class _JoinBase(PhysicalOp):
    def __init__(self, left, right, left_col, right_col, out_schema,
                 left_schema, right_schema):
        self.left = left
        self.right = right
        self.left_col = left_col
        self.right_col = right_col
        self.out_schema = out_schema
        self.left_schema = left_schema
        self.right_schema = right_schema

    def children(self):
        return (self.left, self.right)


def _row_bytes(schema):
    """Encoded size of a null-free fixed-width row; strings add their length."""
    return schema.null_bitmap_bytes + schema.fixed_region_bytes


def _estimate_bytes(table):
    return table.estimated_bytes()


class IndexedJoinBase(_JoinBase):
    """Common probing machinery; the build side is the prebuilt index."""

    def __init__(self, build_version, probe_plan, probe_col, build_on_left,
                 out_schema, left_schema, right_schema, name):
        self.version = build_version
        self.probe_plan = probe_plan
        self.probe_col = probe_col
        self.build_on_left = build_on_left
        self.out_schema = out_schema
        self.left_schema = left_schema
        self.right_schema = right_schema
        self.name = name

    def children(self):
        return (self.probe_plan,)

    def describe(self):
        return "%s(build=%s [indexed, col %d], probe_col=%s)" % (
            type(self).__name__, self.name, self.version.index_col,
            self.probe_col)

    def _probe_partition(self, version, pid, probe_rows, probe_keys, ctype):
        """Probe one partition's index with (row, canonical key) pairs."""
        from . import rowstore
        part = version.partitions[pid]
        schema = version.schema
        verify_col = version.index_col if ctype is ColumnType.UTF8 else None
        out = []
        for prow, ck in zip(probe_rows, probe_keys):
            verify = (verify_col, prow[self._probe_ordinal]) \
                if verify_col is not None else None
            for payload in part.lookup(ck, verify=verify):
                brow = rowstore.decode_row(schema, payload)
                out.append(brow + prow if self.build_on_left else prow + brow)
        return out

    def _gather_probe(self, ctx):
        probe = self.probe_plan.run(ctx)
        self._probe_ordinal = _resolve(probe.schema, self.probe_col)
        ctype = self.version.schema.column_type(self.version.index_col)
        rows = list(probe.rows())
        keys = [canonical_key(ctype, r[self._probe_ordinal]) for r in rows
                if r[self._probe_ordinal] is not None]
        rows = [r for r in rows if r[self._probe_ordinal] is not None]
        row_bytes = (_estimate_bytes(probe) / probe.num_rows
                     if probe.num_rows else 0)
        return rows, keys, ctype, row_bytes


class IndexedShuffledEquiJoin(IndexedJoinBase):
    def run(self, ctx):
        rows, keys, ctype, row_bytes = self._gather_probe(ctx)
        P = self.version.num_partitions
        buckets = {}
        for r, ck in zip(rows, keys):
            pid = route(ck, P)
            buckets.setdefault(pid, ([], []))
            buckets[pid][0].append(r)
            buckets[pid][1].append(ck)
            ctx.count_shuffle(pid, int(row_bytes))
        out = []
        work = sorted(buckets.items())

        def probe(item):
            pid, (prows, pkeys) = item
            return self._probe_partition(self.version, pid, prows, pkeys, ctype)

        if ctx.num_threads > 1 and len(work) > 1:
            with ThreadPoolExecutor(max_workers=ctx.num_threads) as pool:
                results = list(pool.map(probe, work))
        else:
            results = [probe(w) for w in work]
        ctx.partitions_probed += len(work)
        for part_rows in results:
            out.extend(part_rows)
        return PlainTable.from_rows(self.out_schema, out)


class IndexedBroadcastEquiJoin(IndexedJoinBase):
    def run(self, ctx):
        rows, keys, ctype, row_bytes = self._gather_probe(ctx)
        P = self.version.num_partitions
        total = int(row_bytes * len(rows))
        for pid in range(P):
            ctx.count_shuffle(pid, total)  # whole probe set goes everywhere

        def probe(pid):
            return self._probe_partition(self.version, pid, rows, keys, ctype)

        if ctx.num_threads > 1 and P > 1:
            with ThreadPoolExecutor(max_workers=ctx.num_threads) as pool:
                results = list(pool.map(probe, range(P)))
        else:
            results = [probe(pid) for pid in range(P)]
        ctx.partitions_probed += P
        out = []
        for part_rows in results:
            out.extend(part_rows)
        return PlainTable.from_rows(self.out_schema, out)


def _hash_join_tables(lt, rt, lc, rc, ctype):
    """Classic hash join: dict on the smaller side, probe the other.

    Probing is vectorized with an isin prefilter when the probe key column
    is a numpy integer array, so only matching rows are decoded.
    """
    if lt.num_rows <= rt.num_rows:
        build, probe, bcol, pcol, build_is_left = lt, rt, lc, rc, True
    else:
        build, probe, bcol, pcol, build_is_left = rt, lt, rc, lc, False
    lookup = {}
    for r in build.rows():
        k = r[bcol]
        if k is None:
            continue
        lookup.setdefault(_dict_key(ctype, k), []).append(r)
    out = []
    pk = probe.columns[pcol] if probe.num_rows else None
    if (lookup and ctype in (ColumnType.INT32, ColumnType.INT64)
            and isinstance(pk, np.ndarray)):
        bk = np.fromiter(lookup.keys(), dtype=np.int64, count=len(lookup))
        for i in np.flatnonzero(np.isin(pk.astype(np.int64), bk)):
            r = probe.row(i)
            for m in lookup[r[pcol]]:
                out.append(m + r if build_is_left else r + m)
        return out
    for r in probe.rows():
        k = r[pcol]
        if k is None:
            continue
        for m in lookup.get(_dict_key(ctype, k), ()):
            out.append(m + r if build_is_left else r + m)
    return out


class ShuffleHashJoin(_JoinBase):
    def describe(self):
        return "ShuffleHashJoin(left_col=%s, right_col=%s)" % (
            self.left_col, self.right_col)

    def run(self, ctx):
        lt = self.left.run(ctx)
        rt = self.right.run(ctx)
        lc = _resolve(lt.schema, self.left_col)
        rc = _resolve(rt.schema, self.right_col)
        ltype = lt.schema.column_type(lc)
        P = max(1, ctx.num_threads * 2)
        lparts = _route_table(lt, lc, P, ctx)
        rparts = _route_table(rt, rc, P, ctx)
        out = []
        for pid in range(P):
            out.extend(_hash_join_tables(lparts[pid], rparts[pid],
                                         lc, rc, ltype))
        return PlainTable.from_rows(self.out_schema, out)


class BroadcastHashJoin(_JoinBase):
    def describe(self):
        return "BroadcastHashJoin(left_col=%s, right_col=%s)" % (
            self.left_col, self.right_col)

    def run(self, ctx):
        lt = self.left.run(ctx)
        rt = self.right.run(ctx)
        lc = _resolve(lt.schema, self.left_col)
        rc = _resolve(rt.schema, self.right_col)
        ltype = lt.schema.column_type(lc)
        small = lt if _estimate_bytes(lt) <= _estimate_bytes(rt) else rt
        # the small side is replicated to every worker slot
        P = max(1, ctx.num_threads * 2)
        ctx.probe_shuffle_bytes += _estimate_bytes(small) * P
        out = _hash_join_tables(lt, rt, lc, rc, ltype)
        return PlainTable.from_rows(self.out_schema, out)


class SortMergeJoin(_JoinBase):
    """Optional baseline; sorts both sides on the canonical key and merges."""

    def describe(self):
        return "SortMergeJoin(left_col=%s, right_col=%s)" % (
            self.left_col, self.right_col)

    def run(self, ctx):
        lt = self.left.run(ctx)
        rt = self.right.run(ctx)
        lc = _resolve(lt.schema, self.left_col)
        rc = _resolve(rt.schema, self.right_col)
        ltype = lt.schema.column_type(lc)
        ls = sorted((r for r in lt.rows() if r[lc] is not None),
                    key=lambda r: _sort_key(ltype, r[lc]))
        rs = sorted((r for r in rt.rows() if r[rc] is not None),
                    key=lambda r: _sort_key(ltype, r[rc]))
        out = []
        i = j = 0
        while i < len(ls) and j < len(rs):
            a = _sort_key(ltype, ls[i][lc])
            b = _sort_key(ltype, rs[j][rc])
            if a < b:
                i += 1
            elif a > b:
                j += 1
            else:
                j2 = j
                while j2 < len(rs) and _sort_key(ltype, rs[j2][rc]) == a:
                    j2 += 1
                while i < len(ls) and _sort_key(ltype, ls[i][lc]) == a:
                    for k in range(j, j2):
                        if _join_match(ltype, ls[i][lc], rs[k][rc]):
                            out.append(ls[i] + rs[k])
                    i += 1
                j = j2
        return PlainTable.from_rows(self.out_schema, out)


def _sort_key(ctype, v):
    return canonical_key(ctype, v)


def _join_match(ctype, a, b):
    if ctype is ColumnType.UTF8:
        return a == b
    return canonical_key(ctype, a) == canonical_key(ctype, b)


def _route_table(table, col, P, ctx, count=True):
    """Partition a table by join-key hash; returns P sub-tables."""
    ctype = table.schema.column_type(col)
    n = table.num_rows
    row_bytes = _estimate_bytes(table) / n if n else 0
    key_col = table.columns[col] if n else None
    if (n and ctype.is_fixed and isinstance(key_col, np.ndarray)
            and all(isinstance(c, np.ndarray) for c in table.columns)):
        pids = route_u64(canonical_keys_u64(ctype, key_col), P)
        parts = []
        for pid in range(P):
            mask = pids == pid
            cnt = int(mask.sum())
            if count and cnt:
                ctx.count_shuffle(pid, int(cnt * row_bytes))
            parts.append(PlainTable(table.schema,
                                    [c[mask] for c in table.columns]))
        return parts
    buckets = [[] for _ in range(P)]
    for r in table.rows():
        if r[col] is None:
            continue
        pid = route(canonical_key(ctype, r[col]), P)
        buckets[pid].append(r)
        if count:
            ctx.count_shuffle(pid, int(row_bytes))
    return [PlainTable.from_rows(table.schema, b) for b in buckets]


# ---------------------------------------------------------------------------
# planner

def plan(lp, catalog, broadcast_threshold=BROADCAST_THRESHOLD,
         rules_enabled=True):
    """Translate a logical plan into a physical plan against a catalog."""
    return _plan(lp, catalog, broadcast_threshold, rules_enabled)


def _lookup_catalog(catalog, name):
    if name not in catalog:
        raise UnresolvedColumn("unknown table %r" % name)
    return catalog[name]


def _indexed_on(source, schema, col):
    if not isinstance(source, DataFrameVersion):
        return False
    return _resolve(schema, col) == source.index_col


def _plan(lp, catalog, threshold, rules):
    if isinstance(lp, Scan):
        return FullScan(lp.table, _lookup_catalog(catalog, lp.table))
    if isinstance(lp, Lookup):
        src = _lookup_catalog(catalog, lp.table)
        if not isinstance(src, DataFrameVersion):
            raise UnresolvedColumn("lookup needs an indexed table, %r is plain"
                                   % lp.table)
        return IndexLookup(lp.table, src, lp.key)
    if isinstance(lp, Filter):
        # R2: equality filter on the index column becomes a point lookup
        if (rules and lp.predicate == "eq" and isinstance(lp.child, Scan)):
            src = _lookup_catalog(catalog, lp.child.table)
            if (isinstance(src, DataFrameVersion)
                    and _indexed_on(src, src.schema, lp.column)):
                return IndexLookup(lp.child.table, src, lp.value)
        return FilterExec(_plan(lp.child, catalog, threshold, rules),
                          lp.column, lp.predicate, lp.value, lp.lo, lp.hi)
    if isinstance(lp, Project):
        return ProjectExec(_plan(lp.child, catalog, threshold, rules),
                           lp.columns)
    if isinstance(lp, Aggregate):
        return AggregateExec(_plan(lp.child, catalog, threshold, rules),
                             lp.group_cols, lp.agg, lp.agg_col)
    if isinstance(lp, EquiJoin):
        return _plan_join(lp, catalog, threshold, rules)
    raise UnresolvedColumn("cannot plan %r" % (lp,))


def _scan_source(lp, catalog):
    if isinstance(lp, Scan):
        return lp.table, _lookup_catalog(catalog, lp.table)
    return None, None


def _output_schema(lp, catalog):
    if isinstance(lp, Scan):
        return _lookup_catalog(catalog, lp.table).schema
    if isinstance(lp, Lookup):
        return _lookup_catalog(catalog, lp.table).schema
    if isinstance(lp, Filter):
        s = _output_schema(lp.child, catalog)
        _resolve(s, lp.column)
        return s
    if isinstance(lp, Project):
        s = _output_schema(lp.child, catalog)
        return Schema(tuple(s.columns[_resolve(s, c)] for c in lp.columns))
    if isinstance(lp, Aggregate):
        # schema determined at execution; good enough for join planning
        return _output_schema(lp.child, catalog)
    if isinstance(lp, EquiJoin):
        return _joined_schema(_output_schema(lp.left, catalog),
                              _output_schema(lp.right, catalog))
    raise UnresolvedColumn("cannot resolve %r" % (lp,))


def _subtree_bytes(lp, catalog):
    """Exact in-memory bytes of all base tables feeding a subtree."""
    if isinstance(lp, Scan):
        return _estimate_bytes(_materialize(_lookup_catalog(catalog, lp.table)))
    if isinstance(lp, (Filter, Project, Aggregate)):
        return _subtree_bytes(lp.child, catalog)
    if isinstance(lp, Lookup):
        return 0
    if isinstance(lp, EquiJoin):
        return (_subtree_bytes(lp.left, catalog)
                + _subtree_bytes(lp.right, catalog))
    return 0


def _plan_join(lp, catalog, threshold, rules):
    lschema = _output_schema(lp.left, catalog)
    rschema = _output_schema(lp.right, catalog)
    _resolve(lschema, lp.left_col)
    _resolve(rschema, lp.right_col)
    out_schema = _joined_schema(lschema, rschema)
    if rules:
        lname, lsrc = _scan_source(lp.left, catalog)
        rname, rsrc = _scan_source(lp.right, catalog)
        # R1, deterministic tie-break: prefer the left side as build
        for name, src, build_on_left, probe_lp, probe_col in (
                (lname, lsrc, True, lp.right, lp.right_col),
                (rname, rsrc, False, lp.left, lp.left_col)):
            if src is not None and _indexed_on(src, src.schema,
                                               lp.left_col if build_on_left
                                               else lp.right_col):
                probe_plan = _plan(probe_lp, catalog, threshold, rules)
                probe_bytes = _subtree_bytes(probe_lp, catalog)
                cls = (IndexedBroadcastEquiJoin if probe_bytes < threshold
                       else IndexedShuffledEquiJoin)
                return cls(src, probe_plan, probe_col, build_on_left,
                           out_schema, lschema, rschema, name)
    left = _plan(lp.left, catalog, threshold, rules)
    right = _plan(lp.right, catalog, threshold, rules)
    return ShuffleHashJoin(left, right, lp.left_col, lp.right_col,
                           out_schema, lschema, rschema)


def explain(pp):
    """Deterministic textual rendering of a physical plan."""
    return pp.explain()


def execute(pp, ctx=None):
    return pp.execute(ctx)
