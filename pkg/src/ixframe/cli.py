"""Command-line driver: data generation, index persistence, queries, and
benchmark suites.

Tables persist between invocations as replay-log files (``.ixlog``): the
``index`` command builds an indexed table from CSV and writes the log;
``lookup``/``join``/``scan`` reload the log and query the latest version;
``append`` adds a record and rewrites the log.

Benchmark suites always run the indexed path and a baseline path on the
same data and seed, assert that both produce identical results before any
timing is reported, and emit per-case median/p5/p95 over >= 10 repetitions
as CSV or Markdown.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import datagen, engine
from .cluster import Cluster, ReplayLog
from .dataframe import PlainTable, create_index
from .datagen import GenSpec, Sequential, Uniform, Zipf
from .engine import EquiJoin, ExecContext, Scan, plan
from .errors import IxframeError, OOMGuard
from .rowstore import ColumnType

DEFAULT_LOG = "table.ixlog"
SCALES = {"S": 10**3, "M": 10**4, "L": 10**5, "XL": 10**6}
BATCH_SWEEP = {"64KB": 64 * 1024, "512KB": 512 * 1024,
               "4MB": 4 * 1024 * 1024, "32MB": 32 * 1024 * 1024}
BATCH_BASELINE = ("4KB", 4 * 1024)


# ---------------------------------------------------------------------------
# reports

@dataclass
class BenchCase:
    name: str
    median: float
    p5: float
    p95: float
    reps: int
    ratio: float = None       # indexed speedup over baseline; None = n/a


@dataclass
class BenchReport:
    suite: str
    config: dict
    cases: list = field(default_factory=list)

    HEADER = ("suite", "case", "median_s", "p5_s", "p95_s",
              "repetitions", "speedup")

    def add(self, case):
        self.cases.append(case)

    def _cells(self, c):
        ratio = "n/a" if c.ratio is None else "%.3f" % c.ratio
        return (self.suite, c.name, "%.6f" % c.median, "%.6f" % c.p5,
                "%.6f" % c.p95, str(c.reps), ratio)

    def to_csv(self):
        lines = [",".join(self.HEADER)]
        lines += [",".join(self._cells(c)) for c in self.cases]
        lines.append("# config: " + json.dumps(self.config, sort_keys=True))
        return "\n".join(lines) + "\n"

    def to_markdown(self):
        lines = ["| " + " | ".join(self.HEADER) + " |",
                 "|" + "---|" * len(self.HEADER)]
        lines += ["| " + " | ".join(self._cells(c)) + " |"
                  for c in self.cases]
        lines.append("")
        lines.append("config: `%s`" % json.dumps(self.config, sort_keys=True))
        return "\n".join(lines) + "\n"

    def render(self, fmt):
        return self.to_csv() if fmt == "csv" else self.to_markdown()


def _percentiles(samples):
    med = statistics.median(samples)
    p5, p95 = np.percentile(samples, [5, 95])
    return med, float(p5), float(p95)


def _time_reps(fn, reps):
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return samples


def _check_equal(a, b, what):
    from collections import Counter
    if Counter(a.rows()) != Counter(b.rows()):
        raise IxframeError(
            "%s: indexed and baseline results differ; refusing to time" % what)


def _oom_guard(projected_bytes, cap_mb):
    if projected_bytes > cap_mb * 1024 * 1024:
        raise OOMGuard("projected footprint %.0f MB exceeds --mem-cap-mb %d"
                       % (projected_bytes / 2**20, cap_mb))


# ---------------------------------------------------------------------------
# argument plumbing

def _read_config(path):
    """key=value lines; '#' starts a comment; values stay strings."""
    conf = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise IxframeError("config line %d is not key=value: %r"
                                   % (lineno, line))
            k, v = line.split("=", 1)
            conf[k.strip().replace("-", "_")] = v.strip()
    return conf


def _apply_config(args, parser_defaults):
    """Config file fills in values the command line left at their default."""
    if not getattr(args, "config", None):
        return args
    conf = _read_config(args.config)
    for key, raw in conf.items():
        if not hasattr(args, key):
            continue
        current = getattr(args, key)
        if current != parser_defaults.get(key):
            continue               # explicit flag wins over config
        default = parser_defaults.get(key)
        if isinstance(default, bool):
            value = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            value = int(raw)
        elif isinstance(default, float):
            value = float(raw)
        else:
            value = raw
        setattr(args, key, value)
    return args


def _threads(args):
    n = getattr(args, "executors", None) or 4
    env = os.environ.get("IXFRAME_THREADS")
    if env:
        n = min(n, int(env))
    return max(1, n)


_SUBPARSERS = {}


def _build_parser():
    p = argparse.ArgumentParser(
        prog="ixframe",
        description="in-memory indexed dataframe engine and benchmarks")
    p.add_argument("--config", help="key=value config file; flags override it")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=42)
        sp.add_argument("--partitions", type=int, default=8)
        sp.add_argument("--batch-bytes", type=int, default=None)
        sp.add_argument("--broadcast-threshold", type=int,
                        default=engine.BROADCAST_THRESHOLD)
        sp.add_argument("--executors", type=int, default=4)
        sp.add_argument("--out", default=None)
        sp.add_argument("--format", choices=("csv", "md"), default="csv")
        sp.add_argument("--config", help="key=value config file")

    g = sub.add_parser("generate", help="write a synthetic CSV dataset")
    common(g)
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--dist", choices=("uniform", "zipf", "sequential"),
                   default="uniform")
    g.add_argument("--lo", type=int, default=0)
    g.add_argument("--hi", type=int, default=2**31 - 1)
    g.add_argument("--zipf-s", type=float, default=1.0)
    g.add_argument("--zipf-n", type=int, default=10_000)
    g.add_argument("--key-type",
                   choices=tuple(t.value for t in ColumnType),
                   default="int64")

    lo = sub.add_parser("load", help="validate a CSV file against its schema")
    common(lo)
    lo.add_argument("--table", required=True)

    ix = sub.add_parser("index", help="index a CSV table and persist the log")
    common(ix)
    ix.add_argument("--table", required=True)
    ix.add_argument("--col", type=int, default=0)

    lk = sub.add_parser("lookup", help="print rows matching a key")
    common(lk)
    lk.add_argument("--table", default=DEFAULT_LOG)
    lk.add_argument("--key", required=True)

    jn = sub.add_parser("join", help="join a probe CSV against the index")
    common(jn)
    jn.add_argument("--table", default=DEFAULT_LOG)
    jn.add_argument("--probe", required=True)
    jn.add_argument("--probe-col", type=int, default=0)

    ap = sub.add_parser("append", help="append CSV rows as a new version")
    common(ap)
    ap.add_argument("--table", default=DEFAULT_LOG)
    ap.add_argument("--rows", required=True, help="CSV file of rows to append")

    be = sub.add_parser("bench", help="run a benchmark suite")
    common(be)
    be.add_argument("suite", choices=(
        "join-scale", "read-latency-under-appends", "write-throughput",
        "batch-size-sweep", "memory-overhead", "fault-tolerance",
        "microbench-ops"))
    be.add_argument("--build-rows", type=int, default=10**7)
    be.add_argument("--rows-per-key", type=int, default=20)
    be.add_argument("--reps", type=int, default=10)
    be.add_argument("--scales", default="S,M,L,XL")
    be.add_argument("--queries", type=int, default=100)
    be.add_argument("--mem-cap-mb", type=int, default=8192)

    rp = sub.add_parser("report", help="re-render a saved CSV report")
    common(rp)
    rp.add_argument("--in", dest="infile", required=True)
    _SUBPARSERS.clear()
    _SUBPARSERS.update({"generate": g, "load": lo, "index": ix, "lookup": lk,
                        "join": jn, "append": ap, "bench": be, "report": rp})
    return p


# ---------------------------------------------------------------------------
# table persistence helpers

def _load_versions(path):
    if not os.path.exists(path):
        raise IxframeError("no table log at %r (run `ixframe index` first)"
                           % path)
    log = ReplayLog.load(path)
    versions = log.replay()
    return log, versions[max(versions)]


def _parse_key(df, raw):
    ctype = df.schema.column_type(df.index_col)
    if ctype in (ColumnType.INT32, ColumnType.INT64):
        return int(raw)
    if ctype is ColumnType.FLOAT64:
        return float(raw)
    return raw


def _emit(text, out):
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _print_table(table, out=None):
    lines = [",".join(map(str, table.schema.column_names()))]
    lines += [",".join("" if v is None else str(v) for v in r)
              for r in table.rows()]
    _emit("\n".join(lines) + "\n", out)


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(args):
    dist = {"uniform": Uniform(args.lo, args.hi),
            "zipf": Zipf(args.zipf_s, args.zipf_n),
            "sequential": Sequential()}[args.dist]
    spec = GenSpec(args.rows, dist, key_type=ColumnType(args.key_type),
                   seed=args.seed)
    table = datagen.generate(spec)
    out = args.out or "data.csv"
    datagen.write_csv(table, out)
    print("wrote %d rows to %s" % (table.num_rows, out))
    return 0


def cmd_load(args):
    table = datagen.read_csv(args.table)
    print("%s: %d rows, %d columns (%s)"
          % (args.table, table.num_rows, table.schema.num_columns,
             ", ".join("%s:%s" % (n, t.value)
                       for n, t in table.schema.columns)))
    return 0


def cmd_index(args):
    table = datagen.read_csv(args.table)
    out = args.out or DEFAULT_LOG
    c = Cluster(_threads(args), seed=args.seed)
    try:
        c.create_index(table, args.col, args.partitions,
                       batch_capacity=args.batch_bytes)
        c.log.save(out)
        stats = c.scan().num_rows
    finally:
        c.shutdown()
    print("indexed %d rows on column %d into %d partitions -> %s"
          % (stats, args.col, args.partitions, out))
    return 0


def cmd_lookup(args):
    _, df = _load_versions(args.table)
    key = _parse_key(df, args.key)
    _print_table(df.get_rows(key), args.out)
    return 0


def cmd_join(args):
    _, df = _load_versions(args.table)
    probe = datagen.read_csv(args.probe)
    catalog = {"build": df, "probe": probe}
    lp = EquiJoin(Scan("build"), Scan("probe"),
                  df.index_col, args.probe_col)
    pp = plan(lp, catalog, broadcast_threshold=args.broadcast_threshold)
    ctx = ExecContext(num_threads=_threads(args))
    _print_table(pp.execute(ctx), args.out)
    return 0


def cmd_append(args):
    log, df = _load_versions(args.table)
    rows = datagen.read_csv(args.rows)
    child = df.append_rows(rows)
    log.log_append(child.version_no, rows)
    log.save(args.table)
    print("appended %d rows; version %d -> %d"
          % (rows.num_rows, df.version_no, child.version_no))
    return 0


def cmd_report(args):
    with open(args.infile, encoding="utf-8") as f:
        lines = [l.rstrip("\n") for l in f if l.strip()]
    header = lines[0].split(",")
    body = [l for l in lines[1:] if not l.startswith("#")]
    config = {}
    for l in lines[1:]:
        if l.startswith("# config: "):
            config = json.loads(l[len("# config: "):])
    report = BenchReport(body[0].split(",")[0] if body else "report", config)
    for l in body:
        cells = l.split(",")
        ratio = None if cells[6] == "n/a" else float(cells[6])
        report.add(BenchCase(cells[1], float(cells[2]), float(cells[3]),
                             float(cells[4]), int(cells[5]), ratio))
    assert header == list(BenchReport.HEADER)
    _emit(report.render("md" if args.format == "md" else "csv"), args.out)
    return 0


# ---------------------------------------------------------------------------
# benchmark suites

def _build_dataset(rows, rows_per_key, seed):
    keyspace = max(1, rows // max(1, rows_per_key))
    return datagen.generate(GenSpec(rows, Uniform(0, keyspace - 1), seed=seed))


def _probe_dataset(rows, keyspace, seed):
    return datagen.generate(
        GenSpec(rows, Uniform(0, max(0, keyspace - 1)), seed=seed + 1,
                payload=(("p", ColumnType.INT64),)))


def suite_join_scale(args, report):
    build_table = _build_dataset(args.build_rows, args.rows_per_key, args.seed)
    _oom_guard(build_table.estimated_bytes() * 4, args.mem_cap_mb)
    keyspace = args.build_rows // max(1, args.rows_per_key)
    t0 = time.perf_counter()
    df = create_index(build_table, 0, args.partitions,
                      batch_capacity=args.batch_bytes)
    index_build_s = time.perf_counter() - t0
    report.config["index_build_s"] = round(index_build_s, 3)
    ctx_threads = _threads(args)
    for scale in args.scales.split(","):
        scale = scale.strip()
        n_probe = SCALES[scale] if scale in SCALES else int(scale)
        probe = _probe_dataset(n_probe, keyspace, args.seed)
        catalog = {"b": df, "p": probe}
        lp = EquiJoin(Scan("b"), Scan("p"), 0, 0)
        indexed = plan(lp, catalog,
                       broadcast_threshold=args.broadcast_threshold)
        baseline = plan(lp, catalog, rules_enabled=False)
        res_i = indexed.execute(ExecContext(num_threads=ctx_threads))
        res_b = baseline.execute(ExecContext(num_threads=ctx_threads))
        _check_equal(res_i, res_b, "join-scale %s" % scale)
        if n_probe == 0:
            report.add(BenchCase(scale, 0.0, 0.0, 0.0, args.reps, None))
            continue
        ti = _time_reps(lambda: indexed.execute(
            ExecContext(num_threads=ctx_threads)), args.reps)
        tb = _time_reps(lambda: baseline.execute(
            ExecContext(num_threads=ctx_threads)), args.reps)
        med, p5, p95 = _percentiles(ti)
        report.add(BenchCase(scale, med, p5, p95, args.reps,
                             statistics.median(tb) / med if med else None))


def suite_read_latency_under_appends(args, report):
    rows = min(args.build_rows, 10**6)
    table = _build_dataset(rows, args.rows_per_key, args.seed)
    _oom_guard(table.estimated_bytes() * 4, args.mem_cap_mb)
    df = create_index(table, 0, args.partitions,
                      batch_capacity=args.batch_bytes)
    keyspace = rows // max(1, args.rows_per_key)
    rng = np.random.default_rng(args.seed)
    keys = rng.integers(0, keyspace, 200).tolist()

    def read_block(frame):
        for k in keys:
            frame.get_rows(int(k))

    quiet = _time_reps(lambda: read_block(df), args.reps)
    report.add(BenchCase("reads-quiescent", *_percentiles(quiet), args.reps))
    appended = df
    samples = []
    for _ in range(args.reps):
        appended = appended.append_rows(
            _build_dataset(100_000, args.rows_per_key, args.seed + 7))
        t0 = time.perf_counter()
        read_block(appended)
        samples.append(time.perf_counter() - t0)
    med, p5, p95 = _percentiles(samples)
    ratio = statistics.median(quiet) / med if med else None
    report.add(BenchCase("reads-under-appends", med, p5, p95,
                         args.reps, ratio))


def suite_write_throughput(args, report):
    rows = min(args.build_rows, 10**6)
    chunk = _build_dataset(100_000, args.rows_per_key, args.seed)
    _oom_guard(chunk.estimated_bytes() * 4 * args.reps, args.mem_cap_mb)
    base = create_index(_build_dataset(rows, args.rows_per_key, args.seed),
                        0, args.partitions, batch_capacity=args.batch_bytes)

    frames = [base]

    def indexed_append():
        frames[0] = frames[0].append_rows(chunk)

    plain_rows = list(chunk.rows())
    sink = []

    def plain_append():
        sink.append(PlainTable.from_rows(chunk.schema, plain_rows))

    ti = _time_reps(indexed_append, args.reps)
    tb = _time_reps(plain_append, args.reps)
    med, p5, p95 = _percentiles(ti)
    report.add(BenchCase("indexed-append-100k", med, p5, p95, args.reps,
                         statistics.median(tb) / med if med else None))
    report.add(BenchCase("plain-append-100k", *_percentiles(tb), args.reps))


def suite_batch_size_sweep(args, report):
    rows = min(args.build_rows, 200_000)
    table = _build_dataset(rows, args.rows_per_key, args.seed)
    keyspace = rows // max(1, args.rows_per_key)
    rng = np.random.default_rng(args.seed)
    keys = rng.integers(0, keyspace, 500).tolist()

    def measure(capacity):
        t0 = time.perf_counter()
        df = create_index(table, 0, args.partitions, batch_capacity=capacity)
        write_s = time.perf_counter() - t0
        reads = _time_reps(lambda: [df.get_rows(int(k)) for k in keys],
                           args.reps)
        return write_s, statistics.median(reads)

    base_write, base_read = measure(BATCH_BASELINE[1])
    report.add(BenchCase("write-%s" % BATCH_BASELINE[0], base_write,
                         base_write, base_write, 1, 1.0))
    report.add(BenchCase("read-%s" % BATCH_BASELINE[0], base_read,
                         base_read, base_read, args.reps, 1.0))
    for name, capacity in BATCH_SWEEP.items():
        write_s, read_s = measure(capacity)
        report.add(BenchCase("write-%s" % name, write_s, write_s, write_s, 1,
                             base_write / write_s if write_s else None))
        report.add(BenchCase("read-%s" % name, read_s, read_s, read_s,
                             args.reps,
                             base_read / read_s if read_s else None))


def suite_memory_overhead(args, report):
    rows = min(args.build_rows, 10**6)
    table = _build_dataset(rows, args.rows_per_key, args.seed)
    _oom_guard(table.estimated_bytes() * 4, args.mem_cap_mb)
    t0 = time.perf_counter()
    df = create_index(table, 0, args.partitions,
                      batch_capacity=args.batch_bytes)
    build_s = time.perf_counter() - t0
    stats = df.stats()
    report.config.update(
        rows=stats["row_count"], rows_per_key=args.rows_per_key,
        data_bytes=stats["data_bytes"], index_bytes=stats["index_bytes"],
        index_overhead_ratio=round(stats["index_overhead_ratio"], 4))
    report.add(BenchCase("index-build", build_s, build_s, build_s, 1,
                         stats["index_overhead_ratio"]))


def suite_fault_tolerance(args, report):
    rows = min(args.build_rows, 10**6)
    table = _build_dataset(rows, args.rows_per_key, args.seed)
    _oom_guard(table.estimated_bytes() * 6, args.mem_cap_mb)
    keyspace = rows // max(1, args.rows_per_key)
    probes = [_probe_dataset(200, keyspace, args.seed + q)
              for q in range(args.queries)]
    kill_at = args.queries // 2

    def run(kill):
        c = Cluster(_threads(args), seed=args.seed)
        try:
            c.create_index(table, 0, args.partitions,
                           batch_capacity=args.batch_bytes)
            answers, latencies = [], []
            for qi, probe in enumerate(probes):
                if kill and qi == kill_at:
                    c.kill_executor(0)
                t0 = time.perf_counter()
                res = c.join(probe, 0)
                latencies.append(time.perf_counter() - t0)
                answers.append(sorted(res.rows()))
            return answers, latencies
        finally:
            c.shutdown()

    ref_answers, _ = run(kill=False)
    answers, lat = run(kill=True)
    if answers != ref_answers:
        raise IxframeError("fault-tolerance: answers diverge from the "
                           "no-failure reference run")
    pre = lat[:kill_at]
    post = lat[kill_at + 1:]
    pre_med = statistics.median(pre)
    spikes = sum(1 for s in lat if s > 3 * pre_med)
    report.config.update(queries=args.queries, kill_at=kill_at,
                         spike_queries=spikes)
    report.add(BenchCase("pre-failure", *_percentiles(pre), len(pre)))
    report.add(BenchCase("failure-query", lat[kill_at], lat[kill_at],
                         lat[kill_at], 1,
                         lat[kill_at] / pre_med if pre_med else None))
    med, p5, p95 = _percentiles(post)
    report.add(BenchCase("post-recovery", med, p5, p95, len(post),
                         med / pre_med if pre_med else None))


def suite_microbench_ops(args, report):
    rows = min(args.build_rows, 10**6)
    table = _build_dataset(rows, args.rows_per_key, args.seed)
    df = create_index(table, 0, args.partitions,
                      batch_capacity=args.batch_bytes)
    keyspace = rows // max(1, args.rows_per_key)
    rng = np.random.default_rng(args.seed)
    keys = [int(k) for k in rng.integers(0, keyspace, 100)]
    scan = df.scan()
    kcol = np.asarray(scan.columns[0])

    sample = keys[0]
    indexed_rows = sorted(df.get_rows(sample).rows())
    filtered = sorted(scan.row(i) for i in np.flatnonzero(kcol == sample))
    if indexed_rows != filtered:
        raise IxframeError("microbench-ops: lookup disagrees with scan-filter")

    ti = _time_reps(lambda: [df.get_rows(k) for k in keys], args.reps)

    def scan_filter():
        for k in keys:
            np.flatnonzero(kcol == k)

    tb = _time_reps(scan_filter, args.reps)
    med, p5, p95 = _percentiles(ti)
    report.add(BenchCase("lookup-100-keys", med, p5, p95, args.reps,
                         statistics.median(tb) / med if med else None))
    report.add(BenchCase("scan-filter-100-keys", *_percentiles(tb),
                         args.reps))
    ts = _time_reps(lambda: df.scan(), max(3, args.reps // 3))
    report.add(BenchCase("full-scan", *_percentiles(ts),
                         max(3, args.reps // 3)))


SUITES = {
    "join-scale": suite_join_scale,
    "read-latency-under-appends": suite_read_latency_under_appends,
    "write-throughput": suite_write_throughput,
    "batch-size-sweep": suite_batch_size_sweep,
    "memory-overhead": suite_memory_overhead,
    "fault-tolerance": suite_fault_tolerance,
    "microbench-ops": suite_microbench_ops,
}


def cmd_bench(args):
    if args.reps < 10 and args.suite != "batch-size-sweep":
        args.reps = 10
    config = {"seed": args.seed, "partitions": args.partitions,
              "executors": _threads(args), "build_rows": args.build_rows,
              "suite": args.suite}
    report = BenchReport(args.suite, config)
    SUITES[args.suite](args, report)
    _emit(report.render(args.format), args.out)
    if args.out:
        print("wrote %s report to %s" % (args.suite, args.out))
    return 0


# ---------------------------------------------------------------------------

_COMMANDS = {
    "generate": cmd_generate,
    "load": cmd_load,
    "index": cmd_index,
    "lookup": cmd_lookup,
    "join": cmd_join,
    "append": cmd_append,
    "bench": cmd_bench,
    "report": cmd_report,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    defaults = {a.dest: a.default
                for a in _SUBPARSERS[args.command]._actions}
    args = _apply_config(args, defaults)
    try:
        return _COMMANDS[args.command](args)
    except IxframeError as e:
        print("ixframe: %s" % e, file=sys.stderr)
        return 1
    except OSError as e:
        print("ixframe: %s" % e, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
