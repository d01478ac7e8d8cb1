"""Simulated multi-executor cluster over one indexed table.

A "cluster" is a set of worker threads inside one process connected by an
in-memory message fabric. Each executor owns a disjoint set of partition
replicas; the control plane (a single scheduler thread: the caller) routes
tasks to the executor hosting the target partition. Faithfulness points:

  * locality-aware scheduling: a task waits a bounded number of ticks for
    its host to come back before being moved to a surviving executor
  * version-guarded execution: every task carries an expected version and
    a replica only serves it when its own version matches exactly
  * fault tolerance: killing an executor loses its replicas; the next task
    that targets a lost partition rebuilds it on a survivor by replaying
    the append log, filtered to the rows that route to that partition
  * exactly-once shuffle: rows travel in sequence-numbered envelopes and
    delivery is audited against the sequence numbers

Simulated network costs (per-message latency plus bandwidth) are
accounting-only: they feed benchmark reports and never gate correctness.
"""

from __future__ import annotations

import json
import queue
import random
import struct
import threading
import time
import zlib
from dataclasses import dataclass

from . import rowstore
from .dataframe import VERSIONS, PlainTable, _route_and_insert
from .errors import (
    CorruptLog,
    DeadDestination,
    NoSurvivingExecutor,
    StaleTask,
    TaskFailed,
)
from .partition import (
    IndexedPartition,
    canonical_key,
    canonical_keys_u64,
    route,
    route_u64,
)
from .rowstore import ColumnType, Schema

DEFAULT_LOCALITY_WAIT_TICKS = 3
TICK_SECONDS = 0.001


# ---------------------------------------------------------------------------
# replay log

_CREATE = "create_index"
_APPEND = "append"


@dataclass
class _LogRecord:
    kind: str
    version_no: int
    table: PlainTable = None          # append payload
    schema: Schema = None             # create payload
    col: int = None
    partitions: int = None
    batch_capacity: int = None


class ReplayLog:
    """Append-only record stream that can rebuild any partition or version.

    One create_index record (schema, index column, partition count, the
    version number of the empty index) is followed by append records, each
    carrying the appended rows and the version number they produced.
    Replaying the records in order reproduces every version byte-exactly,
    because routing and per-partition insertion order are deterministic.

    File format, per record: u32 little-endian payload length, the JSON
    payload bytes, then the u32 little-endian CRC32 of those bytes.
    """

    def __init__(self):
        self._records = []
        self._lock = threading.Lock()

    def log_create_index(self, schema, col, P, version_no, batch_capacity=None):
        with self._lock:
            self._records.append(_LogRecord(
                _CREATE, version_no, schema=schema, col=col, partitions=P,
                batch_capacity=batch_capacity))

    def log_append(self, version_no, table):
        with self._lock:
            self._records.append(_LogRecord(_APPEND, version_no, table=table))

    def records(self):
        with self._lock:
            return list(self._records)

    @property
    def num_partitions(self):
        for rec in self.records():
            if rec.kind == _CREATE:
                return rec.partitions
        return None

    # -- rebuild ----------------------------------------------------------

    def _part_kwargs(self, rec):
        kw = {}
        if rec.batch_capacity is not None:
            kw["batch_capacity"] = rec.batch_capacity
        return kw

    def rebuild_partition(self, pid, up_to_version=None):
        """Replay the log for one partition; snapshots per version number."""
        snaps = {}
        part = None
        P = schema = col = None
        for rec in self.records():
            if up_to_version is not None and rec.version_no > up_to_version:
                break
            if rec.kind == _CREATE:
                schema, col, P = rec.schema, rec.col, rec.partitions
                part = IndexedPartition(pid, schema, **self._part_kwargs(rec))
            else:
                part = IndexedPartition.from_snapshot(snaps[max(snaps)])
                _insert_partition_subset(part, rec.table, col, P)
            snaps[rec.version_no] = part.freeze()
        return snaps

    def replay(self):
        """Rebuild the whole version chain; {version_no: DataFrameVersion}."""
        from .dataframe import DataFrameVersion
        versions = {}
        parts = None
        schema = col = None
        prev = None
        for rec in self.records():
            if rec.kind == _CREATE:
                schema, col = rec.schema, rec.col
                parts = [IndexedPartition(pid, schema, **self._part_kwargs(rec))
                         for pid in range(rec.partitions)]
            else:
                parts = [IndexedPartition.from_snapshot(s)
                         for s in versions[prev].partitions]
                _route_and_insert(parts, rec.table, col)
            df = DataFrameVersion(rec.version_no, schema, col,
                                  [p.freeze() for p in parts],
                                  parent=versions.get(prev))
            versions[rec.version_no] = df
            prev = rec.version_no
            VERSIONS.ensure_past(rec.version_no)
        return versions

    # -- file persistence ---------------------------------------------------

    def _record_doc(self, rec):
        if rec.kind == _CREATE:
            return {"t": _CREATE, "version_no": rec.version_no,
                    "schema": rec.schema.to_json(), "col": rec.col,
                    "partitions": rec.partitions,
                    "batch_capacity": rec.batch_capacity}
        return {"t": _APPEND, "version_no": rec.version_no,
                "rows": [list(r) for r in rec.table.rows()]}

    def save(self, path):
        with open(path, "wb") as f:
            for rec in self.records():
                payload = json.dumps(self._record_doc(rec)).encode("utf-8")
                f.write(struct.pack("<I", len(payload)))
                f.write(payload)
                f.write(struct.pack("<I", zlib.crc32(payload)))

    @classmethod
    def load(cls, path):
        log = cls()
        schema = None
        with open(path, "rb") as f:
            while True:
                head = f.read(4)
                if not head:
                    break
                if len(head) < 4:
                    raise CorruptLog("truncated record header")
                (n,) = struct.unpack("<I", head)
                payload = f.read(n)
                tail = f.read(4)
                if len(payload) < n or len(tail) < 4:
                    raise CorruptLog("truncated record body")
                (crc,) = struct.unpack("<I", tail)
                if zlib.crc32(payload) != crc:
                    raise CorruptLog("record checksum mismatch")
                doc = json.loads(payload.decode("utf-8"))
                if doc["t"] == _CREATE:
                    schema = Schema.from_json(doc["schema"])
                    log.log_create_index(schema, doc["col"],
                                         doc["partitions"], doc["version_no"],
                                         doc.get("batch_capacity"))
                elif doc["t"] == _APPEND:
                    if schema is None:
                        raise CorruptLog("append record before create_index")
                    rows = [tuple(r) for r in doc["rows"]]
                    log.log_append(doc["version_no"],
                                   PlainTable.from_rows(schema, rows))
                else:
                    raise CorruptLog("unknown record type %r" % doc["t"])
        return log


def _insert_partition_subset(part, table, index_col, P):
    """Insert only the table rows whose key routes to this partition."""
    ctype = table.schema.column_type(index_col)
    if table.num_rows == 0:
        return
    if table._fast_encodable():
        keys = canonical_keys_u64(ctype, table.columns[index_col])
        mask = route_u64(keys, P) == part.partition_id
        if mask.any():
            block = rowstore.encode_fixed_block(table.schema, table.columns)
            part.insert_encoded(keys[mask], block[mask])
        return
    batch = []
    for row in table.rows():
        ck = canonical_key(ctype, row[index_col])
        if route(ck, P) == part.partition_id:
            batch.append((ck, rowstore.encode_row(table.schema, row,
                                                  part.max_row_bytes)))
    if batch:
        part.insert_rows(batch)


# ---------------------------------------------------------------------------
# staleness guard

class Replica:
    """One partition copy on one executor: per-version snapshots plus the
    newest version number this copy has applied."""

    __slots__ = ("pid", "version_no", "snapshots")

    def __init__(self, pid, version_no, snapshots):
        self.pid = pid
        self.version_no = version_no
        self.snapshots = snapshots

    def clone(self):
        """Duplicate replica (the stale-copy scenario); shares snapshots."""
        return Replica(self.pid, self.version_no, dict(self.snapshots))


def stale_check(replica, expected_version):
    """Accept a task only when the replica is exactly at the expected
    version; a mismatched replica raises StaleTask and never serves data."""
    if replica.version_no != expected_version:
        raise StaleTask("partition %d at version %d, task expects %d"
                        % (replica.pid, replica.version_no, expected_version))
    return True


# ---------------------------------------------------------------------------
# tasks and executors

@dataclass
class Task:
    kind: str                 # lookup | probe | insert | scan
    partition_id: int
    expected_version: int
    payload: object = None


class NetSim:
    """Accounting-only network cost model: latency per message plus
    payload bytes over a fixed bandwidth."""

    def __init__(self, latency_s=0.0005, bandwidth_bps=1e9):
        self.latency_s = latency_s
        self.bandwidth_bps = bandwidth_bps
        self.messages = 0
        self.bytes = 0
        self._lock = threading.Lock()

    def account(self, nbytes, messages=1):
        with self._lock:
            self.messages += messages
            self.bytes += nbytes

    @property
    def simulated_seconds(self):
        return self.messages * self.latency_s + self.bytes / self.bandwidth_bps


class Executor(threading.Thread):
    def __init__(self, ex_id, cluster):
        super().__init__(daemon=True, name="executor-%d" % ex_id)
        self.ex_id = ex_id
        self.cluster = cluster
        self.inbox = queue.Queue()
        self.alive_flag = True
        self.hosted = {}              # pid -> Replica
        self.deliveries = []          # shuffle envelopes accepted here

    def run(self):
        while True:
            item = self.inbox.get()
            if item is None:
                return
            kind = item[0]
            if kind == "task":
                self._handle_task(*item[1:])
            elif kind == "deliver":
                self._handle_delivery(*item[1:])

    def _handle_task(self, idx, task, rebuild, out_q):
        if not self.alive_flag:
            out_q.put((idx, "dead", task))
            return
        try:
            if rebuild:
                self.cluster._rebuild_on(self, task.partition_id)
            replica = self.hosted.get(task.partition_id)
            if replica is None:
                out_q.put((idx, "dead", task))
                return
            stale_check(replica, task.expected_version)
            out_q.put((idx, "ok", self._execute(task, replica)))
        except StaleTask:
            out_q.put((idx, "stale", task))
        except Exception as e:
            out_q.put((idx, "error", e))

    def _execute(self, task, replica):
        snap = replica.snapshots[task.expected_version]
        schema = self.cluster.schema
        if task.kind == "lookup":
            return _lookup_rows(self.cluster, snap, task.payload)
        if task.kind == "probe":
            rows, keys, probe_col = task.payload
            out = []
            ctype = schema.column_type(self.cluster.index_col)
            for prow, ck in zip(rows, keys):
                verify = ((self.cluster.index_col, prow[probe_col])
                          if ctype is ColumnType.UTF8 else None)
                for payload in snap.lookup(ck, verify=verify):
                    out.append(rowstore.decode_row(schema, payload) + prow)
            return out
        if task.kind == "insert":
            new_version, table = task.payload
            succ = IndexedPartition.from_snapshot(snap)
            _insert_partition_subset(succ, table, self.cluster.index_col,
                                     self.cluster.num_partitions)
            replica.snapshots[new_version] = succ.freeze()
            replica.version_no = new_version
            return succ.row_count - snap.row_count
        if task.kind == "scan":
            return [rowstore.decode_row(schema, p) for p in snap.scan()]
        raise TaskFailed("unknown task kind %r" % task.kind)

    def _handle_delivery(self, seq, pid, row, audit):
        with audit.lock:
            if seq in audit.seen:          # exactly-once guard
                return
            audit.seen.add(seq)
            audit.counts[pid] = audit.counts.get(pid, 0) + 1
            audit.remaining -= 1
            if audit.remaining == 0:
                audit.done.set()
        self.deliveries.append((seq, pid, row))


def _lookup_rows(cluster, snap, key):
    ctype = cluster.schema.column_type(cluster.index_col)
    ck = canonical_key(ctype, key)
    verify = ((cluster.index_col, key) if ctype is ColumnType.UTF8 else None)
    return [rowstore.decode_row(cluster.schema, p)
            for p in snap.lookup(ck, verify=verify)]


class _ShuffleAudit:
    def __init__(self, total):
        self.lock = threading.Lock()
        self.seen = set()
        self.counts = {}
        self.remaining = total
        self.done = threading.Event()
        if total == 0:
            self.done.set()


# ---------------------------------------------------------------------------
# the cluster

class Cluster:
    """Control plane plus executor worker threads hosting one indexed table."""

    def __init__(self, num_executors, seed=0,
                 locality_wait=DEFAULT_LOCALITY_WAIT_TICKS,
                 tick_seconds=TICK_SECONDS, net=None):
        if num_executors < 1:
            raise NoSurvivingExecutor("need at least one executor")
        self.rng = random.Random(seed)
        self.locality_wait = locality_wait
        self.tick_seconds = tick_seconds
        self.net = net or NetSim()
        self.log = ReplayLog()
        self.schema = None
        self.index_col = None
        self.num_partitions = 0
        self.latest_version = None
        self.placement = {}            # pid -> Executor
        self._lock = threading.Lock()
        self.local_tasks = 0
        self.remote_tasks = 0
        self.rebuilds = 0
        self.executors = [Executor(i, self) for i in range(num_executors)]
        for ex in self.executors:
            ex.start()

    # -- lifecycle ----------------------------------------------------------

    def shutdown(self):
        for ex in self.executors:
            ex.inbox.put(None)
        for ex in self.executors:
            ex.join()

    def alive_executors(self):
        return [ex for ex in self.executors if ex.alive_flag]

    def kill_executor(self, ex_id):
        ex = self.executors[ex_id]
        ex.alive_flag = False
        with self._lock:
            ex.hosted.clear()          # replicas lost with the executor
            for pid, host in list(self.placement.items()):
                if host is ex:
                    del self.placement[pid]

    def recover(self, ex_id):
        """Bring an executor back empty; it re-hosts partitions on demand."""
        self.executors[ex_id].alive_flag = True

    # -- table management ---------------------------------------------------

    def create_index(self, table, col, num_partitions=None,
                     batch_capacity=None):
        P = num_partitions or len(self.executors) * 2
        schema = table.schema.with_index_col(col)
        self.schema = schema
        self.index_col = col
        self.num_partitions = P
        v0 = VERSIONS.take()
        self.log.log_create_index(schema, col, P, v0, batch_capacity)
        kwargs = {"batch_capacity": batch_capacity} if batch_capacity else {}
        with self._lock:
            for pid in range(P):
                ex = self.executors[pid % len(self.executors)]
                snap = IndexedPartition(pid, schema, **kwargs).freeze()
                ex.hosted[pid] = Replica(pid, v0, {v0: snap})
                self.placement[pid] = ex
        self.latest_version = v0
        if table.num_rows:
            return self.append(table)
        return v0

    def append(self, table):
        """Ship rows to every partition's host; a new version everywhere."""
        new_version = VERSIONS.take()
        tagged = PlainTable(self.schema, table.columns)
        tasks = [Task("insert", pid, self.latest_version,
                      (new_version, tagged))
                 for pid in range(self.num_partitions)]
        nbytes = table.estimated_bytes()
        self.net.account(nbytes, messages=self.num_partitions)
        results = self.submit(tasks)
        for r in results:
            if isinstance(r, Exception):
                raise r
        self.log.log_append(new_version, tagged)
        self.latest_version = new_version
        return new_version

    # -- scheduling ---------------------------------------------------------

    def submit(self, tasks, max_retries=10):
        """Run tasks on their hosts; results ordered by task index.
        Failures surface per task as TaskFailed values, never exceptions."""
        out_q = queue.Queue()
        results = [None] * len(tasks)
        retries = [0] * len(tasks)
        pending = 0
        for i, t in enumerate(tasks):
            try:
                self._dispatch(i, t, out_q)
                pending += 1
            except Exception as e:
                results[i] = TaskFailed(str(e), cause=e)
        while pending:
            idx, status, value = out_q.get()
            if status == "ok":
                results[idx] = value
                pending -= 1
                continue
            retries[idx] += 1
            if retries[idx] > max_retries:
                results[idx] = TaskFailed("task %d gave up after %d retries"
                                          % (idx, max_retries))
                pending -= 1
                continue
            if status == "stale":
                # re-resolve: retarget the task at the current version
                value = Task(value.kind, value.partition_id,
                             self.latest_version, value.payload)
            elif status == "error":
                results[idx] = TaskFailed(str(value), cause=value)
                pending -= 1
                continue
            try:
                self._dispatch(idx, value, out_q)
            except Exception as e:
                results[idx] = TaskFailed(str(e), cause=e)
                pending -= 1
        return results

    def _dispatch(self, idx, task, out_q):
        pid = task.partition_id
        host = self.placement.get(pid)
        if host is not None and host.alive_flag:
            self.local_tasks += 1
            host.inbox.put(("task", idx, task, False, out_q))
            return
        # locality wait: give the host a few ticks to come back
        for _ in range(self.locality_wait):
            time.sleep(self.tick_seconds)
            host = self.placement.get(pid)
            if host is not None and host.alive_flag:
                self.local_tasks += 1
                host.inbox.put(("task", idx, task, False, out_q))
                return
        survivors = self.alive_executors()
        if not survivors:
            raise NoSurvivingExecutor("no executor left for partition %d" % pid)
        target = self.rng.choice(survivors)
        self.remote_tasks += 1
        target.inbox.put(("task", idx, task, True, out_q))

    def _rebuild_on(self, executor, pid):
        """Replay-log rebuild of a lost partition, on the executor thread."""
        with self._lock:
            host = self.placement.get(pid)
            if host is not None and host.alive_flag:
                return                 # someone else already rebuilt it
        snaps = self.log.rebuild_partition(pid)
        replica = Replica(pid, max(snaps), snaps)
        with self._lock:
            host = self.placement.get(pid)
            if host is not None and host.alive_flag:
                return
            executor.hosted[pid] = replica
            self.placement[pid] = executor
            self.rebuilds += 1

    # -- query fronts ---------------------------------------------------------

    def _pid_of(self, key):
        ctype = self.schema.column_type(self.index_col)
        return route(canonical_key(ctype, key), self.num_partitions)

    def lookup(self, key, version_no=None):
        task = Task("lookup", self._pid_of(key),
                    version_no or self.latest_version, key)
        (result,) = self.submit([task])
        if isinstance(result, Exception):
            raise result
        return PlainTable.from_rows(self.schema, result)

    def join(self, probe, probe_col, version_no=None):
        """Indexed equi-join: shuffle probe rows to their partitions and
        chase each partition's index there. Output rows are build + probe."""
        from .engine import _joined_schema
        version = version_no or self.latest_version
        ctype = self.schema.column_type(self.index_col)
        rows = [r for r in probe.rows() if r[probe_col] is not None]
        keys = [canonical_key(ctype, r[probe_col]) for r in rows]
        buckets = {pid: ([], []) for pid in range(self.num_partitions)}
        row_bytes = (probe.estimated_bytes() / probe.num_rows
                     if probe.num_rows else 0)
        for r, ck in zip(rows, keys):
            pid = route(ck, self.num_partitions)
            buckets[pid][0].append(r)
            buckets[pid][1].append(ck)
            self.net.account(int(row_bytes))
        tasks = [Task("probe", pid, version, bucket + (probe_col,))
                 for pid, bucket in sorted(buckets.items())]
        out_schema = _joined_schema(self.schema, probe.schema)
        out = []
        for result in self.submit(tasks):
            if isinstance(result, Exception):
                raise result
            out.extend(result)
        return PlainTable.from_rows(out_schema, out)

    def scan(self, version_no=None):
        version = version_no or self.latest_version
        tasks = [Task("scan", pid, version)
                 for pid in range(self.num_partitions)]
        out = []
        for result in self.submit(tasks):
            if isinstance(result, Exception):
                raise result
            out.extend(result)
        return PlainTable.from_rows(self.schema, out)

    # -- generic shuffle -------------------------------------------------------

    def shuffle(self, rows, router, row_bytes=64):
        """Deliver each row to router(row)'s partition host exactly once.
        Returns per-partition delivery counts; counts always sum to the
        input size, re-routing around dead destinations."""
        rows = list(rows)
        audit = _ShuffleAudit(len(rows))
        for seq, row in enumerate(rows):
            pid = router(row)
            if not 0 <= pid < self.num_partitions:
                raise DeadDestination("router sent row to partition %r" % pid)
            self.net.account(row_bytes)
            while True:
                host = self.placement.get(pid)
                if host is None or not host.alive_flag:
                    survivors = self.alive_executors()
                    if not survivors:
                        raise NoSurvivingExecutor("no live destination")
                    host = self.rng.choice(survivors)
                    with self._lock:
                        cur = self.placement.get(pid)
                        if cur is None or not cur.alive_flag:
                            self.placement[pid] = host
                        else:
                            host = cur
                host.inbox.put(("deliver", seq, pid, row, audit))
                break
        audit.done.wait()
        return dict(audit.counts)
