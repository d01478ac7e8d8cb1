"""Seeded synthetic table generators and CSV import/export.

Generators are pure functions of (spec, seed): the same spec always yields
the same table. Key distributions cover uniform, Zipf-skewed (power-law
workloads), and sequential keys; keys can be rendered as any column type,
with strings produced via base-36 rendering of the integer key.

CSV files use RFC-4180-style quoting with a header row, plus a small JSON
schema sidecar (`<file>.schema.json`) so tables round-trip without guessing
types. An empty cell denotes NULL for every column type.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .dataframe import PlainTable
from .errors import InvalidSpec, ParseError
from .rowstore import ColumnType, Schema


# ---------------------------------------------------------------------------
# key distributions

@dataclass(frozen=True)
class Uniform:
    lo: int = 0
    hi: int = 2**31 - 1

    def validate(self):
        if self.lo > self.hi:
            raise InvalidSpec("uniform range is empty: [%d, %d]"
                              % (self.lo, self.hi))

    def sample(self, rng, n):
        return rng.integers(self.lo, self.hi + 1, size=n, dtype=np.int64)


@dataclass(frozen=True)
class Zipf:
    s: float = 1.0
    n: int = 10_000

    def validate(self):
        if self.s <= 0 or self.n < 1:
            raise InvalidSpec("zipf needs s > 0 and n >= 1")

    def sample(self, rng, n):
        # inverse-CDF over the n ranks: deterministic and exact for any s
        ranks = np.arange(1, self.n + 1, dtype=np.float64)
        weights = ranks ** -self.s
        cdf = np.cumsum(weights)
        cdf /= cdf[-1]
        u = rng.random(n)
        return np.searchsorted(cdf, u, side="left").astype(np.int64) + 1


@dataclass(frozen=True)
class Sequential:
    start: int = 0

    def validate(self):
        pass

    def sample(self, rng, n):
        return np.arange(self.start, self.start + n, dtype=np.int64)


# ---------------------------------------------------------------------------
# generation

@dataclass(frozen=True)
class GenSpec:
    row_count: int
    key_dist: object = Uniform()
    key_type: ColumnType = ColumnType.INT64
    key_name: str = "k"
    payload: tuple = (("v", ColumnType.INT64),)
    seed: int = 0

    def schema(self):
        return Schema(((self.key_name, self.key_type),) + tuple(self.payload))


def _to_base36(n):
    digits = "0123456789abcdefghijklmnopqrstuvwxyz"
    if n == 0:
        return "0"
    neg, n = n < 0, abs(int(n))
    out = []
    while n:
        n, r = divmod(n, 36)
        out.append(digits[r])
    return ("-" if neg else "") + "".join(reversed(out))


def _render_keys(ctype, ints):
    if ctype is ColumnType.INT64:
        return ints
    if ctype is ColumnType.INT32:
        return (ints & 0x7FFFFFFF).astype(np.int32)
    if ctype is ColumnType.FLOAT64:
        return ints.astype(np.float64)
    return [_to_base36(v) for v in ints.tolist()]


def _payload_column(ctype, rng, n):
    if ctype is ColumnType.INT64:
        return rng.integers(0, 10**9, size=n, dtype=np.int64)
    if ctype is ColumnType.INT32:
        return rng.integers(0, 2**31 - 1, size=n, dtype=np.int32)
    if ctype is ColumnType.FLOAT64:
        return rng.random(n)
    return [_to_base36(int(v))
            for v in rng.integers(0, 36**6, size=n)]


def generate(spec):
    """Deterministic synthetic table for a generation spec."""
    if spec.row_count < 0:
        raise InvalidSpec("row_count must be >= 0")
    if not isinstance(spec.key_dist, (Uniform, Zipf, Sequential)):
        raise InvalidSpec("unknown key distribution %r" % (spec.key_dist,))
    spec.key_dist.validate()
    schema = spec.schema()
    rng = np.random.default_rng(spec.seed)
    n = spec.row_count
    cols = [_render_keys(spec.key_type, spec.key_dist.sample(rng, n))]
    for _, ctype in spec.payload:
        cols.append(_payload_column(ctype, rng, n))
    if n == 0:
        cols = [np.empty(0, dtype=np.int64) if not isinstance(c, list) else []
                for c in cols]
    return PlainTable(schema, cols)


# ---------------------------------------------------------------------------
# CSV import/export

def _sidecar(path):
    return str(path) + ".schema.json"


def write_csv(table, path):
    """Write a table as CSV with a header row and a JSON schema sidecar.
    NULL cells are written as empty fields."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(table.schema.column_names())
        for row in table.rows():
            w.writerow(["" if v is None else v for v in row])
    with open(_sidecar(path), "w", encoding="utf-8") as f:
        json.dump(table.schema.to_json(), f)


_PARSERS = {
    ColumnType.INT32: int,
    ColumnType.INT64: int,
    ColumnType.FLOAT64: float,
    ColumnType.UTF8: str,
}


def read_csv(path, schema=None):
    """Parse a CSV file under a schema (or its sidecar when omitted).
    Malformed rows raise ParseError naming the offending line."""
    if schema is None:
        sidecar = _sidecar(path)
        if not os.path.exists(sidecar):
            raise ParseError("no schema given and no sidecar at %r" % sidecar,
                             line=0)
        with open(sidecar, encoding="utf-8") as f:
            schema = Schema.from_json(json.load(f))
    parsers = [_PARSERS[t] for _, t in schema.columns]
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        for lineno, rec in enumerate(reader, start=1):
            if lineno == 1:
                if rec != list(schema.column_names()):
                    raise ParseError("header %r does not match schema %r"
                                     % (rec, schema.column_names()), line=1)
                continue
            if len(rec) != schema.num_columns:
                raise ParseError("expected %d fields, got %d"
                                 % (schema.num_columns, len(rec)), line=lineno)
            try:
                rows.append(tuple(None if cell == "" else p(cell)
                                  for p, cell in zip(parsers, rec)))
            except ValueError as e:
                raise ParseError(str(e), line=lineno) from e
    return PlainTable.from_rows(schema, rows)
