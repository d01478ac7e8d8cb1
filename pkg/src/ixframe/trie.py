"""Snapshot-capable concurrent map from 64-bit keys to values.

A hash-array-mapped trie with path-copying writes and an atomically
published root. Readers never lock; writers serialize on a mutex and
publish a fresh immutable root, so taking a snapshot is O(1): it just
captures the current root. Structural sharing between a snapshot and the
live trie follows directly from path copying.

Keys are unsigned 64-bit integers, spread with a splitmix64-style mixer
(a bijection, so two distinct keys never share a full 64-bit hash and the
trie needs no collision buckets). Values are arbitrary objects; the index
layer stores packed row pointers, the batch directory stores batch handles.
"""

from __future__ import annotations

import threading

_M64 = (1 << 64) - 1
_BRANCH_BITS = 5
_BRANCH = 1 << _BRANCH_BITS  # 32-way fanout, max depth 13

# Structural accounting used by footprint_bytes: a node header, one slot
# pointer per occupied slot, and a key+value word pair per entry. This is
# a language-independent size model (CPython boxing overhead excluded) and
# is frozen by tests against an independent node walk.
NODE_HEADER_BYTES = 16
SLOT_BYTES = 8
ENTRY_BYTES = 16

_MISSING = object()


def mix64(key):
    """splitmix64 finalizer; bijective on the 64-bit domain."""
    x = (key + 0x9E3779B97F4A7C15) & _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


class _Entry:
    __slots__ = ("key", "hash", "value")

    def __init__(self, key, h, value):
        self.key = key
        self.hash = h
        self.value = value


class _Node:
    __slots__ = ("bitmap", "items")

    allocated = 0  # running allocation counter, read by tests/instrumentation

    def __init__(self, bitmap, items):
        _Node.allocated += 1
        self.bitmap = bitmap
        self.items = items


_EMPTY = _Node(0, [])


def allocation_count():
    """Total trie nodes constructed so far in this process."""
    return _Node.allocated


def _find(node, h, key):
    shift = 0
    while True:
        bit = 1 << ((h >> shift) & 31)
        if not node.bitmap & bit:
            return _MISSING
        item = node.items[(node.bitmap & (bit - 1)).bit_count()]
        if isinstance(item, _Entry):
            return item.value if item.key == key else _MISSING
        node = item
        shift += _BRANCH_BITS


def _assoc(node, shift, entry):
    """Path-copying insert; returns (new node, previous value or _MISSING)."""
    bit = 1 << ((entry.hash >> shift) & 31)
    idx = (node.bitmap & (bit - 1)).bit_count()
    if not node.bitmap & bit:
        items = node.items.copy()
        items.insert(idx, entry)
        return _Node(node.bitmap | bit, items), _MISSING
    item = node.items[idx]
    if isinstance(item, _Entry):
        if item.key == entry.key:
            items = node.items.copy()
            items[idx] = entry
            return _Node(node.bitmap, items), item.value
        # two distinct keys diverge at some deeper level (hash is bijective)
        sub = _make_branch(shift + _BRANCH_BITS, item, entry)
        items = node.items.copy()
        items[idx] = sub
        return _Node(node.bitmap, items), _MISSING
    new_child, prev = _assoc(item, shift + _BRANCH_BITS, entry)
    items = node.items.copy()
    items[idx] = new_child
    return _Node(node.bitmap, items), prev


def _make_branch(shift, a, b):
    ia = (a.hash >> shift) & 31
    ib = (b.hash >> shift) & 31
    if ia == ib:
        return _Node(1 << ia, [_make_branch(shift + _BRANCH_BITS, a, b)])
    items = [a, b] if ia < ib else [b, a]
    return _Node((1 << ia) | (1 << ib), items)


def _without(node, shift, h, key):
    """Path-copying delete; returns (new node or None, removed value or _MISSING)."""
    bit = 1 << ((h >> shift) & 31)
    if not node.bitmap & bit:
        return node, _MISSING
    idx = (node.bitmap & (bit - 1)).bit_count()
    item = node.items[idx]
    if isinstance(item, _Entry):
        if item.key != key:
            return node, _MISSING
        if len(node.items) == 1:
            return None, item.value
        items = node.items.copy()
        del items[idx]
        return _Node(node.bitmap & ~bit, items), item.value
    new_child, removed = _without(item, shift + _BRANCH_BITS, h, key)
    if removed is _MISSING:
        return node, _MISSING
    items = node.items.copy()
    if new_child is None:
        if len(items) == 1:
            return None, removed
        del items[idx]
        return _Node(node.bitmap & ~bit, items), removed
    items[idx] = new_child
    return _Node(node.bitmap, items), removed


def _iter_entries(node):
    for item in node.items:
        if isinstance(item, _Entry):
            yield item
        else:
            yield from _iter_entries(item)


def _check_key(key):
    if not 0 <= key <= _M64:
        raise ValueError("trie keys are unsigned 64-bit, got %r" % (key,))


class TrieSnapshot:
    """Immutable view of a trie at one linearization point."""

    __slots__ = ("_root", "entry_count")

    def __init__(self, root, entry_count):
        self._root = root
        self.entry_count = entry_count

    def get(self, key, default=None):
        _check_key(key)
        v = _find(self._root, mix64(key), key)
        return default if v is _MISSING else v

    def __contains__(self, key):
        return self.get(key, _MISSING) is not _MISSING

    def __len__(self):
        return self.entry_count

    def items(self):
        """All (key, value) pairs in ascending key order."""
        pairs = [(e.key, e.value) for e in _iter_entries(self._root)]
        pairs.sort(key=lambda kv: kv[0])
        return pairs

    def __iter__(self):
        return iter(self.items())

    def footprint_bytes(self):
        """Structural byte accounting of all nodes reachable from the root."""
        total = 0
        stack = [self._root]
        while stack:
            node = stack.pop()
            total += NODE_HEADER_BYTES + SLOT_BYTES * len(node.items)
            for item in node.items:
                if isinstance(item, _Entry):
                    total += ENTRY_BYTES
                else:
                    stack.append(item)
        return total


class KeyTrie:
    """Concurrent upsert/get/delete map with O(1) snapshots.

    Readers are wait-free (they load the published root); writers serialize
    on a per-trie mutex, which preserves the linearizable upsert contract.
    """

    def __init__(self, _root=None, _count=0):
        self._root = _root if _root is not None else _EMPTY
        self._count = _count
        self._lock = threading.Lock()

    @classmethod
    def from_snapshot(cls, snap):
        """A live trie seeded with a snapshot's content (shares all nodes)."""
        return cls(_root=snap._root, _count=snap.entry_count)

    def insert(self, key, value):
        """Linearizable upsert; returns the displaced value or None."""
        _check_key(key)
        entry = _Entry(key, mix64(key), value)
        with self._lock:
            new_root, prev = _assoc(self._root, 0, entry)
            if prev is _MISSING:
                self._count += 1
            self._root = new_root
        return None if prev is _MISSING else prev

    def get(self, key, default=None):
        _check_key(key)
        v = _find(self._root, mix64(key), key)
        return default if v is _MISSING else v

    def delete(self, key):
        """Remove a key; returns the removed value or None."""
        _check_key(key)
        with self._lock:
            new_root, removed = _without(self._root, 0, mix64(key), key)
            if removed is not _MISSING:
                self._root = new_root if new_root is not None else _EMPTY
                self._count -= 1
        return None if removed is _MISSING else removed

    def snapshot(self):
        """O(1) atomic snapshot: captures the current root, copies nothing."""
        with self._lock:
            return TrieSnapshot(self._root, self._count)

    def __len__(self):
        return self._count

    def __contains__(self, key):
        return self.get(key, _MISSING) is not _MISSING
