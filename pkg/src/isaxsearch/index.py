"""In-memory iSAX tree index with a two-stage parallel bulk loader.

Stage 1 summarizes fixed-size chunks of the raw collection into the SAX array
and per-worker buffer parts. Stage 2 hands out whole root subtrees to workers,
each of which builds its subtree alone. Both stages hand out work through a
shared counter.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import kernels
from .core import (
    MAX_SUPPORTED_BITS,
    BreakpointTable,
    IsaxWord,
    build_breakpoints,
    check_segments,
)
from .errors import ConfigurationError, FormatError, UsageError

log = logging.getLogger(__name__)

MAGIC = b"ISAXTREE"
VERSION = 1
_HEADER = struct.Struct("<8sHIHIBQ")
# root subtrees handed out per counter claim in stage 2
BUILD_BATCH = 64


class AtomicCounter:
    """Fetch-and-increment shared by worker threads."""

    def __init__(self, start: int = 0):
        self._value = start
        self._lock = threading.Lock()

    def fetch_inc(self, step: int = 1) -> int:
        with self._lock:
            value = self._value
            self._value += step
            return value


def run_workers(target, num_workers: int) -> list:
    """Call ``target(worker_id)`` on ``num_workers`` threads and collect results in worker order."""
    if num_workers == 1:
        return [target(0)]
    with ThreadPoolExecutor(max_workers=num_workers) as pool:
        futures = [pool.submit(target, i) for i in range(num_workers)]
        return [f.result() for f in futures]


@dataclass
class IndexConfig:
    n: int
    w: int = 16
    leaf_capacity: int = 1024
    max_bits: int = 8
    num_workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    chunk_size: int = 4096

    def __post_init__(self):
        check_segments(self.n, self.w)
        if self.w > 32:
            raise ConfigurationError("at most 32 segments are supported")
        if self.leaf_capacity < 2:
            raise ConfigurationError("leaf_capacity must be at least 2")
        if not 1 <= self.max_bits <= MAX_SUPPORTED_BITS:
            raise ConfigurationError(f"max_bits must be in [1, {MAX_SUPPORTED_BITS}]")
        if self.num_workers < 1:
            raise ConfigurationError("num_workers must be at least 1")
        if self.chunk_size < 1:
            raise ConfigurationError("chunk_size must be at least 1")

    @property
    def sax_dtype(self):
        return np.uint8 if self.max_bits <= 8 else np.uint16


@dataclass
class BufferPart:
    """One worker's records, sorted by root key then series id."""

    keys: np.ndarray
    ids: np.ndarray

    def slice(self, key: int) -> np.ndarray:
        lo = np.searchsorted(self.keys, key, side="left")
        hi = np.searchsorted(self.keys, key, side="right")
        return self.ids[lo:hi]


@dataclass
class IsaxBufferSet:
    """Root-key buffers, each split into one part per worker.

    Buffer ``k`` part ``p`` is ``parts[p].slice(k)``; records carry the series
    id and their word lives in the SAX array row of that id.
    """

    parts: list[BufferPart]

    def keys(self) -> np.ndarray:
        if not self.parts:
            return np.empty(0, np.int64)
        return np.unique(np.concatenate([p.keys for p in self.parts]))

    def buffer(self, key: int) -> list[np.ndarray]:
        return [p.slice(key) for p in self.parts]

    def __len__(self) -> int:
        return sum(len(p.ids) for p in self.parts)


def summarize_stage(raw: np.ndarray, cfg: IndexConfig, table: BreakpointTable | None = None):
    """Stage 1: fill the SAX array and per-worker buffer parts chunk by chunk.

    Returns ``(buffers, sax)`` where ``sax[i]`` is series ``i``'s word at
    ``max_bits`` cardinality.
    """
    raw = _as_collection(raw, cfg.n)
    table = table or build_breakpoints(cfg.max_bits)
    count = raw.shape[0]
    sax = np.empty((count, cfg.w), dtype=cfg.sax_dtype)
    keys = np.empty(count, dtype=np.int64)
    counter = AtomicCounter()

    def worker(_wid):
        chunks = []
        while True:
            lo = counter.fetch_inc() * cfg.chunk_size
            if lo >= count:
                break
            hi = min(lo + cfg.chunk_size, count)
            kernels.summarize_rows(raw, lo, hi, cfg.w, cfg.max_bits, table.finest, sax, keys)
            chunks.append(np.arange(lo, hi, dtype=np.int64))
        ids = np.concatenate(chunks) if chunks else np.empty(0, np.int64)
        part_keys = keys[ids]
        order = np.argsort(part_keys, kind="stable")
        return BufferPart(part_keys[order], ids[order])

    parts = run_workers(worker, cfg.num_workers)
    return IsaxBufferSet(parts), sax


@dataclass
class IndexNode:
    """Python view of one tree node.

    ``children`` maps root keys to subtrees for the root and is a
    ``[zero, one]`` pair for inner nodes; ``entries`` lists
    ``(series id, word)`` pairs for leaves.
    """

    kind: str
    word: IsaxWord | None = None
    children: dict | list | None = None
    entries: list[tuple[int, IsaxWord]] | None = None
    split_segment: int | None = None
    overflow: bool = False

    def leaves(self) -> Iterator[IndexNode]:
        if self.kind == "leaf":
            yield self
            return
        kids = self.children.values() if self.kind == "root" else self.children
        for c in kids:
            yield from c.leaves()


def split_leaf(leaf: IndexNode, cfg: IndexConfig) -> IndexNode:
    """Turn an over-full leaf into an inner node with two leaves.

    The split segment is the one (among those below ``max_bits``) whose next
    bit divides the entries most evenly; ties go to the lower index. A leaf
    whose segments are all at ``max_bits`` is returned unchanged, flagged as
    overflow.
    """
    if leaf.kind != "leaf":
        raise UsageError("only leaves can be split")
    entries = leaf.entries or []
    if len(entries) <= cfg.leaf_capacity:
        raise UsageError("leaf is not over capacity")
    words = np.array([_widen(e[1], cfg.max_bits) for e in entries], dtype=np.uint16)
    bits = np.array(leaf.word.bits, dtype=np.uint8)
    sg = int(kernels.choose_split(words, bits, cfg.max_bits))
    if sg < 0:
        log.warning("leaf %s is at maximum cardinality with %d entries; keeping an overflow leaf", leaf.word, len(entries))
        leaf.overflow = True
        return leaf
    shift = cfg.max_bits - leaf.word.bits[sg] - 1
    kids = []
    for side in (0, 1):
        syms = list(leaf.word.symbols)
        nbits = list(leaf.word.bits)
        syms[sg] = syms[sg] * 2 + side
        nbits[sg] += 1
        kids.append(IndexNode("leaf", IsaxWord(tuple(syms), tuple(nbits), cfg.max_bits), entries=[]))
    for (sid, word), row in zip(entries, words):
        kids[(int(row[sg]) >> shift) & 1].entries.append((sid, word))
    return IndexNode("inner", leaf.word, children=kids, split_segment=sg)


def _widen(word: IsaxWord, max_bits: int) -> list[int]:
    """Symbols left-aligned to ``max_bits`` (missing low bits are zero)."""
    return [s << (max_bits - b) for s, b in zip(word.symbols, word.bits)]


@dataclass
class TreeIndex:
    """The built index held as flat pre-order arrays.

    Root subtree ``i`` (root key ``root_keys[i]``) occupies nodes
    ``root_nodes[i]:root_nodes[i + 1]``. Leaf ``j`` holds series
    ``entries[start[j]:start[j] + count[j]]``; an inner node's ``start`` is
    where its subtree's entries begin. ``entry_words`` keeps the entries'
    words in the same order so leaf scans read them sequentially.
    """

    n: int
    w: int
    leaf_capacity: int
    max_bits: int
    table: BreakpointTable
    sax: np.ndarray
    root_keys: np.ndarray
    root_nodes: np.ndarray
    bits: np.ndarray
    syms: np.ndarray
    split: np.ndarray
    child: np.ndarray
    start: np.ndarray
    count: np.ndarray
    overflow: np.ndarray
    entries: np.ndarray
    timings: dict = field(default_factory=dict)
    entry_words: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.entry_words = np.ascontiguousarray(self.sax[self.entries])

    @property
    def size(self) -> int:
        return int(self.sax.shape[0])

    @property
    def num_nodes(self) -> int:
        return int(self.split.shape[0])

    @property
    def leaf_ids(self) -> np.ndarray:
        return np.flatnonzero(self.split < 0)

    def node_word(self, node: int) -> IsaxWord:
        return IsaxWord(
            tuple(int(s) for s in self.syms[node]),
            tuple(int(b) for b in self.bits[node]),
            self.max_bits,
        )

    def series_word(self, sid: int) -> IsaxWord:
        return IsaxWord(tuple(int(s) for s in self.sax[sid]), (self.max_bits,) * self.w, self.max_bits)

    def leaf_entries(self, node: int) -> np.ndarray:
        lo = self.start[node]
        return self.entries[lo : lo + self.count[node]]

    def subtree_of(self, key: int) -> int | None:
        i = np.searchsorted(self.root_keys, key)
        if i < len(self.root_keys) and self.root_keys[i] == key:
            return int(self.root_nodes[i])
        return None

    def to_node(self) -> IndexNode:
        """Materialize the whole tree as :class:`IndexNode` objects (small indexes only)."""

        def make(node: int) -> IndexNode:
            word = self.node_word(node)
            if self.split[node] < 0:
                ents = [(int(s), self.series_word(int(s))) for s in self.leaf_entries(node)]
                return IndexNode("leaf", word, entries=ents, overflow=bool(self.overflow[node]))
            kids = [make(int(self.child[node, 0])), make(int(self.child[node, 1]))]
            return IndexNode("inner", word, children=kids, split_segment=int(self.split[node]))

        return IndexNode(
            "root",
            children={int(k): make(int(r)) for k, r in zip(self.root_keys, self.root_nodes[:-1])},
        )

    # -- serialization ------------------------------------------------------

    def to_bytes(self) -> bytes:
        out = [
            _HEADER.pack(MAGIC, VERSION, self.n, self.w, self.leaf_capacity, self.max_bits, self.size),
            self.table.digest(),
            struct.pack("<I", len(self.root_keys)),
        ]
        word_dtype = "<u1" if self.max_bits <= 8 else "<u2"
        bits = self.bits.astype("<u1")
        syms = self.syms.astype("<u2")
        for i, key in enumerate(self.root_keys):
            out.append(struct.pack("<I", int(key)))
            for node in range(self.root_nodes[i], self.root_nodes[i + 1]):
                leaf = self.split[node] < 0
                out.append(b"\x01" if leaf else b"\x00")
                out.append(bits[node].tobytes())
                out.append(syms[node].tobytes())
                if leaf:
                    ids = self.leaf_entries(node)
                    out.append(struct.pack("<BI", bool(self.overflow[node]), len(ids)))
                    out.append(ids.astype("<u8").tobytes())
                    out.append(self.sax[ids].astype(word_dtype).tobytes())
                else:
                    out.append(struct.pack("<H", int(self.split[node])))
        return b"".join(out)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> TreeIndex:
        if len(data) < _HEADER.size + 36:
            raise FormatError("index file is truncated")
        magic, version, n, w, cap, max_bits, size = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise FormatError("not an index file (bad magic)")
        if version != VERSION:
            raise FormatError(f"unsupported index version {version}")
        try:
            table = build_breakpoints(max_bits)
        except ConfigurationError as exc:
            raise FormatError(str(exc)) from exc
        pos = _HEADER.size
        if data[pos : pos + 32] != table.digest():
            raise FormatError("breakpoint table hash mismatch")
        pos += 32
        (n_roots,) = struct.unpack_from("<I", data, pos)
        pos += 4
        word_dtype = np.dtype("<u1" if max_bits <= 8 else "<u2")
        sax = np.zeros((size, w), dtype=np.uint8 if max_bits <= 8 else np.uint16)
        seen = np.zeros(size, dtype=bool)
        root_keys, root_nodes = [], []
        bits, syms, split, start, count, overflow, entries = [], [], [], [], [], [], []
        child: list[list[int]] = []
        n_entries = 0
        try:
            for _ in range(n_roots):
                (key,) = struct.unpack_from("<I", data, pos)
                pos += 4
                root_keys.append(key)
                root_nodes.append(len(split))
                pending = [-1]  # parent slots awaiting a child, pre-order
                while pending:
                    parent = pending.pop()
                    node = len(split)
                    if parent >= 0:
                        slot = 0 if child[parent][0] < 0 else 1
                        child[parent][slot] = node
                    tag = data[pos]
                    pos += 1
                    bits.append(np.frombuffer(data, "<u1", w, pos))
                    pos += w
                    syms.append(np.frombuffer(data, "<u2", w, pos))
                    pos += 2 * w
                    child.append([-1, -1])
                    if tag == 1:
                        ovf, c = struct.unpack_from("<BI", data, pos)
                        pos += 5
                        ids = np.frombuffer(data, "<u8", c, pos).astype(np.int64)
                        pos += 8 * c
                        words = np.frombuffer(data, word_dtype, c * w, pos).reshape(c, w)
                        pos += word_dtype.itemsize * c * w
                        if c and (ids.max() >= size or seen[ids].any()):
                            raise FormatError("leaf entry id out of range or duplicated")
                        seen[ids] = True
                        sax[ids] = words
                        split.append(-1)
                        start.append(n_entries)
                        count.append(c)
                        overflow.append(bool(ovf))
                        entries.append(ids)
                        n_entries += c
                    elif tag == 0:
                        (sg,) = struct.unpack_from("<H", data, pos)
                        pos += 2
                        split.append(sg)
                        start.append(n_entries)
                        count.append(0)
                        overflow.append(False)
                        pending.append(node)
                        pending.append(node)
                    else:
                        raise FormatError(f"bad node tag {tag}")
        except (struct.error, IndexError, ValueError) as exc:
            raise FormatError(f"index file is truncated or corrupt: {exc}") from exc
        if pos != len(data):
            raise FormatError("trailing bytes after index tree")
        if n_entries != size:
            raise FormatError(f"header declares {size} series but tree holds {n_entries}")
        root_nodes.append(len(split))
        return cls(
            n=n,
            w=w,
            leaf_capacity=cap,
            max_bits=max_bits,
            table=table,
            sax=sax,
            root_keys=np.array(root_keys, dtype=np.int64),
            root_nodes=np.array(root_nodes, dtype=np.int64),
            bits=np.array(bits, dtype=np.uint8).reshape(-1, w),
            syms=np.array(syms, dtype=np.uint16).reshape(-1, w),
            split=np.array(split, dtype=np.int32),
            child=np.array(child, dtype=np.int32).reshape(-1, 2),
            start=np.array(start, dtype=np.int64),
            count=np.array(count, dtype=np.int64),
            overflow=np.array(overflow, dtype=bool),
            entries=np.concatenate(entries) if entries else np.empty(0, np.int64),
        )

    @classmethod
    def load(cls, path) -> TreeIndex:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def build_stage(buffers: IsaxBufferSet, sax: np.ndarray, cfg: IndexConfig, table: BreakpointTable | None = None) -> TreeIndex:
    """Stage 2: build every root subtree from its buffer; subtrees are claimed from a shared counter.

    Records of a buffer are inserted in series-id order, so the resulting tree
    does not depend on how many workers ran either stage. Claims hand out
    ``BUILD_BATCH`` consecutive subtrees at a time.
    """
    table = table or build_breakpoints(cfg.max_bits)
    keys = buffers.keys()
    n_keys = len(keys)
    offsets = np.cumsum([0] + [len(p.ids) for p in buffers.parts])
    all_ids = np.concatenate([p.ids for p in buffers.parts]) if buffers.parts else np.empty(0, np.int64)
    part_lo = np.array([np.searchsorted(p.keys, keys, "left") + off for p, off in zip(buffers.parts, offsets)], dtype=np.int64).reshape(len(buffers.parts), n_keys)
    part_hi = np.array([np.searchsorted(p.keys, keys, "right") + off for p, off in zip(buffers.parts, offsets)], dtype=np.int64).reshape(len(buffers.parts), n_keys)
    n_batches = -(-n_keys // BUILD_BATCH)
    built: list = [None] * n_batches
    counter = AtomicCounter()

    def worker(_wid):
        while True:
            i = counter.fetch_inc()
            if i >= n_batches:
                return
            a = i * BUILD_BATCH
            b = min(a + BUILD_BATCH, n_keys)
            built[i] = kernels.build_subtrees(a, b, keys, all_ids, part_lo, part_hi, sax, cfg.max_bits, cfg.leaf_capacity)

    run_workers(worker, cfg.num_workers)
    return _stitch(keys, built, sax, cfg, table)


def _stitch(keys, built, sax, cfg: IndexConfig, table: BreakpointTable) -> TreeIndex:
    node_off = 0
    entry_off = 0
    child, start, sizes = [], [], []
    for batch in built:
        c = batch[3]
        child.append(np.where(c >= 0, c + node_off, -1))
        start.append(batch[4] + entry_off)
        sizes.append(batch[8])
        node_off += len(batch[2])
        entry_off += len(batch[7])
    root_nodes = np.concatenate([[0], np.cumsum(np.concatenate(sizes))]) if built else np.zeros(1)

    def cat(j, dtype, shape_tail=()):
        if not built:
            return np.empty((0,) + shape_tail, dtype)
        return np.concatenate([b[j] for b in built]).astype(dtype, copy=False)

    index = TreeIndex(
        n=cfg.n,
        w=cfg.w,
        leaf_capacity=cfg.leaf_capacity,
        max_bits=cfg.max_bits,
        table=table,
        sax=sax,
        root_keys=np.asarray(keys, dtype=np.int64),
        root_nodes=root_nodes.astype(np.int64),
        bits=cat(0, np.uint8, (cfg.w,)),
        syms=cat(1, np.uint16, (cfg.w,)),
        split=cat(2, np.int32),
        child=np.concatenate(child).astype(np.int32) if built else np.empty((0, 2), np.int32),
        start=np.concatenate(start) if built else np.empty(0, np.int64),
        count=cat(5, np.int64),
        overflow=cat(6, bool),
        entries=cat(7, np.int64),
    )
    n_over = int(index.overflow.sum())
    if n_over:
        log.warning("%d leaves exceed capacity %d at maximum cardinality", n_over, cfg.leaf_capacity)
    return index


def build_index(raw: np.ndarray, cfg: IndexConfig) -> TreeIndex:
    """Both construction stages, with their wall times recorded in ``index.timings``."""
    table = build_breakpoints(cfg.max_bits)
    t0 = time.perf_counter()
    buffers, sax = summarize_stage(raw, cfg, table)
    t1 = time.perf_counter()
    index = build_stage(buffers, sax, cfg, table)
    t2 = time.perf_counter()
    index.timings = {"summarize": t1 - t0, "build": t2 - t1}
    return index


def _as_collection(raw, n: int) -> np.ndarray:
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise UsageError("raw collection must be a 2-D array (count x n)")
    if raw.shape[1] != n:
        raise ConfigurationError(f"series length {raw.shape[1]} does not match configured n={n}")
    if raw.dtype != np.float32:
        raw = raw.astype(np.float32)
    return np.ascontiguousarray(raw)
