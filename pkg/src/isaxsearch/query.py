"""Exact 1-NN query engines: tree search, flat SAX-array scan, and a sequential-scan oracle."""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import BreakpointTable, build_breakpoints
from .index import AtomicCounter, IndexConfig, TreeIndex, run_workers
from .errors import UsageError

# root subtrees claimed per counter increment during tree traversal
CLAIM_BATCH = 256
# leaves popped per claim during tree leaf processing
POP_BATCH = 32
# candidates claimed per counter increment during flat refinement
REFINE_BATCH = 512


class BsfState:
    """Best-so-far (squared distance, series id), tightened under a lock.

    Readers may see a stale value; that only makes pruning less aggressive.
    When ``trace`` is a list, every accepted update is appended to it as
    ``("bsf", old_distance, new_distance, series_id)``.
    """

    def __init__(self, distance_sq: float = math.inf, series_id: int = -1, trace: list | None = None):
        self.distance_sq = distance_sq
        self.series_id = series_id
        self._lock = threading.Lock()
        self._trace = trace

    @property
    def distance(self) -> float:
        return math.sqrt(self.distance_sq)

    def offer(self, distance_sq: float, series_id: int) -> bool:
        if distance_sq >= self.distance_sq:
            return False
        with self._lock:
            if distance_sq >= self.distance_sq:
                return False
            if self._trace is not None:
                self._trace.append(("bsf", math.sqrt(self.distance_sq), math.sqrt(distance_sq), series_id))
            self.distance_sq = distance_sq
            self.series_id = series_id
            return True


@dataclass(order=True)
class SearchCandidate:
    lb: float
    leaf: int


class LeafQueue:
    """Min-priority queue of leaves keyed by lower bound, safe for concurrent use.

    Insertions and pops happen in separate phases of a query, so inserts are
    buffered and :meth:`seal` orders them once; pops then advance a shared
    cursor over the ordered leaves, which yields them in ascending ``lb``.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._pending_lb: list[np.ndarray] = []
        self._pending_leaf: list[np.ndarray] = []
        self.lbs = np.empty(0, np.float64)
        self.leaves = np.empty(0, np.int64)
        self._cursor = 0
        self.finished = False

    def push_many(self, lbs: np.ndarray, leaves: np.ndarray) -> None:
        with self._lock:
            self._pending_lb.append(lbs)
            self._pending_leaf.append(leaves)

    def seal(self) -> None:
        with self._lock:
            if self._pending_lb:
                lbs = np.concatenate(self._pending_lb)
                leaves = np.concatenate(self._pending_leaf)
                order = np.lexsort((leaves, lbs))
                self.lbs, self.leaves = lbs[order], leaves[order]
            self._pending_lb, self._pending_leaf = [], []
            self._cursor = 0
            self.finished = len(self.leaves) == 0

    def pop_batch(self, size: int) -> tuple[int, int]:
        """Claim the next ``size`` leaves; returns the index range ``[lo, hi)``."""
        with self._lock:
            lo = self._cursor
            hi = min(lo + size, len(self.leaves))
            self._cursor = hi
            if hi >= len(self.leaves):
                self.finished = True
            return lo, hi

    def abandon(self, at: int) -> int:
        """Give up the queue after position ``at``; returns how many leaves were dropped."""
        with self._lock:
            dropped = len(self.leaves) - at
            self._cursor = len(self.leaves)
            self.finished = True
            return dropped

    def items(self) -> list[SearchCandidate]:
        return [SearchCandidate(float(lb), int(leaf)) for lb, leaf in zip(self.lbs, self.leaves)]

    def __len__(self) -> int:
        return len(self.leaves) - self._cursor


@dataclass
class QueryStats:
    lb_computations: int = 0
    real_distances: int = 0
    abandoned: int = 0
    nodes_pruned: int = 0
    leaves_pruned: int = 0
    candidates: int = 0
    queue_abandonments: int = 0
    timings: dict = field(default_factory=dict)

    def merge(self, other: QueryStats) -> None:
        for name in ("lb_computations", "real_distances", "abandoned", "nodes_pruned", "leaves_pruned", "candidates", "queue_abandonments"):
            setattr(self, name, getattr(self, name) + getattr(other, name))


@dataclass
class SearchResult:
    """Answer of one query; ``series_id`` is None when the collection is empty."""

    series_id: int | None
    distance: float
    stats: QueryStats = field(default_factory=QueryStats)


class _QueryContext:
    """Per-query derived arrays shared by the tree and flat engines."""

    def __init__(self, query, n: int, w: int, table: BreakpointTable):
        q = np.ascontiguousarray(query, dtype=np.float32)
        if q.ndim != 1 or q.shape[0] != n:
            raise UsageError(f"query length {q.shape} does not match series length {n}")
        self.query = q
        self.paa = np.empty(w, np.float64)
        kernels.paa_row(q, w, self.paa)
        self.scale = n / w
        self.ext = table.extended
        self.table = kernels.lb_table(self.paa, self.ext)
        self.word = np.array([kernels.region_index(table.finest, m) for m in self.paa], dtype=np.int64)

    @classmethod
    def for_index(cls, query, index: TreeIndex) -> _QueryContext:
        return cls(query, index.n, index.w, index.table)


def _query_key(word: np.ndarray, max_bits: int) -> int:
    key = 0
    for s in word:
        key = (key << 1) | ((int(s) >> (max_bits - 1)) & 1)
    return key


def _check_raw(raw, index: TreeIndex) -> np.ndarray:
    raw = np.asarray(raw)
    if raw.shape != (index.size, index.n):
        raise UsageError(f"raw collection shape {raw.shape} does not match index ({index.size}, {index.n})")
    return raw


def approximate_search(query, index: TreeIndex, raw, ctx: _QueryContext | None = None, bsf: BsfState | None = None):
    """Descend to the leaf matching the query's own word and scan it.

    Returns ``(leaf, bsf)``; ``leaf`` is None for an empty index. When the
    query's root key has no subtree the subtree with the smallest lower bound
    is used. At an inner node whose matching child is an empty leaf, the
    other child is taken.
    """
    bsf = bsf if bsf is not None else BsfState()
    if index.size == 0:
        return None, bsf
    ctx = ctx or _QueryContext.for_index(query, index)
    node = index.subtree_of(_query_key(ctx.word, index.max_bits))
    if node is None:
        best = math.inf
        for r in index.root_nodes[:-1]:
            lb = kernels.word_lb_sq(ctx.paa, index.bits[r], index.syms[r], ctx.ext, index.max_bits)
            if lb < best:
                best, node = lb, int(r)
    while index.split[node] >= 0:
        sg = index.split[node]
        c0, c1 = index.child[node]
        b = int(index.bits[c0, sg])
        side = (int(ctx.word[sg]) >> (index.max_bits - b)) & 1
        nxt = c1 if side else c0
        if index.split[nxt] < 0 and index.count[nxt] == 0:
            nxt = c0 if side else c1
        node = int(nxt)
    ids = index.leaf_entries(node)
    best_sq, best_id, _, _ = kernels.refine(ids, 0, len(ids), raw, ctx.query, math.inf)
    if best_id >= 0:
        bsf.offer(best_sq, int(best_id))
    return node, bsf


def search_tree(query, index: TreeIndex, raw, num_workers: int = 1, num_queues: int | None = None, trace: list | None = None) -> SearchResult:
    """Exact 1-NN by pruned tree traversal and round-robin priority queues.

    Workers claim root subtrees from a shared counter, prune nodes whose lower
    bound reaches the BSF, and spread surviving leaves over ``num_queues``
    min-queues. They then drain the queues, abandoning a queue as soon as its
    head can no longer beat the BSF.

    ``trace``, when a list, receives ``("bsf", old, new, id)``,
    ``("prune", node, lb, bsf)``, ``("queues", sizes)`` and
    ``("abandon", queue, lb, next_lb, bsf)`` events.
    """
    raw = _check_raw(raw, index)
    num_queues = num_queues or num_workers
    if num_workers < 1 or num_queues < 1:
        raise UsageError("num_workers and num_queues must be positive")
    stats = QueryStats()
    if index.size == 0:
        return SearchResult(None, math.inf, stats)

    t0 = time.perf_counter()
    ctx = _QueryContext.for_index(query, index)
    leaf, bsf = approximate_search(query, index, raw, ctx, BsfState(trace=trace))
    stats.real_distances += int(index.count[leaf])
    t1 = time.perf_counter()

    queues = [LeafQueue() for _q in range(num_queues)]
    n_roots = len(index.root_keys)
    counter = AtomicCounter()
    trace_lock = threading.Lock()

    def traverse_worker(wid):
        local = QueryStats()
        rr = wid % num_queues
        while True:
            a = counter.fetch_inc(CLAIM_BATCH)
            if a >= n_roots:
                return local
            b = min(a + CLAIM_BATCH, n_roots)
            bound = bsf.distance_sq
            leaves, lbs, pruned, pruned_lb, n_lb = kernels.traverse(
                index.root_nodes[a], index.root_nodes[b], index.root_nodes[a:b],
                ctx.paa, ctx.ext, index.max_bits, ctx.scale,
                index.bits, index.syms, index.split, index.child, index.count, bound,
            )
            local.lb_computations += n_lb
            local.nodes_pruned += len(pruned)
            if trace is not None:
                with trace_lock:
                    root_bsf = math.sqrt(bound)
                    trace.extend(("prune", int(p), math.sqrt(lb), root_bsf) for p, lb in zip(pruned, pruned_lb))
            if len(leaves):
                for j in range(num_queues):
                    q = (rr + j) % num_queues
                    if j < len(leaves):
                        queues[q].push_many(lbs[j::num_queues], leaves[j::num_queues])
                rr = (rr + len(leaves)) % num_queues

    for s in run_workers(traverse_worker, num_workers):
        stats.merge(s)
    for queue in queues:
        queue.seal()
    if trace is not None:
        trace.append(("queues", [len(queue.leaves) for queue in queues]))
    t2 = time.perf_counter()

    def process_worker(wid):
        local = QueryStats()
        q = wid % num_queues
        while True:
            open_queues = [i for i in range(num_queues) if not queues[(q + i) % num_queues].finished]
            if not open_queues:
                return local
            q = (q + open_queues[0]) % num_queues
            queue = queues[q]
            lo, hi = queue.pop_batch(POP_BATCH)
            if lo >= hi:
                continue
            bound = bsf.distance_sq
            best_sq, best_id, n_lb, n_real, n_ab, stop = kernels.process_leaves(
                queue.leaves, queue.lbs, lo, hi, index.start, index.count, index.entries,
                index.entry_words, raw, ctx.query, ctx.table, ctx.scale, bound,
            )
            local.lb_computations += n_lb
            local.real_distances += n_real
            local.abandoned += n_ab
            if best_id >= 0:
                bsf.offer(best_sq, int(best_id))
            if stop < hi:
                local.queue_abandonments += 1
                local.leaves_pruned += queue.abandon(stop)
                if trace is not None:
                    nxt = queue.lbs[stop + 1] if stop + 1 < len(queue.lbs) else math.inf
                    with trace_lock:
                        trace.append(("abandon", q, math.sqrt(queue.lbs[stop]), math.sqrt(nxt), math.sqrt(min(best_sq, bound))))

    for s in run_workers(process_worker, num_workers):
        stats.merge(s)
    t3 = time.perf_counter()
    stats.timings = {"approximate": t1 - t0, "traverse": t2 - t1, "process": t3 - t2}
    return SearchResult(bsf.series_id, bsf.distance, stats)


def search_flat(
    query,
    sax: np.ndarray,
    raw,
    index: TreeIndex | None = None,
    num_workers: int = 1,
    initial: BsfState | None = None,
    cfg: IndexConfig | None = None,
) -> SearchResult:
    """Exact 1-NN by lower-bounding every SAX-array row, then refining the candidate list.

    The initial BSF comes from ``initial`` if given, else from the tree's
    approximate answer, else (no ``index``; ``cfg`` required) from series 0.
    Lower-bound workers split the SAX array into equal ranges; refinement
    workers claim candidate blocks from a shared counter.
    """
    if index is not None:
        raw = _check_raw(raw, index)
        n, w, max_bits = index.n, index.w, index.max_bits
    elif cfg is not None:
        raw = np.asarray(raw)
        n, w, max_bits = cfg.n, cfg.w, cfg.max_bits
    else:
        raise UsageError("search_flat needs either an index or an IndexConfig")
    if sax.shape[0] != raw.shape[0]:
        raise UsageError("SAX array and raw collection differ in length")
    stats = QueryStats()
    count = raw.shape[0]
    if count == 0:
        return SearchResult(None, math.inf, stats)

    t0 = time.perf_counter()
    ctx = _QueryContext(query, n, w, build_breakpoints(max_bits))
    if initial is not None:
        bsf = initial
    elif index is not None:
        leaf, bsf = approximate_search(query, index, raw, ctx)
        stats.real_distances += int(index.count[leaf])
    else:
        bsf = BsfState()
        bsf.offer(kernels.ed_sq_abandon(ctx.query, raw[0], math.inf), 0)
        stats.real_distances += 1
    t1 = time.perf_counter()

    bound = bsf.distance_sq
    step = -(-count // num_workers)

    def lb_worker(wid):
        lo = min(wid * step, count)
        return kernels.flat_candidates(sax, lo, min(lo + step, count), ctx.table, ctx.scale, bound)

    candidates = np.concatenate(run_workers(lb_worker, num_workers))
    stats.lb_computations += count
    stats.candidates = len(candidates)
    stats.leaves_pruned = count - len(candidates)
    t2 = time.perf_counter()

    counter = AtomicCounter()

    def refine_worker(_wid):
        local = QueryStats()
        while True:
            a = counter.fetch_inc(REFINE_BATCH)
            if a >= len(candidates):
                return local
            b = min(a + REFINE_BATCH, len(candidates))
            best_sq, best_id, n_real, n_ab = kernels.refine(candidates, a, b, raw, ctx.query, bsf.distance_sq)
            local.real_distances += n_real
            local.abandoned += n_ab
            if best_id >= 0:
                bsf.offer(best_sq, int(best_id))

    for s in run_workers(refine_worker, num_workers):
        stats.merge(s)
    t3 = time.perf_counter()
    stats.timings = {"approximate": t1 - t0, "lower_bounds": t2 - t1, "refine": t3 - t2}
    return SearchResult(bsf.series_id, bsf.distance, stats)


def search_scan(query, raw) -> SearchResult:
    """Sequential early-abandoning scan; exact ties resolve to the lowest id."""
    raw = np.asarray(raw)
    q = np.ascontiguousarray(query, dtype=raw.dtype if raw.dtype == np.float32 else np.float64)
    stats = QueryStats()
    if raw.shape[0] == 0:
        return SearchResult(None, math.inf, stats)
    if raw.shape[1] != q.shape[0]:
        raise UsageError(f"query length {q.shape[0]} does not match series length {raw.shape[1]}")
    t0 = time.perf_counter()
    best_sq, best_id, abandoned = kernels.scan_all(raw, q)
    stats.real_distances = raw.shape[0]
    stats.abandoned = int(abandoned)
    stats.timings = {"scan": time.perf_counter() - t0}
    return SearchResult(int(best_id), math.sqrt(best_sq), stats)
