"""Compiled inner loops.

Every kernel here is ``nogil`` so that worker threads driving them run in
parallel. Distances are handled squared; callers take the square root at the
boundary. Sums of squares accumulate in float64 regardless of input dtype.

Node words use the nested-breakpoint trick: with ``ext`` holding the
max-cardinality breakpoints padded by -inf/+inf, the region of symbol ``s`` at
``b`` bits is ``[ext[s << (M - b)], ext[(s + 1) << (M - b)]]``.
"""

import numpy as np
from numba import njit
from numba.typed import List

# ---------------------------------------------------------------------------
# summarization
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def region_index(breakpoints, value):
    """Number of breakpoints <= value (ties go to the upper region)."""
    lo = 0
    hi = breakpoints.shape[0]
    while lo < hi:
        mid = (lo + hi) // 2
        if breakpoints[mid] <= value:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True, nogil=True)
def paa_row(row, w, out):
    seg = row.shape[0] // w
    for i in range(w):
        acc = 0.0
        for j in range(i * seg, (i + 1) * seg):
            acc += row[j]
        out[i] = acc / seg


@njit(cache=True, nogil=True)
def summarize_rows(raw, lo, hi, w, max_bits, breakpoints, sax, keys):
    """Fill ``sax[lo:hi]`` with max-cardinality words and ``keys[lo:hi]`` with root keys."""
    means = np.empty(w, np.float64)
    top = max_bits - 1
    for r in range(lo, hi):
        paa_row(raw[r], w, means)
        key = 0
        for i in range(w):
            s = region_index(breakpoints, means[i])
            sax[r, i] = s
            key = (key << 1) | ((s >> top) & 1)
        keys[r] = key


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def ed_sq_abandon(a, b, limit_sq):
    """Squared ED, or -1.0 once the running sum exceeds ``limit_sq``."""
    acc = 0.0
    for i in range(a.shape[0]):
        d = np.float64(a[i]) - np.float64(b[i])
        acc += d * d
        if acc > limit_sq:
            return -1.0
    return acc


@njit(cache=True, nogil=True)
def word_lb_sq(qpaa, bits, syms, ext, max_bits):
    """Unscaled squared lower bound between a query PAA and one variable-cardinality word."""
    acc = 0.0
    for i in range(qpaa.shape[0]):
        shift = max_bits - bits[i]
        s = np.int64(syms[i])
        lo = ext[s << shift]
        hi = ext[(s + 1) << shift]
        m = qpaa[i]
        if m < lo:
            d = lo - m
            acc += d * d
        elif m > hi:
            d = m - hi
            acc += d * d
    return acc


@njit(cache=True, nogil=True)
def lb_table(qpaa, ext):
    """Per-segment squared contribution for every max-cardinality symbol."""
    w = qpaa.shape[0]
    k = ext.shape[0] - 1
    table = np.zeros((w, k), np.float64)
    for i in range(w):
        m = qpaa[i]
        for r in range(k):
            lo = ext[r]
            hi = ext[r + 1]
            if m < lo:
                table[i, r] = (lo - m) * (lo - m)
            elif m > hi:
                table[i, r] = (m - hi) * (m - hi)
    return table


@njit(cache=True, nogil=True)
def series_lb_sq(table, word):
    acc = 0.0
    for i in range(word.shape[0]):
        acc += table[i, word[i]]
    return acc


# ---------------------------------------------------------------------------
# subtree construction
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def choose_split(words, bits, max_bits):
    """Most balanced split segment for max-cardinality ``words`` under node ``bits``.

    Returns -1 when every segment is already at ``max_bits``. Ties go to the
    lowest segment index.
    """
    count = words.shape[0]
    best = -1
    best_imbalance = count + 1
    for sg in range(bits.shape[0]):
        b = bits[sg]
        if b >= max_bits:
            continue
        shift = max_bits - b - 1
        ones = 0
        for e in range(count):
            ones += (np.int64(words[e, sg]) >> shift) & 1
        imbalance = abs(2 * ones - count)
        if imbalance < best_imbalance:
            best_imbalance = imbalance
            best = sg
    return best


@njit(cache=True, nogil=True)
def _grow(bits, syms, split, child, head, tail, count, overflow):
    size = split.shape[0] * 2
    nb = np.zeros((size, bits.shape[1]), bits.dtype)
    ns = np.zeros((size, syms.shape[1]), syms.dtype)
    nsp = np.full(size, -1, split.dtype)
    nc = np.full((size, 2), -1, child.dtype)
    nh = np.full(size, -1, head.dtype)
    nt = np.full(size, -1, tail.dtype)
    nct = np.zeros(size, count.dtype)
    no = np.zeros(size, overflow.dtype)
    old = split.shape[0]
    nb[:old] = bits
    ns[:old] = syms
    nsp[:old] = split
    nc[:old] = child
    nh[:old] = head
    nt[:old] = tail
    nct[:old] = count
    no[:old] = overflow
    return nb, ns, nsp, nc, nh, nt, nct, no


@njit(cache=True, nogil=True)
def build_subtree(ids, sax, key, max_bits, capacity):
    """Insert ``ids`` one at a time into a fresh root subtree, splitting full leaves.

    Returns the subtree in pre-order as ``(bits, syms, split, child, start,
    count, overflow, entries)``; leaf entries are laid out contiguously in
    ``entries`` and ``start``/``count`` index into it. ``split`` is -1 for
    leaves and ``child`` holds subtree-local node indices.
    """
    w = sax.shape[1]
    m = ids.shape[0]
    size = 16
    bits = np.zeros((size, w), np.uint8)
    syms = np.zeros((size, w), np.uint16)
    split = np.full(size, -1, np.int32)
    child = np.full((size, 2), -1, np.int32)
    head = np.full(size, -1, np.int64)
    tail = np.full(size, -1, np.int64)
    count = np.zeros(size, np.int64)
    overflow = np.zeros(size, np.bool_)
    nxt = np.full(m, -1, np.int64)
    for i in range(w):
        bits[0, i] = 1
        syms[0, i] = (key >> (w - 1 - i)) & 1
    nodes = 1
    scratch = np.empty((capacity + 1, w), sax.dtype)

    for e in range(m):
        sid = ids[e]
        node = 0
        while split[node] >= 0:
            sg = split[node]
            b = bits[child[node, 0], sg]
            node = child[node, (np.int64(sax[sid, sg]) >> (max_bits - b)) & 1]
        if head[node] < 0:
            head[node] = e
        else:
            nxt[tail[node]] = e
        tail[node] = e
        count[node] += 1

        while count[node] > capacity and not overflow[node]:
            c = count[node]
            if scratch.shape[0] < c:
                scratch = np.empty((c, w), sax.dtype)
            k = 0
            p = head[node]
            while p >= 0:
                scratch[k] = sax[ids[p]]
                k += 1
                p = nxt[p]
            sg = choose_split(scratch[:c], bits[node], max_bits)
            if sg < 0:
                overflow[node] = True
                break
            if nodes + 2 > split.shape[0]:
                bits, syms, split, child, head, tail, count, overflow = _grow(
                    bits, syms, split, child, head, tail, count, overflow
                )
            c0 = nodes
            c1 = nodes + 1
            nodes += 2
            for side in range(2):
                cn = c0 + side
                bits[cn] = bits[node]
                syms[cn] = syms[node]
                bits[cn, sg] = bits[node, sg] + 1
                syms[cn, sg] = syms[node, sg] * 2 + side
            shift = max_bits - bits[c0, sg]
            p = head[node]
            while p >= 0:
                q = nxt[p]
                nxt[p] = -1
                cn = c0 + ((np.int64(sax[ids[p], sg]) >> shift) & 1)
                if head[cn] < 0:
                    head[cn] = p
                else:
                    nxt[tail[cn]] = p
                tail[cn] = p
                count[cn] += 1
                p = q
            split[node] = sg
            child[node, 0] = c0
            child[node, 1] = c1
            head[node] = -1
            tail[node] = -1
            count[node] = 0
            if count[c0] > capacity:
                node = c0
            elif count[c1] > capacity:
                node = c1
            else:
                break

    # pre-order renumbering
    order = np.empty(nodes, np.int64)
    stack = np.empty(nodes, np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    k = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        order[k] = node
        k += 1
        if split[node] >= 0:
            stack[sp] = child[node, 1]
            sp += 1
            stack[sp] = child[node, 0]
            sp += 1
    rank = np.empty(nodes, np.int64)
    for i in range(nodes):
        rank[order[i]] = i

    out_bits = np.empty((nodes, w), np.uint8)
    out_syms = np.empty((nodes, w), np.uint16)
    out_split = np.full(nodes, -1, np.int32)
    out_child = np.full((nodes, 2), -1, np.int32)
    out_start = np.zeros(nodes, np.int64)
    out_count = np.zeros(nodes, np.int64)
    out_overflow = np.zeros(nodes, np.bool_)
    entries = np.empty(m, np.int64)
    pos = 0
    for i in range(nodes):
        node = order[i]
        out_bits[i] = bits[node]
        out_syms[i] = syms[node]
        out_overflow[i] = overflow[node]
        out_start[i] = pos
        if split[node] >= 0:
            out_split[i] = split[node]
            out_child[i, 0] = rank[child[node, 0]]
            out_child[i, 1] = rank[child[node, 1]]
        else:
            p = head[node]
            while p >= 0:
                entries[pos] = ids[p]
                pos += 1
                p = nxt[p]
            out_count[i] = pos - out_start[i]
    return out_bits, out_syms, out_split, out_child, out_start, out_count, out_overflow, entries


@njit(cache=True, nogil=True)
def build_subtrees(a, b, keys, all_ids, part_lo, part_hi, sax, max_bits, capacity):
    """Build root subtrees ``a:b`` and return them concatenated in key order.

    Subtree ``t`` gathers ``all_ids[part_lo[p, t]:part_hi[p, t]]`` from every
    buffer part ``p`` and inserts the merged records in ascending id order.
    Child indices and leaf starts in the result are relative to the batch;
    ``sizes[t - a]`` is the node count of subtree ``t``.
    """
    built = List()
    total_nodes = 0
    total_entries = 0
    for t in range(a, b):
        c = 0
        for p in range(part_lo.shape[0]):
            c += part_hi[p, t] - part_lo[p, t]
        ids = np.empty(c, np.int64)
        k = 0
        for p in range(part_lo.shape[0]):
            for j in range(part_lo[p, t], part_hi[p, t]):
                ids[k] = all_ids[j]
                k += 1
        ids.sort()
        sub = build_subtree(ids, sax, keys[t], max_bits, capacity)
        built.append(sub)
        total_nodes += sub[2].shape[0]
        total_entries += sub[7].shape[0]

    w = sax.shape[1]
    bits = np.empty((total_nodes, w), np.uint8)
    syms = np.empty((total_nodes, w), np.uint16)
    split = np.empty(total_nodes, np.int32)
    child = np.empty((total_nodes, 2), np.int64)
    start = np.empty(total_nodes, np.int64)
    count = np.empty(total_nodes, np.int64)
    overflow = np.empty(total_nodes, np.bool_)
    entries = np.empty(total_entries, np.int64)
    sizes = np.empty(b - a, np.int64)
    no = 0
    eo = 0
    for i in range(len(built)):
        sub = built[i]
        k = sub[2].shape[0]
        e = sub[7].shape[0]
        sizes[i] = k
        bits[no : no + k] = sub[0]
        syms[no : no + k] = sub[1]
        split[no : no + k] = sub[2]
        for j in range(k):
            for side in range(2):
                cj = sub[3][j, side]
                child[no + j, side] = cj + no if cj >= 0 else -1
            start[no + j] = sub[4][j] + eo
        count[no : no + k] = sub[5]
        overflow[no : no + k] = sub[6]
        entries[eo : eo + e] = sub[7]
        no += k
        eo += e
    return bits, syms, split, child, start, count, overflow, entries, sizes


# ---------------------------------------------------------------------------
# query answering
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def scan_all(raw, query):
    """Early-abandoning sequential scan; ties resolve to the lowest row."""
    best_sq = np.inf
    best_id = -1
    abandoned = 0
    for r in range(raw.shape[0]):
        d = ed_sq_abandon(query, raw[r], best_sq)
        if d < 0.0:
            abandoned += 1
        elif d < best_sq:
            best_sq = d
            best_id = r
    return best_sq, best_id, abandoned


@njit(cache=True, nogil=True)
def refine(ids, lo, hi, raw, query, bsf_sq):
    """Real distances for ``ids[lo:hi]`` against a tightening threshold.

    Returns ``(best_sq, best_id, computed, abandoned)``; ``best_id`` is -1 when
    nothing beat ``bsf_sq``.
    """
    best_sq = bsf_sq
    best_id = -1
    computed = 0
    abandoned = 0
    for k in range(lo, hi):
        sid = ids[k]
        computed += 1
        d = ed_sq_abandon(query, raw[sid], best_sq)
        if d < 0.0:
            abandoned += 1
        elif d < best_sq:
            best_sq = d
            best_id = sid
    return best_sq, best_id, computed, abandoned


@njit(cache=True, nogil=True)
def scan_leaf(entries, lo, hi, words, raw, query, table, scale, bsf_sq):
    """Per-series lower bound first, real distance only for survivors.

    ``words[k]`` is the max-cardinality word of series ``entries[k]``.

    Returns ``(best_sq, best_id, lb_count, computed, abandoned)``.
    """
    best_sq = bsf_sq
    best_id = -1
    computed = 0
    abandoned = 0
    for k in range(lo, hi):
        sid = entries[k]
        if scale * series_lb_sq(table, words[k]) >= best_sq:
            continue
        computed += 1
        d = ed_sq_abandon(query, raw[sid], best_sq)
        if d < 0.0:
            abandoned += 1
        elif d < best_sq:
            best_sq = d
            best_id = sid
    return best_sq, best_id, hi - lo, computed, abandoned


@njit(cache=True, nogil=True)
def flat_candidates(sax, lo, hi, table, scale, bsf_sq):
    """Rows in ``[lo, hi)`` whose lower bound is strictly below ``bsf_sq``."""
    out = np.empty(hi - lo, np.int64)
    k = 0
    for r in range(lo, hi):
        if scale * series_lb_sq(table, sax[r]) < bsf_sq:
            out[k] = r
            k += 1
    return out[:k]


@njit(cache=True, nogil=True)
def traverse(node_lo, node_hi, roots, qpaa, ext, max_bits, scale, bits, syms, split, child, count, bsf_sq):
    """Walk the root subtrees in ``roots`` and collect unpruned non-empty leaves.

    ``node_lo:node_hi`` bounds the nodes these subtrees occupy. Returns
    ``(leaves, leaf_lb_sq, pruned, pruned_lb_sq, lb_count)`` where ``pruned``
    lists every node cut off by the ``lb >= bsf`` test.
    """
    span = node_hi - node_lo
    leaves = np.empty(span, np.int64)
    leaf_lb = np.empty(span, np.float64)
    pruned = np.empty(span, np.int64)
    pruned_lb = np.empty(span, np.float64)
    stack = np.empty(span + 1, np.int64)
    nl = 0
    np_ = 0
    lb_count = 0
    for r in range(roots.shape[0]):
        sp = 0
        stack[sp] = roots[r]
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            lb = scale * word_lb_sq(qpaa, bits[node], syms[node], ext, max_bits)
            lb_count += 1
            if lb >= bsf_sq:
                pruned[np_] = node
                pruned_lb[np_] = lb
                np_ += 1
                continue
            if split[node] < 0:
                if count[node] > 0:
                    leaves[nl] = node
                    leaf_lb[nl] = lb
                    nl += 1
            else:
                stack[sp] = child[node, 1]
                sp += 1
                stack[sp] = child[node, 0]
                sp += 1
    return leaves[:nl], leaf_lb[:nl], pruned[:np_], pruned_lb[:np_], lb_count


@njit(cache=True, nogil=True)
def process_leaves(leaves, leaf_lb, lo, hi, start, count, entries, words, raw, query, table, scale, bsf_sq):
    """Scan queued leaves ``lo:hi`` in order until one's bound reaches the BSF.

    Returns ``(best_sq, best_id, lb_count, computed, abandoned, stop)``;
    ``stop < hi`` means the leaf at ``stop`` had ``lb >= bsf`` and the queue
    can be given up.
    """
    best_sq = bsf_sq
    best_id = -1
    lb_count = 0
    computed = 0
    abandoned = 0
    for k in range(lo, hi):
        if leaf_lb[k] >= best_sq:
            return best_sq, best_id, lb_count, computed, abandoned, k
        leaf = leaves[k]
        s = start[leaf]
        b_sq, b_id, n_lb, n_real, n_ab = scan_leaf(entries, s, s + count[leaf], words, raw, query, table, scale, best_sq)
        lb_count += n_lb
        computed += n_real
        abandoned += n_ab
        if b_id >= 0:
            best_sq = b_sq
            best_id = b_id
    return best_sq, best_id, lb_count, computed, abandoned, hi
