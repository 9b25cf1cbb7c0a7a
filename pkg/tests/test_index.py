import logging

import numpy as np
import pytest

from isaxsearch import (
    IndexConfig,
    IndexNode,
    IsaxWord,
    TreeIndex,
    build_index,
    build_stage,
    promote_cardinality_check,
    split_leaf,
    summarize_stage,
)
from isaxsearch.errors import ConfigurationError, FormatError, UsageError
from isaxsearch.index import BufferPart, IsaxBufferSet


def _buffers_from_words(words, max_bits):
    """Single-part buffer set over pre-computed max-cardinality words."""
    sax = np.asarray(words, dtype=np.uint8)
    keys = np.array([int("".join(str(s >> (max_bits - 1)) for s in row), 2) for row in sax], dtype=np.int64)
    order = np.argsort(keys, kind="stable")
    return IsaxBufferSet([BufferPart(keys[order], np.arange(len(sax), dtype=np.int64)[order])]), sax


# -- config ---------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [dict(n=100, w=16), dict(n=64, leaf_capacity=1), dict(n=64, num_workers=0), dict(n=64, max_bits=0), dict(n=64, max_bits=17)],
)
def test_config_rejects(kwargs):
    with pytest.raises(ConfigurationError):
        IndexConfig(**kwargs)


def test_config_defaults():
    cfg = IndexConfig(n=256)
    assert (cfg.w, cfg.leaf_capacity, cfg.max_bits, cfg.chunk_size) == (16, 1024, 8, 4096)
    assert cfg.num_workers >= 1


# -- stage 1 --------------------------------------------------------------------------


def test_summarize_single_series(small_raw):
    cfg = IndexConfig(n=64, w=8, num_workers=3, chunk_size=1)
    buffers, sax = summarize_stage(small_raw[:1], cfg)
    assert len(buffers) == 1
    (key,) = buffers.keys()
    word = IsaxWord(tuple(int(s) for s in sax[0]), (8,) * 8)
    assert key == word.root_key()
    assert [b.tolist() for b in buffers.buffer(int(key))] == [[0], [], []]


def test_summarize_counts_and_placement(small_raw):
    cfg = IndexConfig(n=64, w=8, num_workers=4, chunk_size=333)
    buffers, sax = summarize_stage(small_raw, cfg)
    assert len(buffers) == len(small_raw) == len(sax)
    seen = []
    for key in buffers.keys():
        for part in buffers.buffer(int(key)):
            for sid in part:
                assert IsaxWord(tuple(int(s) for s in sax[sid]), (8,) * 8).root_key() == key
            seen.extend(part.tolist())
    assert sorted(seen) == list(range(len(small_raw)))


def test_summarize_identical_series_share_buffer(small_raw):
    raw = np.stack([small_raw[5], small_raw[5]])
    buffers, sax = summarize_stage(raw, IndexConfig(n=64, w=8, num_workers=1))
    assert len(buffers.keys()) == 1
    np.testing.assert_array_equal(sax[0], sax[1])


def test_summarize_matches_public_isax(small_raw):
    from isaxsearch import build_breakpoints, isax_from_paa, paa

    cfg = IndexConfig(n=64, w=8, num_workers=1)
    _, sax = summarize_stage(small_raw[:50], cfg)
    table = build_breakpoints(8)
    for row, s in zip(small_raw[:50], sax):
        assert isax_from_paa(paa(row, 8), [8] * 8, table).symbols == tuple(int(v) for v in s)


# -- stage 2 ------------------------------------------------------------------------


def test_build_no_split_under_capacity():
    words = [[0, 0], [1, 1], [0, 1]]  # max_bits=2, all first bits 0
    cfg = IndexConfig(n=2, w=2, leaf_capacity=3, max_bits=2, num_workers=1)
    buffers, sax = _buffers_from_words(words, 2)
    root = build_stage(buffers, sax, cfg).to_node()
    assert list(root.children) == [0]
    leaf = root.children[0]
    assert leaf.kind == "leaf" and [e[0] for e in leaf.entries] == [0, 1, 2]


def test_build_one_split_hand_simulated():
    # at 1 bit per segment all three share key 00; next bits: seg0 {0,1,1}, seg1 {0,0,1}
    # both imbalances are 1, so segment 0 wins the tie and leaves hold {A} and {B, C}
    words = [[0, 0], [1, 0], [1, 1]]
    cfg = IndexConfig(n=2, w=2, leaf_capacity=2, max_bits=2, num_workers=1)
    buffers, sax = _buffers_from_words(words, 2)
    root = build_stage(buffers, sax, cfg).to_node()
    inner = root.children[0]
    assert inner.kind == "inner" and inner.split_segment == 0
    zero, one = inner.children
    assert [e[0] for e in zero.entries] == [0]
    assert [e[0] for e in one.entries] == [1, 2]
    assert zero.word == IsaxWord((0, 0), (2, 1), 2)
    assert one.word == IsaxWord((1, 0), (2, 1), 2)


def test_build_overflow_leaf(caplog):
    words = [[1, 1]] * 5
    cfg = IndexConfig(n=2, w=2, leaf_capacity=2, max_bits=2, num_workers=1)
    buffers, sax = _buffers_from_words(words, 2)
    with caplog.at_level(logging.WARNING):
        index = build_stage(buffers, sax, cfg)
    leaves = [n for n in index.to_node().leaves() if n.entries]
    assert len(leaves) == 1 and leaves[0].overflow and len(leaves[0].entries) == 5
    assert "exceed capacity" in caplog.text


# -- split rule -----------------------------------------------------------------------


def _leaf(words, bits, symbols=None, max_bits=2):
    return IndexNode(
        "leaf",
        IsaxWord(tuple(symbols or [0] * len(bits)), tuple(bits), max_bits),
        entries=[(i, IsaxWord(tuple(w), (max_bits,) * len(w), max_bits)) for i, w in enumerate(words)],
    )


def test_split_most_balanced_segment():
    # next bits on seg0 {0,0,1,1} (imbalance 0), on seg1 {0,0,0,1} (imbalance 2)
    leaf = _leaf([[0, 0], [0, 0], [1, 0], [1, 1]], [1, 1])
    node = split_leaf(leaf, IndexConfig(n=2, w=2, leaf_capacity=3, max_bits=2))
    assert node.kind == "inner" and node.split_segment == 0
    assert [len(c.entries) for c in node.children] == [2, 2]
    for child in node.children:
        for _, word in child.entries:
            assert promote_cardinality_check(child.word, word)


def test_split_tie_takes_lower_segment():
    leaf = _leaf([[0, 0], [1, 1], [0, 1], [1, 0]], [1, 1])
    node = split_leaf(leaf, IndexConfig(n=2, w=2, leaf_capacity=3, max_bits=2))
    assert node.split_segment == 0


def test_split_skips_saturated_segment():
    leaf = _leaf([[1, 0], [1, 0], [1, 1], [1, 1]], [2, 1], symbols=[1, 0])
    node = split_leaf(leaf, IndexConfig(n=2, w=2, leaf_capacity=3, max_bits=2))
    assert node.split_segment == 1


def test_split_all_saturated_gives_overflow(caplog):
    leaf = _leaf([[3, 3]] * 4, [2, 2], symbols=[3, 3])
    with caplog.at_level(logging.WARNING):
        node = split_leaf(leaf, IndexConfig(n=2, w=2, leaf_capacity=3, max_bits=2))
    assert node is leaf and node.overflow and node.kind == "leaf"
    assert "overflow" in caplog.text


def test_split_requires_overfull_leaf():
    with pytest.raises(UsageError):
        split_leaf(_leaf([[0, 0]], [1, 1]), IndexConfig(n=2, w=2, leaf_capacity=3, max_bits=2))


# -- whole-tree invariants -------------------------------------------------------------


def _walk(node):
    yield node
    kids = node.children.values() if node.kind == "root" else (node.children or [])
    for c in kids:
        yield from _walk(c)


def test_tree_invariants(small_index, small_cfg, small_raw):
    root = small_index.to_node()
    ids = []
    for node in _walk(root):
        if node.kind == "leaf":
            ids.extend(sid for sid, _ in node.entries)
            for _, word in node.entries:
                assert promote_cardinality_check(node.word, word)
            assert len(node.entries) <= small_cfg.leaf_capacity or node.overflow
        elif node.kind == "inner":
            sg = node.split_segment
            for side, c in enumerate(node.children):
                diff = [i for i in range(small_cfg.w) if (c.word.symbols[i], c.word.bits[i]) != (node.word.symbols[i], node.word.bits[i])]
                assert diff == [sg]
                assert c.word.bits[sg] == node.word.bits[sg] + 1
                assert c.word.symbols[sg] == node.word.symbols[sg] * 2 + side
    assert len(ids) == len(small_raw)
    assert len(set(ids)) == len(ids)
    assert any(n.kind == "inner" for n in _walk(root))


def test_root_children_keyed_by_first_bits(small_index):
    for key, sub in small_index.to_node().children.items():
        assert sub.word.bits == (1,) * 8
        assert sub.word.root_key() == key


@pytest.mark.parametrize("workers,chunk", [(2, 100), (8, 777), (3, 6000)])
def test_build_independent_of_workers_and_chunks(small_raw, small_cfg, small_index, workers, chunk):
    cfg = IndexConfig(n=64, w=8, leaf_capacity=16, max_bits=8, num_workers=workers, chunk_size=chunk)
    assert build_index(small_raw, cfg).to_bytes() == small_index.to_bytes()


# -- serialization -------------------------------------------------------------------


def test_serialization_round_trip(small_index, tmp_path):
    path = tmp_path / "idx.bin"
    small_index.save(path)
    loaded = TreeIndex.load(path)
    assert loaded.to_bytes() == small_index.to_bytes()
    np.testing.assert_array_equal(loaded.sax, small_index.sax)
    for name in ("root_keys", "root_nodes", "bits", "syms", "split", "child", "start", "count", "overflow", "entries"):
        np.testing.assert_array_equal(getattr(loaded, name), getattr(small_index, name), err_msg=name)


def test_serialization_header(small_index):
    import struct

    data = small_index.to_bytes()
    magic, version, n, w, cap, max_bits, count = struct.unpack_from("<8sHIHIBQ", data)
    assert (magic, version, n, w, cap, max_bits, count) == (b"ISAXTREE", 1, 64, 8, 16, 8, 6000)
    assert data[struct.calcsize("<8sHIHIBQ") :][:32] == small_index.table.digest()


@pytest.mark.parametrize("mutate", ["magic", "truncate", "trailing", "hash"])
def test_serialization_rejects_corruption(small_index, mutate):
    data = bytearray(small_index.to_bytes())
    if mutate == "magic":
        data[0:8] = b"NOTANIDX"
    elif mutate == "truncate":
        data = data[: len(data) // 2]
    elif mutate == "trailing":
        data += b"\x00"
    else:
        data[30] ^= 0xFF
    with pytest.raises(FormatError):
        TreeIndex.from_bytes(bytes(data))


def test_sixteen_bit_cardinality_round_trip(small_raw):
    cfg = IndexConfig(n=64, w=4, leaf_capacity=8, max_bits=12, num_workers=2)
    index = build_index(small_raw[:2000], cfg)
    assert index.sax.dtype == np.uint16 and index.sax.max() > 255
    assert TreeIndex.from_bytes(index.to_bytes()).to_bytes() == index.to_bytes()
