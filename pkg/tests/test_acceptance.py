"""Acceptance criteria, one test per criterion.

Each test prints a single ``CRITERION <k> PASS|FAIL|SKIP`` line with the
measured figures; the lines are also repeated in pytest's terminal summary.
"""

import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import CRITERIA_LINES
from isaxsearch import (
    IndexConfig,
    build_breakpoints,
    build_index,
    isax_from_paa,
    lower_bound_distance,
    paa,
    random_walks,
    search_flat,
    search_scan,
    search_tree,
)

TESTS = Path(__file__).parent
N_100K = 100_000
N_1M = 1_000_000


def _line(text):
    CRITERIA_LINES.append(text)
    print("\n" + text)


def _verdict(k, ok, detail):
    _line(f"CRITERION {k} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def _workers():
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1


def _physical_cores():
    try:
        import psutil
    except ImportError:
        return os.cpu_count() or 1
    return psutil.cpu_count(logical=False) or 1


@pytest.fixture(scope="module")
def walk_1m():
    return random_walks(N_1M, 256, seed=2024)


def test_criterion_1_oracle_exactness(walk_100k, index_100k):
    t0 = time.perf_counter()
    queries = random_walks(200, 256, seed=101)
    threads = _workers()
    tree_ok = flat_ok = 0
    worst = 0.0
    for q in queries:
        ref = search_scan(q, walk_100k).distance
        for engine in ("tree", "flat"):
            if engine == "tree":
                d = search_tree(q, index_100k, walk_100k, num_workers=threads).distance
            else:
                d = search_flat(q, index_100k.sax, walk_100k, index_100k, num_workers=threads).distance
            rel = abs(d - ref) / ref if ref else abs(d)
            worst = max(worst, rel)
            if rel <= 1e-4:
                if engine == "tree":
                    tree_ok += 1
                else:
                    flat_ok += 1
    elapsed = time.perf_counter() - t0
    _verdict(1, tree_ok == 200 and flat_ok == 200 and elapsed < 120,
             f"tree {tree_ok}/200, flat {flat_ok}/200 within rel 1e-4 (worst {worst:.2e}); {elapsed:.1f}s < 120s")


def test_criterion_2_admissibility():
    table = build_breakpoints(8)
    series = random_walks(10_000, 256, seed=201)
    queries = random_walks(10_000, 256, seed=202)
    ed = np.sqrt(((series.astype(np.float64) - queries.astype(np.float64)) ** 2).sum(axis=1))
    violations = {}
    tightest = math.inf
    for bits in (1, 2, 4, 8):
        bad = 0
        for s, q, d in zip(series, queries, ed):
            lb = lower_bound_distance(paa(q, 16), isax_from_paa(paa(s, 16), [bits] * 16, table), table, 256)
            bad += int(lb > d + 1e-6)
            tightest = min(tightest, d - lb)
        violations[bits] = bad
    _verdict(2, not any(violations.values()),
             f"violations per cardinality {violations} over 10000 pairs; min slack {tightest:.3g}")


def test_criterion_3_build_determinism(walk_100k, tmp_path):
    digests = {}
    for threads in (1, 2, 8):
        path = tmp_path / f"t{threads}.idx"
        build_index(walk_100k, IndexConfig(n=256, num_workers=threads)).save(path)
        digests[threads] = path.read_bytes()
    same = digests[1] == digests[2] == digests[8]
    _verdict(3, same, f"index files for threads 1/2/8 {'byte-identical' if same else 'differ'} ({len(digests[1])} bytes)")


@pytest.mark.slow
def test_criterion_4_build_scaling(walk_1m):
    cores = _physical_cores()
    if cores < 4:
        _line(f"CRITERION 4 SKIP: needs >= 4 physical cores, this machine has {cores}")
        pytest.skip(f"build scaling needs >= 4 physical cores (have {cores})")
    build_index(walk_1m[:10_000], IndexConfig(n=256, num_workers=4))  # warm the JIT cache

    def best_of(threads, runs=3):
        times = []
        for _ in range(runs):
            idx = build_index(walk_1m, IndexConfig(n=256, num_workers=threads))
            times.append(idx.timings["summarize"] + idx.timings["build"])
        return min(times)

    one, four = best_of(1), best_of(4)
    _verdict(4, four <= 0.6 * one, f"1 thread {one:.2f}s, 4 threads {four:.2f}s, ratio {four / one:.2f} (need <= 0.60)")


def test_criterion_5_pruning(walk_100k, index_100k):
    queries = random_walks(200, 256, seed=501)
    real = [search_tree(q, index_100k, walk_100k).stats.real_distances for q in queries]
    mean = float(np.mean(real))
    frac = mean / N_100K
    _verdict(5, frac <= 0.25, f"mean real distances per tree query {mean:.1f} = {100 * frac:.2f}% of {N_100K} (limit 25%)")


@pytest.mark.slow
def test_criterion_6_engine_ordering(walk_1m):
    threads = _workers()
    index = build_index(walk_1m, IndexConfig(n=256, num_workers=threads))
    queries = random_walks(100, 256, seed=601)
    engines = {
        "tree": lambda q: search_tree(q, index, walk_1m, num_workers=threads),
        "flat": lambda q: search_flat(q, index.sax, walk_1m, index, num_workers=threads),
        "scan": lambda q: search_scan(q, walk_1m),
    }
    means = {}
    for name, run in engines.items():
        run(queries[0])  # warm-up
        t = []
        for q in queries:
            t0 = time.perf_counter()
            run(q)
            t.append(time.perf_counter() - t0)
        means[name] = float(np.mean(t))
    ok = means["tree"] < means["flat"] < means["scan"]
    detail = ", ".join(f"{k} {1e3 * v:.2f} ms" for k, v in means.items())
    _verdict(6, ok, f"100-query mean latency on 1M series: {detail} (need tree < flat < scan)")


def test_criterion_7_invariant_suites():
    suites = ["test_core.py", "test_index.py", "test_query.py", "test_io_cli.py"]
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *[str(TESTS / s) for s in suites]],
        capture_output=True, text=True, cwd=TESTS.parent,
    )
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    _verdict(7, proc.returncode == 0, f"invariant suites ({', '.join(suites)}): {tail}")
