"""Command-line driver: ``generate``, ``build`` and ``query``."""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time

from .errors import ConfigurationError, FormatError, UsageError
from .index import IndexConfig, TreeIndex, build_index
from .io import generate, read_dataset
from .query import search_flat, search_scan, search_tree
from .report import format_record, latency_summary, render_figures

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_VERIFY = 4

ENGINES = ("tree", "flat", "scan")
VERIFY_RTOL = 1e-4


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="isaxsearch", description="Parallel iSAX index for exact 1-NN data-series search")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a z-normalized random-walk dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--length", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    b = sub.add_parser("build", help="build and serialize an index")
    b.add_argument("--dataset", required=True)
    b.add_argument("--count", type=int, required=True)
    b.add_argument("--length", type=int, required=True)
    b.add_argument("--segments", type=int, default=16)
    b.add_argument("--leaf-capacity", type=int, default=1024)
    b.add_argument("--max-bits", type=int, default=8)
    b.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    b.add_argument("--chunk-size", type=int, default=4096)
    b.add_argument("--out", required=True)
    b.add_argument("--report", help="also write the build record to this file")

    q = sub.add_parser("query", help="answer exact 1-NN queries")
    q.add_argument("--index", required=True)
    q.add_argument("--dataset", required=True)
    q.add_argument("--queries", required=True)
    q.add_argument("--engine", choices=ENGINES, default="tree")
    q.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    q.add_argument("--queues", type=int, default=None, help="priority queues for the tree engine (default: threads)")
    q.add_argument("--count", type=int, help="expected series count (checked against the index)")
    q.add_argument("--length", type=int, help="expected series length (checked against the index)")
    q.add_argument("--query-count", type=int, help="expected number of queries in the queries file")
    q.add_argument("--verify", action="store_true", help="cross-check every answer against the sequential scan")
    q.add_argument("--report", help="write records here and figures alongside")
    return ap


def _emit(lines: list[str], report: str | None) -> None:
    for line in lines:
        print(line)
    if report:
        with open(report, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def cmd_generate(args) -> int:
    t0 = time.perf_counter()
    generate(args.out, args.count, args.length, args.seed)
    print(format_record("generate", path=args.out, count=args.count, length=args.length, seed=args.seed,
                        bytes=args.count * args.length * 4, seconds=time.perf_counter() - t0))
    return EXIT_OK


def cmd_build(args) -> int:
    cfg = IndexConfig(
        n=args.length,
        w=args.segments,
        leaf_capacity=args.leaf_capacity,
        max_bits=args.max_bits,
        num_workers=args.threads,
        chunk_size=args.chunk_size,
    )
    if args.count <= 0:
        raise FormatError("empty collection: --count must be positive")
    raw = read_dataset(args.dataset, cfg.n, args.count)
    index = build_index(raw, cfg)
    t0 = time.perf_counter()
    index.save(args.out)
    write_s = time.perf_counter() - t0
    leaves = index.leaf_ids
    _emit([format_record(
        "build",
        dataset=args.dataset,
        index=args.out,
        count=index.size,
        length=cfg.n,
        segments=cfg.w,
        leaf_capacity=cfg.leaf_capacity,
        max_bits=cfg.max_bits,
        threads=cfg.num_workers,
        chunk_size=cfg.chunk_size,
        stage1_s=index.timings["summarize"],
        stage2_s=index.timings["build"],
        build_s=index.timings["summarize"] + index.timings["build"],
        write_s=write_s,
        subtrees=len(index.root_keys),
        nodes=index.num_nodes,
        leaves=len(leaves),
        overflow_leaves=int(index.overflow.sum()),
    )], args.report)
    return EXIT_OK


def cmd_query(args) -> int:
    index = TreeIndex.load(args.index)
    if args.length is not None and args.length != index.n:
        raise FormatError(f"--length {args.length} does not match index series length {index.n}")
    if args.count is not None and args.count != index.size:
        raise FormatError(f"--count {args.count} does not match index series count {index.size}")
    if args.threads < 1 or (args.queues is not None and args.queues < 1):
        raise UsageError("--threads and --queues must be positive")
    raw = read_dataset(args.dataset, index.n, index.size)
    queries = read_dataset(args.queries, index.n, args.query_count)

    lines, rows = [], []
    failures = 0
    for qi, q in enumerate(queries):
        t0 = time.perf_counter()
        if args.engine == "tree":
            res = search_tree(q, index, raw, num_workers=args.threads, num_queues=args.queues)
        elif args.engine == "flat":
            res = search_flat(q, index.sax, raw, index, num_workers=args.threads)
        else:
            res = search_scan(q, raw)
        latency = time.perf_counter() - t0
        st = res.stats
        fields = dict(
            query=qi,
            engine=args.engine,
            id=res.series_id,
            distance=res.distance,
            latency_s=latency,
            lb_computations=st.lb_computations,
            real_distances=st.real_distances,
            abandoned=st.abandoned,
            nodes_pruned=st.nodes_pruned,
            leaves_pruned=st.leaves_pruned,
            candidates=st.candidates,
            queue_abandonments=st.queue_abandonments,
        )
        fields.update({f"{k}_s": v for k, v in st.timings.items()})
        if args.verify:
            ref = search_scan(q, raw)
            ok = math.isclose(res.distance, ref.distance, rel_tol=VERIFY_RTOL, abs_tol=1e-9)
            failures += not ok
            fields.update(verified=int(ok), oracle_id=ref.series_id, oracle_distance=ref.distance)
        lines.append(format_record("query", **fields))
        rows.append({"latency_s": latency, "timings": st.timings})

    summary = dict(engine=args.engine, queries=len(rows), threads=args.threads,
                   **latency_summary([r["latency_s"] for r in rows]))
    if args.verify:
        summary.update(verified=len(rows) - failures, verify_failures=failures)
    lines.append(format_record("summary", **summary))
    _emit(lines, args.report)
    if args.report and rows:
        for name, path in render_figures(args.report, args.engine, rows).items():
            print(format_record("figure", figure=name, path=str(path)))
    return EXIT_VERIFY if failures else EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors and --help this way
        return EXIT_USAGE if exc.code else EXIT_OK
    handler = {"generate": cmd_generate, "build": cmd_build, "query": cmd_query}[args.command]
    try:
        return handler(args)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
