"""Command-line interface.

Subcommands: detect, latency, bandwidth, contend, fit, predict, compare,
simulate, bfs.  Benchmark commands run on the current host; --machine
substitutes a machine-description file for auto-detection (validation and
defaults still apply).  Results go to stdout as one summary line per run,
and to --out as CSV or JSON rows.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import bfs as bfs_mod
from . import cohsim, fitting, model, reporting, timing, topology
from .errors import AtomicBenchError
from .harness import BenchmarkSpec, Runner, reference_latencies
from .kernels import BenchOp, default_buffer_size
from .model import CoherencyState, Level, ModelOptions, ModelQuery, Op
from .placement import Placement, PlacementLevel, PlacementState
from .topology import LocalityClass

_OP_NAMES = {
    "read": BenchOp.READ,
    "write": BenchOp.WRITE,
    "faa": BenchOp.FAA,
    "swp": BenchOp.SWP,
    "cas-succeed": BenchOp.CAS_SUCCEED,
    "cas-fail": BenchOp.CAS_FAIL,
}


def _add_shared(parser: argparse.ArgumentParser, *, op_default="cas-fail"):
    parser.add_argument("--op", choices=sorted(_OP_NAMES), default=op_default,
                        help="operation to measure")
    parser.add_argument("--state", choices=["E", "M", "S", "O", "I"],
                        default="M", help="coherency state to place")
    parser.add_argument("--placement", default="L1",
                        help="LEVEL[:OWNER[:SHARER,SHARER...]] "
                             "(level in L1/L2/L3/memory)")
    parser.add_argument("--threads", default="1",
                        help="worker count, or comma list of core ids")
    parser.add_argument("--operand-bits", type=int, choices=[64, 128],
                        default=64)
    parser.add_argument("--unaligned", action="store_true",
                        help="operands span two cache lines")
    parser.add_argument("--two-operands", action="store_true",
                        help="CAS fetches its compare value from memory too")
    parser.add_argument("--reps", type=int, default=31)
    parser.add_argument("--buffer-size", type=int, default=0,
                        help="bytes (0 = half the target level)")
    parser.add_argument("--machine", metavar="FILE",
                        help="machine description JSON (default: detect)")
    parser.add_argument("--params", metavar="FILE",
                        help="model params JSON")
    parser.add_argument("--output", choices=["csv", "json"], default="csv")
    parser.add_argument("--out", metavar="FILE", help="write rows here")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--no-verify-placement", action="store_true",
                        help="skip the latency-signature placement probe")
    parser.add_argument("--quiet", action="store_true",
                        help="suppress the pre-flight checklist")


def _load_desc(args) -> topology.MachineDescription:
    if getattr(args, "machine", None):
        return topology.load(args.machine)
    return topology.detect()


def _parse_threads(text: str, desc) -> tuple[int, ...]:
    if "," in text:
        return tuple(int(t) for t in text.split(",") if t)
    count = int(text)
    cores = desc.cores
    return tuple(cores[i % len(cores)] for i in range(count))


def _parse_placement(args, desc, measuring: int) -> Placement:
    parts = args.placement.split(":")
    level = PlacementLevel(parts[0])
    owner = int(parts[1]) if len(parts) > 1 and parts[1] else measuring
    sharers = frozenset(
        int(s) for s in parts[2].split(",") if s
    ) if len(parts) > 2 else frozenset()
    state = PlacementState(args.state)
    if state in (PlacementState.S, PlacementState.O) and not sharers:
        others = [c for c in desc.cores if c != owner]
        sharers = frozenset(others[:1]) if others else frozenset()
    return Placement(state=state, level=level, owner=owner, sharers=sharers)


def _pick_kernel(args, op: BenchOp) -> str:
    if args.operand_bits == 128:
        return "operand128"
    if args.unaligned:
        return "unaligned"
    if args.two_operands:
        return "two-op-cas"
    if op == BenchOp.CAS_SUCCEED:
        return "lat-cas-succeed"
    return "lat-chase"


def _print_row(row: reporting.ResultRow) -> None:
    scale = 1e-9 if row.unit == "bytes/s" else 1.0
    unit = "GB/s" if row.unit == "bytes/s" else row.unit
    verified = {True: "placement-verified", False: "placement-unverified",
                None: "placement-unchecked"}[row.placement_verified]
    print(
        f"{row.kernel} op={row.operation} state={row.state} "
        f"level={row.level} locality={row.locality} "
        f"threads={row.n_threads} "
        f"median={row.median * scale:.4g} {unit} "
        f"(min {row.min * scale:.4g}, max {row.max * scale:.4g}, "
        f"iqr {row.iqr * scale:.4g}, n={row.samples}) [{verified}]"
    )


def _run_bench(args, build_spec) -> int:
    desc = _load_desc(args)
    if not args.quiet:
        print("pre-flight checklist (operator-controlled interference):")
        for item in timing.preflight_checklist():
            print(f"  - {item}")
    cal = timing.calibrate()
    with Runner(desc, cal) as runner:
        threads = _parse_threads(args.threads, desc)
        spec = build_spec(desc, threads)
        reference = None
        if not args.no_verify_placement:
            reference = reference_latencies(runner)
        measurements = runner.run(spec, verify_reference=reference)
        row = reporting.row_from_measurements(measurements, desc)
        _print_row(row)
        if args.out:
            reporting.emit([row], args.output, args.out,
                           calibration=cal.to_dict(),
                           host=reporting.host_hash(desc))
            print(f"wrote {args.out}")
    return 0


def cmd_detect(args) -> int:
    desc = topology.detect()
    text = topology.to_json(desc)
    if args.save:
        with open(args.save, "w") as f:
            f.write(text)
        print(f"wrote {args.save}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_latency(args) -> int:
    op = _OP_NAMES[args.op]

    def build(desc, threads):
        placement = _parse_placement(args, desc, threads[0])
        size = args.buffer_size or default_buffer_size(
            desc, placement.level.value
        )
        size -= size % desc.line_size
        return BenchmarkSpec(
            kernel=_pick_kernel(args, op), operation=op, placement=placement,
            buffer_size=size, threads=threads,
            operand_bits=args.operand_bits, repetitions=args.reps,
            unaligned=args.unaligned, two_operands=args.two_operands,
            chunk_size=args.chunk_size, seed=args.seed,
        )

    return _run_bench(args, build)


def cmd_bandwidth(args) -> int:
    op = _OP_NAMES[args.op]

    def build(desc, threads):
        placement = _parse_placement(args, desc, threads[0])
        size = args.buffer_size or default_buffer_size(
            desc, placement.level.value
        )
        size -= size % desc.line_size
        stride = desc.line_size if args.stride == "line" \
            else args.operand_bits // 8
        return BenchmarkSpec(
            kernel="bw-sweep", operation=op, placement=placement,
            buffer_size=size, threads=threads,
            operand_bits=args.operand_bits, repetitions=args.reps,
            sweep_stride=stride, seed=args.seed,
        )

    return _run_bench(args, build)


def cmd_contend(args) -> int:
    op = _OP_NAMES[args.op]

    def build(desc, threads):
        placement = _parse_placement(args, desc, threads[0])
        return BenchmarkSpec(
            kernel="contend", operation=op, placement=placement,
            buffer_size=desc.line_size, threads=threads,
            repetitions=args.reps, duration_ns=args.duration_ms * 1_000_000,
            seed=args.seed,
        )

    return _run_bench(args, build)


def cmd_fit(args) -> int:
    desc = _load_desc(args)
    rows = []
    for path in args.input:
        rows.extend(reporting.parse(path))
    obs = reporting.observations_from_rows(rows, desc)
    report = fitting.fit(obs, desc, threshold=args.nrmse_threshold)
    if args.out:
        model.save_params(report.params, args.out)
        print(f"wrote {args.out}")
    else:
        print(json.dumps(report.params.to_dict(), indent=2))
    for key, score in sorted(report.nrmse_by_group.items()):
        mark = " FLAGGED" if key in report.flagged else ""
        print(f"nrmse {'/'.join(key)}: {score:.4f}{mark}")
    for note in report.notes:
        print(f"note: {note}")
    return 0


def cmd_predict(args) -> int:
    import os

    desc = _load_desc(args)
    if os.path.exists(args.params):
        params = model.load_params(args.params)
    else:
        params = model.builtin_params(args.params)
    sharers = tuple(
        LocalityClass(s) for s in args.sharers.split(",") if s
    ) if args.sharers else ()
    query = ModelQuery(
        op=Op(args.op), state=CoherencyState(args.state),
        level=Level(args.level), locality=LocalityClass(args.locality),
        sharers=sharers, operand_bits=args.operand_bits,
        pattern=args.pattern,
    )
    options = ModelOptions(multi_hop=args.multi_hop)
    if args.bandwidth:
        bw = model.bandwidth(query, params, desc, options)
        print(f"predicted bandwidth: {bw / 1e9:.4f} GB/s ({bw:.6g} bytes/s)")
    terms = model.latency_breakdown(query, params, desc, options)
    total = sum(ns for _, ns in terms)
    print(f"predicted latency: {total:.4f} ns")
    for label, ns in terms:
        print(f"  {label}: {ns:.4f} ns")
    return 0


def cmd_compare(args) -> int:
    desc = _load_desc(args)
    params = model.load_params(args.params)
    rows = []
    for path in args.input:
        rows.extend(reporting.parse(path))
    report = reporting.compare(rows, params, desc,
                               threshold=args.nrmse_threshold)
    for g in report.groups:
        mark = " FLAGGED" if g.key in report.flagged else ""
        print(
            f"{'/'.join(str(k) for k in g.key)}: predicted {g.predicted:.4g} "
            f"measured {g.measured_median:.4g} nrmse {g.nrmse:.4f} "
            f"(n={g.samples}){mark}"
        )
    print(f"{len(report.flagged)} group(s) above the "
          f"{report.threshold:.0%} threshold")
    return 0


def cmd_simulate(args) -> int:
    config = cohsim.SimConfig(
        protocol=cohsim.Protocol(args.protocol),
        dies=args.dies, cores_per_die=args.cores_per_die,
        directory_capacity=None if args.directory_capacity < 0
        else args.directory_capacity,
    )
    trace = cohsim.load_trace(args.trace)
    stats = cohsim.replay(trace, config)
    print(json.dumps(stats.to_dict(), indent=2))
    return 0


def cmd_bfs(args) -> int:
    graph = bfs_mod.kronecker(args.scale, args.edgefactor, args.seed)
    tree, stats = bfs_mod.bfs(graph, args.root, claim=args.claim,
                              workers=args.workers)
    verdict = bfs_mod.validate(graph, args.root, tree)
    result = {
        "scale": args.scale,
        "edgefactor": args.edgefactor,
        "seed": args.seed,
        "claim": stats.claim,
        "workers": stats.workers,
        "levels": stats.levels,
        "edges_examined": stats.edges_examined,
        "claims_won": stats.claims_won,
        "claims_lost": stats.claims_lost,
        "repairs": stats.repairs,
        "elapsed_s": stats.elapsed_s,
        "teps": stats.teps,
        "valid": verdict.valid,
        "violations": verdict.violations,
    }
    print(f"bfs claim={stats.claim} workers={stats.workers} "
          f"teps={stats.teps:.4g} (directed edge examinations per second) "
          f"won={stats.claims_won} lost={stats.claims_lost} "
          f"{'VALID' if verdict.valid else 'INVALID'}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(result, f, indent=2)
            f.write("\n")
        print(f"wrote {args.out}")
    if not verdict.valid:
        for v in verdict.violations:
            print(f"violation: {v}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atomicbench",
        description="Latency/bandwidth benchmarks, an analytical model, and "
                    "a coherence simulator for atomic memory operations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="print the detected machine description")
    p.add_argument("--save", metavar="FILE")
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("latency", help="serialized per-operation latency")
    _add_shared(p)
    p.add_argument("--chunk-size", type=int, default=4096,
                   help="chunk size for successful-CAS walks")
    p.set_defaults(fn=cmd_latency)

    p = sub.add_parser("bandwidth", help="sequential sweep bandwidth")
    _add_shared(p, op_default="faa")
    p.add_argument("--stride", choices=["word", "line"], default="word")
    p.set_defaults(fn=cmd_bandwidth)

    p = sub.add_parser("contend", help="shared-line contention throughput")
    _add_shared(p, op_default="faa")
    p.add_argument("--duration-ms", type=int, default=20)
    p.set_defaults(fn=cmd_contend)

    p = sub.add_parser("fit", help="fit model parameters from result files")
    p.add_argument("input", nargs="+", metavar="RESULTS")
    p.add_argument("--machine", metavar="FILE")
    p.add_argument("--out", metavar="FILE")
    p.add_argument("--nrmse-threshold", type=float,
                   default=fitting.DEFAULT_NRMSE_THRESHOLD)
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("predict", help="model prediction with term breakdown")
    p.add_argument("--machine", metavar="FILE")
    p.add_argument("--params", metavar="FILE", required=True)
    p.add_argument("--op", choices=[o.value for o in Op], default="CAS")
    p.add_argument("--state", choices=["E", "M", "S", "O"], default="E")
    p.add_argument("--level", choices=["L1", "L2", "L3", "memory"],
                   default="L1")
    p.add_argument("--locality",
                   choices=[loc.value for loc in LocalityClass],
                   default="same-core")
    p.add_argument("--sharers", default="",
                   help="comma list of sharer localities")
    p.add_argument("--operand-bits", type=int, default=64)
    p.add_argument("--pattern", choices=model.PATTERNS,
                   default="one-op-per-line")
    p.add_argument("--bandwidth", action="store_true")
    p.add_argument("--multi-hop", action="store_true",
                   help="charge two hops for cross-socket traffic")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("compare", help="model vs measured result files")
    p.add_argument("input", nargs="+", metavar="RESULTS")
    p.add_argument("--machine", metavar="FILE")
    p.add_argument("--params", metavar="FILE", required=True)
    p.add_argument("--nrmse-threshold", type=float,
                   default=fitting.DEFAULT_NRMSE_THRESHOLD)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("simulate", help="replay a trace through the "
                                        "coherence simulator")
    p.add_argument("--protocol", choices=[pr.value for pr in cohsim.Protocol],
                   default="MOESI")
    p.add_argument("--dies", type=int, default=2)
    p.add_argument("--cores-per-die", type=int, default=2)
    p.add_argument("--directory-capacity", type=int, default=64,
                   help="filter entries (-1 = unbounded oracle)")
    p.add_argument("--trace", required=True, metavar="FILE")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("bfs", help="parallel BFS with atomic parent claims")
    p.add_argument("--scale", type=int, default=16)
    p.add_argument("--edgefactor", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--claim", choices=bfs_mod.CLAIMS, default="cas")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--root", type=int, default=0)
    p.add_argument("--out", metavar="FILE")
    p.set_defaults(fn=cmd_bfs)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except AtomicBenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
