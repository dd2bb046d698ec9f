"""Four-phase measurement engine: preparation, synchronization,
measurement, result collection.

Every repetition re-establishes the coherency placement (the measured
operations themselves destroy it), then all workers arm themselves with a
shared future deadline on the calibrated counter and spin to it inside the
native kernel, which avoids OS wake-up jitter.  A worker that enters its
kernel after the deadline voids the repetition; the run is retried a few
times before surfacing RendezvousTimeout.  Timestamps are exchanged only
after every worker has stopped, and the total is max(t_end) - min(t_start)
with the timer's read overhead subtracted once.

Workers never migrate: pinning failures are fatal for the run.
"""

from __future__ import annotations

import hashlib
import statistics
import threading
from dataclasses import dataclass, replace

from . import kernels, timing, topology
from .errors import (
    HeterogeneousSpecs,
    RendezvousTimeout,
    ValidationError,
)
from .kernels import BenchOp, KernelResult
from .placement import (
    Placement,
    PlacementLevel,
    PlacementState,
    Preparer,
    alloc_buffer,
    probe_region_bytes,
)
from .timing import TimerCalibration
from .topology import MachineDescription
from .workers import WorkerPool

DEFAULT_REPETITIONS = 31
DEFAULT_WARMUPS = 3
DEFAULT_RENDEZVOUS_NS = 5_000_000
# a lone worker has nothing to synchronize with; a short busy-spin window
# covers dispatch latency without surrendering the core (sleeping between
# placement and measurement lets the OS evict the placed lines)
SINGLE_WORKER_ARMING_NS = 1_000_000
MAX_RENDEZVOUS_RETRIES = 3
MIN_CONTEND_DURATION_NS = 10_000_000

_LATENCY_KERNELS = ("lat-chase", "lat-cas-succeed", "operand128",
                    "unaligned", "two-op-cas")

_KERNEL_OPS = {
    "lat-chase": {BenchOp.READ, BenchOp.FAA, BenchOp.SWP, BenchOp.CAS_FAIL},
    "lat-cas-succeed": {BenchOp.CAS_SUCCEED},
    "operand128": {BenchOp.CAS_SUCCEED, BenchOp.CAS_FAIL},
    "unaligned": {BenchOp.READ, BenchOp.FAA, BenchOp.SWP, BenchOp.CAS_FAIL},
    "two-op-cas": {BenchOp.CAS_FAIL},
    "bw-sweep": set(BenchOp),
    "contend": {BenchOp.READ, BenchOp.WRITE, BenchOp.FAA, BenchOp.SWP,
                BenchOp.CAS_SUCCEED},
}


@dataclass(frozen=True)
class BenchmarkSpec:
    kernel: str
    operation: BenchOp
    placement: Placement
    buffer_size: int
    threads: tuple[int, ...]
    operand_bits: int = 64
    repetitions: int = DEFAULT_REPETITIONS
    min_stride: int = 0  # 0 = host default
    unaligned: bool = False
    two_operands: bool = False
    sweep_stride: int = 0  # 0 = operand size
    duration_ns: int = 20_000_000
    chunk_size: int = 4096
    seed: int = 0
    hugepages: bool = False

    def resolve(self, desc: MachineDescription) -> "BenchmarkSpec":
        """Fill host-dependent defaults and validate against the machine."""
        spec = self
        if spec.min_stride == 0:
            spec = replace(spec, min_stride=kernels.default_min_stride(desc))
        if spec.sweep_stride == 0:
            spec = replace(spec, sweep_stride=spec.operand_bits // 8)
        spec.validate(desc)
        return spec

    def validate(self, desc: MachineDescription) -> None:
        if self.kernel not in kernels.KERNEL_IDS:
            raise ValidationError(f"unknown kernel {self.kernel!r}")
        if self.operation not in _KERNEL_OPS[self.kernel]:
            raise ValidationError(
                f"operation {self.operation.value} not valid for "
                f"kernel {self.kernel}"
            )
        if self.repetitions < 1:
            raise ValidationError("repetitions must be >= 1")
        if not self.threads:
            raise ValidationError("at least one measuring thread required")
        if any(t not in desc.cores for t in self.threads):
            raise ValidationError("measuring threads must be machine cores")
        if self.min_stride < desc.line_size:
            raise ValidationError("min_stride must be at least one line")
        if self.operand_bits not in (64, 128):
            raise ValidationError("operand_bits must be 64 or 128")
        if self.operand_bits == 128:
            if self.operation not in (BenchOp.CAS_SUCCEED, BenchOp.CAS_FAIL):
                raise ValidationError("128-bit operands require CAS")
            if self.unaligned:
                raise ValidationError("16-byte CAS must be aligned")
        if self.kernel == "operand128" and self.operand_bits != 128:
            raise ValidationError("operand128 kernel needs operand_bits=128")
        if self.kernel == "unaligned" and not self.unaligned:
            raise ValidationError("unaligned kernel needs unaligned=True")
        if self.kernel == "two-op-cas" and not self.two_operands:
            raise ValidationError("two-op-cas kernel needs two_operands=True")
        if self.two_operands and self.operation != BenchOp.CAS_FAIL:
            raise ValidationError("two-operand mode is a CAS-fail variant")
        if self.buffer_size <= 0 or self.buffer_size % desc.line_size:
            raise ValidationError("buffer_size must be a positive line multiple")
        if self.kernel in _LATENCY_KERNELS and len(self.threads) != 1:
            raise ValidationError("latency kernels use exactly one thread")
        if self.kernel == "bw-sweep":
            if len(self.threads) != 1:
                raise ValidationError("bandwidth sweeps use exactly one thread")
            if self.sweep_stride not in (self.operand_bits // 8, desc.line_size):
                raise ValidationError(
                    "sweep stride must be the operand size or the line size"
                )
        if self.kernel == "contend" and self.duration_ns < MIN_CONTEND_DURATION_NS:
            raise ValidationError("contention runs need >= 10 ms duration")
        if self.kernel == "lat-cas-succeed":
            if self.chunk_size < self.min_stride:
                raise ValidationError("chunk_size must be >= min_stride")
            if self.buffer_size // self.chunk_size < 2:
                raise ValidationError("need at least 2 chunks")
        self.placement.validate(desc)

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel,
            "operation": self.operation.value,
            "placement": self.placement.to_dict(),
            "buffer_size": self.buffer_size,
            "threads": list(self.threads),
            "operand_bits": self.operand_bits,
            "repetitions": self.repetitions,
            "min_stride": self.min_stride,
            "unaligned": self.unaligned,
            "two_operands": self.two_operands,
            "sweep_stride": self.sweep_stride,
            "duration_ns": self.duration_ns,
            "chunk_size": self.chunk_size,
            "seed": self.seed,
            "hugepages": self.hugepages,
        }

    @property
    def unit(self) -> str:
        return "ns/op" if self.kernel in _LATENCY_KERNELS else "bytes/s"


@dataclass(frozen=True)
class Sample:
    thread: int
    t_enter: int
    t_start: int
    t_end: int
    ops: int
    bytes_counted: int
    successes: int
    failures: int


@dataclass
class Measurement:
    spec: BenchmarkSpec
    samples: list[Sample]
    total_ns: float
    derived: dict
    metadata: dict

    @property
    def value(self) -> float:
        return next(iter(self.derived.values()))


@dataclass(frozen=True)
class Summary:
    unit: str
    median: float
    min: float
    max: float
    iqr: float
    count: int


def host_hash(desc: MachineDescription) -> str:
    return hashlib.sha256(topology.to_json(desc).encode()).hexdigest()[:16]


def summarize(measurements) -> Summary:
    """Median/min/max/IQR of the derived metric over homogeneous specs."""
    ms = list(measurements)
    if not ms:
        raise HeterogeneousSpecs("no measurements to summarize")
    first = ms[0].spec
    if any(m.spec != first for m in ms):
        raise HeterogeneousSpecs("measurements come from different specs")
    values = sorted(m.value for m in ms)
    if len(values) >= 4:
        q = statistics.quantiles(values, n=4)
        iqr = q[2] - q[0]
    else:
        iqr = values[-1] - values[0]
    return Summary(
        unit=first.unit,
        median=float(statistics.median(values)),
        min=values[0],
        max=values[-1],
        iqr=float(iqr),
        count=len(values),
    )


class Runner:
    """Owns the pinned worker pool and per-run buffers."""

    def __init__(self, desc: MachineDescription, cal: TimerCalibration,
                 pool: WorkerPool | None = None):
        self.desc = desc
        self.cal = cal
        self.pool = pool or WorkerPool(desc.cores)
        self._own_pool = pool is None
        self.preparer = Preparer(self.pool, desc)
        self._governor = timing.governor_state()
        # one run at a time: concurrent runs would share eviction buffers
        # and fight over cores mid-measurement
        self._run_lock = threading.Lock()

    def close(self) -> None:
        if self._own_pool:
            self.pool.close()

    def __enter__(self) -> "Runner":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- internal ---------------------------------------------------------

    def _ticks(self, ns: float) -> int:
        return int(ns * self.cal.ticks_per_ns)

    def _plan(self, spec: BenchmarkSpec):
        """Pattern and buffer geometry for a resolved spec."""
        line = self.desc.line_size
        operand_bytes = 16 if spec.operand_bits == 128 else 8
        shift = kernels.unaligned_shift(line, spec.operand_bits) \
            if spec.unaligned else 0
        if spec.kernel == "contend":
            return None, line
        if spec.kernel == "bw-sweep":
            return None, spec.buffer_size
        if spec.kernel == "lat-cas-succeed":
            slots = spec.buffer_size // spec.chunk_size
            pattern = kernels.gen_chase(
                slots, spec.min_stride, spec.seed, chunked=True,
                chunk_size=spec.chunk_size,
            )
        else:
            slots = kernels.slots_for(spec.buffer_size, spec.min_stride,
                                      operand_bytes=operand_bytes, shift=shift)
            pattern = kernels.gen_chase(slots, spec.min_stride, spec.seed)
        return pattern, spec.buffer_size

    def run(self, spec: BenchmarkSpec, *, warmups: int = DEFAULT_WARMUPS,
            rendezvous_ns: int = DEFAULT_RENDEZVOUS_NS,
            verify_reference: dict | None = None) -> list[Measurement]:
        """Execute the spec; returns `spec.repetitions` measurements."""
        if not self._run_lock.acquire(blocking=False):
            raise ValidationError("the runner executes one spec at a time")
        try:
            return self._run_locked(spec, warmups, rendezvous_ns,
                                    verify_reference)
        finally:
            self._run_lock.release()

    def _run_locked(self, spec: BenchmarkSpec, warmups: int,
                    rendezvous_ns: int,
                    verify_reference: dict | None) -> list[Measurement]:
        spec = spec.resolve(self.desc)
        slots: dict[int, int] = {}
        for core in spec.threads:
            slots[core] = slots.get(core, 0) + 1
        for core, n in slots.items():
            self.pool.ensure(core, n)
            self.pool.check_pinned(core)
        # oversubscribed runs need a longer arming window: every worker
        # must reach its native spin loop before the common deadline
        if len(spec.threads) == 1:
            rendezvous_ns = min(rendezvous_ns, SINGLE_WORKER_ARMING_NS)
        else:
            rendezvous_ns = max(rendezvous_ns, 1_000_000 * len(spec.threads))
        pattern, kernel_bytes = self._plan(spec)
        line = self.desc.line_size

        probe_bytes = probe_region_bytes(line) if verify_reference else 0
        total_bytes = kernel_bytes + probe_bytes
        buf, huge = alloc_buffer(total_bytes, line, spec.hugepages)
        cmp_buf = None
        if spec.two_operands:
            cmp_buf, _ = alloc_buffer(total_bytes, line, spec.hugepages)

        measuring = spec.threads[0]
        fill, fill_name = self._fill_for(spec, buf, cmp_buf, pattern, line)

        measurements = []
        for rep in range(warmups + spec.repetitions):
            for attempt in range(MAX_RENDEZVOUS_RETRIES + 1):
                prepared = self.preparer.prepare(
                    buf, spec.placement, measuring_core=measuring,
                    fill=fill, fill_name=fill_name, kernel_bytes=kernel_bytes,
                    hugepages=huge, verify_reference=verify_reference,
                )
                if cmp_buf is not None:
                    # companion operand buffer gets the same placement
                    self.preparer.prepare(
                        cmp_buf, spec.placement, measuring_core=measuring,
                        fill=lambda: None, fill_name="companion",
                        kernel_bytes=kernel_bytes,
                    )
                deadline = timing.now() + self._ticks(rendezvous_ns)
                results = self._measure(spec, buf, cmp_buf, pattern, line,
                                        deadline)
                ok = all(r.t_enter <= deadline for r in results)
                # with one worker per core a start far past the deadline
                # means the host overslept; oversubscribed runs cannot start
                # simultaneously by construction, so only arming counts
                oversubscribed = len(spec.threads) > len(set(spec.threads))
                if ok and not oversubscribed:
                    slack = deadline + self._ticks(rendezvous_ns)
                    ok = all(r.t_start <= slack for r in results)
                if ok:
                    break
                if attempt == MAX_RENDEZVOUS_RETRIES:
                    raise RendezvousTimeout(
                        f"worker missed the start deadline "
                        f"{MAX_RENDEZVOUS_RETRIES + 1} times"
                    )
            if rep < warmups:
                continue
            m = self._collect(spec, results, prepared, rep - warmups, deadline)
            m.metadata["warmups"] = warmups
            m.metadata["rendezvous_ns"] = rendezvous_ns
            measurements.append(m)
        return measurements

    def _fill_for(self, spec: BenchmarkSpec, buf, cmp_buf, pattern, line):
        if spec.kernel == "contend":
            return (lambda: kernels.fill_zeros(buf)), "zeros"
        if spec.kernel == "bw-sweep":
            name = ("zeros" if spec.operation in
                    (BenchOp.CAS_SUCCEED, BenchOp.FAA) else "incrementing")
            return (lambda: kernels.prepare_bandwidth_buffer(
                spec.operation, memoryview(buf)[:spec.buffer_size])), name
        kernel_region = memoryview(buf)[:spec.buffer_size]
        cmp_region = memoryview(cmp_buf)[:spec.buffer_size] if cmp_buf else None

        def fill():
            kernels.prepare_latency_buffer(
                spec.operation, kernel_region, pattern,
                operand_bits=spec.operand_bits, unaligned=spec.unaligned,
                two_operands=spec.two_operands, cmp_buf=cmp_region,
                line_size=line,
            )

        if spec.two_operands or spec.operation in (BenchOp.READ, BenchOp.FAA,
                                                   BenchOp.SWP):
            name = "chase-permutation"
        elif spec.operation == BenchOp.CAS_FAIL and spec.operand_bits == 64:
            name = "incrementing"
        else:
            name = "zeros"
        return fill, name

    def _measure(self, spec: BenchmarkSpec, buf, cmp_buf, pattern, line,
                 deadline: int) -> list[KernelResult]:
        kernel_region = memoryview(buf)[:spec.buffer_size]
        cmp_region = memoryview(cmp_buf)[:spec.buffer_size] if cmp_buf else None
        futures = []
        if spec.kernel == "contend":
            stop = deadline + self._ticks(spec.duration_ns)
            seen: dict[int, int] = {}
            for core in spec.threads:
                slot = seen.get(core, 0)
                seen[core] = slot + 1
                futures.append(self.pool.submit(
                    core, kernels.contention_kernel, spec.operation, buf, 0,
                    slot=slot, deadline=deadline, stop=stop,
                ))
        elif spec.kernel == "bw-sweep":
            futures.append(self.pool.submit(
                spec.threads[0], kernels.bandwidth_kernel, spec.operation,
                kernel_region, spec.sweep_stride, deadline=deadline,
            ))
        else:
            futures.append(self.pool.submit(
                spec.threads[0], kernels.latency_kernel, spec.operation,
                kernel_region, pattern, deadline=deadline,
                operand_bits=spec.operand_bits, unaligned=spec.unaligned,
                two_operands=spec.two_operands, cmp_buf=cmp_region,
                line_size=line,
            ))
        return [f.result() for f in futures]

    def _collect(self, spec: BenchmarkSpec, results: list[KernelResult],
                 prepared, repetition: int, deadline: int = 0) -> Measurement:
        line = self.desc.line_size
        samples = []
        for core, r in zip(spec.threads, results):
            if spec.kernel == "contend":
                bytes_counted = r.ops * line  # per-op accounting
            elif spec.kernel == "bw-sweep":
                bytes_counted = kernels.bytes_swept(
                    spec.buffer_size, spec.sweep_stride, line
                )
            else:
                bytes_counted = r.ops * line
            samples.append(Sample(
                thread=core, t_enter=r.t_enter, t_start=r.t_start,
                t_end=r.t_end, ops=r.ops, bytes_counted=bytes_counted,
                successes=r.successes, failures=r.failures,
            ))
        t0 = min(s.t_start for s in samples)
        t1 = max(s.t_end for s in samples)
        total_ns = timing.duration_ns(t0, t1, self.cal)
        if spec.unit == "ns/op":
            ops = sum(s.ops for s in samples)
            derived = {"latency_ns_per_op": total_ns / ops if ops else 0.0}
        else:
            total_bytes = sum(s.bytes_counted for s in samples)
            derived = {
                "bandwidth_bytes_per_s":
                    total_bytes / (total_ns * 1e-9) if total_ns else 0.0
            }
        metadata = {
            "calibration": self.cal.to_dict(),
            "host_hash": host_hash(self.desc),
            "spec": spec.to_dict(),
            "recipe_trace": prepared.recipe_trace,
            "repetition": repetition,
            "deadline_ticks": deadline,
            "governor": self._governor,
            "flags": {
                "low_resolution": self.cal.low_resolution,
                "placement_verified": prepared.verified,
                "unaligned": spec.unaligned,
                "byte_accounting": (
                    "line per op" if spec.kernel == "contend"
                    else "line per distinct line"
                ),
            },
        }
        return Measurement(spec=spec, samples=samples, total_ns=total_ns,
                           derived=derived, metadata=metadata)


def reference_latencies(runner: Runner, *, repetitions: int = 5) -> dict:
    """Quick local read-latency profile per level (plus memory), used by the
    placement signature probe."""
    desc = runner.desc
    core = desc.cores[0]
    ref: dict = {
        "ticks_per_ns": runner.cal.ticks_per_ns,
        "read_overhead_ticks": runner.cal.read_overhead_ticks,
    }
    targets = [(f"L{lv.level}", PlacementLevel(f"L{lv.level}"))
               for lv in desc.levels]
    targets.append(("memory", PlacementLevel.MEMORY))
    for name, level in targets:
        state = PlacementState.I if level == PlacementLevel.MEMORY \
            else PlacementState.E
        size = min(kernels.default_buffer_size(desc, name), 16 * 1024 * 1024)
        spec = BenchmarkSpec(
            kernel="lat-chase", operation=BenchOp.READ,
            placement=Placement(state, level, owner=core),
            buffer_size=size - size % desc.line_size,
            threads=(core,), repetitions=repetitions,
        )
        ms = runner.run(spec, warmups=1)
        ref[name] = summarize(ms).median
    return ref
