"""Drive a buffer's cache lines into a requested coherency state and level.

No user-space instruction sets a coherency state directly, so each
placement is an indirect recipe executed by helper threads pinned to the
owner and sharer cores:

    I  flush every line (eviction sweep where flush is unsupported)
    E  flush, then the owner reads every line
    M  the owner rewrites every line in place (contents preserved)
    S  the E recipe, then every sharer reads the lines
    O  the M recipe, then a sharer reads the lines (MOESI machines only)

Level placement streams an eviction buffer sized 1.5x the capacity of the
levels to evict (1.5 defeats pseudo-LRU retention).  The TLB is warmed by
the measuring core before state placement, since the warming access itself
would disturb the state.  Every step lands in an auditable recipe trace.

Achieved placements can be checked with a latency-signature probe: a
sacrificial tail region beyond the kernel's slots receives the same recipe,
and the owner core chases it once, comparing the mean dependent-read
latency against the host's per-level reference within a 30% band.  The
probe is this suite's own addition; rows it cannot verify are flagged
rather than aborted, because verification itself perturbs state.
"""

from __future__ import annotations

import mmap
from dataclasses import dataclass, field
from enum import Enum

from . import _kernels
from .errors import PlacementUnsupported, ValidationError
from .kernels import gen_chase, install_chase
from .topology import LocalityClass, MachineDescription, classify

PAGE_SIZE = mmap.PAGESIZE
EVICT_FACTOR = 1.5
PROBE_LINES = 64
PROBE_BAND = 0.30


class PlacementState(str, Enum):
    E = "E"
    M = "M"
    S = "S"
    O = "O"
    I = "I"


class PlacementLevel(str, Enum):
    L1 = "L1"
    L2 = "L2"
    L3 = "L3"
    MEMORY = "memory"


@dataclass(frozen=True)
class Placement:
    state: PlacementState
    level: PlacementLevel
    owner: int
    sharers: frozenset[int] = frozenset()

    def locality(self, measuring_core: int,
                 desc: MachineDescription) -> LocalityClass:
        return classify(measuring_core, self.owner, desc)

    def validate(self, desc: MachineDescription) -> "Placement":
        if self.owner not in desc.cores:
            raise ValidationError(f"owner core {self.owner} not in description")
        if not self.sharers <= set(desc.cores):
            raise ValidationError("sharer cores not in description")
        if self.state == PlacementState.O and desc.protocol != "MOESI":
            raise PlacementUnsupported(
                f"state O needs MOESI, machine runs {desc.protocol}"
            )
        wants_sharers = self.state in (PlacementState.S, PlacementState.O)
        if wants_sharers != bool(self.sharers):
            raise ValidationError("sharers must be nonempty iff state is S or O")
        if self.level == PlacementLevel.MEMORY and self.state != PlacementState.I:
            raise ValidationError("memory-level placement implies state I")
        if self.level == PlacementLevel.L3 and desc.level(3) is None:
            raise ValidationError("machine has no L3")
        return self

    def to_dict(self) -> dict:
        return {
            "state": self.state.value,
            "level": self.level.value,
            "owner": self.owner,
            "sharers": sorted(self.sharers),
        }


@dataclass
class PreparedBuffer:
    buf: mmap.mmap
    size: int  # bytes available to the measured kernel
    placement: Placement
    fill: str
    hugepages: bool
    line_size: int
    recipe_trace: list[dict] = field(default_factory=list)
    verified: bool | None = None  # None = probe not run


def alloc_buffer(size: int, line_size: int,
                 hugepages: bool = False) -> tuple[mmap.mmap, bool]:
    """Anonymous mapping, line-aligned by construction (page alignment);
    falls back to normal pages when hugepages are unavailable."""
    if size <= 0 or size % line_size:
        raise ValidationError("buffer size must be a positive line multiple")
    if hugepages and hasattr(mmap, "MAP_HUGETLB"):
        try:
            flags = mmap.MAP_PRIVATE | mmap.MAP_ANONYMOUS | mmap.MAP_HUGETLB
            return mmap.mmap(-1, size, flags=flags), True
        except (OSError, ValueError):
            pass
    return mmap.mmap(-1, size), False


def probe_region_bytes(line_size: int) -> int:
    return PROBE_LINES * line_size


def warm_tlb(buf, page_size: int = PAGE_SIZE) -> int:
    """Touch every page once; returns the touch count."""
    if len(memoryview(buf)) == 0:
        return 0
    return _kernels.touch_pages(buf, page_size)


def _flush(buf, line_size: int) -> bool:
    return bool(_kernels.flush_lines(buf, line_size))


class Preparer:
    """Executes placement recipes through a pinned worker pool, reusing one
    eviction buffer across preparations."""

    def __init__(self, pool, desc: MachineDescription):
        self.pool = pool
        self.desc = desc
        self._evict_buf: mmap.mmap | None = None
        self._evict_size = 0

    def _eviction_buffer(self, size: int) -> memoryview:
        if self._evict_buf is None or self._evict_size < size:
            self._evict_buf = mmap.mmap(-1, size)
            self._evict_size = size
        return memoryview(self._evict_buf)[:size]

    def _evict_bytes(self, level: PlacementLevel, core: int) -> int:
        if level == PlacementLevel.L2:
            upto = 1
        elif level == PlacementLevel.L3:
            upto = 2
        else:
            return 0
        return int(EVICT_FACTOR * self.desc.private_capacity_upto(upto, core))

    def prepare(self, buf, placement: Placement, *, measuring_core: int,
                fill, fill_name: str, kernel_bytes: int | None = None,
                hugepages: bool = False,
                verify_reference: dict | None = None) -> PreparedBuffer:
        """Run the recipe over the whole mapping; `fill` is a callable
        writing the kernel's expected contents (executed on the owner
        core).  When verifying, `kernel_bytes` must leave a probe tail."""
        desc = self.desc
        placement.validate(desc)
        pool = self.pool
        for core in (measuring_core, placement.owner, *placement.sharers):
            pool.check_pinned(core)
        line = desc.line_size
        total = len(memoryview(buf))
        kernel_bytes = total if kernel_bytes is None else kernel_bytes
        trace: list[dict] = []

        def step(core, action, rng=None):
            trace.append({"core": core, "action": action,
                          "range": rng or [0, total]})

        # TLB warm first: the warming reads would disturb a placed state
        pool.run(measuring_core, warm_tlb, buf)
        step(measuring_core, "warm-tlb")

        pool.run(placement.owner, fill)
        step(placement.owner, f"fill:{fill_name}")

        probe_pattern = None
        probe_start = 0
        if verify_reference is not None:
            tail_bytes = total - kernel_bytes
            if tail_bytes >= 8 * line:
                tail = memoryview(buf)[kernel_bytes:]
                probe_pattern = gen_chase(tail_bytes // line, line, seed=1)
                probe_start = pool.run(
                    placement.owner, install_chase, tail, probe_pattern
                )
                step(placement.owner, "probe-chase-install",
                     [kernel_bytes, total])

        st = placement.state
        if st == PlacementState.I:
            if pool.run(placement.owner, _flush, buf, line):
                step(placement.owner, "flush-lines")
            else:
                evict = self._eviction_buffer(
                    int(EVICT_FACTOR
                        * desc.private_capacity_upto(3, placement.owner))
                )
                pool.run(placement.owner, _kernels.read_sweep, evict, line)
                step(placement.owner, "eviction-sweep-fallback")
        elif st == PlacementState.E:
            pool.run(placement.owner, _flush, buf, line)
            step(placement.owner, "flush-lines")
            pool.run(placement.owner, _kernels.read_sweep, buf, line)
            step(placement.owner, "read-lines")
        elif st == PlacementState.M:
            pool.run(placement.owner, _kernels.rewrite_lines, buf, line)
            step(placement.owner, "rewrite-lines")
            if desc.write_through_l1 and placement.level == PlacementLevel.L1:
                # dirty data cannot sit in a write-through L1
                step(placement.owner, "note:write-through-L1-dirty-at-L2")
        elif st in (PlacementState.S, PlacementState.O):
            if st == PlacementState.S:
                pool.run(placement.owner, _flush, buf, line)
                step(placement.owner, "flush-lines")
                pool.run(placement.owner, _kernels.read_sweep, buf, line)
                step(placement.owner, "read-lines")
            else:
                pool.run(placement.owner, _kernels.rewrite_lines, buf, line)
                step(placement.owner, "rewrite-lines")
            for sharer in sorted(placement.sharers):
                pool.run(sharer, _kernels.read_sweep, buf, line)
                step(sharer, "read-lines")

        evict_bytes = self._evict_bytes(placement.level, placement.owner)
        if evict_bytes:
            evict = self._eviction_buffer(evict_bytes)
            pool.run(placement.owner, _kernels.read_sweep, evict, line)
            step(placement.owner, f"evict-sweep:{evict_bytes}")

        prepared = PreparedBuffer(
            buf=buf, size=kernel_bytes, placement=placement, fill=fill_name,
            hugepages=hugepages, line_size=line, recipe_trace=trace,
        )
        if probe_pattern is not None:
            prepared.verified = self._probe(
                buf, kernel_bytes, probe_pattern, probe_start, placement,
                verify_reference,
            )
            step(placement.owner,
                 f"signature-probe:{'ok' if prepared.verified else 'failed'}",
                 [kernel_bytes, total])
        elif verify_reference is not None:
            prepared.verified = False  # no tail region to probe
        return prepared

    def _probe(self, buf, kernel_bytes: int, pattern, start: int, placement,
               reference: dict) -> bool:
        """Owner-side dependent-read pass over the sacrificial tail: owner
        hits preserve the placed state, and the per-level signature is the
        same local latency the reference table holds."""
        tail = memoryview(buf)[kernel_bytes:]
        res = self.pool.run(
            placement.owner, _kernels.lat_chase, _kernels.OP_READ, tail,
            start, pattern.slots, 0, 0,
        )
        ticks = max(0, (res[2] - res[1]) - reference.get("read_overhead_ticks", 0))
        per_op = ticks / pattern.slots / reference["ticks_per_ns"]
        key = placement.level.value
        if placement.state == PlacementState.I:
            key = "memory"
        expected = reference.get(key)
        if expected is None or expected <= 0:
            return False
        return abs(per_op - expected) <= PROBE_BAND * expected
