"""The measured inner loops and their access-pattern generators.

Latency kernels serialize every operation through a data dependency: reads,
fetch-add and swap chase pointers (the result is the next address), while
compare-and-swap walks a precomputed offset sequence carrying its expected
value register across iterations (a failed CAS reloads it, a successful one
confirms it).  Bandwidth kernels sweep the buffer sequentially with no
inter-operation dependencies.  The contention kernel hammers one shared
line until a deadline.

Patterns are deterministic per seed.  Slots are spaced at least
``min_stride`` bytes apart (wider on hosts whose prefetchers pull adjacent
lines), and visit order is a uniform random single cycle, which defeats
stride prefetchers.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import _kernels
from .errors import CapabilityMissing, InfeasibleStride, ValidationError
from .topology import MachineDescription

KERNEL_IDS = (
    "lat-chase",
    "lat-cas-succeed",
    "bw-sweep",
    "contend",
    "operand128",
    "unaligned",
    "two-op-cas",
)


class BenchOp(str, Enum):
    CAS_SUCCEED = "CAS-succeed"
    CAS_FAIL = "CAS-fail"
    FAA = "FAA"
    SWP = "SWP"
    READ = "read"
    WRITE = "write"


ATOMIC_BENCH_OPS = (BenchOp.CAS_SUCCEED, BenchOp.CAS_FAIL, BenchOp.FAA,
                    BenchOp.SWP)

_BW_OPCODE = {
    BenchOp.READ: _kernels.OP_READ,
    BenchOp.WRITE: _kernels.OP_WRITE,
    BenchOp.FAA: _kernels.OP_FAA,
    BenchOp.SWP: _kernels.OP_SWP,
    BenchOp.CAS_SUCCEED: _kernels.OP_CAS_SUCCEED,
    BenchOp.CAS_FAIL: _kernels.OP_CAS_FAIL,
}

_CHASE_OPCODE = {
    BenchOp.READ: _kernels.OP_READ,
    BenchOp.FAA: _kernels.OP_FAA,
    BenchOp.SWP: _kernels.OP_SWP,
}

_CONTEND_OPCODE = {
    BenchOp.READ: _kernels.OP_READ,
    BenchOp.WRITE: _kernels.OP_WRITE,
    BenchOp.FAA: _kernels.OP_FAA,
    BenchOp.SWP: _kernels.OP_SWP,
    BenchOp.CAS_SUCCEED: _kernels.OP_CAS,
}

SWP_INJECT_BASE = 0x5A5A_0000_0000_0000
_WALK_VALUE_BASE = 1 << 63


@dataclass(frozen=True)
class KernelResult:
    t_enter: int
    t_start: int
    t_end: int
    ops: int
    successes: int
    failures: int
    sink: int

    @classmethod
    def from_tuple(cls, t) -> "KernelResult":
        return cls(*t)


def has_cas128() -> bool:
    return bool(_kernels.has_cas128())


@dataclass(frozen=True)
class ChasePattern:
    """A single-cycle visit order over equally spaced slots."""

    slots: int
    permutation: tuple[int, ...]  # permutation[i] = slot visited after slot i
    min_stride: int
    chunked: bool = False
    chunk_size: int = 0

    @property
    def pitch(self) -> int:
        return self.chunk_size if self.chunked else self.min_stride

    def required_size(self, operand_bytes: int = 8, shift: int = 0) -> int:
        return (self.slots - 1) * self.pitch + shift + operand_bytes

    def visit_order(self) -> list[int]:
        order = [0]
        cur = self.permutation[0]
        while cur != 0:
            order.append(cur)
            cur = self.permutation[cur]
        return order


def gen_chase(slots: int, min_stride: int, seed: int, *, chunked: bool = False,
              chunk_size: int = 0) -> ChasePattern:
    """Uniform random cyclic permutation over `slots` (Sattolo's shuffle),
    deterministic per seed."""
    if slots < 2:
        raise ValidationError("a chase needs at least 2 slots")
    if min_stride < 8:
        raise ValidationError("min_stride must be at least one word")
    if chunked and chunk_size < min_stride:
        raise ValidationError("chunk_size must be >= min_stride")
    rng = random.Random(seed)
    p = list(range(slots))
    for i in range(slots - 1, 0, -1):
        j = rng.randrange(i)
        p[i], p[j] = p[j], p[i]
    return ChasePattern(slots=slots, permutation=tuple(p),
                        min_stride=min_stride, chunked=chunked,
                        chunk_size=chunk_size)


def slots_for(buffer_size: int, min_stride: int, *, operand_bytes: int = 8,
              shift: int = 0) -> int:
    usable = buffer_size - shift - operand_bytes
    slots = usable // min_stride + 1 if usable >= 0 else 0
    if slots < 2:
        raise InfeasibleStride(
            f"buffer of {buffer_size} B fits fewer than 2 slots at stride "
            f"{min_stride}"
        )
    return slots


def slot_offset(pattern: ChasePattern, slot: int, shift: int = 0) -> int:
    return slot * pattern.pitch + shift


def visit_offsets(pattern: ChasePattern, shift: int = 0) -> np.ndarray:
    """Byte offsets in visit order (uint64), for offset-walk kernels."""
    return np.asarray(
        [slot_offset(pattern, s, shift) for s in pattern.visit_order()],
        dtype=np.uint64,
    )


def unaligned_shift(line_size: int, operand_bits: int = 64) -> int:
    """Offset placing each operand across two consecutive lines."""
    return line_size - (operand_bits // 8) // 2


# ------------------------------------------------------------------ fills

def fill_zeros(buf) -> None:
    np.frombuffer(buf, dtype=np.uint8)[:] = 0


def fill_incrementing(buf) -> None:
    """Distinct increasing word values (the always-failing CAS food)."""
    words = np.frombuffer(buf, dtype=np.uint64)
    words[:] = np.arange(len(words), dtype=np.uint64)


def install_chase(buf, pattern: ChasePattern, *, shift: int = 0,
                  operand_bytes: int = 8) -> int:
    """Write next-slot byte offsets into the buffer; returns the start
    offset (slot 0).  Raises InfeasibleStride if the geometry does not fit.

    Chase kernels follow these offsets without per-operation bounds checks
    (that is the measured path), so chase buffers must only ever carry
    fills produced here or via `prepare_latency_buffer`."""
    size = len(memoryview(buf))
    if pattern.required_size(operand_bytes, shift) > size:
        raise InfeasibleStride(
            f"pattern needs {pattern.required_size(operand_bytes, shift)} B, "
            f"buffer has {size}"
        )
    mv = memoryview(buf)
    if shift == 0 and operand_bytes == 8 and pattern.pitch % 8 == 0:
        words = np.frombuffer(buf, dtype=np.uint64)
        step = pattern.pitch // 8
        perm = np.asarray(pattern.permutation, dtype=np.uint64)
        words[: pattern.slots * step : step] = perm * np.uint64(pattern.pitch)
    else:
        for slot, nxt in enumerate(pattern.permutation):
            off = slot_offset(pattern, slot, shift)
            mv[off:off + 8] = struct.pack("<Q", slot_offset(pattern, nxt, shift))
            if operand_bytes == 16:
                mv[off + 8:off + 16] = b"\x00" * 8
    return slot_offset(pattern, 0, shift)


def install_walk_values(buf, offsets: np.ndarray) -> None:
    """Write a distinct tagged value at each visited offset so a carried
    compare register can never match (exact failure counting)."""
    mv = memoryview(buf)
    for i, off in enumerate(offsets):
        mv[off:off + 8] = struct.pack("<Q", _WALK_VALUE_BASE | i)


def install_two_operand(buf, cmp_buf, pattern: ChasePattern) -> int:
    """Main buffer gets the chase; the companion buffer holds compare values
    that never match, so each CAS fetches two operands and always fails."""
    start = install_chase(buf, pattern)
    cmp_words = np.frombuffer(cmp_buf, dtype=np.uint64)
    for slot, nxt in enumerate(pattern.permutation):
        cmp_words[slot_offset(pattern, slot) // 8] = (
            _WALK_VALUE_BASE | slot_offset(pattern, nxt)
        )
    return start


# ---------------------------------------------------------------- kernels

def latency_kernel(op: BenchOp, buf, pattern: ChasePattern, *,
                   deadline: int = 0, operand_bits: int = 64,
                   unaligned: bool = False, two_operands: bool = False,
                   cmp_buf=None, addend: int = 0,
                   line_size: int = 64) -> KernelResult:
    """One serialized pass over the pattern; the buffer must already carry
    the fill the operation expects (see `prepare_latency_buffer`)."""
    shift = unaligned_shift(line_size, operand_bits) if unaligned else 0
    if operand_bits == 128:
        if op not in (BenchOp.CAS_SUCCEED, BenchOp.CAS_FAIL):
            raise ValidationError("128-bit operands require a CAS operation")
        if unaligned:
            raise ValidationError("16-byte CAS must be aligned")
        if not has_cas128():
            raise CapabilityMissing("host lacks 16-byte compare-and-swap")
        offs = visit_offsets(pattern)
        want_fail = 1 if op == BenchOp.CAS_FAIL else 0
        return KernelResult.from_tuple(
            _kernels.lat_walk_cas128(buf, offs, want_fail, deadline)
        )
    if two_operands:
        if op != BenchOp.CAS_FAIL:
            raise ValidationError("two-operand mode is a CAS-fail variant")
        if cmp_buf is None:
            raise ValidationError("two-operand mode needs the companion buffer")
        return KernelResult.from_tuple(
            _kernels.lat_chase_cas2(buf, cmp_buf, slot_offset(pattern, 0),
                                    pattern.slots, deadline)
        )
    if op in (BenchOp.CAS_SUCCEED, BenchOp.CAS_FAIL):
        offs = visit_offsets(pattern, shift)
        want_fail = 1 if op == BenchOp.CAS_FAIL else 0
        return KernelResult.from_tuple(
            _kernels.lat_walk_cas(buf, offs, want_fail, deadline)
        )
    if op not in _CHASE_OPCODE:
        raise ValidationError(f"{op.value} has no serialized latency kernel")
    return KernelResult.from_tuple(
        _kernels.lat_chase(_CHASE_OPCODE[op], buf,
                           slot_offset(pattern, 0, shift), pattern.slots,
                           addend, deadline)
    )


def prepare_latency_buffer(op: BenchOp, buf, pattern: ChasePattern, *,
                           operand_bits: int = 64, unaligned: bool = False,
                           two_operands: bool = False, cmp_buf=None,
                           line_size: int = 64) -> str:
    """Install the fill the latency kernel expects; returns the fill name."""
    shift = unaligned_shift(line_size, operand_bits) if unaligned else 0
    if two_operands:
        install_two_operand(buf, cmp_buf, pattern)
        return "chase-permutation"
    if op == BenchOp.CAS_SUCCEED or (op == BenchOp.CAS_FAIL
                                     and operand_bits == 128):
        fill_zeros(buf)
        return "zeros"
    if op == BenchOp.CAS_FAIL:
        fill_zeros(buf)
        install_walk_values(buf, visit_offsets(pattern, shift))
        return "incrementing"
    install_chase(buf, pattern, shift=shift,
                  operand_bytes=16 if operand_bits == 128 else 8)
    return "chase-permutation"


def bandwidth_kernel(op: BenchOp, buf, stride: int, *, deadline: int = 0,
                     addend: int = 1,
                     inject: int = SWP_INJECT_BASE) -> KernelResult:
    """One sequential pass, one operation per stride, no dependencies."""
    if op not in _BW_OPCODE:
        raise ValidationError(f"unknown bandwidth op {op}")
    return KernelResult.from_tuple(
        _kernels.bw_sweep(_BW_OPCODE[op], buf, stride, addend, inject,
                          deadline)
    )


def prepare_bandwidth_buffer(op: BenchOp, buf) -> str:
    if op in (BenchOp.CAS_SUCCEED, BenchOp.FAA):
        fill_zeros(buf)
        return "zeros"
    fill_incrementing(buf)
    return "incrementing"


def bytes_swept(buffer_size: int, stride: int, line_size: int) -> int:
    """Distinct lines touched times the line size (sweep accounting)."""
    if stride <= line_size:
        lines = buffer_size // line_size
    else:
        lines = buffer_size // stride
    return lines * line_size


def contention_kernel(op: BenchOp, buf, offset: int, *, deadline: int,
                      stop: int) -> KernelResult:
    """Hammer one location until the stop tick (all workers share it)."""
    if op not in _CONTEND_OPCODE:
        raise ValidationError(f"{op.value} has no contention kernel")
    return KernelResult.from_tuple(
        _kernels.contend(_CONTEND_OPCODE[op], buf, offset, deadline, stop)
    )


def default_min_stride(desc: MachineDescription) -> int:
    """Two lines on AMD-style machines, whose prefetchers pull multiple
    consecutive lines on an L2 miss, one line otherwise.  The description's
    protocol field stands in for the vendor here; it never changes what the
    kernels do, only how far apart the slots default to."""
    return 2 * desc.line_size if desc.protocol == "MOESI" else desc.line_size


def default_buffer_size(desc: MachineDescription, level: str) -> int:
    """Half the target level's capacity; memory-level buffers are flushed
    anyway, so they stay modest regardless of cache sizes."""
    caps = {f"L{lv.level}": lv.capacity for lv in desc.levels}
    if level == "memory":
        return min(2 * max(caps.values()), 32 * 1024 * 1024)
    if level not in caps:
        raise ValidationError(f"machine has no {level}")
    return caps[level] // 2
