"""Analytical latency and bandwidth model for atomic operations.

An atomic is modeled as a read-for-ownership followed by the operation's
execute/lock/writeback cost plus a per-group residual:

    L(A, S) = R_O(S) + E(A) + O(A, S, locality, level)

The read-for-ownership term depends on the coherency state, the cache
level holding the line, and the owner's distance from the requester:

  * E/M in a local level L:                      R_L
  * E/M in another core's private cache,
    shared-L3 design:                            2*R_L3 - R_L1
  * E/M in an L1 behind a shared L2:             2*R_L2 - R_L1
  * design without L3 (per-hop cost built in):   2*R_L2 - R_L1 + H
  * S/O (invalidations run in parallel):         R_E(base) + max_i R_E(sharer_i)
  * off-die: plus H per die-to-die hop
  * main memory: R_lastlevel + M (+ H when remote)

An M-state line that was written back into an inclusive L3 is served at
plain R_L3 (the directory bits are clean, no snoop is needed), and on
MESIF designs an off-die M-state L3 access pays the memory writeback M
because the protocol cannot share dirty lines.  Plain reads use R rather
than R_O: they trigger no invalidations and carry no E or O term.  Plain
writes are outside the fitted model; their predictions reuse the
read-for-ownership path and are labeled as extrapolated.

Bandwidth follows from latency: one operation per line gives C/L; a
sequential sweep that hits each line N times amortizes the first access
and pays the local-L1 repeat cost (local-L2 on write-through-L1 designs)
for the remaining N-1:

    B = N * C / (L + (N - 1) * (R_repeat + E(A)))
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping

from .errors import InconsistentQuery, ParseError, ValidationError
from .topology import LocalityClass, MachineDescription


class Op(str, Enum):
    CAS = "CAS"
    FAA = "FAA"
    SWP = "SWP"
    READ = "read"
    WRITE = "write"


ATOMIC_OPS = (Op.CAS, Op.FAA, Op.SWP)


class CoherencyState(str, Enum):
    E = "E"
    M = "M"
    S = "S"
    O = "O"


class Level(str, Enum):
    L1 = "L1"
    L2 = "L2"
    L3 = "L3"
    MEMORY = "memory"


PATTERNS = ("one-op-per-line", "sequential")

# Localities ordered near to far; used by monotonicity checks and reports.
LOCALITY_CHAIN = (
    LocalityClass.SAME_CORE,
    LocalityClass.SAME_L2_GROUP,
    LocalityClass.SAME_DIE,
    LocalityClass.SAME_SOCKET_OTHER_DIE,
    LocalityClass.OTHER_SOCKET,
)

OKey = tuple[str, str, str, str]  # (op or "*", state, locality, level)


@dataclass(frozen=True)
class ModelParams:
    """Fitted latencies in nanoseconds (see Table-style params files)."""

    r_l1: float
    r_l2: float
    r_l3: float | None
    hop: float | None
    mem: float
    execute: Mapping[str, float]
    o_table: Mapping[OKey, float] = field(default_factory=dict)
    line_size: int = 64

    def validate(self) -> "ModelParams":
        if self.r_l1 < 0 or self.r_l2 < 0 or self.mem < 0:
            raise ValidationError("latencies must be non-negative")
        if self.r_l1 > self.r_l2:
            raise ValidationError("level latencies must satisfy R_L1 <= R_L2")
        if self.r_l3 is not None and (self.r_l3 < 0 or self.r_l2 > self.r_l3):
            raise ValidationError("level latencies must satisfy R_L2 <= R_L3")
        if self.hop is not None and self.hop < 0:
            raise ValidationError("hop latency must be non-negative")
        if any(v < 0 for v in self.execute.values()):
            raise ValidationError("execute latencies must be non-negative")
        if self.line_size <= 0 or self.line_size & (self.line_size - 1):
            raise ValidationError("line_size must be a positive power of two")
        return self

    def o_lookup(self, op: Op, state: CoherencyState, locality: LocalityClass,
                 level: Level) -> float:
        key = (op.value, state.value, locality.value, level.value)
        if key in self.o_table:
            return self.o_table[key]
        wild = ("*", state.value, locality.value, level.value)
        return self.o_table.get(wild, 0.0)

    def to_dict(self) -> dict:
        return {
            "r_l1": self.r_l1,
            "r_l2": self.r_l2,
            "r_l3": self.r_l3,
            "hop": self.hop,
            "mem": self.mem,
            "execute": dict(self.execute),
            "line_size": self.line_size,
            "o_table": [
                {"op": k[0], "state": k[1], "locality": k[2], "level": k[3], "ns": v}
                for k, v in sorted(self.o_table.items())
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        try:
            o_table = {
                (str(e["op"]), str(e["state"]), str(e["locality"]),
                 str(e["level"])): float(e["ns"])
                for e in data.get("o_table", [])
            }
            params = cls(
                r_l1=float(data["r_l1"]),
                r_l2=float(data["r_l2"]),
                r_l3=None if data.get("r_l3") is None else float(data["r_l3"]),
                hop=None if data.get("hop") is None else float(data["hop"]),
                mem=float(data["mem"]),
                execute={str(k): float(v) for k, v in data["execute"].items()},
                o_table=o_table,
                line_size=int(data.get("line_size", 64)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed params: {exc}") from exc
        return params.validate()


def load_params(path) -> ModelParams:
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path} is not valid JSON: {exc}") from exc
    return ModelParams.from_dict(data)


def save_params(params: ModelParams, path) -> None:
    with open(path, "w") as f:
        json.dump(params.to_dict(), f, indent=2)
        f.write("\n")


def builtin_params(name: str) -> ModelParams:
    base = Path(__file__).parent / "data" / "params"
    path = base / f"{name}.json"
    if not path.exists():
        known = ", ".join(sorted(p.stem for p in base.glob("*.json")))
        raise ParseError(f"unknown params {name!r}; packaged: {known}")
    return load_params(path)


@dataclass(frozen=True)
class ModelQuery:
    op: Op
    state: CoherencyState
    level: Level
    locality: LocalityClass
    sharers: tuple[LocalityClass, ...] = ()
    operand_bits: int = 64
    pattern: str = "one-op-per-line"


@dataclass(frozen=True)
class ModelOptions:
    """multi_hop charges two hops for other-socket traffic instead of the
    default single hop per off-die access."""

    multi_hop: bool = False


def _hops(locality: LocalityClass, options: ModelOptions) -> int:
    if locality == LocalityClass.SAME_SOCKET_OTHER_DIE:
        return 1
    if locality == LocalityClass.OTHER_SOCKET:
        return 2 if options.multi_hop else 1
    return 0


def _check_query(q: ModelQuery, params: ModelParams, desc: MachineDescription,
                 options: ModelOptions) -> None:
    if q.state == CoherencyState.O and desc.protocol != "MOESI":
        raise InconsistentQuery(f"state O requires MOESI, not {desc.protocol}")
    if q.level == Level.L3 and not desc.has_l3:
        raise InconsistentQuery("query names L3 but the machine has none")
    if q.state in (CoherencyState.S, CoherencyState.O):
        if not q.sharers:
            raise InconsistentQuery("S/O queries need at least one sharer")
        if q.level == Level.MEMORY:
            raise InconsistentQuery("S/O lines cannot live in main memory")
    elif q.sharers:
        raise InconsistentQuery("sharers only apply to S/O states")
    if q.locality == LocalityClass.SAME_L2_GROUP and not any(
        len(g) > 1 for g in (desc.level(2).groups if desc.level(2) else ())
    ):
        raise InconsistentQuery("no shared L2 group on this machine")
    if q.operand_bits <= 0:
        raise InconsistentQuery("operand_bits must be positive")
    if q.pattern not in PATTERNS:
        raise InconsistentQuery(f"unknown access pattern {q.pattern!r}")
    off_core = q.locality != LocalityClass.SAME_CORE and q.level != Level.MEMORY
    needs_hop = _hops(q.locality, options) > 0 or any(
        _hops(s, options) > 0 for s in q.sharers
    ) or (not desc.has_l3 and (off_core or any(
        s != LocalityClass.SAME_CORE for s in q.sharers)))
    if needs_hop and params.hop is None:
        raise InconsistentQuery("query needs the hop latency H, which is unset")
    if (q.level == Level.MEMORY or (q.level == Level.L3 and desc.has_l3)) \
            and desc.has_l3 and params.r_l3 is None:
        raise InconsistentQuery("query needs R_L3, which is unset")


def _r_level(params: ModelParams, level: Level, desc: MachineDescription) -> float:
    if level == Level.L1:
        return params.r_l1
    if level == Level.L2:
        return params.r_l2
    if level == Level.L3:
        if params.r_l3 is None:
            raise InconsistentQuery("R_L3 is unset")
        return params.r_l3
    raise InconsistentQuery(f"no per-level latency for {level}")


def _r_lastlevel(params: ModelParams, desc: MachineDescription) -> float:
    if desc.has_l3 and params.r_l3 is not None:
        return params.r_l3
    return params.r_l2


def _read_em(state: CoherencyState, level: Level, locality: LocalityClass,
             params: ModelParams, desc: MachineDescription,
             options: ModelOptions) -> float:
    """Latency of reading an E or M line (the R family, Eq.-by-case)."""
    hops = _hops(locality, options)
    hop = params.hop or 0.0
    if level == Level.MEMORY:
        return _r_lastlevel(params, desc) + params.mem + hops * hop
    if locality == LocalityClass.SAME_CORE:
        return _r_level(params, level, desc)
    if locality == LocalityClass.SAME_L2_GROUP and level == Level.L1:
        base = 2 * params.r_l2 - params.r_l1
    elif locality == LocalityClass.SAME_L2_GROUP and level == Level.L2:
        base = params.r_l2  # the shared L2 is the requester's own L2
    elif level == Level.L3 and state == CoherencyState.M and desc.l3_inclusive:
        # write-back updated the directory bits: plain L3 hit, no snoop
        base = _r_level(params, Level.L3, desc)
    elif desc.has_l3:
        base = 2 * _r_level(params, Level.L3, desc) - params.r_l1
    else:
        base = 2 * params.r_l2 - params.r_l1 + hop
    surcharge = 0.0
    if (state == CoherencyState.M and level == Level.L3
            and desc.protocol == "MESIF" and hops > 0):
        surcharge = params.mem  # dirty line leaves the socket: memory writeback
    return base + hops * hop + surcharge


def read_latency(q: ModelQuery, params: ModelParams, desc: MachineDescription,
                 options: ModelOptions = ModelOptions()) -> float:
    """The read-for-ownership latency R_O(S) (equals R for E/M states)."""
    _check_query(q, params, desc, options)
    if q.state in (CoherencyState.S, CoherencyState.O):
        # S/O reads are approximated with E reads; invalidations of the
        # sharers run in parallel, so only the slowest one counts.
        base = _read_em(CoherencyState.E, q.level, q.locality, params, desc,
                        options)
        inv = max(
            _read_em(CoherencyState.E, Level.L1, s, params, desc, options)
            for s in q.sharers
        )
        return base + inv
    return _read_em(q.state, q.level, q.locality, params, desc, options)


def latency(q: ModelQuery, params: ModelParams, desc: MachineDescription,
            options: ModelOptions = ModelOptions()) -> float:
    """Predicted latency in ns for one operation of the query."""
    return sum(ns for _, ns in latency_breakdown(q, params, desc, options))


def latency_breakdown(q: ModelQuery, params: ModelParams,
                      desc: MachineDescription,
                      options: ModelOptions = ModelOptions()) -> list[tuple[str, float]]:
    """Term-by-term decomposition of `latency` (labels + ns)."""
    _check_query(q, params, desc, options)
    if q.op == Op.READ:
        # plain read: no invalidations, no execute or residual term
        return [("read", _read_em(
            CoherencyState.E if q.state in (CoherencyState.S, CoherencyState.O)
            else q.state,
            q.level, q.locality, params, desc, options))]
    terms = [("read-for-ownership", read_latency(q, params, desc, options))]
    label = "execute"
    if q.op == Op.WRITE:
        label = "execute (extrapolated: plain stores are outside the fitted model)"
    terms.append((label, float(params.execute.get(q.op.value, 0.0))))
    terms.append(("residual", params.o_lookup(q.op, q.state, q.locality, q.level)))
    return terms


def bandwidth(q: ModelQuery, params: ModelParams, desc: MachineDescription,
              options: ModelOptions = ModelOptions()) -> float:
    """Predicted bandwidth in bytes/s for the query's access pattern."""
    lat = latency(q, params, desc, options)
    if lat <= 0:
        raise InconsistentQuery("predicted latency is not positive")
    line = params.line_size
    if q.pattern == "one-op-per-line":
        return line / lat * 1e9
    line_bits = line * 8
    if line_bits % q.operand_bits:
        raise InconsistentQuery("operand size must divide the line size")
    n = line_bits // q.operand_bits
    repeat_read = params.r_l2 if desc.write_through_l1 else params.r_l1
    repeat = repeat_read + float(params.execute.get(q.op.value, 0.0))
    return (n * line) / (lat + (n - 1) * repeat) * 1e9
