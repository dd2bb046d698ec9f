"""Trace-driven, multi-die cache-coherence simulator.

One flat cache per core, line-granularity states, no capacity or timing:
the simulator counts protocol messages, which is what the die-local
sharing argument is about.  Supported protocols:

  * MESI / MESIF: invalidations are directed at actual holders (these
    designs track presence precisely); reading another core's dirty line
    forces a memory writeback because dirty sharing is not allowed.
  * MOESI: reading a dirty line moves it to Owned without a writeback,
    but writing any Shared/Owned line triggers an invalidation broadcast
    that must reach every remote die, because nothing tracks where copies
    live.
  * MOESI+OLSL: two extra states, Owned-Local and Shared-Local, mark
    lines whose copies all sit on one die.  Same-die reads of E/M lines
    enter SL/OL instead of S/O; writes to OL/SL lines invalidate locally
    with no remote-die messages; a remote-die read demotes OL->O, SL->S.
  * MOESI+HTAssistFilter: plain MOESI states plus a bounded per-die
    directory of lines that recently turned S/O while confined to that
    die.  A write probes the writer's die directory and suppresses the
    remote broadcast on a hit; a remote read removes the entry; capacity
    evictions (least-recently-tracked) conservatively re-enable
    broadcasts.  Capacity ``None`` is the unbounded-directory oracle.

Atomics are modeled as a read-for-ownership plus a write, which is the
same message pattern as a write to the line.

Each step asserts the single-writer, die-confinement and value-coherence
invariants; any violation raises ProtocolViolation and means a simulator
bug, never a legal trace outcome.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum

from .errors import ParseError, ProtocolViolation, ValidationError


class Protocol(str, Enum):
    MESI = "MESI"
    MESIF = "MESIF"
    MOESI = "MOESI"
    MOESI_OLSL = "MOESI+OLSL"
    MOESI_HTA = "MOESI+HTAssistFilter"


MOESI_FAMILY = (Protocol.MOESI, Protocol.MOESI_OLSL, Protocol.MOESI_HTA)


class LineState(str, Enum):
    M = "M"
    E = "E"
    S = "S"
    I = "I"
    O = "O"
    F = "F"
    OL = "OL"
    SL = "SL"


OPS = ("read", "write", "atomic")


@dataclass(frozen=True)
class SimConfig:
    protocol: Protocol
    dies: int
    cores_per_die: int
    directory_capacity: int | None = 64  # None = unbounded oracle

    def validate(self) -> "SimConfig":
        if self.dies < 1 or self.cores_per_die < 1:
            raise ValidationError("dies and cores_per_die must be >= 1")
        if self.directory_capacity is not None and self.directory_capacity < 0:
            raise ValidationError("directory capacity must be >= 0 or None")
        return self

    @property
    def n_cores(self) -> int:
        return self.dies * self.cores_per_die

    def die_of(self, core: int) -> int:
        return core // self.cores_per_die


@dataclass(frozen=True)
class TraceEvent:
    core: int
    op: str
    line: int


@dataclass(frozen=True)
class Invalidation:
    """One invalidation message; remote means it crosses a die boundary."""

    line: int
    target_die: int
    target_core: int | None  # None for a die-wide broadcast probe
    remote: bool


@dataclass
class SimStats:
    events: int = 0
    remote_die_invalidations: int = 0
    local_invalidations: int = 0
    state_transitions: int = 0
    writebacks: int = 0

    def to_dict(self) -> dict:
        return {
            "events": self.events,
            "remote_die_invalidations": self.remote_die_invalidations,
            "local_invalidations": self.local_invalidations,
            "state_transitions": self.state_transitions,
            "writebacks": self.writebacks,
        }


@dataclass
class _Copy:
    state: LineState
    value: int


class CoherenceSim:
    def __init__(self, config: SimConfig):
        self.config = config.validate()
        # per line: {core: _Copy with state != I}
        self.copies: dict[int, dict[int, _Copy]] = {}
        self.line_value: dict[int, int] = {}
        self.memory_value: dict[int, int] = {}
        # per die: recently-confined S/O lines (HT-Assist filter)
        self.directories: list[OrderedDict] = [
            OrderedDict() for _ in range(config.dies)
        ]
        self.stats = SimStats()
        self._write_counter = 0

    # -- helpers ---------------------------------------------------------

    def _holders(self, line: int) -> dict[int, _Copy]:
        return self.copies.setdefault(line, {})

    def _set_state(self, line: int, core: int, state: LineState,
                   value: int | None = None) -> None:
        holders = self._holders(line)
        cur = holders.get(core)
        if state == LineState.I:
            if cur is not None:
                holders.pop(core)
                self.stats.state_transitions += 1
            return
        if cur is None:
            holders[core] = _Copy(state, value if value is not None else
                                  self.line_value.get(line, 0))
            self.stats.state_transitions += 1
        else:
            if cur.state != state:
                self.stats.state_transitions += 1
            cur.state = state
            if value is not None:
                cur.value = value

    def _directory_drop(self, line: int) -> None:
        for d in self.directories:
            d.pop(line, None)

    def _directory_track(self, line: int) -> None:
        """Track the line as die-confined S/O if all copies share one die."""
        holders = self._holders(line)
        if not holders:
            return
        dies = {self.config.die_of(c) for c in holders}
        states = {cp.state for cp in holders.values()}
        if len(dies) != 1 or not states <= {LineState.S, LineState.O}:
            return
        die = next(iter(dies))
        directory = self.directories[die]
        directory[line] = True
        directory.move_to_end(line)
        cap = self.config.directory_capacity
        if cap is not None:
            while len(directory) > cap:
                directory.popitem(last=False)  # least-recently tracked

    # -- invariants ------------------------------------------------------

    def _check_invariants(self, line: int) -> None:
        holders = self._holders(line)
        states = [cp.state for cp in holders.values()]
        exclusive = [s for s in states if s in (LineState.M, LineState.E)]
        if len(exclusive) > 1 or (exclusive and len(states) > 1):
            raise ProtocolViolation(
                f"line {line}: M/E copy coexists with another copy: {states}"
            )
        if sum(s in (LineState.O, LineState.OL) for s in states) > 1:
            raise ProtocolViolation(f"line {line}: multiple owned copies")
        if sum(s == LineState.F for s in states) > 1:
            raise ProtocolViolation(f"line {line}: multiple forwarders")
        if LineState.F in states and self.config.protocol != Protocol.MESIF:
            raise ProtocolViolation(f"line {line}: F outside MESIF")
        local_states = {LineState.OL, LineState.SL}
        locals_ = {c for c, cp in holders.items() if cp.state in local_states}
        if locals_:
            if self.config.protocol != Protocol.MOESI_OLSL:
                raise ProtocolViolation(f"line {line}: OL/SL outside MOESI+OLSL")
            if any(cp.state not in local_states for cp in holders.values()):
                raise ProtocolViolation(
                    f"line {line}: OL/SL mixed with global states: {states}"
                )
            if len({self.config.die_of(c) for c in locals_}) > 1:
                raise ProtocolViolation(
                    f"line {line}: OL/SL copies span multiple dies"
                )
        current = self.line_value.get(line, 0)
        for core, cp in holders.items():
            if cp.value != current:
                raise ProtocolViolation(
                    f"line {line}: core {core} holds stale value "
                    f"{cp.value} != {current}"
                )

    # -- transitions -----------------------------------------------------

    def _read(self, line: int, core: int) -> list[Invalidation]:
        holders = self._holders(line)
        cur = holders.get(core)
        if cur is not None:
            return []  # read hit, any valid state

        others = dict(holders)
        proto = self.config.protocol
        my_die = self.config.die_of(core)

        if not others:
            value = self.memory_value.get(line, self.line_value.get(line, 0))
            self._set_state(line, core, LineState.E, value)
            return []

        value = self.line_value.get(line, 0)
        if proto in (Protocol.MESI, Protocol.MESIF):
            for c, cp in others.items():
                if cp.state == LineState.M:
                    # no dirty sharing: write the line back to memory
                    self.memory_value[line] = cp.value
                    self.stats.writebacks += 1
                self._set_state(line, c, LineState.S)
            # last reader becomes the designated forwarder
            new_state = LineState.F if proto == Protocol.MESIF else LineState.S
            self._set_state(line, core, new_state, value)
        elif proto == Protocol.MOESI_OLSL:
            copy_dies = {self.config.die_of(c) for c in others}
            if copy_dies == {my_die}:
                confined = True
                for c, cp in others.items():
                    if cp.state == LineState.M:
                        self._set_state(line, c, LineState.OL)
                    elif cp.state == LineState.E:
                        self._set_state(line, c, LineState.SL)
                    elif cp.state in (LineState.O, LineState.S):
                        confined = False  # line already globally visible
                my_state = LineState.SL if confined else LineState.S
                self._set_state(line, core, my_state, value)
            else:
                for c, cp in others.items():
                    if cp.state in (LineState.M, LineState.OL):
                        self._set_state(line, c, LineState.O)
                    elif cp.state in (LineState.E, LineState.SL):
                        self._set_state(line, c, LineState.S)
                self._set_state(line, core, LineState.S, value)
        else:  # MOESI, MOESI_HTA
            for c, cp in others.items():
                if cp.state == LineState.M:
                    self._set_state(line, c, LineState.O)  # dirty sharing
                elif cp.state == LineState.E:
                    self._set_state(line, c, LineState.S)
            self._set_state(line, core, LineState.S, value)
            if proto == Protocol.MOESI_HTA:
                holder_dies = {self.config.die_of(c) for c in others}
                if holder_dies != {my_die}:
                    # a remote read breaks confinement tracking
                    self._directory_drop(line)
                self._directory_track(line)
        return []

    def _write(self, line: int, core: int) -> list[Invalidation]:
        holders = self._holders(line)
        cur = holders.get(core)
        proto = self.config.protocol
        my_die = self.config.die_of(core)
        self._write_counter += 1
        new_value = self._write_counter
        messages: list[Invalidation] = []

        if cur is not None and cur.state in (LineState.M, LineState.E):
            self._set_state(line, core, LineState.M, new_value)
            self.line_value[line] = new_value
            return []

        others = {c: cp for c, cp in holders.items() if c != core}
        here_states = set(cp.state for cp in holders.values())
        shared_line = bool(
            here_states & {LineState.S, LineState.O, LineState.F}
        )
        local_line = bool(here_states & {LineState.OL, LineState.SL})

        if proto in (Protocol.MESI, Protocol.MESIF):
            for c in others:
                die = self.config.die_of(c)
                messages.append(Invalidation(line, die, c, die != my_die))
        elif proto == Protocol.MOESI_OLSL and local_line:
            # all copies die-local by invariant: no remote messages
            for c in others:
                messages.append(Invalidation(line, my_die, c, False))
        elif proto in MOESI_FAMILY and shared_line:
            suppress = False
            if proto == Protocol.MOESI_HTA and line in self.directories[my_die]:
                suppress = True  # filter hit: copies verified die-local
            if suppress:
                for c in others:
                    messages.append(Invalidation(line, my_die, c, False))
            else:
                # nothing tracks the sharers: broadcast to every other die
                for die in range(self.config.dies):
                    if die != my_die:
                        messages.append(Invalidation(line, die, None, True))
                for c in others:
                    die = self.config.die_of(c)
                    if die == my_die:
                        messages.append(Invalidation(line, die, c, False))
        else:
            # unshared E/M copy at another core: directed probe
            for c in others:
                die = self.config.die_of(c)
                messages.append(Invalidation(line, die, c, die != my_die))

        for c in others:
            self._set_state(line, c, LineState.I)
        self._set_state(line, core, LineState.M, new_value)
        self.line_value[line] = new_value
        if proto == Protocol.MOESI_HTA:
            self._directory_drop(line)  # line is exclusive again
        return messages

    # -- public API ------------------------------------------------------

    def step(self, event: TraceEvent) -> list[Invalidation]:
        """Apply one event; returns the invalidation messages it caused."""
        if not (0 <= event.core < self.config.n_cores):
            raise ValidationError(f"core {event.core} out of range")
        if event.op not in OPS:
            raise ValidationError(f"unknown op {event.op!r}")
        if event.line < 0:
            raise ValidationError("line ids must be non-negative")
        if event.op == "read":
            messages = self._read(event.line, event.core)
        else:
            # write, and atomic = read-for-ownership + write
            messages = self._write(event.line, event.core)
        for msg in messages:
            if msg.remote:
                self.stats.remote_die_invalidations += 1
            else:
                self.stats.local_invalidations += 1
        self.stats.events += 1
        self._check_invariants(event.line)
        return messages

    def read_value(self, line: int, core: int) -> int:
        """Value tag a read by `core` observes (for coherence checks)."""
        self.step(TraceEvent(core, "read", line))
        return self._holders(line)[core].value


def replay(trace, config: SimConfig) -> SimStats:
    """Run a trace (iterable of TraceEvent) through a fresh simulator."""
    sim = CoherenceSim(config)
    for ev in trace:
        sim.step(ev)
    return sim.stats


# ------------------------------------------------------------ trace files

def parse_trace_line(text: str, lineno: int = 0) -> TraceEvent | None:
    stripped = text.strip()
    if not stripped or stripped.startswith("#"):
        return None
    parts = stripped.split()
    if len(parts) != 3:
        raise ParseError(f"trace line {lineno}: expected 'core op line'")
    try:
        core = int(parts[0])
        line = int(parts[2])
    except ValueError as exc:
        raise ParseError(f"trace line {lineno}: {exc}") from exc
    op = parts[1]
    if op not in OPS:
        raise ParseError(f"trace line {lineno}: unknown op {op!r}")
    return TraceEvent(core, op, line)


def load_trace(path) -> list[TraceEvent]:
    events = []
    try:
        with open(path) as f:
            for i, text in enumerate(f, 1):
                ev = parse_trace_line(text, i)
                if ev is not None:
                    events.append(ev)
    except OSError as exc:
        raise ParseError(f"cannot read trace {path}: {exc}") from exc
    return events
