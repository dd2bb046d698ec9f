"""Tick-counter calibration and tick-to-nanosecond conversion.

The native module reads a serialized TSC when the CPU advertises an
invariant one, otherwise the OS monotonic clock.  Either way, `calibrate`
measures ticks-per-nanosecond against the wall clock and the timer's own
read overhead, which `duration_ns` subtracts from every reported interval.
Hosts on the monotonic fallback are flagged low-resolution in reports.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

from . import _kernels
from .errors import UnstableClock

MIN_CALIBRATION_SPAN_NS = 10_000_000  # 10 ms
_OVERHEAD_SANITY_TICKS = 10_000


@dataclass(frozen=True)
class TimerCalibration:
    ticks_per_ns: float
    read_overhead_ticks: int
    calibration_wall_span_ns: int
    source: str  # "tsc" or "monotonic"

    @property
    def low_resolution(self) -> bool:
        return self.source != "tsc"

    def to_dict(self) -> dict:
        return {
            "ticks_per_ns": self.ticks_per_ns,
            "read_overhead_ticks": self.read_overhead_ticks,
            "calibration_wall_span_ns": self.calibration_wall_span_ns,
            "source": self.source,
        }


def now() -> int:
    """Current tick count; monotone non-decreasing within a thread."""
    return _kernels.now()


def timer_source() -> str:
    return _kernels.timer_source()


def _measure_rate(span_ns: int) -> float:
    w0 = time.monotonic_ns()
    t0 = _kernels.now()
    deadline = w0 + span_ns
    while time.monotonic_ns() < deadline:
        pass
    t1 = _kernels.now()
    w1 = time.monotonic_ns()
    return (t1 - t0) / (w1 - w0)


def _measure_overhead(trials: int = 5000) -> int:
    for _ in range(200):  # warm the code path before sampling
        _kernels.now()
    deltas = []
    for _ in range(trials):
        a = _kernels.now()
        b = _kernels.now()
        deltas.append(b - a)
    return int(statistics.median(deltas))


def calibrate(min_span_ns: int = 25_000_000) -> TimerCalibration:
    """Measure ticks-per-ns over two passes of at least `min_span_ns` each.

    Raises UnstableClock when the two passes disagree by more than 1%, and
    ValueError for spans below the 10 ms floor.
    """
    if min_span_ns < MIN_CALIBRATION_SPAN_NS:
        raise ValueError(
            f"calibration span must be >= {MIN_CALIBRATION_SPAN_NS} ns, "
            f"got {min_span_ns}"
        )
    r1 = _measure_rate(min_span_ns)
    r2 = _measure_rate(min_span_ns)
    if r1 <= 0 or r2 <= 0:
        raise UnstableClock("tick counter did not advance during calibration")
    if abs(r1 - r2) / max(r1, r2) > 0.01:
        raise UnstableClock(
            f"consecutive calibrations differ by more than 1%: {r1:.6f} vs {r2:.6f}"
        )
    overhead = _measure_overhead()
    if overhead < 0 or overhead >= _OVERHEAD_SANITY_TICKS:
        raise UnstableClock(f"timer read overhead {overhead} ticks fails sanity bound")
    return TimerCalibration(
        ticks_per_ns=(r1 + r2) / 2.0,
        read_overhead_ticks=overhead,
        calibration_wall_span_ns=2 * min_span_ns,
        source=_kernels.timer_source(),
    )


def governor_state() -> str:
    """Current cpufreq scaling governor(s), 'unknown' when not exported.
    Frequency scaling cannot be toggled from user space; runs record the
    state so results disclose it."""
    import glob

    governors = set()
    for path in glob.glob(
        "/sys/devices/system/cpu/cpu*/cpufreq/scaling_governor"
    ):
        try:
            with open(path) as f:
                governors.add(f.read().strip())
        except OSError:
            pass
    return ",".join(sorted(governors)) if governors else "unknown"


def preflight_checklist() -> list[str]:
    """Operator checklist for the frequency/prefetch interference the suite
    cannot control programmatically."""
    items = [
        "disable Turbo Boost / boost clocks in firmware where possible",
        "disable frequency scaling (EIST) or pin the performance governor",
        "disable deep C-states for stable wake-up latencies",
        "disable hardware and adjacent-line prefetchers where the firmware "
        "allows; otherwise rely on the sparse access patterns",
        "disable SMT so every visible core is a physical core",
        "reserve hugepages to keep TLB effects out of the numbers",
    ]
    gov = governor_state()
    items.append(f"current scaling governor: {gov}")
    if timer_source() != "tsc":
        items.append(
            "no invariant TSC detected: timings use the OS monotonic clock "
            "and rows are marked low-resolution"
        )
    return items


def to_ns(ticks: int, cal: TimerCalibration) -> float:
    """Linear tick-to-nanosecond conversion."""
    return ticks / cal.ticks_per_ns


def duration_ns(t_start: int, t_end: int, cal: TimerCalibration) -> float:
    """Interval length in ns with the timer's own overhead subtracted,
    clamped at zero."""
    raw = t_end - t_start
    return to_ns(max(0, raw - cal.read_overhead_ticks), cal)
