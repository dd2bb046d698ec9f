"""Machine description: which cores share which caches, dies, and sockets.

Every other part of the suite consumes a ``MachineDescription``, either
detected from the running host (``detect``) or loaded from a JSON file
(``load``).  Descriptions are immutable after construction and serialize
back to the file format canonically, so a detected description can seed
reproducible runs.
"""

from __future__ import annotations

import json
import os
import re
import subprocess
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import ParseError, TopologyUnavailable, UnknownCore, ValidationError

PROTOCOLS = ("MESIF", "MOESI", "MESI-GOLS", "MESI")
POLICIES = ("write-back", "write-through")
INCLUSIVITIES = ("inclusive", "exclusive", "neither")

_SYS_CPU = Path("/sys/devices/system/cpu")


class LocalityClass(str, Enum):
    """Distance class between a requesting core and the data's owner."""

    SAME_CORE = "same-core"
    SAME_L2_GROUP = "same-L2-group"
    SAME_DIE = "same-die"
    SAME_SOCKET_OTHER_DIE = "same-socket-other-die"
    OTHER_SOCKET = "other-socket"


@dataclass(frozen=True)
class CacheLevel:
    level: int
    capacity: int
    policy: str
    inclusivity: str
    groups: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class MachineDescription:
    cores: tuple[int, ...]
    line_size: int
    levels: tuple[CacheLevel, ...]
    dies: tuple[tuple[int, ...], ...]
    sockets: tuple[tuple[int, ...], ...]  # each socket is a tuple of die indices
    protocol: str
    memory_channels: int = 1
    hugepage_size: int = 2 * 1024 * 1024
    defaults_applied: tuple[str, ...] = field(default_factory=tuple)

    def level(self, n: int) -> CacheLevel | None:
        for lv in self.levels:
            if lv.level == n:
                return lv
        return None

    @property
    def has_l3(self) -> bool:
        return self.level(3) is not None

    @property
    def l3_inclusive(self) -> bool:
        lv = self.level(3)
        return lv is not None and lv.inclusivity == "inclusive"

    @property
    def write_through_l1(self) -> bool:
        lv = self.level(1)
        return lv is not None and lv.policy == "write-through"

    def group_of(self, level: int, core: int) -> tuple[int, ...] | None:
        lv = self.level(level)
        if lv is None:
            return None
        for g in lv.groups:
            if core in g:
                return g
        return None

    def die_of(self, core: int) -> int:
        for i, d in enumerate(self.dies):
            if core in d:
                return i
        raise UnknownCore(f"core {core} not in description")

    def socket_of(self, core: int) -> int:
        die = self.die_of(core)
        for i, s in enumerate(self.sockets):
            if die in s:
                return i
        raise UnknownCore(f"core {core} has no socket")

    def private_capacity_upto(self, level: int, core: int) -> int:
        """Combined capacity of this core's cache groups at levels 1..level."""
        total = 0
        for lv in self.levels:
            if lv.level <= level and self.group_of(lv.level, core) is not None:
                total += lv.capacity
        return total


def _norm_groups(groups) -> tuple[tuple[int, ...], ...]:
    return tuple(sorted((tuple(sorted(set(g))) for g in groups), key=lambda g: g[0]))


def validate(desc: MachineDescription) -> MachineDescription:
    """Check every structural invariant, raising ValidationError that names
    the violated one.  Returns the description for chaining."""
    if not desc.cores:
        raise ValidationError("core list must be nonempty")
    if len(set(desc.cores)) != len(desc.cores):
        raise ValidationError("core ids must be unique")
    if desc.line_size <= 0 or desc.line_size & (desc.line_size - 1):
        raise ValidationError("line_size must be a positive power of two")
    if desc.protocol not in PROTOCOLS:
        raise ValidationError(f"unknown protocol {desc.protocol!r}")
    if desc.memory_channels < 1:
        raise ValidationError("memory_channels must be >= 1")
    if desc.hugepage_size < 0:
        raise ValidationError("hugepage_size must be >= 0")

    core_set = set(desc.cores)
    seen_levels = set()
    for lv in desc.levels:
        if lv.level not in (1, 2, 3):
            raise ValidationError(f"cache level index {lv.level} out of range 1..3")
        if lv.level in seen_levels:
            raise ValidationError(f"duplicate cache level {lv.level}")
        seen_levels.add(lv.level)
        if lv.capacity <= 0:
            raise ValidationError(f"L{lv.level} capacity must be positive")
        if lv.policy not in POLICIES:
            raise ValidationError(f"L{lv.level} policy {lv.policy!r} unknown")
        if lv.inclusivity not in INCLUSIVITIES:
            raise ValidationError(f"L{lv.level} inclusivity {lv.inclusivity!r} unknown")
        _check_partition(lv.groups, core_set, f"L{lv.level} sharing groups")

    for lo, hi in ((1, 2), (2, 3)):
        inner, outer = desc.level(lo), desc.level(hi)
        if inner is None or outer is None:
            continue
        for g in inner.groups:
            if not any(set(g) <= set(og) for og in outer.groups):
                raise ValidationError(
                    f"nesting invariant: L{lo} group {list(g)} spans multiple "
                    f"L{hi} groups"
                )

    _check_partition(desc.dies, core_set, "dies")
    die_ids = set(range(len(desc.dies)))
    _check_partition(desc.sockets, die_ids, "sockets (as partition of dies)")
    return desc


def _check_partition(groups, universe, what: str) -> None:
    seen: set = set()
    for g in groups:
        gs = set(g)
        if not gs:
            raise ValidationError(f"{what}: empty group")
        if gs & seen:
            raise ValidationError(f"{what}: overlapping groups")
        if not gs <= universe:
            raise ValidationError(f"{what}: group member outside the core set")
        seen |= gs
    if seen != universe:
        raise ValidationError(f"{what}: groups do not cover every member")


def classify(requester: int, owner: int, desc: MachineDescription) -> LocalityClass:
    """Map a (requester, owner) core pair to its locality class."""
    if requester not in desc.cores:
        raise UnknownCore(f"core {requester} not in description")
    if owner not in desc.cores:
        raise UnknownCore(f"core {owner} not in description")
    if requester == owner:
        return LocalityClass.SAME_CORE
    g = desc.group_of(2, requester)
    if g is not None and owner in g:
        return LocalityClass.SAME_L2_GROUP
    if desc.die_of(requester) == desc.die_of(owner):
        return LocalityClass.SAME_DIE
    if desc.socket_of(requester) == desc.socket_of(owner):
        return LocalityClass.SAME_SOCKET_OTHER_DIE
    return LocalityClass.OTHER_SOCKET


# ------------------------------------------------------------- detection

def _read_text(path: Path) -> str | None:
    try:
        return path.read_text().strip()
    except OSError:
        return None


def _parse_cpu_list(text: str) -> list[int]:
    cpus: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-")
            cpus.extend(range(int(lo), int(hi) + 1))
        else:
            cpus.append(int(part))
    return cpus


def _parse_size(text: str) -> int:
    m = re.fullmatch(r"(\d+)([KMG]?)B?", text.strip())
    if not m:
        raise ParseError(f"cannot parse cache size {text!r}")
    mult = {"": 1, "K": 1024, "M": 1024 ** 2, "G": 1024 ** 3}[m.group(2)]
    return int(m.group(1)) * mult


def _sysfs_cache_levels(cores: list[int]) -> list[CacheLevel] | None:
    by_level: dict[int, dict] = {}
    found = False
    core_set = set(cores)
    for cpu in cores:
        cache_dir = _SYS_CPU / f"cpu{cpu}" / "cache"
        if not cache_dir.is_dir():
            continue
        for idx in sorted(cache_dir.glob("index*")):
            typ = _read_text(idx / "type")
            if typ not in ("Data", "Unified"):
                continue
            lvl_s = _read_text(idx / "level")
            size_s = _read_text(idx / "size")
            shared = _read_text(idx / "shared_cpu_list")
            if lvl_s is None or size_s is None or shared is None:
                continue
            lvl = int(lvl_s)
            if lvl > 3:
                continue
            found = True
            group = tuple(sorted(set(_parse_cpu_list(shared)) & core_set))
            if not group:
                continue
            ent = by_level.setdefault(lvl, {"capacity": _parse_size(size_s), "groups": set()})
            ent["groups"].add(group)
    if not found:
        return None
    levels = []
    for lvl in sorted(by_level):
        ent = by_level[lvl]
        levels.append(
            CacheLevel(
                level=lvl,
                capacity=ent["capacity"],
                policy="write-back",
                inclusivity="neither",
                groups=_norm_groups(ent["groups"]),
            )
        )
    return levels


def _getconf_values() -> dict[str, int]:
    try:
        out = subprocess.run(
            ["getconf", "-a"], capture_output=True, text=True, timeout=10
        ).stdout
    except (OSError, subprocess.SubprocessError):
        return {}
    values = {}
    for line in out.splitlines():
        parts = line.split()
        if len(parts) == 2 and parts[1].isdigit():
            values[parts[0]] = int(parts[1])
    return values


def _sysconf_cache_levels(cores: list[int], notes: list[str]) -> list[CacheLevel] | None:
    conf = _getconf_values()
    sizes = {}
    for lvl, key in ((1, "LEVEL1_DCACHE_SIZE"), (2, "LEVEL2_CACHE_SIZE"),
                     (3, "LEVEL3_CACHE_SIZE")):
        v = conf.get(key, 0)
        if v > 0:
            sizes[lvl] = v
    if not sizes:
        return None
    notes.append("cache sharing groups assumed: private L1/L2, fully shared L3")
    levels = []
    singletons = _norm_groups([(c,) for c in cores])
    everyone = (tuple(sorted(cores)),)
    for lvl, cap in sorted(sizes.items()):
        groups = everyone if lvl == 3 else singletons
        levels.append(CacheLevel(lvl, cap, "write-back", "neither", groups))
    return levels


def _vendor_protocol(notes: list[str]) -> str:
    vendor = ""
    try:
        with open("/proc/cpuinfo") as f:
            for line in f:
                if line.startswith("vendor_id"):
                    vendor = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    if vendor == "GenuineIntel":
        return "MESIF"
    if vendor == "AuthenticAMD":
        return "MOESI"
    notes.append(f"protocol unknown for vendor {vendor!r}, defaulted to MESI")
    return "MESI"


def detect() -> MachineDescription:
    """Build a MachineDescription from OS-exported topology.

    Falls back from sysfs cache metadata to sysconf sizes; every assumption
    taken on the way is recorded in ``defaults_applied`` so reports can
    disclose it.  Raises TopologyUnavailable when no cache metadata exists.
    """
    notes: list[str] = []
    try:
        cores = sorted(os.sched_getaffinity(0))
    except (AttributeError, OSError) as exc:
        raise TopologyUnavailable(f"cannot enumerate usable cores: {exc}") from exc
    if not cores:
        raise TopologyUnavailable("scheduler affinity set is empty")

    levels = _sysfs_cache_levels(cores)
    if levels is None:
        levels = _sysconf_cache_levels(cores, notes)
        if levels is not None:
            notes.insert(0, "cache geometry from sysconf (sysfs unavailable)")
    if levels is None:
        raise TopologyUnavailable("no cache metadata in sysfs or sysconf")
    notes.append("cache write policies assumed write-back")

    line_size = 0
    for cpu in cores:
        t = _read_text(_SYS_CPU / f"cpu{cpu}" / "cache" / "index0" /
                       "coherency_line_size")
        if t:
            line_size = int(t)
            break
    if line_size <= 0:
        line_size = _getconf_values().get("LEVEL1_DCACHE_LINESIZE", 0)
    if line_size <= 0:
        line_size = 64
        notes.append("line size unknown, defaulted to 64")

    # sockets from physical package ids; dies from die ids when exported
    pkg_of: dict[int, int] = {}
    die_of: dict[int, int] = {}
    for cpu in cores:
        topo = _SYS_CPU / f"cpu{cpu}" / "topology"
        pkg = _read_text(topo / "physical_package_id")
        pkg_of[cpu] = int(pkg) if pkg is not None else 0
        die = _read_text(topo / "die_id")
        if die is not None:
            die_of[cpu] = int(die)

    pkgs = sorted(set(pkg_of.values()))
    if len(die_of) == len(cores):
        die_keys = sorted({(pkg_of[c], die_of[c]) for c in cores})
        dies = _norm_groups(
            [tuple(c for c in cores if (pkg_of[c], die_of[c]) == k) for k in die_keys]
        )
    else:
        dies = _norm_groups([tuple(c for c in cores if pkg_of[c] == p) for p in pkgs])
        notes.append("die boundaries not exported, dies defaulted to sockets")
    die_index = {d: i for i, d in enumerate(dies)}
    sockets = _norm_groups(
        [
            tuple(die_index[d] for d in dies if pkg_of[d[0]] == p)
            for p in pkgs
        ]
    )

    protocol = _vendor_protocol(notes)

    hugepage = 0
    try:
        with open("/proc/meminfo") as f:
            for line in f:
                if line.startswith("Hugepagesize:"):
                    hugepage = int(line.split()[1]) * 1024
                    break
    except OSError:
        pass
    if hugepage <= 0:
        hugepage = 2 * 1024 * 1024
        notes.append("hugepage size unknown, defaulted to 2MB")

    notes.append("memory channel count not discoverable, defaulted to 1")
    desc = MachineDescription(
        cores=tuple(cores),
        line_size=line_size,
        levels=tuple(levels),
        dies=dies,
        sockets=sockets,
        protocol=protocol,
        memory_channels=1,
        hugepage_size=hugepage,
        defaults_applied=tuple(notes),
    )
    return validate(desc)


# ---------------------------------------------------------- serialization

def to_dict(desc: MachineDescription) -> dict:
    return {
        "cores": list(desc.cores),
        "line_size": desc.line_size,
        "levels": [
            {
                "level": lv.level,
                "capacity": lv.capacity,
                "policy": lv.policy,
                "inclusivity": lv.inclusivity,
                "groups": [list(g) for g in lv.groups],
            }
            for lv in sorted(desc.levels, key=lambda l: l.level)
        ],
        "dies": [list(d) for d in desc.dies],
        "sockets": [list(s) for s in desc.sockets],
        "protocol": desc.protocol,
        "memory_channels": desc.memory_channels,
        "hugepage_size": desc.hugepage_size,
        "defaults_applied": list(desc.defaults_applied),
    }


def to_json(desc: MachineDescription) -> str:
    return json.dumps(to_dict(desc), indent=2) + "\n"


def from_dict(data: dict) -> MachineDescription:
    try:
        levels = tuple(
            CacheLevel(
                level=int(lv["level"]),
                capacity=int(lv["capacity"]),
                policy=str(lv.get("policy", "write-back")),
                inclusivity=str(lv.get("inclusivity", "neither")),
                groups=_norm_groups(lv["groups"]),
            )
            for lv in data["levels"]
        )
        desc = MachineDescription(
            cores=tuple(sorted(int(c) for c in data["cores"])),
            line_size=int(data["line_size"]),
            levels=tuple(sorted(levels, key=lambda l: l.level)),
            dies=_norm_groups(data["dies"]),
            sockets=_norm_groups(data["sockets"]),
            protocol=str(data["protocol"]),
            memory_channels=int(data.get("memory_channels", 1)),
            hugepage_size=int(data.get("hugepage_size", 2 * 1024 * 1024)),
            defaults_applied=tuple(data.get("defaults_applied", ())),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed machine description: {exc}") from exc
    return validate(desc)


def load(path) -> MachineDescription:
    """Load and validate a machine-description JSON file."""
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ParseError(f"{path}: top level must be an object")
    return from_dict(data)


def save(desc: MachineDescription, path) -> None:
    with open(path, "w") as f:
        f.write(to_json(desc))


def builtin_machine(name: str) -> MachineDescription:
    """Load one of the packaged reference machine descriptions."""
    base = Path(__file__).parent / "data" / "machines"
    path = base / f"{name}.json"
    if not path.exists():
        known = ", ".join(sorted(p.stem for p in base.glob("*.json")))
        raise ParseError(f"unknown machine {name!r}; packaged: {known}")
    return load(path)
