"""Result rows, CSV/JSON persistence, model comparison, and plot data.

The CSV column order is frozen (schema v1, see COLUMNS); a comment header
carries the schema version, host hash, timer calibration, and the byte
accounting conventions, so downstream plot scripts can rely on both the
layout and the semantics.  Sweeps count line_size per distinct line
touched; contention counts line_size per operation.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, fields

from . import fitting, model
from .errors import IoError, NoOverlap, ParseError, UnknownFacetKey
from .harness import Measurement, Summary, host_hash, summarize
from .kernels import BenchOp
from .model import CoherencyState, Level, ModelOptions, ModelParams, ModelQuery, Op
from .topology import LocalityClass, MachineDescription, classify

SCHEMA_VERSION = 1

_BENCH_TO_MODEL_OP = {
    BenchOp.CAS_SUCCEED: Op.CAS,
    BenchOp.CAS_FAIL: Op.CAS,
    BenchOp.FAA: Op.FAA,
    BenchOp.SWP: Op.SWP,
    BenchOp.READ: Op.READ,
    BenchOp.WRITE: Op.WRITE,
}


@dataclass(frozen=True)
class ResultRow:
    kernel: str
    operation: str
    state: str
    level: str
    owner: int
    sharers: str  # semicolon-joined core ids
    locality: str
    buffer_size: int
    operand_bits: int
    threads: str  # semicolon-joined core ids
    n_threads: int
    repetitions: int
    min_stride: int
    unaligned: bool
    two_operands: bool
    sweep_stride: int
    duration_ns: int
    chunk_size: int
    seed: int
    hugepages: bool
    unit: str
    median: float
    min: float
    max: float
    iqr: float
    samples: int
    placement_verified: bool | None
    metadata_hash: str


COLUMNS = tuple(f.name for f in fields(ResultRow))

_BOOL_FIELDS = {"unaligned", "two_operands", "hugepages"}
_INT_FIELDS = {"owner", "buffer_size", "operand_bits", "n_threads",
               "repetitions", "min_stride", "sweep_stride", "duration_ns",
               "chunk_size", "seed", "samples"}
_FLOAT_FIELDS = {"median", "min", "max", "iqr"}


def metadata_hash(measurement: Measurement) -> str:
    core = {
        "host_hash": measurement.metadata.get("host_hash", ""),
        "calibration": measurement.metadata.get("calibration", {}),
        "spec": measurement.metadata.get("spec", {}),
    }
    blob = json.dumps(core, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def row_from_measurements(measurements: list[Measurement],
                          desc: MachineDescription) -> ResultRow:
    """Summarize one spec's repetitions into a single result row."""
    summary: Summary = summarize(measurements)
    m0 = measurements[0]
    spec = m0.spec
    pl = spec.placement
    verified_flags = [m.metadata["flags"].get("placement_verified")
                      for m in measurements]
    if any(v is None for v in verified_flags):
        verified = None
    else:
        verified = all(verified_flags)
    return ResultRow(
        kernel=spec.kernel,
        operation=spec.operation.value,
        state=pl.state.value,
        level=pl.level.value,
        owner=pl.owner,
        sharers=";".join(str(c) for c in sorted(pl.sharers)),
        locality=classify(spec.threads[0], pl.owner, desc).value,
        buffer_size=spec.buffer_size,
        operand_bits=spec.operand_bits,
        threads=";".join(str(c) for c in spec.threads),
        n_threads=len(spec.threads),
        repetitions=spec.repetitions,
        min_stride=spec.min_stride,
        unaligned=spec.unaligned,
        two_operands=spec.two_operands,
        sweep_stride=spec.sweep_stride,
        duration_ns=spec.duration_ns,
        chunk_size=spec.chunk_size,
        seed=spec.seed,
        hugepages=spec.hugepages,
        unit=spec.unit,
        median=summary.median,
        min=summary.min,
        max=summary.max,
        iqr=summary.iqr,
        samples=summary.count,
        placement_verified=verified,
        metadata_hash=metadata_hash(m0),
    )


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)  # full precision, round-trippable
    return str(value)


def _parse_cell(name: str, text: str):
    if name == "placement_verified":
        if text == "":
            return None
        return text == "true"
    if name in _BOOL_FIELDS:
        return text == "true"
    if name in _INT_FIELDS:
        return int(text)
    if name in _FLOAT_FIELDS:
        return float(text)
    return text


def emit(rows, fmt: str, path, *, calibration: dict | None = None,
         host: str = "") -> None:
    """Write rows as CSV (comment header + fixed columns) or JSON."""
    rows = list(rows)
    if fmt not in ("csv", "json"):
        raise IoError(f"unknown output format {fmt!r}")
    if len({row.unit for row in rows}) > 1:
        raise IoError("a result file holds one unit; split ns/op from bytes/s")
    header = {
        "schema_version": SCHEMA_VERSION,
        "host": host,
        "calibration": calibration or {},
        "byte_accounting": {
            "bw-sweep": "line_size per distinct line touched",
            "contend": "line_size per operation",
        },
    }
    try:
        with open(path, "w", newline="") as f:
            if fmt == "csv":
                for key, value in header.items():
                    f.write(f"# {key}: {json.dumps(value)}\n")
                writer = csv.writer(f)
                writer.writerow(COLUMNS)
                for row in rows:
                    writer.writerow([_cell(getattr(row, c)) for c in COLUMNS])
            else:
                payload = dict(header)
                payload["rows"] = [
                    {c: getattr(row, c) for c in COLUMNS} for row in rows
                ]
                json.dump(payload, f, indent=2)
                f.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def parse(path) -> list[ResultRow]:
    """Read rows back from either emitted format."""
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    stripped = text.lstrip()
    if stripped.startswith("{"):
        data = json.loads(text)
        return [
            ResultRow(**{c: row[c] for c in COLUMNS}) for row in data["rows"]
        ]
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or tuple(reader.fieldnames) != COLUMNS:
        raise ParseError(f"{path}: unexpected CSV columns")
    out = []
    for rec in reader:
        out.append(ResultRow(**{
            c: _parse_cell(c, rec[c]) for c in COLUMNS
        }))
    return out


# ----------------------------------------------------------- comparison

def _query_for_row(row: ResultRow, desc: MachineDescription) -> ModelQuery | None:
    op = _BENCH_TO_MODEL_OP[BenchOp(row.operation)]
    if row.state == "I" or row.kernel == "contend":
        # invalid-state rows are memory reads; contention is measured, not
        # modeled (the model is uncontended by design)
        if row.kernel == "contend":
            return None
        state = CoherencyState.E
        level = Level.MEMORY
    else:
        state = CoherencyState(row.state)
        level = Level(row.level)
    sharer_cores = [int(s) for s in row.sharers.split(";") if s]
    measuring = int(row.threads.split(";")[0])
    sharers = tuple(
        classify(measuring, s, desc) for s in sharer_cores
    )
    pattern = "one-op-per-line"
    if row.kernel == "bw-sweep" and row.sweep_stride < row.min_stride:
        pattern = "sequential"
    return ModelQuery(
        op=op, state=state, level=level,
        locality=LocalityClass(row.locality), sharers=sharers,
        operand_bits=row.operand_bits, pattern=pattern,
    )


@dataclass
class ComparisonGroup:
    key: tuple
    predicted: float
    measured_median: float
    nrmse: float
    samples: int
    unit: str


@dataclass
class ComparisonReport:
    groups: list[ComparisonGroup]
    flagged: list[tuple]
    threshold: float


def compare(rows, params: ModelParams, desc: MachineDescription,
            threshold: float = fitting.DEFAULT_NRMSE_THRESHOLD,
            options: ModelOptions = ModelOptions()) -> ComparisonReport:
    """Model predictions vs measured rows, grouped by
    (operation, state, locality, level); inputs are never mutated."""
    groups: dict = {}
    for row in rows:
        q = _query_for_row(row, desc)
        if q is None:
            continue
        if row.unit == "ns/op":
            pred = model.latency(q, params, desc, options)
        else:
            pred = model.bandwidth(q, params, desc, options)
        key = (row.operation, row.state, row.locality, row.level, row.unit)
        groups.setdefault(key, []).append((pred, row.median, row.samples))
    if not groups:
        raise NoOverlap("no rows are comparable against the model")
    out = []
    flagged = []
    for key, entries in sorted(groups.items()):
        preds = [e[0] for e in entries]
        meds = [e[1] for e in entries]
        score = fitting.nrmse(preds, meds)
        n = sum(e[2] for e in entries)
        out.append(ComparisonGroup(
            key=key, predicted=preds[0] if len(preds) == 1 else
            float(sum(preds) / len(preds)),
            measured_median=float(sum(meds) / len(meds)),
            nrmse=score, samples=n, unit=key[-1],
        ))
        if score > threshold:
            flagged.append(key)
    return ComparisonReport(groups=out, flagged=flagged, threshold=threshold)


def observations_from_rows(rows, desc: MachineDescription) -> list:
    """Project latency rows onto fitting observations."""
    obs = []
    for row in rows:
        if row.unit != "ns/op":
            continue
        q = _query_for_row(row, desc)
        if q is None:
            continue
        obs.append(fitting.Observation(
            op=q.op, state=q.state, level=q.level, locality=q.locality,
            latency_ns=row.median, sharers=q.sharers,
        ))
    return obs


# ------------------------------------------------------------ plot data

def plotdata(rows, facet_keys, outdir) -> list[str]:
    """One whitespace-separated series file per facet combination;
    x = thread count for contention rows, buffer size otherwise."""
    from pathlib import Path

    rows = list(rows)
    for key in facet_keys:
        if key not in COLUMNS:
            raise UnknownFacetKey(f"{key!r} is not a result-row field")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    series: dict = {}
    for row in rows:
        facet = tuple((k, getattr(row, k)) for k in facet_keys)
        x = row.n_threads if row.kernel == "contend" else row.buffer_size
        series.setdefault(facet, []).append((x, row.median))
    written = []
    for facet, points in sorted(series.items()):
        name = "__".join(f"{k}={v}" for k, v in facet) or "all"
        name = "".join(ch if ch.isalnum() or ch in "=_.-" else "_"
                       for ch in name)
        path = outdir / f"{name}.dat"
        with open(path, "w") as f:
            for x, y in sorted(points):
                f.write(f"{x} {_cell(float(y))}\n")
        written.append(str(path))
    return written
