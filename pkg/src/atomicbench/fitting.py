"""Estimate model parameters from measurements and score model fidelity.

The procedure is direct median extraction, not regression:

  * per-level local read latencies give R_L1, R_L2, R_L3;
  * the hop cost H is the median cross-die exclusive-state read minus the
    modeled on-die value (on designs without an L3, remote reads on the
    single die play that role, since the per-hop cost appears there);
  * the memory overhead M is the median memory read minus the last-level
    latency;
  * each execute cost E(A) is the median local-L1 exclusive-state latency
    of the atomic minus R_L1;
  * the residual table O holds, per (operation, state, locality, level)
    group, the median of (observed - modeled-without-O), so re-predicting
    the fitting set leaves a group-median residual of exactly zero.

Fidelity is scored with the normalized root-mean-square error

    NRMSE = (1 / mean(x)) * sqrt(mean((x_hat - x)^2))

and groups above the threshold (default 10%) are flagged.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field, replace

from .errors import EmptyInput, MissingCoverage, ZeroMean
from .model import (
    ATOMIC_OPS,
    CoherencyState,
    Level,
    ModelOptions,
    ModelParams,
    ModelQuery,
    Op,
    latency,
)
from .topology import LocalityClass, MachineDescription

DEFAULT_NRMSE_THRESHOLD = 0.10
MIN_GROUP_FOR_FLAGGING = 5


@dataclass(frozen=True)
class Observation:
    """One summarized latency data point, the unit fitting works on."""

    op: Op
    state: CoherencyState
    level: Level
    locality: LocalityClass
    latency_ns: float
    sharers: tuple[LocalityClass, ...] = ()

    @property
    def group(self) -> tuple[str, str, str, str]:
        return (self.op.value, self.state.value, self.locality.value,
                self.level.value)


@dataclass
class FitReport:
    params: ModelParams
    o_table: dict
    nrmse_by_group: dict
    flagged: list
    threshold: float
    group_sizes: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)


def nrmse(predictions, observations) -> float:
    """Normalized root-mean-square error of paired samples."""
    preds = list(predictions)
    obs = list(observations)
    if not preds or not obs:
        raise EmptyInput("nrmse needs at least one paired sample")
    if len(preds) != len(obs):
        raise EmptyInput(
            f"prediction/observation lengths differ: {len(preds)} vs {len(obs)}"
        )
    mean = sum(obs) / len(obs)
    if mean <= 0:
        raise ZeroMean("observation mean must be positive")
    mse = sum((p - x) ** 2 for p, x in zip(preds, obs)) / len(obs)
    return math.sqrt(mse) / mean


def _median_of(values) -> float:
    return float(statistics.median(values))


def _pick(observations, **attrs):
    out = []
    for o in observations:
        if all(getattr(o, k) == v for k, v in attrs.items()):
            out.append(o)
    return out


def fit_base_params(observations, desc: MachineDescription,
                    notes: list | None = None) -> ModelParams:
    """Extract R_L*, H, M and E(A) medians; raises MissingCoverage naming
    the first absent measurement class."""
    notes = notes if notes is not None else []
    obs = list(observations)
    if not obs:
        raise MissingCoverage("no observations at all")

    def require(subset, what):
        if not subset:
            raise MissingCoverage(f"missing measurement class: {what}")
        return subset

    r = {}
    levels = [Level.L1, Level.L2] + ([Level.L3] if desc.has_l3 else [])
    for lv in levels:
        sub = require(
            _pick(obs, op=Op.READ, state=CoherencyState.E,
                  locality=LocalityClass.SAME_CORE, level=lv),
            f"local {lv.value} read latency",
        )
        r[lv] = _median_of([o.latency_ns for o in sub])

    hop = None
    if desc.has_l3:
        remote = [
            o for o in obs
            if o.op == Op.READ and o.state == CoherencyState.E
            and o.locality in (LocalityClass.SAME_SOCKET_OTHER_DIE,
                               LocalityClass.OTHER_SOCKET)
            and o.level in (Level.L1, Level.L2, Level.L3)
        ]
        if len(desc.dies) > 1:
            require(remote, "cross-die exclusive-state read (for H)")
        if remote:
            on_die = 2 * r[Level.L3] - r[Level.L1]
            hop = _median_of([o.latency_ns for o in remote]) - on_die
    else:
        remote = [
            o for o in obs
            if o.op == Op.READ and o.state == CoherencyState.E
            and o.locality != LocalityClass.SAME_CORE
            and o.level in (Level.L1, Level.L2)
        ]
        require(remote, "remote exclusive-state read (for H on no-L3 designs)")
        hop = _median_of([o.latency_ns for o in remote]) \
            - (2 * r[Level.L2] - r[Level.L1])

    mem_obs = require(
        _pick(obs, op=Op.READ, locality=LocalityClass.SAME_CORE,
              level=Level.MEMORY),
        "local memory read (for M)",
    )
    r_last = r[Level.L3] if desc.has_l3 else r[Level.L2]
    mem = _median_of([o.latency_ns for o in mem_obs]) - r_last

    execute = {}
    for op in ATOMIC_OPS:
        sub = _pick(obs, op=op, state=CoherencyState.E,
                    locality=LocalityClass.SAME_CORE, level=Level.L1)
        if sub:
            execute[op.value] = _median_of([o.latency_ns for o in sub]) \
                - r[Level.L1]
    if not execute:
        raise MissingCoverage(
            "missing measurement class: local-L1 exclusive-state atomic "
            "latency (for E(A))"
        )

    def clamp(name, value):
        if value is not None and value < 0:
            notes.append(f"{name} fitted negative ({value:.3g} ns), clamped to 0")
            return 0.0
        return value

    params = ModelParams(
        r_l1=clamp("R_L1", r[Level.L1]),
        r_l2=clamp("R_L2", max(r[Level.L2], r[Level.L1])),
        r_l3=None if Level.L3 not in r else clamp(
            "R_L3", max(r[Level.L3], r[Level.L2])),
        hop=clamp("H", hop),
        mem=clamp("M", mem),
        execute={k: clamp(f"E({k})", v) for k, v in execute.items()},
        line_size=desc.line_size,
    )
    if params.r_l2 != r[Level.L2] or (Level.L3 in r and params.r_l3 != r[Level.L3]):
        notes.append("level latencies reordered to satisfy R_L1 <= R_L2 <= R_L3")
    return params.validate()


def _query_for(o: Observation) -> ModelQuery:
    return ModelQuery(op=o.op, state=o.state, level=o.level,
                      locality=o.locality, sharers=o.sharers)


def fit_o_table(observations, params: ModelParams, desc: MachineDescription,
                options: ModelOptions = ModelOptions()) -> dict:
    """Median residual per (op, state, locality, level) group of atomic
    observations; negative entries are legitimate."""
    bare = replace(params, o_table={})
    groups: dict = {}
    for o in observations:
        if o.op not in ATOMIC_OPS:
            continue
        pred = latency(_query_for(o), bare, desc, options)
        groups.setdefault(o.group, []).append(o.latency_ns - pred)
    if not groups:
        raise MissingCoverage("no atomic-operation observations to fit O from")
    return {key: _median_of(res) for key, res in sorted(groups.items())}


def fit(observations, desc: MachineDescription,
        threshold: float = DEFAULT_NRMSE_THRESHOLD,
        options: ModelOptions = ModelOptions()) -> FitReport:
    """Full pipeline: base params, residual table, per-group NRMSE."""
    obs = list(observations)
    notes: list = []
    params = fit_base_params(obs, desc, notes)
    o_table = fit_o_table(obs, params, desc, options)
    fitted = replace(params, o_table=o_table)

    by_group: dict = {}
    for o in obs:
        by_group.setdefault(o.group, []).append(o)
    nrmse_by_group = {}
    sizes = {}
    flagged = []
    for key, members in sorted(by_group.items()):
        preds = [latency(_query_for(m), fitted, desc, options) for m in members]
        vals = [m.latency_ns for m in members]
        score = nrmse(preds, vals)
        nrmse_by_group[key] = score
        sizes[key] = len(members)
        if score > threshold and len(members) >= MIN_GROUP_FOR_FLAGGING:
            flagged.append(key)
    if len(desc.dies) > 1 and params.hop is not None:
        notes.append(
            "H isolated by subtracting the modeled on-die read from the "
            "cross-die median (cross-die paths traverse the shared cache)"
        )
    return FitReport(params=fitted, o_table=o_table,
                     nrmse_by_group=nrmse_by_group, flagged=flagged,
                     threshold=threshold, group_sizes=sizes, notes=notes)
