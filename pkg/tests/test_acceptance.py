"""Acceptance suite: every criterion runs at its stated tolerance and
prints one PASS/FAIL line (run with -s to see them inline).

Host-dependent directional claims (criterion 4) need an x86-64 machine
with at least four cores and are skipped with a notice elsewhere; all
other criteria are host-independent or run on any multicore host.
"""

import mmap
import random
import time
from contextlib import contextmanager

import numpy as np
import pytest

from atomicbench import _kernels, timing
from atomicbench.bfs import bfs, kronecker, validate
from atomicbench.cohsim import (
    CoherenceSim,
    Protocol,
    SimConfig,
    TraceEvent,
    replay,
)
from atomicbench.fitting import Observation, fit, fit_base_params, nrmse
from atomicbench.harness import BenchmarkSpec, summarize
from atomicbench.kernels import (
    BenchOp,
    bandwidth_kernel,
    fill_zeros,
    has_cas128,
)
from atomicbench.model import (
    ATOMIC_OPS,
    CoherencyState,
    Level,
    ModelParams,
    ModelQuery,
    Op,
    bandwidth,
    builtin_params,
    latency,
)
from atomicbench.placement import Placement, PlacementLevel, PlacementState
from atomicbench.topology import LocalityClass as LC
from atomicbench.topology import builtin_machine
from atomicbench.workers import WorkerPool

HASWELL = builtin_machine("haswell")
IVY = builtin_machine("ivybridge")


RUNTIME_BOUNDS_S = {1: 1, 2: 1, 3: 10, 4: 300, 5: 60, 6: 60, 7: 30, 8: 120}


@contextmanager
def criterion(number, title):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {number}: FAIL  {title}", flush=True)
        raise
    elapsed = time.perf_counter() - t0
    print(f"ACCEPTANCE {number}: PASS  {title} ({elapsed:.2f}s)", flush=True)
    assert elapsed <= RUNTIME_BOUNDS_S[number], \
        f"criterion {number} exceeded its {RUNTIME_BOUNDS_S[number]}s budget"


def _hw_eligible(host_desc):
    return _kernels.arch() == "x86_64" and len(host_desc.cores) >= 4


def test_criterion_1_model_arithmetic_fixtures():
    with criterion(1, "model arithmetic fixtures and N=1 identity"):
        p = builtin_params("haswell")
        q_cas = ModelQuery(Op.CAS, CoherencyState.E, Level.L1, LC.SAME_CORE)
        assert latency(q_cas, p, HASWELL) == pytest.approx(5.87, abs=1e-12)
        q_read = ModelQuery(Op.READ, CoherencyState.E, Level.L1, LC.SAME_DIE)
        assert latency(q_read, p, HASWELL) == pytest.approx(19.43, abs=1e-12)
        # line-wide operands make N = 1: the sequential form must reduce
        # exactly to the one-op-per-line form for randomized parameters
        rng = random.Random(20150601)
        for _ in range(1000):
            r1 = rng.uniform(0.01, 50)
            params = ModelParams(
                r_l1=r1,
                r_l2=r1 + rng.uniform(0, 50),
                r_l3=r1 + rng.uniform(50, 100),
                hop=rng.uniform(0, 200),
                mem=rng.uniform(0, 400),
                execute={"CAS": rng.uniform(0, 50),
                         "FAA": rng.uniform(0, 50),
                         "SWP": rng.uniform(0, 50)},
            ).validate()
            q_seq = ModelQuery(Op.CAS, CoherencyState.E, Level.L1,
                               LC.SAME_CORE, operand_bits=64 * 8,
                               pattern="sequential")
            q_line = ModelQuery(Op.CAS, CoherencyState.E, Level.L1,
                                LC.SAME_CORE)
            assert bandwidth(q_seq, params, HASWELL) == \
                bandwidth(q_line, params, HASWELL)


def test_criterion_2_nrmse_unit_suite():
    with criterion(2, "normalized RMS error unit suite"):
        assert nrmse([10.0, 20.0], [10.0, 20.0]) == 0.0
        assert nrmse([11.0, 21.0], [10.0, 20.0]) == pytest.approx(
            1 / 15, abs=1e-15
        )
        base = nrmse([11.0, 21.0], [10.0, 20.0])
        for k in (0.001, 3.0, 1e6):
            assert nrmse([11 * k, 21 * k], [10 * k, 20 * k]) == pytest.approx(
                base, rel=1e-12
            )


def _synthesize(params, desc, *, noise=0.0, rng=None, per_group=7):
    queries = [
        ModelQuery(Op.READ, CoherencyState.E, lvl, LC.SAME_CORE)
        for lvl in (Level.L1, Level.L2, Level.L3)
    ]
    queries.append(ModelQuery(Op.READ, CoherencyState.E, Level.MEMORY,
                              LC.SAME_CORE))
    queries.append(ModelQuery(Op.READ, CoherencyState.E, Level.L1,
                              LC.OTHER_SOCKET))
    for op in ATOMIC_OPS:
        queries.append(ModelQuery(op, CoherencyState.E, Level.L1,
                                  LC.SAME_CORE))
        queries.append(ModelQuery(op, CoherencyState.M, Level.L2,
                                  LC.SAME_DIE))
    obs = []
    for q in queries:
        true = latency(q, params, desc)
        for _ in range(per_group):
            v = true * (1.0 + rng.gauss(0.0, noise)) if noise else true
            obs.append(Observation(op=q.op, state=q.state, level=q.level,
                                   locality=q.locality, latency_ns=v,
                                   sharers=q.sharers))
    return obs


def test_criterion_3_fitting_round_trip():
    with criterion(3, "fitting round trip (exact, and 2% noise within 5%)"):
        truth = builtin_params("ivybridge")
        # zero noise: exact recovery (to floating-point resolution)
        got = fit_base_params(_synthesize(truth, IVY), IVY)
        assert got.r_l1 == truth.r_l1
        assert got.r_l2 == truth.r_l2
        assert got.r_l3 == truth.r_l3
        assert got.hop == pytest.approx(truth.hop, rel=1e-12)
        assert got.mem == pytest.approx(truth.mem, rel=1e-12)
        for op in ATOMIC_OPS:
            assert got.execute[op.value] == pytest.approx(
                truth.execute[op.value], rel=1e-12
            )
        # 2% multiplicative noise, fixed seed: every parameter within 5%
        rng = random.Random(42)
        noisy = _synthesize(truth, IVY, noise=0.02, rng=rng, per_group=31)
        report = fit(noisy, IVY)
        fitted = report.params
        pairs = [
            (truth.r_l1, fitted.r_l1), (truth.r_l2, fitted.r_l2),
            (truth.r_l3, fitted.r_l3), (truth.hop, fitted.hop),
            (truth.mem, fitted.mem),
        ] + [(truth.execute[o.value], fitted.execute[o.value])
             for o in ATOMIC_OPS]
        for want, have in pairs:
            assert abs(have - want) / want < 0.05
        assert all(v <= 0.10 for v in report.nrmse_by_group.values())


def _hw_lat(runner, desc, op, *, kernel="lat-chase", owner=None,
            state=PlacementState.M, unaligned=False, reps=9):
    core = desc.cores[0]
    owner = core if owner is None else owner
    spec = BenchmarkSpec(
        kernel=kernel, operation=op,
        placement=Placement(state, PlacementLevel.L1, owner=owner),
        buffer_size=8192, threads=(core,), repetitions=reps,
        unaligned=unaligned,
    )
    return summarize(runner.run(spec)).median


def _hw_bw(runner, desc, op, reps=7):
    core = desc.cores[0]
    spec = BenchmarkSpec(
        kernel="bw-sweep", operation=op,
        placement=Placement(PlacementState.M, PlacementLevel.L1, owner=core),
        buffer_size=256 * 1024, threads=(core,), repetitions=reps,
    )
    return summarize(runner.run(spec)).median


def test_criterion_4_directional_hardware_claims(host_desc, runner):
    """Portable directional claims; honest only with real per-core
    placement, so they need >= 4 cores on x86-64."""
    if not _hw_eligible(host_desc):
        print(
            "ACCEPTANCE 4: SKIP  directional hardware claims need an "
            f"x86-64 host with >= 4 cores (this host: {_kernels.arch()}, "
            f"{len(host_desc.cores)} cores)", flush=True,
        )
        pytest.skip("needs x86-64 with >= 4 cores")
    desc = host_desc
    with criterion(4, "directional hardware claims (a)-(e)"):
        # (a) CAS/FAA/SWP on local M lines mutually within 30%
        lats = {
            op: _hw_lat(runner, desc, op) for op in
            (BenchOp.CAS_FAIL, BenchOp.FAA, BenchOp.SWP)
        }
        lo, hi = min(lats.values()), max(lats.values())
        assert hi <= 1.30 * lo, f"(a) atomics spread too wide: {lats}"
        # (b) each atomic at least as slow as a plain read, same placement
        read = _hw_lat(runner, desc, BenchOp.READ)
        for op, lat_ns in lats.items():
            assert lat_ns >= 0.95 * read, f"(b) {op} faster than read"
        # (c) sequential atomic bandwidth <= 1/3 of plain writes
        wr = _hw_bw(runner, desc, BenchOp.WRITE)
        fa = _hw_bw(runner, desc, BenchOp.FAA)
        assert fa <= wr / 3.0, f"(c) FAA {fa} vs write {wr}"
        # (d) another core's line costs at least twice the local L1 hit
        other = next(c for c in desc.cores if c != desc.cores[0])
        local = _hw_lat(runner, desc, BenchOp.READ, state=PlacementState.E)
        remote = _hw_lat(runner, desc, BenchOp.READ, owner=other,
                         state=PlacementState.E)
        assert remote >= 2.0 * local, f"(d) {remote} vs {local}"
        # (e) line-spanning CAS at least twice the aligned latency
        aligned = _hw_lat(runner, desc, BenchOp.CAS_FAIL)
        una = _hw_lat(runner, desc, BenchOp.CAS_FAIL, kernel="unaligned",
                      unaligned=True, reps=5)
        assert una >= 2.0 * aligned, f"(e) {una} vs {aligned}"


def test_criterion_5_kernel_correctness(host_desc, runner):
    with criterion(5, "exact kernel effect and success/failure counts"):
        core = host_desc.cores[0]
        # CAS-fail: failures == ops, exactly, through the full harness
        spec = BenchmarkSpec(
            kernel="lat-chase", operation=BenchOp.CAS_FAIL,
            placement=Placement(PlacementState.M, PlacementLevel.L1, core),
            buffer_size=16384, threads=(core,), repetitions=5,
        )
        for m in runner.run(spec):
            s = m.samples[0]
            assert s.failures == s.ops and s.successes == 0
        # CAS-succeed: successes == ops, exactly
        spec = BenchmarkSpec(
            kernel="lat-cas-succeed", operation=BenchOp.CAS_SUCCEED,
            placement=Placement(PlacementState.M, PlacementLevel.L1, core),
            buffer_size=64 * 1024, threads=(core,), repetitions=5,
        )
        for m in runner.run(spec):
            s = m.samples[0]
            assert s.successes == s.ops and s.failures == 0
        # FAA sweeps mutate memory by exactly addend x passes
        buf = mmap.mmap(-1, 4096 * 8)
        fill_zeros(buf)
        for passes in (1, 2, 3):
            bandwidth_kernel(BenchOp.FAA, buf, 8, addend=5)
            words = np.frombuffer(buf, dtype=np.uint64)
            assert (words == 5 * passes).all()
        # contended FAA: final counter equals the sum of per-thread ops
        for t in (1, 2, 4, 8):
            cores = [host_desc.cores[i % len(host_desc.cores)]
                     for i in range(t)]
            with WorkerPool(cores) as pool:
                shared = mmap.mmap(-1, 64)
                fill_zeros(shared)
                deadline = timing.now() + 20_000_000
                stop = deadline + 12_000_000
                seen = {}
                futs = []
                for c in cores:
                    slot = seen.get(c, 0)
                    seen[c] = slot + 1
                    pool.ensure(c, slot + 1)
                    futs.append(pool.submit(
                        c, _kernels.contend, _kernels.OP_FAA, shared, 0,
                        deadline, stop, slot=slot,
                    ))
                results = [f.result() for f in futs]
                total_ops = sum(r[3] for r in results)
                assert total_ops > 0
                assert _kernels.load64(shared, 0) == total_ops, \
                    f"lost updates at T={t}"


def test_criterion_6_contention_direction(host_desc, runner):
    with criterion(6, "per-thread throughput drops under contention (T=8 "
                      "vs T=1)"):
        core = host_desc.cores[0]

        def per_thread(t):
            threads = tuple(host_desc.cores[i % len(host_desc.cores)]
                            for i in range(t))
            spec = BenchmarkSpec(
                kernel="contend", operation=BenchOp.FAA,
                placement=Placement(PlacementState.M, PlacementLevel.L1,
                                    core),
                buffer_size=host_desc.line_size, threads=threads,
                repetitions=3, duration_ns=15_000_000,
            )
            rates = []
            for m in runner.run(spec):
                ops = sum(s.ops for s in m.samples)
                rates.append(ops / t / (m.total_ns * 1e-9))
            return sorted(rates)[len(rates) // 2]

        solo = per_thread(1)
        crowded = per_thread(8)
        assert crowded < solo, f"T=8 {crowded:.3g} !< T=1 {solo:.3g} ops/s"


def _die_local_trace(n_events=100, lines=5):
    evs = []
    i = 0
    while len(evs) < n_events:
        line = i % lines
        evs.append(TraceEvent(0, "write", line))
        evs.append(TraceEvent(1, "read", line))
        evs.append(TraceEvent(0, "atomic", line))
        i += 1
    return evs[:n_events]


def test_criterion_7_coherence_simulator():
    with criterion(7, "simulator safety, die-local sharing, filter oracle"):
        # safety invariants over seed-fixed random traces
        rng = random.Random(777)
        ops = ("read", "read", "write", "atomic")
        trace = [
            TraceEvent(rng.randrange(4), rng.choice(ops), rng.randrange(8))
            for _ in range(100_000)
        ]
        for protocol in Protocol:
            cfg = SimConfig(protocol=protocol, dies=2, cores_per_die=2)
            stats = replay(trace, cfg)  # ProtocolViolation = failure
            assert stats.events == 100_000
        # the fixed die-local sharing trace
        fixed = _die_local_trace(100)
        moesi = replay(fixed, SimConfig(Protocol.MOESI, 2, 2))
        olsl = replay(fixed, SimConfig(Protocol.MOESI_OLSL, 2, 2))
        assert olsl.remote_die_invalidations == 0
        assert moesi.remote_die_invalidations > 0
        # bounded filter with sufficient capacity == unbounded oracle
        bounded = replay(fixed, SimConfig(Protocol.MOESI_HTA, 2, 2,
                                          directory_capacity=64))
        oracle = replay(fixed, SimConfig(Protocol.MOESI_HTA, 2, 2,
                                         directory_capacity=None))
        assert bounded.to_dict() == oracle.to_dict()
        assert oracle.remote_die_invalidations == 0


def test_criterion_8_bfs_validity_and_teps():
    with criterion(8, "BFS trees valid for CAS and SWP over 20 seeds, "
                      "TEPS reported"):
        teps = {"cas": [], "swp": []}
        valid = 0
        for seed in range(20):
            graph = kronecker(16, 16, seed)
            for claim in ("cas", "swp"):
                tree, stats = bfs(graph, root=0, claim=claim, workers=4)
                verdict = validate(graph, 0, tree)
                assert verdict.valid, (seed, claim, verdict.violations)
                valid += 1
                teps[claim].append(stats.teps)
        assert valid == 40  # 20/20 per variant
        med_cas = sorted(teps["cas"])[10]
        med_swp = sorted(teps["swp"])[10]
        # the swap-vs-CAS ordering is hardware dependent: report, don't assert
        print(f"  BFS median TEPS: cas={med_cas:.4g} swp={med_swp:.4g} "
              f"(ordering reported, not asserted)", flush=True)
