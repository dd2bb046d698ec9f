import mmap

import pytest

from atomicbench.errors import PlacementUnsupported, ValidationError
from atomicbench.kernels import fill_incrementing
from atomicbench.placement import (
    PAGE_SIZE,
    Placement,
    PlacementLevel,
    PlacementState,
    Preparer,
    alloc_buffer,
    warm_tlb,
)
from atomicbench.topology import builtin_machine

HASWELL = builtin_machine("haswell")
BULL = builtin_machine("bulldozer")


class TestPlacementValidation:
    def test_owned_state_needs_moesi(self):
        p = Placement(PlacementState.O, PlacementLevel.L1, owner=0,
                      sharers=frozenset({1}))
        with pytest.raises(PlacementUnsupported):
            p.validate(HASWELL)
        p.validate(BULL)

    def test_sharers_iff_shared_state(self):
        with pytest.raises(ValidationError):
            Placement(PlacementState.S, PlacementLevel.L1, 0).validate(HASWELL)
        with pytest.raises(ValidationError):
            Placement(PlacementState.E, PlacementLevel.L1, 0,
                      sharers=frozenset({1})).validate(HASWELL)

    def test_memory_level_implies_invalid_state(self):
        with pytest.raises(ValidationError):
            Placement(PlacementState.M, PlacementLevel.MEMORY, 0).validate(HASWELL)
        Placement(PlacementState.I, PlacementLevel.MEMORY, 0).validate(HASWELL)

    def test_unknown_cores(self):
        with pytest.raises(ValidationError):
            Placement(PlacementState.E, PlacementLevel.L1, 99).validate(HASWELL)

    def test_locality_against_measuring_core(self, host_desc):
        core = host_desc.cores[0]
        p = Placement(PlacementState.M, PlacementLevel.L1, owner=core)
        assert p.locality(core, host_desc).value == "same-core"


class TestAllocation:
    def test_line_aligned_and_sized(self):
        buf, huge = alloc_buffer(4096, 64)
        assert len(memoryview(buf)) == 4096
        assert isinstance(huge, bool)

    def test_rejects_unrounded_size(self):
        with pytest.raises(ValidationError):
            alloc_buffer(100, 64)
        with pytest.raises(ValidationError):
            alloc_buffer(0, 64)

    def test_hugepage_fallback_is_graceful(self):
        buf, huge = alloc_buffer(2 * 1024 * 1024, 64, hugepages=True)
        assert len(memoryview(buf)) == 2 * 1024 * 1024
        # most CI hosts have no hugepages configured; either result is fine
        assert huge in (True, False)


class TestWarmTlb:
    def test_touch_count_is_size_over_page(self):
        buf = mmap.mmap(-1, 16 * 1024 * 1024)
        assert warm_tlb(buf, 4096) == 4096

    def test_zero_size_is_noop(self):
        buf = mmap.mmap(-1, 4096)
        assert warm_tlb(memoryview(buf)[:0]) == 0

    def test_single_page_buffer(self):
        buf = mmap.mmap(-1, 2 * 1024 * 1024)
        assert warm_tlb(buf, 2 * 1024 * 1024) == 1


class TestRecipes:
    def test_modified_recipe_preserves_contents(self, runner, host_desc):
        core = host_desc.cores[0]
        buf, _ = alloc_buffer(64 * 1024, host_desc.line_size)
        fill_incrementing(buf)
        expected = bytes(buf)
        prep = Preparer(runner.pool, host_desc)
        prepared = prep.prepare(
            buf,
            Placement(PlacementState.M, PlacementLevel.L1, owner=core),
            measuring_core=core,
            fill=lambda: fill_incrementing(buf),
            fill_name="incrementing",
        )
        assert bytes(buf) == expected
        actions = [t["action"] for t in prepared.recipe_trace]
        assert actions[0] == "warm-tlb"
        assert "rewrite-lines" in actions

    def test_exclusive_recipe_trace(self, runner, host_desc):
        core = host_desc.cores[0]
        buf, _ = alloc_buffer(16 * 1024, host_desc.line_size)
        prep = Preparer(runner.pool, host_desc)
        prepared = prep.prepare(
            buf, Placement(PlacementState.E, PlacementLevel.L1, owner=core),
            measuring_core=core, fill=lambda: None, fill_name="zeros",
        )
        actions = [t["action"] for t in prepared.recipe_trace]
        assert "flush-lines" in actions or "eviction-sweep-fallback" in actions
        assert "read-lines" in actions
        assert all({"core", "action", "range"} <= set(t)
                   for t in prepared.recipe_trace)

    def test_shared_recipe_runs_sharer_reads(self, runner, host_desc):
        if len(host_desc.cores) < 2:
            pytest.skip("needs two cores")
        owner, sharer = host_desc.cores[0], host_desc.cores[1]
        buf, _ = alloc_buffer(16 * 1024, host_desc.line_size)
        prep = Preparer(runner.pool, host_desc)
        prepared = prep.prepare(
            buf, Placement(PlacementState.S, PlacementLevel.L1, owner=owner,
                           sharers=frozenset({sharer})),
            measuring_core=owner, fill=lambda: None, fill_name="zeros",
        )
        sharer_steps = [t for t in prepared.recipe_trace
                        if t["core"] == sharer and t["action"] == "read-lines"]
        assert sharer_steps

    def test_invalid_state_reads_like_far_memory(self, runner, host_desc):
        # flushed lines must exhibit a latency at least in the last-level
        # class, nowhere near an L1 hit (signature check, 30% band floor)
        from atomicbench.harness import BenchmarkSpec, summarize
        from atomicbench.kernels import BenchOp

        core = host_desc.cores[0]

        def median_for(state, level, size):
            spec = BenchmarkSpec(
                kernel="lat-chase", operation=BenchOp.READ,
                placement=Placement(state, level, owner=core),
                buffer_size=size, threads=(core,), repetitions=7,
            )
            return summarize(runner.run(spec)).median

        l1 = median_for(PlacementState.M, PlacementLevel.L1, 8192)
        flushed = median_for(PlacementState.I, PlacementLevel.MEMORY,
                             1024 * 1024)
        assert flushed >= 0.7 * 3 * l1, (l1, flushed)

    def test_level_placement_appends_evict_sweep(self, runner, host_desc):
        if host_desc.level(2) is None:
            pytest.skip("needs an L2")
        core = host_desc.cores[0]
        buf, _ = alloc_buffer(16 * 1024, host_desc.line_size)
        prep = Preparer(runner.pool, host_desc)
        prepared = prep.prepare(
            buf, Placement(PlacementState.E, PlacementLevel.L2, owner=core),
            measuring_core=core, fill=lambda: None, fill_name="zeros",
        )
        assert any(t["action"].startswith("evict-sweep")
                   for t in prepared.recipe_trace)
