"""Persistent pool of pinned worker threads.

Coherency recipes and measurement phases both need "run this on core N";
keeping long-lived pinned threads avoids respawn latency and guarantees no
thread migrates mid-run.  A core can host several workers (slots) so that
oversubscribed contention runs, e.g. eight hammering threads on two cores,
still execute through pinned threads.
"""

from __future__ import annotations

import os
import queue
import threading
from concurrent.futures import Future

from .errors import PinFailure

_STOP = object()


class _Worker:
    def __init__(self, core: int, slot: int):
        self.core = core
        self.queue: queue.Queue = queue.Queue()
        self.pin_error: str | None = None
        ready = threading.Event()
        self.thread = threading.Thread(
            target=self._loop, args=(ready,),
            name=f"pinned-{core}.{slot}", daemon=True,
        )
        self.thread.start()
        ready.wait()

    def _loop(self, ready: threading.Event) -> None:
        try:
            os.sched_setaffinity(0, {self.core})
        except (OSError, ValueError) as exc:
            self.pin_error = str(exc)
        ready.set()
        while True:
            item = self.queue.get()
            if item is _STOP:
                return
            fut, fn, args, kwargs = item
            if not fut.set_running_or_notify_cancel():
                continue
            try:
                fut.set_result(fn(*args, **kwargs))
            except BaseException as exc:  # propagate to the caller
                fut.set_exception(exc)


class WorkerPool:
    def __init__(self, cores):
        self._workers: dict[int, list[_Worker]] = {}
        for core in cores:
            self.ensure(core, self._count(core) + 1)

    def _count(self, core: int) -> int:
        return len(self._workers.get(core, []))

    def ensure(self, core: int, slots: int) -> None:
        """Make sure `core` has at least `slots` pinned workers."""
        lst = self._workers.setdefault(core, [])
        while len(lst) < slots:
            lst.append(_Worker(core, len(lst)))

    def check_pinned(self, core: int) -> None:
        workers = self._workers.get(core)
        if not workers:
            raise PinFailure(f"core {core} has no worker")
        for w in workers:
            if w.pin_error is not None:
                raise PinFailure(f"cannot pin to core {core}: {w.pin_error}")

    def submit(self, core: int, fn, *args, slot: int = 0, **kwargs) -> Future:
        self.check_pinned(core)
        workers = self._workers[core]
        if slot >= len(workers):
            raise PinFailure(f"core {core} has no worker slot {slot}")
        fut: Future = Future()
        workers[slot].queue.put((fut, fn, args, kwargs))
        return fut

    def run(self, core: int, fn, *args, **kwargs):
        return self.submit(core, fn, *args, **kwargs).result()

    def close(self) -> None:
        for lst in self._workers.values():
            for w in lst:
                w.queue.put(_STOP)
        for lst in self._workers.values():
            for w in lst:
                w.thread.join(timeout=5)
        self._workers.clear()

    def __enter__(self) -> "WorkerPool":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
