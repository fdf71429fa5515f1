"""Machinery shared by the two list algorithms and the hash set built on them.

Set operations are written as generators.  Every bare ``yield`` marks a
scheduling point placed immediately before one shared-memory step (a load of a
mutable field, a store, a compare-and-swap or a psync).  Native callers drive
the generator straight through; the deterministic scheduler in
:mod:`durasets.checker` interleaves several of them step by step and may crash
the heap between any two steps.
"""

from __future__ import annotations

import threading
from typing import Callable, Generator, Iterator

from .alloc import Allocator, ThreadContext
from .pmem import CrashPlan, PersistentHeap, PersistentSnapshot, PsyncStats

KEY_MIN = -(1 << 63)
KEY_MAX = (1 << 63) - 1

OPERATIONS = ("insert", "remove", "contains")

Steps = Generator[None, None, bool]


def drive(gen: Generator):
    """Run a step generator to completion and return its result."""
    try:
        while True:
            next(gen)
    except StopIteration as stop:
        return stop.value


def check_key(key: int) -> None:
    if not KEY_MIN < key < KEY_MAX:
        raise ValueError(f"key {key} is outside the user key range ({KEY_MIN}, {KEY_MAX})")


class DurableSet:
    """A set of int64 keys (with int64 payloads) spread over ``bucket_count`` lists.

    Subclasses supply the per-list algorithm (``_insert``, ``_remove``,
    ``_contains``), sentinel setup and recovery.  With ``bucket_count == 1``
    the structure is a plain sorted list.
    """

    variant = "abstract"

    def __init__(self, heap: PersistentHeap | None = None, allocator: Allocator | None = None,
                 bucket_count: int = 1, route: Callable[[int], int] | None = None,
                 audit: bool = False, **alloc_kwargs):
        if heap is None:
            heap = PersistentHeap()
        if allocator is None:
            allocator = Allocator(heap, **alloc_kwargs)
        if bucket_count < 1:
            raise ValueError("bucket_count must be positive")
        self.heap = heap
        self.allocator = allocator
        self.bucket_count = bucket_count
        self.route = route or (lambda key: 0)
        self.audit = audit
        self.violations: list[str] = []
        self.recovery_stats: PsyncStats | None = None
        self._local = threading.local()
        # heads of every bucket followed by one shared tail, all volatile
        self._sentinels = heap.allocate_region(heap.line_size, bucket_count + 1, durable=False)
        self._head0 = self._sentinels.base
        self._stride = heap.line_size
        self.tail = self._sentinels.slot_addr(bucket_count)
        self._init_sentinels()

    def _init_sentinels(self) -> None:
        raise NotImplementedError

    def head(self, bucket: int = 0) -> int:
        return self._head0 + bucket * self._stride

    def head_for(self, key: int) -> int:
        return self._head0 + self.route(key) * self._stride

    def heads(self) -> Iterator[int]:
        return (self.head(b) for b in range(self.bucket_count))

    # -- threads ---------------------------------------------------------
    def context(self) -> ThreadContext:
        """The calling OS thread's context, registered on first use."""
        ctx = getattr(self._local, "ctx", None)
        if ctx is None:
            ctx = self._local.ctx = self.allocator.register()
        return ctx

    def release_context(self) -> None:
        ctx = getattr(self._local, "ctx", None)
        if ctx is not None:
            self.allocator.release(ctx)
            self._local.ctx = None

    # -- operations ------------------------------------------------------
    def operation(self, ctx: ThreadContext, name: str, key: int, value: int = 0) -> Steps:
        """Step generator for one set operation, bracketed by its epoch."""
        check_key(key)
        head = self.head_for(key)
        if name == "insert":
            body = self._insert(ctx, head, key, value)
        elif name == "remove":
            body = self._remove(ctx, head, key)
        elif name == "contains":
            body = self._contains(ctx, head, key)
        else:
            raise ValueError(f"unknown operation {name!r}")
        ctx.begin(name)
        try:
            return (yield from body)
        finally:
            ctx.end()

    def insert(self, key: int, value: int = 0, ctx: ThreadContext | None = None) -> bool:
        return drive(self.operation(ctx or self.context(), "insert", key, value))

    def remove(self, key: int, ctx: ThreadContext | None = None) -> bool:
        return drive(self.operation(ctx or self.context(), "remove", key))

    def contains(self, key: int, ctx: ThreadContext | None = None) -> bool:
        return drive(self.operation(ctx or self.context(), "contains", key))

    def __contains__(self, key: int) -> bool:
        return self.contains(key)

    def _insert(self, ctx, head, key, value) -> Steps:
        raise NotImplementedError

    def _remove(self, ctx, head, key) -> Steps:
        raise NotImplementedError

    def _contains(self, ctx, head, key) -> Steps:
        raise NotImplementedError

    # -- quiescent inspection --------------------------------------------
    def items(self) -> list[tuple[int, int]]:
        """(key, value) pairs logically in the set; only meaningful when quiescent."""
        raise NotImplementedError

    def keys(self) -> list[int]:
        return [k for k, _ in self.items()]

    def __len__(self) -> int:
        return len(self.items())

    def check_invariants(self) -> list[str]:
        raise NotImplementedError

    # -- crash and recovery ----------------------------------------------
    def crash(self, plan: CrashPlan | None = None) -> PersistentSnapshot:
        return self.heap.crash(plan)

    @classmethod
    def recover(cls, snapshot: PersistentSnapshot, *, bucket_count: int = 1,
                route: Callable[[int], int] | None = None, plan: CrashPlan | None = None,
                track_history: bool = False, audit: bool = False, **alloc_kwargs) -> "DurableSet":
        """Restart from a persistent snapshot and rebuild the volatile structure.

        The recovered set's psync counters are in ``recovery_stats``.
        """
        heap = PersistentHeap.from_snapshot(snapshot, plan=plan, track_history=track_history)
        is_live = lambda addr: cls._is_live(heap, addr)
        allocator, live, free = Allocator.recover(heap, is_live, **alloc_kwargs)
        s = cls._blank(heap, allocator, bucket_count, route, audit)
        ctx = allocator.register()
        ctx.begin("recover")
        try:
            s._rebuild(ctx, live, free)
        finally:
            ctx.end()
            allocator.release(ctx)
        s.recovery_stats = ctx.stats
        return s

    @staticmethod
    def _is_live(heap: PersistentHeap, addr: int) -> bool:
        raise NotImplementedError

    def _rebuild(self, ctx: ThreadContext, live: list[int], free: list[int]) -> None:
        raise NotImplementedError

    @classmethod
    def _blank(cls, heap: PersistentHeap, allocator: Allocator, bucket_count: int,
               route: Callable[[int], int] | None, audit: bool) -> "DurableSet":
        return cls(heap, allocator, bucket_count=bucket_count, route=route, audit=audit)
