"""Durable-area memory manager with epoch-based reclamation.

Each thread owns areas of fixed-size slots and bump-allocates from its newest
area, falling back to a private free-list.  Durable areas are recorded in a
persistent per-thread *area list*: an area node (one line) holds the area's
region id and a link to the previous area node, and the head of every list lives
in a persistent root table indexed by dense thread id.  Recovery walks those
lists, so every slot ever handed out can be found again after a crash.

Layouts (all little-endian, one 64-byte line each):

root table (region 0), one line per thread index
    0   u64  address of the newest area node, 0 if none
area node (region 1)
    0   u64  region id of the area
    8   u64  address of the previous area node, 0 if none
    16  u64  owning thread index
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator

from .pmem import (OFFSET_BITS, AllocationError, Field, IntegrityError,
                   PersistentHeap, PersistentSnapshot, PsyncStats, Region)

ROOT_REGION_ID = 0
AREA_NODE_REGION_ID = 1

ROOT_HEAD = Field("head", 0, "<Q")
AREA_REGION = Field("region", 0, "<Q")
AREA_PREV = Field("prev", 8, "<Q")
AREA_OWNER = Field("owner", 16, "<Q")

DEFAULT_AREA_SLOTS = 1024


class EpochClock:
    """Global epoch plus one announcement per thread (``None`` means idle)."""

    def __init__(self):
        self.epoch = 0
        self.announced: dict[int, int | None] = {}
        self._lock = threading.Lock()

    def enter(self, tid: int) -> None:
        self.announced[tid] = self.epoch

    def exit(self, tid: int) -> None:
        self.announced[tid] = None

    def try_advance(self) -> bool:
        with self._lock:
            e = self.epoch
            for a in list(self.announced.values()):
                if a is not None and a < e:
                    return False
            self.epoch = e + 1
            return True

    def active(self) -> list[int]:
        return [a for a in list(self.announced.values()) if a is not None]


@dataclass(eq=False)
class DurableArea:
    region: Region
    owner: int
    bump: int = 0
    node_addr: int = 0  # area node, 0 for volatile areas

    @property
    def durable(self) -> bool:
        return self.region.durable


@dataclass(eq=False)
class FreeList:
    """Per-thread free slots plus retired slots bucketed by retire epoch."""

    free: list[int] = field(default_factory=list)
    limbo: dict[int, list[int]] = field(default_factory=dict)
    areas: list[DurableArea] = field(default_factory=list)

    def pending(self) -> int:
        return sum(len(v) for v in self.limbo.values())


class ThreadContext:
    """What a thread carries into set operations: identity, counters, trace."""

    __slots__ = ("tid", "stats", "allocator", "trace")

    def __init__(self, tid: int, allocator: "Allocator"):
        self.tid = tid
        self.stats = PsyncStats()
        self.allocator = allocator
        self.trace: dict = {}

    def begin(self, tag: str) -> None:
        self.allocator.clock.enter(self.tid)
        self.stats.tag = tag
        self.trace.clear()

    def end(self) -> None:
        self.allocator.clock.exit(self.tid)
        self.stats.tag = "idle"

    def __repr__(self) -> str:
        return f"<ThreadContext {self.tid}>"


class Allocator:
    """Per-thread slot allocation from durable (and volatile) areas."""

    def __init__(self, heap: PersistentHeap, slot_size: int | None = None,
                 area_slots: int = DEFAULT_AREA_SLOTS, max_threads: int = 64,
                 max_areas: int | None = None, area_node_capacity: int = 4096,
                 reclaim_threshold: int | None = None, debug: bool = False,
                 _adopt: bool = False):
        self.heap = heap
        self.line = heap.line_size
        self.slot_size = slot_size or heap.line_size
        self.area_slots = area_slots
        self.max_threads = max_threads
        self.max_areas = max_areas
        self.reclaim_threshold = reclaim_threshold or 2 * area_slots
        self.debug = debug
        self.clock = EpochClock()
        self.violations: list[str] = []
        self._retired_at: dict[int, int] = {}
        self._lists: dict[tuple[int, bool], FreeList] = {}
        self._contexts: dict[int, ThreadContext] = {}
        self._lock = threading.Lock()
        self._maint = PsyncStats(tag="alloc")
        if _adopt:
            self.root = heap.region(ROOT_REGION_ID)
            self.area_nodes = heap.region(AREA_NODE_REGION_ID)
        else:
            if heap.next_region_id != 0:
                raise ValueError("allocator must own regions 0 and 1 of a fresh heap")
            self.root = heap.allocate_region(self.line, max_threads)
            self.area_nodes = heap.allocate_region(self.line, area_node_capacity)
        self._an_bump = 0
        self._an_free: list[int] = []
        self.durable_area_count = 0

    # -- threads ---------------------------------------------------------
    def register(self, tid: int | None = None) -> ThreadContext:
        with self._lock:
            if tid is None:
                tid = next((i for i in range(self.max_threads) if i not in self._contexts), None)
                if tid is None:
                    raise AllocationError("thread table full")
            elif tid in self._contexts:
                raise ValueError(f"thread index {tid} already registered")
            if not 0 <= tid < self.max_threads:
                raise ValueError(f"thread index {tid} out of range")
            ctx = ThreadContext(tid, self)
            self._contexts[tid] = ctx
            self.clock.exit(tid)
            return ctx

    def release(self, ctx: ThreadContext) -> None:
        with self._lock:
            self.clock.exit(ctx.tid)
            self._contexts.pop(ctx.tid, None)

    def contexts(self) -> list[ThreadContext]:
        return list(self._contexts.values())

    def stats(self) -> PsyncStats:
        return PsyncStats.merge([c.stats for c in self.contexts()] + [self._maint])

    def free_list(self, tid: int, durable: bool = True) -> FreeList:
        key = (tid, durable)
        fl = self._lists.get(key)
        if fl is None:
            fl = self._lists[key] = FreeList()
        return fl

    # -- allocation ------------------------------------------------------
    def alloc(self, ctx: ThreadContext, durable: bool = True) -> int:
        """allocFromArea: free-list first, then bump, then reclaim, then a new area."""
        fl = self.free_list(ctx.tid, durable)
        if not fl.free:
            area = fl.areas[-1] if fl.areas else None
            if area is not None and area.bump < area.region.slot_count:
                addr = area.region.slot_addr(area.bump)
                area.bump += 1
                return addr
            self.try_reclaim(ctx, durable)
            if not fl.free:
                area = self._new_area(ctx, durable)
                area.bump = 1
                return area.region.slot_addr(0)
        addr = fl.free.pop()
        if self.debug:
            self._check_handout(addr)
        return addr

    def free(self, ctx: ThreadContext, addr: int) -> None:
        """Return a slot that was never published; reusable immediately."""
        self.free_list(ctx.tid, self.heap.region_of(addr).durable).free.append(addr)

    def retire(self, ctx: ThreadContext, addr: int) -> None:
        """Hand back an unlinked slot; reusable once no reader can still hold it."""
        durable = self.heap.region_of(addr).durable
        fl = self.free_list(ctx.tid, durable)
        e = self.clock.epoch
        fl.limbo.setdefault(e, []).append(addr)
        if self.debug:
            self._retired_at[addr] = e
        if fl.pending() > self.reclaim_threshold:
            self.try_reclaim(ctx, durable)

    def try_reclaim(self, ctx: ThreadContext, durable: bool | None = None) -> int:
        """Advance the epoch if possible and recycle buckets two epochs old."""
        self.clock.try_advance()
        g = self.clock.epoch
        moved = 0
        for d in ((True, False) if durable is None else (durable,)):
            fl = self.free_list(ctx.tid, d)
            for e in [e for e in fl.limbo if e <= g - 2]:
                batch = fl.limbo.pop(e)
                fl.free.extend(batch)
                moved += len(batch)
        return moved

    def _check_handout(self, addr: int) -> None:
        r = self._retired_at.pop(addr, None)
        if r is None:
            return
        for a in self.clock.active():
            if a <= r:
                self.violations.append(f"slot {addr:#x} retired in epoch {r} reused while a thread is in epoch {a}")

    def _new_area(self, ctx: ThreadContext, durable: bool) -> DurableArea:
        fl = self.free_list(ctx.tid, durable)
        if not durable:
            region = self.heap.allocate_region(self.slot_size, self.area_slots, durable=False)
            area = DurableArea(region, ctx.tid)
            fl.areas.append(area)
            return area
        with self._lock:
            if self.max_areas is not None and self.durable_area_count >= self.max_areas:
                raise AllocationError("durable area budget exhausted")
            self.durable_area_count += 1
            if self._an_free:
                node = self._an_free.pop()
            elif self._an_bump < self.area_nodes.slot_count:
                node = self.area_nodes.slot_addr(self._an_bump)
                self._an_bump += 1
            else:
                raise AllocationError("area node table exhausted")
        region = self.heap.allocate_region(self.slot_size, self.area_slots)
        h = self.heap
        root_line = self.root.slot_addr(ctx.tid)
        saved = ctx.stats.tag
        ctx.stats.tag = "alloc"
        try:
            # write the area node and make it durable, then publish it
            h.store(node, AREA_REGION, region.id)
            h.store(node, AREA_PREV, h.load(root_line, ROOT_HEAD))
            h.store(node, AREA_OWNER, ctx.tid)
            h.psync(node, ctx.stats)
            h.store(root_line, ROOT_HEAD, node)
            h.psync(root_line, ctx.stats)
        finally:
            ctx.stats.tag = saved
        area = DurableArea(region, ctx.tid, 0, node)
        fl.areas.append(area)
        return area

    # -- census ----------------------------------------------------------
    def areas(self, durable: bool = True) -> list[DurableArea]:
        return [a for (tid, d), fl in sorted(self._lists.items(), key=lambda kv: kv[0]) if d == durable
                for a in fl.areas]

    def census(self, durable: bool = True) -> dict[int, str]:
        """Status of every slot in every area: free, limbo, unallocated or allocated."""
        status: dict[int, str] = {}
        for area in self.areas(durable):
            r = area.region
            for i, addr in enumerate(r.addresses()):
                status[addr] = "allocated" if i < area.bump else "unallocated"
        for (tid, d), fl in self._lists.items():
            if d != durable:
                continue
            for addr in fl.free:
                if status.get(addr) != "allocated":
                    self.violations.append(f"free slot {addr:#x} is {status.get(addr)}")
                status[addr] = "free"
            for batch in fl.limbo.values():
                for addr in batch:
                    if status.get(addr) != "allocated":
                        self.violations.append(f"retired slot {addr:#x} is {status.get(addr)}")
                    status[addr] = "limbo"
        return status

    # -- recovery --------------------------------------------------------
    @classmethod
    def recover(cls, heap: PersistentHeap, is_live: Callable[[int], bool],
                **kwargs) -> tuple["Allocator", list[int], list[int]]:
        """Rebuild volatile allocator state from a restarted heap.

        Returns ``(allocator, live_slots, free_slots)``.  Free slots are already
        on their owner's free-list; the caller may rewrite them (volatile stores
        only) before handing the allocator out.  Areas with no live slot are
        returned to the backing store.  No psync is issued.
        """
        if not (heap.has_region(ROOT_REGION_ID) and heap.has_region(AREA_NODE_REGION_ID)):
            raise IntegrityError("snapshot has no allocator root table")
        root = heap.region(ROOT_REGION_ID)
        kwargs.setdefault("max_threads", root.slot_count)
        kwargs.setdefault("area_node_capacity", heap.region(AREA_NODE_REGION_ID).slot_count)
        alloc = cls(heap, _adopt=True, **kwargs)
        live: list[int] = []
        free: list[int] = []
        used_nodes: set[int] = set()
        released = []
        for tid, node, region_id in scan_area_lists(heap):
            used_nodes.add(node)
            if not heap.has_region(region_id):
                continue  # area already returned to the backing store
            region = heap.region(region_id)
            if region.slot_size != alloc.slot_size:
                raise IntegrityError(f"area {region_id} has slot size {region.slot_size}")
            slots_live = [a for a in region.addresses() if is_live(a)]
            alloc.durable_area_count += 1
            if not slots_live:
                released.append(region_id)
                continue
            live.extend(slots_live)
            fl = alloc.free_list(tid, True)
            area = DurableArea(region, tid, region.slot_count, node)
            fl.areas.insert(0, area)  # scan runs newest first
            lset = set(slots_live)
            mine = [a for a in region.addresses() if a not in lset]
            fl.free.extend(reversed(mine))
            free.extend(mine)
        for region_id in released:
            heap.release_region(region_id)
        # regions nobody's area list reaches were never published
        known = {ROOT_REGION_ID, AREA_NODE_REGION_ID}
        for _, _, region_id in scan_area_lists(heap):
            known.add(region_id)
        for r in heap.regions():
            if r.id not in known:
                heap.release_region(r.id)
        if used_nodes:
            top = max(alloc.area_nodes.slot_of(n) for n in used_nodes) + 1
        else:
            top = 0
        alloc._an_bump = top
        alloc._an_free = [alloc.area_nodes.slot_addr(i) for i in range(top - 1, -1, -1)
                          if alloc.area_nodes.slot_addr(i) not in used_nodes]
        return alloc, live, free


def scan_area_lists(source: PersistentHeap | PersistentSnapshot) -> Iterator[tuple[int, int, int]]:
    """Yield ``(thread, area_node_addr, region_id)`` for every persistent area list entry."""
    if isinstance(source, PersistentHeap):
        root_region = source.region(ROOT_REGION_ID)
        root, line = bytes(root_region.persistent), root_region.slot_size
        nodes_region = source.region(AREA_NODE_REGION_ID)
        nodes = bytes(nodes_region.persistent)
        node_count = nodes_region.slot_count
        slot = nodes_region.slot_size
        next_id = source.next_region_id
    else:
        root_img = source.region(ROOT_REGION_ID)
        root, line = root_img.data, root_img.slot_size
        img = source.region(AREA_NODE_REGION_ID)
        nodes, node_count, slot = img.data, img.slot_count, img.slot_size
        next_id = source.next_region_id
    node_base = AREA_NODE_REGION_ID << OFFSET_BITS
    for tid in range(len(root) // line):
        addr = ROOT_HEAD.unpack(root, tid * line)
        seen: set[int] = set()
        while addr:
            off = addr - node_base
            if addr >> OFFSET_BITS != AREA_NODE_REGION_ID or off % slot or not 0 <= off // slot < node_count:
                raise IntegrityError(f"dangling area node {addr:#x} in thread {tid}'s area list")
            if addr in seen:
                raise IntegrityError(f"cycle in thread {tid}'s area list")
            seen.add(addr)
            region_id = AREA_REGION.unpack(nodes, off)
            if region_id in (ROOT_REGION_ID, AREA_NODE_REGION_ID) or region_id >= next_id:
                raise IntegrityError(f"area node {addr:#x} names impossible region {region_id}")
            yield tid, addr, region_id
            addr = AREA_PREV.unpack(nodes, off)


def scan_areas(source: PersistentHeap | PersistentSnapshot) -> Iterator[tuple[int, int, bytes]]:
    """Yield ``(thread, slot_addr, persistent_bytes)`` for every slot of every listed area."""
    for tid, _, region_id in scan_area_lists(source):
        if isinstance(source, PersistentHeap):
            if not source.has_region(region_id):
                continue
            r = source.region(region_id)
            data, slot_size, count = bytes(r.persistent), r.slot_size, r.slot_count
        else:
            if not source.has_region(region_id):
                continue
            img = source.region(region_id)
            data, slot_size, count = img.data, img.slot_size, img.slot_count
        base = region_id << OFFSET_BITS
        for i in range(count):
            yield tid, base + i * slot_size, data[i * slot_size:(i + 1) * slot_size]
